import json

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from minidetr.analytics import (QueryGradientRecorder, box_scatter, class_contribution, mask_query_eval,
                                masking_table_csv, query_frequency, query_table_csv, stats_json)
from minidetr.metrics import Detection, GroundTruth


def det(img, q, cls, score, box=(0.5, 0.5, 0.2, 0.2)):
    return Detection(img, cls, score, box, q)


def random_detections(seed, n_img=6, Q=5):
    rng = np.random.default_rng(seed)
    out = []
    for i in range(n_img):
        for q in range(Q):
            box = (*rng.uniform(0.2, 0.8, 2), *rng.uniform(0.05, 0.3, 2))
            out.append(det(i, q, int(rng.integers(3)), float(rng.random()), tuple(float(v) for v in box)))
    return out


def test_frequency_hand_case():
    dets = [det(0, 0, 0, 0.9), det(0, 1, 1, 0.95), det(1, 0, 2, 0.85), det(1, 2, 0, 0.5), det(2, 0, 0, 0.8)]
    s = query_frequency(dets, 0.8, num_queries=3)
    assert list(s.freq) == [2, 1, 0] and s.total == 3  # 0.8 is not above the threshold
    assert s.main_query_id == 0 and s.main_share == pytest.approx(2 / 3)


def test_main_query_tie_takes_smallest_id():
    s = query_frequency([det(0, 2, 0, 0.9), det(0, 1, 0, 0.9)], 0.8, num_queries=3)
    assert s.main_query_id == 1


def test_no_confident_detections():
    s = query_frequency([det(0, 0, 0, 0.1)], 0.8)
    assert s.total == 0 and s.main_query_id is None


def test_missing_query_id_rejected():
    with pytest.raises(ValueError):
        query_frequency([Detection(0, 0, 0.9, (0.5, 0.5, 0.1, 0.1))])


@settings(max_examples=40, deadline=None)
@given(st.integers(0, 2**31 - 1), st.sampled_from([0.0, 0.3, 0.8]))
def test_statistics_are_mutually_consistent(seed, thr):
    dets = random_detections(seed)
    s = query_frequency(dets, thr, num_queries=5)
    confident = [d for d in dets if d.score > thr]
    assert s.total == len(confident) == int(s.freq.sum())
    if s.total == 0:
        return
    assert s.main_share == s.freq[s.main_query_id] / s.total
    c = class_contribution(dets, s)
    assert sum(c.totals.values()) == s.total
    main_by_class = sum(round(c.share[k] * c.totals[k]) for k in c.totals)
    assert main_by_class == s.freq[s.main_query_id]
    assert len(box_scatter(dets, s.main_query_id, thr)) == s.freq[s.main_query_id]


@pytest.mark.parametrize("seed", range(10))
def test_masking_main_query_removes_exactly_its_frequency(seed):
    dets = random_detections(seed)
    thr = 0.5
    s = query_frequency(dets, thr, num_queries=5)
    confident = [d for d in dets if d.score > thr]
    gts = [GroundTruth(d.image_id, d.class_id, d.box) for d in dets[::3]]
    with_q, without_q = mask_query_eval(confident, gts, s.main_query_id)
    assert with_q.num_detections - without_q.num_detections == s.freq[s.main_query_id]


def test_box_scatter_points():
    pts = box_scatter([det(0, 1, 0, 0.9, (0.2, 0.3, 0.1, 0.5)), det(0, 2, 0, 0.9)], 1)
    assert pts == [(0.2, 0.3, 0.1 * 0.5)]


def test_gradient_recorder_means():
    r = QueryGradientRecorder(2)
    r.step(np.array([[3.0, 4.0], [0.0, 0.0]]))
    r.step(np.array([[0.0, 0.0], [0.0, 2.0]]))
    rec = r.finalize()
    np.testing.assert_array_equal(rec.mean_norm, [2.5, 1.0])
    assert rec.steps == 2
    with pytest.raises(ValueError):
        r.step(np.zeros((3, 2)))
    with pytest.raises(RuntimeError):
        QueryGradientRecorder(1).finalize()


def test_report_exports_have_expected_layout():
    dets = random_detections(1)
    s = query_frequency(dets, 0.5, num_queries=5)
    lines = query_table_csv(s).splitlines()
    assert lines[0] == "query_id,frequency,mean_grad_norm" and len(lines) == 6
    gts = [GroundTruth(d.image_id, d.class_id, d.box) for d in dets[::4]]
    a, b = mask_query_eval(dets, gts, s.main_query_id)
    table = masking_table_csv([("toy", a, b)]).splitlines()
    assert table[0].startswith("model,mAP,mAP_without_main_query") and table[1].startswith("toy,")
    doc = json.loads(stats_json(s, class_contribution(dets, s), box_scatter(dets, s.main_query_id)))
    assert doc["stats"]["main_query_id"] == s.main_query_id
