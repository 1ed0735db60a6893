import numpy as np
import pytest

from minidetr.data import AnnotatedSample, GroundTruth, generate_synthetic_shapes
from minidetr.model import MiniDETR, ModelConfig
from minidetr.perturb import patch_slices
from minidetr.train import TrainConfig, _batch, ab_compare, augment_ops, patch_dropout, random_query_drop, train


def tiny_model(seed=0, Q=4):
    return MiniDETR(ModelConfig(d_model=16, num_heads=2, enc_layers=1, dec_layers=2, num_queries=Q,
                                backbone_channels=(4, 8), ffn_dim=16, image_size=32, seed=seed).validate())


@pytest.fixture(scope="module")
def tiny_data():
    return generate_synthetic_shapes(6, image_size=32, seed=1)


def params_of(m):
    return {k: v.data.copy() for k, v in m.params.items()}


def test_zero_learning_rate_leaves_weights_unchanged(tiny_data):
    m = tiny_model()
    before = params_of(m)
    train(m, tiny_data, TrainConfig(epochs=2, learning_rate=0.0, batch_size=3))
    for k, v in params_of(m).items():
        np.testing.assert_array_equal(v, before[k])


def test_single_sample_overfit_loss_decreases(tiny_data):
    m = tiny_model()
    res = train(m, tiny_data[:1], TrainConfig(epochs=30, learning_rate=1e-3, batch_size=1, augment="none"), test_set=[])
    losses = res.curve.train_loss
    assert len(losses) == 30 and losses[-1] < 0.6 * losses[0]


@pytest.mark.parametrize("optimizer", ["adam", "sgd"])
def test_training_is_bitwise_deterministic(tiny_data, optimizer):
    cfg = TrainConfig(epochs=2, learning_rate=1e-3, batch_size=2, query_drop_p=0.25, optimizer=optimizer,
                      augment="dihedral")
    a, b = tiny_model(), tiny_model()
    ra, rb = train(a, tiny_data, cfg), train(b, tiny_data, cfg)
    assert ra.curve == rb.curve
    pa, pb = params_of(a), params_of(b)
    for k in pa:
        np.testing.assert_array_equal(pa[k], pb[k])


@pytest.mark.parametrize("ops", [(1, 0, 0), (0, 1, 0), (0, 0, 1), (1, 1, 1)])
def test_augmented_boxes_follow_the_pixels(ops):
    # a lone bright rectangle: its box must still be the tight extent after the flip
    img = np.zeros((16, 16, 3))
    img[2:6, 9:15] = 1.0
    s = AnnotatedSample(img, 0, [GroundTruth(0, 1, (12 / 16, 4 / 16, 6 / 16, 4 / 16))])
    imgs, targets = _batch([s], np.array([ops], dtype=bool))
    ys, xs = np.nonzero(imgs[0, ..., 0])
    want = ((xs.min() + xs.max() + 1) / 32, (ys.min() + ys.max() + 1) / 32,
            (xs.max() + 1 - xs.min()) / 16, (ys.max() + 1 - ys.min()) / 16)
    np.testing.assert_allclose(targets[0][1][0], want)
    np.testing.assert_array_equal(s.image[2:6, 9:15], 1.0)  # source untouched


def test_augment_modes():
    rng = np.random.default_rng(0)
    assert augment_ops("none", 4, rng) is None
    assert not augment_ops("hflip", 50, rng)[:, 1:].any()
    assert augment_ops("dihedral", 50, rng)[:, 2].any()


def test_encoder_head_loss_reaches_encoder_heads(tiny_data):
    m = tiny_model()
    before = m.params["enc_class_head.w"].data.copy()
    train(m, tiny_data, TrainConfig(epochs=1, batch_size=3, learning_rate=1e-3))
    assert not np.array_equal(before, m.params["enc_class_head.w"].data)
    off = tiny_model()
    train(off, tiny_data, TrainConfig(epochs=1, batch_size=3, learning_rate=1e-3, encoder_aux_weight=0.0))
    np.testing.assert_array_equal(before, off.params["enc_class_head.w"].data)


def test_curve_has_train_and_test_columns(tiny_data):
    res = train(tiny_model(), tiny_data, TrainConfig(epochs=2, batch_size=3))
    assert len(res.curve.train_loss) == len(res.curve.test_loss) == 2
    assert all(np.isfinite(res.curve.test_loss))
    assert res.curve.to_csv().splitlines()[0] == "epoch,train_loss,test_loss"


def test_query_drop_rate_monte_carlo():
    rng = np.random.default_rng(0)
    kept = np.stack([random_query_drop(16, 0.15, rng) for _ in range(20000)])
    assert abs(1.0 - kept.mean() - 0.15) < 0.01


def test_query_drop_edge_cases():
    rng = np.random.default_rng(1)
    assert random_query_drop(16, 0.0, rng).all()
    for _ in range(200):
        assert random_query_drop(1, 0.9, rng).sum() == 1
    with pytest.raises(ValueError):
        random_query_drop(4, 1.0, rng)


def test_dropped_queries_receive_no_output_gradient(tiny_data):
    res = train(tiny_model(), tiny_data, TrainConfig(epochs=1, batch_size=2, query_drop_p=0.5, gradient_record=True))
    rec = res.gradient_record
    assert rec.steps == 3 and len(rec.kept) == 3
    saw_drop = False
    for norms, kept in zip(rec.output_norms, rec.kept):
        assert not norms[~kept].any()
        saw_drop |= (~kept).any()
    assert saw_drop


def test_ab_zero_drop_arm_equals_plain_training(tiny_data):
    base = TrainConfig(epochs=2, batch_size=3, learning_rate=1e-3)
    report = ab_compare(tiny_data, tiny_model, base, TrainConfig(epochs=2, batch_size=3, learning_rate=1e-3,
                                                                 query_drop_p=0.15))
    plain = train(tiny_model(), tiny_data, base)
    assert report.base == plain.curve
    assert all(np.isfinite(report.drop.train_loss + report.drop.test_loss))
    assert "final_test_loss_delta" in report.to_dict()


def test_ab_rejects_configs_differing_elsewhere(tiny_data):
    with pytest.raises(ValueError):
        ab_compare(tiny_data, tiny_model, TrainConfig(epochs=1), TrainConfig(epochs=2, query_drop_p=0.1))


@pytest.mark.parametrize("kw", [dict(query_drop_p=1.0), dict(learning_rate=-1.0), dict(optimizer="lamb"),
                                dict(batch_size=0), dict(augment="rot45"), dict(encoder_aux_weight=-1.0)])
def test_invalid_train_config(kw, tiny_data):
    with pytest.raises(ValueError):
        train(tiny_model(), tiny_data, TrainConfig(**kw))


def test_config_dict_round_trip():
    c = TrainConfig(epochs=3, query_drop_p=0.1)
    assert TrainConfig.from_dict(c.to_dict()) == c


def test_patch_dropout_zeroes_whole_grid_patches():
    imgs = np.random.default_rng(0).uniform(0.1, 1.0, (6, 40, 40, 3))
    assert patch_dropout(imgs, 0.0, np.random.default_rng(1)) is imgs
    out = patch_dropout(imgs, 1.0, np.random.default_rng(1))
    again = patch_dropout(imgs, 1.0, np.random.default_rng(1))
    np.testing.assert_array_equal(out, again)
    for b in range(len(imgs)):
        zeroed = 0
        for ys, xs in patch_slices((40, 40)):
            patch = out[b, ys, xs]
            if not patch.any():
                zeroed += 1
            else:
                np.testing.assert_array_equal(patch, imgs[b, ys, xs])
        assert 1 <= zeroed <= 50
    assert np.array_equal(imgs, np.random.default_rng(0).uniform(0.1, 1.0, (6, 40, 40, 3)))  # input untouched


def test_patch_dropout_config_bounds():
    with pytest.raises(ValueError):
        TrainConfig(patch_dropout=1.5).validate()
