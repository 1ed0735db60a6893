"""Per-query statistics: frequency, main query, class share, box scatter,
main-query masking and gradient flow."""
from __future__ import annotations

import csv
import io
import json
from collections import Counter
from dataclasses import asdict, dataclass, field
from typing import Iterable, Sequence

import numpy as np

from .metrics import Detection, EvalOptions, GroundTruth, MetricReport, evaluate


@dataclass
class QueryStats:
    confidence_threshold: float
    freq: np.ndarray  # count per query id
    total: int
    main_query_id: int | None
    main_share: float

    def to_dict(self) -> dict:
        return {"confidence_threshold": self.confidence_threshold, "freq": [int(v) for v in self.freq],
                "total": self.total, "main_query_id": self.main_query_id, "main_share": self.main_share}


@dataclass
class ClassContribution:
    share: dict[int, float]  # class -> main-query detections / all detections of the class
    totals: dict[int, int]
    main_query_id: int | None

    def to_dict(self) -> dict:
        return {"main_query_id": self.main_query_id,
                "share": {str(k): v for k, v in sorted(self.share.items())},
                "totals": {str(k): v for k, v in sorted(self.totals.items())}}


def _confident(detections: Iterable[Detection], threshold: float) -> list[Detection]:
    out = []
    for d in detections:
        if d.query_id is None:
            raise ValueError(f"detection on image {d.image_id!r} has no query_id")
        if d.score > threshold:
            out.append(d)
    return out


def query_frequency(detections: Iterable[Detection], threshold: float = 0.8,
                    num_queries: int | None = None) -> QueryStats:
    """Count detections with score > ``threshold`` per query id."""
    dets = list(detections)
    kept = _confident(dets, threshold)
    n = num_queries if num_queries is not None else max([d.query_id for d in dets], default=-1) + 1
    freq = np.zeros(n, dtype=np.int64)
    for d in kept:
        if not 0 <= d.query_id < n:
            raise ValueError(f"query_id {d.query_id} outside [0, {n})")
        freq[d.query_id] += 1
    total = int(freq.sum())
    if total == 0:
        return QueryStats(threshold, freq, 0, None, 0.0)
    main = int(np.argmax(freq))  # first maximum = smallest id
    return QueryStats(threshold, freq, total, main, float(freq[main] / total))


def class_contribution(detections: Iterable[Detection], stats: QueryStats) -> ClassContribution:
    kept = _confident(detections, stats.confidence_threshold)
    totals = Counter(d.class_id for d in kept)
    main = Counter(d.class_id for d in kept if d.query_id == stats.main_query_id)
    share = {c: main[c] / totals[c] for c in sorted(totals)}
    return ClassContribution(share, dict(sorted(totals.items())), stats.main_query_id)


def box_scatter(detections: Iterable[Detection], query_id: int,
                threshold: float | None = None) -> list[tuple[float, float, float]]:
    """(cx, cy, area) of every detection from ``query_id``, optionally above ``threshold``."""
    pts = []
    for d in detections:
        if d.query_id != query_id or (threshold is not None and not d.score > threshold):
            continue
        cx, cy, w, h = d.box
        pts.append((cx, cy, w * h))
    return pts


def mask_query_eval(detections: Sequence[Detection], gts: Sequence[GroundTruth], query_id: int,
                    options: EvalOptions | None = None) -> tuple[MetricReport, MetricReport]:
    """Evaluate with and without every prediction of ``query_id``."""
    for d in detections:
        if d.query_id is None:
            raise ValueError("mask_query_eval needs query ids on every detection")
    options = options or EvalOptions()
    with_q = evaluate(detections, gts, options)
    without_q = evaluate([d for d in detections if d.query_id != query_id], gts, options)
    return with_q, without_q


# ---------------------------------------------------------------------------
# gradient flow
# ---------------------------------------------------------------------------
@dataclass
class GradientFlowRecord:
    mean_norm: np.ndarray  # per query
    steps: int
    step_norms: list[np.ndarray] = field(default_factory=list, repr=False)
    output_norms: list[np.ndarray] = field(default_factory=list, repr=False)
    kept: list[np.ndarray] = field(default_factory=list, repr=False)

    def to_dict(self) -> dict:
        return {"steps": self.steps, "mean_norm": [float(v) for v in self.mean_norm]}


class QueryGradientRecorder:
    """Accumulates per-query L2 norms of the loss gradient on the query embedding.

    Call :meth:`step` after each backward pass (before the optimizer moves
    the weights), then :meth:`finalize`.
    """

    def __init__(self, num_queries: int):
        self.num_queries = num_queries
        self._sum = np.zeros(num_queries)
        self._steps = 0
        self._step_norms: list[np.ndarray] = []
        self._output_norms: list[np.ndarray] = []
        self._kept: list[np.ndarray] = []

    def step(self, query_grad: np.ndarray, output_grad: np.ndarray | None = None,
             kept: np.ndarray | None = None) -> None:
        g = np.asarray(query_grad, dtype=np.float64)
        if g.shape[0] != self.num_queries:
            raise ValueError(f"expected {self.num_queries} gradient rows, got {g.shape}")
        norms = np.linalg.norm(g.reshape(self.num_queries, -1), axis=1)
        self._sum += norms
        self._steps += 1
        self._step_norms.append(norms)
        if output_grad is not None:
            self._output_norms.append(np.asarray(output_grad, dtype=np.float64))
        if kept is not None:
            self._kept.append(np.asarray(kept, dtype=bool))

    def finalize(self) -> GradientFlowRecord:
        if self._steps == 0:
            raise RuntimeError("no gradient steps were recorded")
        return GradientFlowRecord(self._sum / self._steps, self._steps, list(self._step_norms),
                                  list(self._output_norms), list(self._kept))


def record_query_gradients(model) -> QueryGradientRecorder:
    return QueryGradientRecorder(model.config.num_queries)


# ---------------------------------------------------------------------------
# exports
# ---------------------------------------------------------------------------
def query_table_csv(stats: QueryStats, record: GradientFlowRecord | None = None) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(["query_id", "frequency", "mean_grad_norm"])
    n = len(stats.freq) if record is None else max(len(stats.freq), len(record.mean_norm))
    for q in range(n):
        f = int(stats.freq[q]) if q < len(stats.freq) else 0
        g = "" if record is None or q >= len(record.mean_norm) else f"{record.mean_norm[q]:.9g}"
        w.writerow([q, f, g])
    return buf.getvalue()


def masking_table_csv(rows: Sequence[tuple[str, MetricReport, MetricReport]]) -> str:
    """Rows of (model name, with-main-query report, without report)."""
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(["model", "mAP", "mAP_without_main_query", "mAP50", "mAP50_without_main_query",
                "detections", "detections_without_main_query"])
    for name, a, b in rows:
        f = lambda x: "" if x is None else f"{x:.6f}"
        w.writerow([name, f(a.mAP), f(b.mAP), f(a.mAP50), f(b.mAP50), a.num_detections, b.num_detections])
    return buf.getvalue()


def stats_json(stats: QueryStats, contrib: ClassContribution, scatter, record: GradientFlowRecord | None = None) -> str:
    doc = {"stats": stats.to_dict(), "class_contribution": contrib.to_dict(),
           "main_query_scatter": [list(p) for p in scatter]}
    if record is not None:
        doc["gradient_flow"] = record.to_dict()
    return json.dumps(doc, indent=2, sort_keys=True)
