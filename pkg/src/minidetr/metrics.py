"""COCO-style mean average precision with an optional low-overlap ignore rule."""
from __future__ import annotations

import csv
import io
import json
from collections import defaultdict
from dataclasses import asdict, dataclass, field
from typing import Hashable, Iterable, Sequence

import numpy as np

from .boxes import iou as box_iou
from .boxes import iou_matrix

IOU_THRESHOLDS = tuple(round(0.5 + 0.05 * i, 2) for i in range(10))
RECALL_POINTS = np.linspace(0.0, 1.0, 101)


def _check_box(box, what: str) -> None:
    if len(box) != 4 or not all(np.isfinite(box)):
        raise ValueError(f"{what}: box must be 4 finite numbers, got {box}")
    if any(v < 0.0 or v > 1.0 for v in box):
        raise ValueError(f"{what}: box {tuple(box)} outside [0,1]^4")


@dataclass(frozen=True)
class Detection:
    image_id: Hashable
    class_id: int
    score: float
    box: tuple[float, float, float, float]  # cx, cy, w, h normalised
    query_id: int | None = None

    def validate(self, where: str = "detection") -> "Detection":
        _check_box(self.box, where)
        if not (0.0 <= self.score <= 1.0):
            raise ValueError(f"{where}: score {self.score} outside [0,1]")
        return self

    def to_dict(self) -> dict:
        d = {"image_id": self.image_id, "class_id": self.class_id, "score": self.score, "bbox": list(self.box)}
        if self.query_id is not None:
            d["query_id"] = self.query_id
        return d


@dataclass(frozen=True)
class GroundTruth:
    image_id: Hashable
    class_id: int
    box: tuple[float, float, float, float]

    def validate(self, where: str = "ground truth") -> "GroundTruth":
        _check_box(self.box, where)
        return self


@dataclass
class EvalOptions:
    iou_thresholds: tuple[float, ...] = IOU_THRESHOLDS
    ignore_low_overlap: bool = False
    overlap_threshold: float = 0.5


@dataclass
class MetricReport:
    mAP: float | None
    mAP50: float | None
    per_class: dict[int, dict] = field(default_factory=dict)
    num_detections: int = 0
    num_ground_truths: int = 0
    ignore_rule_applied: bool = False
    tie_break: str = "stable input order"

    def to_dict(self) -> dict:
        d = asdict(self)
        d["per_class"] = {str(k): v for k, v in sorted(self.per_class.items())}
        return d

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=2, sort_keys=True)

    def to_csv(self, class_names: Sequence[str] | None = None) -> str:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(["class_id", "class_name", "num_gts", "num_dets", "AP", "AP50"])
        for cid in sorted(self.per_class):
            row = self.per_class[cid]
            name = class_names[cid] if class_names and cid < len(class_names) else ""
            w.writerow([cid, name, row["num_gts"], row["num_dets"], _fmt(row["AP"]), _fmt(row["AP50"])])
        return buf.getvalue()


def _fmt(x) -> str:
    return "" if x is None else f"{x:.6f}"


def iou(a, b, fmt: str = "cxcywh") -> float:
    return box_iou(a, b, fmt)


def filter_low_overlap(detections: Iterable[Detection], gts: Iterable[GroundTruth],
                       threshold: float = 0.5) -> list[Detection]:
    """Drop detections whose best IoU with any ground truth of the same image is below ``threshold``."""
    if not 0.0 < threshold <= 1.0:
        raise ValueError("threshold must be in (0, 1]")
    by_image: dict = defaultdict(list)
    for g in gts:
        by_image[g.image_id].append(g.box)
    kept = []
    for d in detections:
        boxes = by_image.get(d.image_id)
        if boxes and iou_matrix([d.box], boxes).max() >= threshold:
            kept.append(d)
    return kept


def _interpolated_ap(tp: np.ndarray, num_gts: int) -> float:
    if len(tp) == 0:
        return 0.0
    ctp = np.cumsum(tp)
    cfp = np.cumsum(1 - tp)
    recall = ctp / num_gts
    precision = ctp / (ctp + cfp)
    precision = np.maximum.accumulate(precision[::-1])[::-1]
    idx = np.searchsorted(recall, RECALL_POINTS, side="left")
    vals = np.where(idx < len(precision), precision[np.minimum(idx, len(precision) - 1)], 0.0)
    return float(vals.mean())


def _match_class(dets: list[Detection], gts: list[GroundTruth], thresholds: Sequence[float]) -> dict[float, np.ndarray]:
    """Greedy highest-score-first matching; returns a TP indicator per threshold (in ranked order)."""
    order = sorted(range(len(dets)), key=lambda i: -dets[i].score)  # stable on ties
    ranked = [dets[i] for i in order]
    gt_by_image: dict = defaultdict(list)
    for g in gts:
        gt_by_image[g.image_id].append(g.box)
    ious = []
    for d in ranked:
        boxes = gt_by_image.get(d.image_id)
        ious.append(iou_matrix([d.box], boxes)[0] if boxes else np.zeros(0))
    out = {}
    for t in thresholds:
        used = {img: np.zeros(len(b), dtype=bool) for img, b in gt_by_image.items()}
        tp = np.zeros(len(ranked))
        for k, d in enumerate(ranked):
            row = ious[k]
            if row.size == 0:
                continue
            cand = np.where(used[d.image_id] | (row < t), -1.0, row)
            j = int(np.argmax(cand))
            if cand[j] >= 0:
                used[d.image_id][j] = True
                tp[k] = 1.0
        out[t] = tp
    return out


def average_precision(detections: Iterable[Detection], gts: Iterable[GroundTruth], class_id: int,
                      iou_threshold: float) -> float | None:
    """101-point interpolated AP for one class; None when the class has no ground truth."""
    dets = [d for d in detections if d.class_id == class_id]
    cls_gts = [g for g in gts if g.class_id == class_id]
    if not cls_gts:
        return None
    tp = _match_class(dets, cls_gts, [iou_threshold])[iou_threshold]
    return _interpolated_ap(tp, len(cls_gts))


def evaluate(detections: Iterable[Detection], gts: Iterable[GroundTruth],
             options: EvalOptions | None = None) -> MetricReport:
    """mAP over IoU 0.50:0.95 and mAP50, averaged over classes that have ground truth."""
    options = options or EvalOptions()
    dets = list(detections)
    gts = list(gts)
    if options.ignore_low_overlap:
        dets = filter_low_overlap(dets, gts, options.overlap_threshold)
    thresholds = tuple(options.iou_thresholds)
    if 0.5 not in thresholds:
        thresholds = thresholds + (0.5,)
    gt_classes = sorted({g.class_id for g in gts})
    per_class: dict[int, dict] = {}
    for cid in gt_classes:
        cd = [d for d in dets if d.class_id == cid]
        cg = [g for g in gts if g.class_id == cid]
        tps = _match_class(cd, cg, thresholds)
        aps = {t: _interpolated_ap(tps[t], len(cg)) for t in thresholds}
        per_class[cid] = {
            "AP": float(np.mean([aps[t] for t in options.iou_thresholds])),
            "AP50": aps[0.5],
            "num_gts": len(cg),
            "num_dets": len(cd),
        }
    if per_class:
        m = float(np.mean([r["AP"] for r in per_class.values()]))
        m50 = float(np.mean([r["AP50"] for r in per_class.values()]))
    else:
        m = m50 = None
    return MetricReport(m, m50, per_class, len(dets), len(gts), options.ignore_low_overlap)
