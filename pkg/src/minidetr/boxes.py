"""Box geometry shared by the training loss and the evaluator."""
from __future__ import annotations

import numpy as np

from . import tensor as T
from .tensor import Tensor


def cxcywh_to_xyxy(b: np.ndarray) -> np.ndarray:
    b = np.asarray(b, dtype=np.float64)
    cx, cy, w, h = b[..., 0], b[..., 1], b[..., 2], b[..., 3]
    return np.stack([cx - w / 2, cy - h / 2, cx + w / 2, cy + h / 2], axis=-1)


def xyxy_to_cxcywh(b: np.ndarray) -> np.ndarray:
    b = np.asarray(b, dtype=np.float64)
    x0, y0, x1, y1 = b[..., 0], b[..., 1], b[..., 2], b[..., 3]
    return np.stack([(x0 + x1) / 2, (y0 + y1) / 2, x1 - x0, y1 - y0], axis=-1)


def iou(a, b, fmt: str = "cxcywh") -> float:
    """IoU of two boxes; a zero-area union gives 0."""
    return float(iou_matrix(np.asarray(a, dtype=np.float64)[None], np.asarray(b, dtype=np.float64)[None], fmt)[0, 0])


def iou_matrix(a: np.ndarray, b: np.ndarray, fmt: str = "cxcywh") -> np.ndarray:
    """Pairwise IoU between [N,4] and [M,4] boxes -> [N,M]."""
    a = np.asarray(a, dtype=np.float64).reshape(-1, 4)
    b = np.asarray(b, dtype=np.float64).reshape(-1, 4)
    if fmt == "cxcywh":
        a, b = cxcywh_to_xyxy(a), cxcywh_to_xyxy(b)
    elif fmt != "xyxy":
        raise ValueError(f"unknown box format {fmt!r}")
    area_a = np.clip(a[:, 2] - a[:, 0], 0, None) * np.clip(a[:, 3] - a[:, 1], 0, None)
    area_b = np.clip(b[:, 2] - b[:, 0], 0, None) * np.clip(b[:, 3] - b[:, 1], 0, None)
    iw = np.clip(np.minimum(a[:, None, 2], b[None, :, 2]) - np.maximum(a[:, None, 0], b[None, :, 0]), 0, None)
    ih = np.clip(np.minimum(a[:, None, 3], b[None, :, 3]) - np.maximum(a[:, None, 1], b[None, :, 1]), 0, None)
    inter = iw * ih
    union = area_a[:, None] + area_b[None, :] - inter
    with np.errstate(invalid="ignore", divide="ignore"):
        out = np.where(union > 0, inter / np.where(union > 0, union, 1.0), 0.0)
    return out


def tensor_iou(pred: Tensor, target: np.ndarray) -> Tensor:
    """Differentiable elementwise IoU between paired cxcywh boxes [..., 4]."""
    tgt = cxcywh_to_xyxy(target)
    cx, cy, w, h = (pred[..., i] for i in range(4))
    px0, px1 = cx - w * 0.5, cx + w * 0.5
    py0, py1 = cy - h * 0.5, cy + h * 0.5
    iw = T.relu(T.minimum(px1, tgt[..., 2]) - T.maximum(px0, tgt[..., 0]))
    ih = T.relu(T.minimum(py1, tgt[..., 3]) - T.maximum(py0, tgt[..., 1]))
    inter = iw * ih
    area_t = (tgt[..., 2] - tgt[..., 0]) * (tgt[..., 3] - tgt[..., 1])
    union = w * h + area_t - inter
    return inter / union
