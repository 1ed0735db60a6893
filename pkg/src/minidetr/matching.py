"""Bipartite matching of object queries to ground truth, and the set-prediction loss."""
from __future__ import annotations

from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

from . import tensor as T
from .boxes import iou_matrix, tensor_iou
from .tensor import Tensor


@dataclass(frozen=True)
class LossWeights:
    w_class: float = 1.0
    w_l1: float = 5.0
    w_iou: float = 2.0
    no_object: float = 0.1


@dataclass
class CostMatrix:
    values: np.ndarray  # [Q, G]
    class_cost: np.ndarray
    l1_cost: np.ndarray
    iou_cost: np.ndarray


@dataclass
class Assignment:
    pairs: list[tuple[int, int]]  # (query_id, gt_id), sorted by query_id
    unmatched: list[int] = field(default_factory=list)
    total_cost: float = 0.0


def _gt_arrays(gts) -> tuple[np.ndarray, np.ndarray]:
    if isinstance(gts, tuple) and len(gts) == 2 and isinstance(gts[0], np.ndarray):
        return np.asarray(gts[0], dtype=int), np.asarray(gts[1], dtype=np.float64).reshape(-1, 4)
    classes = np.array([g.class_id for g in gts], dtype=int)
    boxes = np.array([g.box for g in gts], dtype=np.float64).reshape(-1, 4)
    return classes, boxes


def _softmax(z: np.ndarray) -> np.ndarray:
    e = np.exp(z - z.max(axis=-1, keepdims=True))
    return e / e.sum(axis=-1, keepdims=True)


def cost_matrix(probs: np.ndarray, boxes: np.ndarray, gt_classes: np.ndarray, gt_boxes: np.ndarray,
                weights: LossWeights = LossWeights()) -> CostMatrix:
    """w_class*(1 - p(gt class)) + w_l1*|box - gt|_1 + w_iou*(1 - IoU), per (query, gt)."""
    cls = 1.0 - probs[:, gt_classes]
    l1 = np.abs(boxes[:, None, :] - gt_boxes[None, :, :]).sum(-1)
    iou_c = 1.0 - iou_matrix(boxes, gt_boxes)
    values = weights.w_class * cls + weights.w_l1 * l1 + weights.w_iou * iou_c
    return CostMatrix(values, cls, l1, iou_c)


def match_cost(output, gts, weights: LossWeights = LossWeights()) -> CostMatrix:
    """Cost matrix between a :class:`DetectorOutput` and a list of ground truths."""
    classes, boxes = _gt_arrays(gts)
    if len(classes) == 0:
        raise ValueError("match_cost needs at least one ground truth (empty images match nothing)")
    return cost_matrix(_softmax(output.class_logits.data), output.boxes.data, classes, boxes, weights)


# ---------------------------------------------------------------------------
# Hungarian algorithm
# ---------------------------------------------------------------------------
def _lsa(cost: np.ndarray) -> np.ndarray:
    """Shortest-augmenting-path Hungarian for n rows <= m cols; returns col per row."""
    n, m = cost.shape
    u = np.zeros(n + 1)
    v = np.zeros(m + 1)
    p = np.zeros(m + 1, dtype=int)  # p[j]: 1-based row matched to column j
    way = np.zeros(m + 1, dtype=int)
    for i in range(1, n + 1):
        p[0] = i
        j0 = 0
        minv = np.full(m + 1, np.inf)
        used = np.zeros(m + 1, dtype=bool)
        while True:
            used[j0] = True
            i0 = p[j0]
            cur = cost[i0 - 1] - u[i0] - v[1:]
            free = ~used[1:]
            better = free & (cur < minv[1:])
            minv[1:][better] = cur[better]
            way[1:][better] = j0
            cand = np.where(free, minv[1:], np.inf)
            j1 = int(np.argmin(cand)) + 1
            delta = cand[j1 - 1]
            idx = np.flatnonzero(used)
            u[p[idx]] += delta
            v[idx] -= delta
            minv[1:][free] -= delta
            j0 = j1
            if p[j0] == 0:
                break
        while j0:
            j1 = way[j0]
            p[j0] = p[j1]
            j0 = j1
    cols = np.empty(n, dtype=int)
    for j in range(1, m + 1):
        if p[j]:
            cols[p[j] - 1] = j - 1
    return cols


def _opt_value(cost: np.ndarray) -> float:
    """Minimum total cost of a maximum-cardinality matching."""
    if cost.size == 0:
        return 0.0
    if cost.shape[0] <= cost.shape[1]:
        cols = _lsa(cost)
        return float(cost[np.arange(cost.shape[0]), cols].sum())
    rows = _lsa(cost.T)
    return float(cost[rows, np.arange(cost.shape[1])].sum())


def hungarian(cost) -> Assignment:
    """Minimum-cost injective matching of min(Q, G) pairs.

    Among all optimal matchings the lexicographically smallest pair list
    (sorted by query id) is returned, so results never depend on solver
    internals.
    """
    C = np.asarray(cost.values if isinstance(cost, CostMatrix) else cost, dtype=np.float64)
    if C.ndim != 2:
        raise ValueError(f"cost matrix must be 2-d, got shape {C.shape}")
    if not np.all(np.isfinite(C)):
        raise ValueError("cost matrix contains non-finite entries")
    nq, ng = C.shape
    k = min(nq, ng)
    if k == 0:
        return Assignment([], list(range(nq)), 0.0)
    opt = _opt_value(C)
    tol = 1e-12 * max(1.0, float(np.abs(C).max()) * k)

    pairs: list[tuple[int, int]] = []
    fixed = 0.0
    next_row = 0
    free_cols = list(range(ng))
    while len(pairs) < k:
        need = k - len(pairs) - 1
        rows = np.arange(next_row, nq)
        found = False
        for q in rows:
            if nq - q - 1 < need:
                break
            rest_rows = np.arange(q + 1, nq)
            # lower bound on the remainder: each remaining column at its cheapest remaining row
            for g in free_cols:
                rest_cols = [c for c in free_cols if c != g]
                sub = C[np.ix_(rest_rows, rest_cols)]
                head = fixed + C[q, g]
                if sub.size and sub.shape[1] <= sub.shape[0]:
                    lb = sub.min(axis=0).sum()
                elif sub.size:
                    lb = np.sort(sub.min(axis=1))[:need].sum()
                else:
                    lb = 0.0
                if head + lb > opt + tol:
                    continue
                if head + _opt_value(sub) <= opt + tol:
                    pairs.append((int(q), int(g)))
                    fixed = head
                    free_cols = rest_cols
                    next_row = q + 1
                    found = True
                    break
            if found:
                break
        if not found:  # pragma: no cover - numerical safety net
            raise RuntimeError("lexicographic refinement failed to reproduce the optimum")
    matched = {q for q, _ in pairs}
    total = 0.0
    for q, g in pairs:
        total += C[q, g]
    return Assignment(pairs, [q for q in range(nq) if q not in matched], float(total))


# ---------------------------------------------------------------------------
# set-prediction loss
# ---------------------------------------------------------------------------
def batch_set_loss(logits: Tensor, boxes: Tensor, targets: Sequence[tuple[np.ndarray, np.ndarray]],
                   assignments: Sequence[Assignment], weights: LossWeights = LossWeights(),
                   kept: np.ndarray | None = None) -> Tensor:
    """Set loss over a batch.

    ``logits`` [B,Q,C+1], ``boxes`` [B,Q,4]; ``targets[b]`` is (classes, boxes).
    Queries with ``kept[q] == False`` contribute nothing to any term.
    """
    B, Q, K = logits.shape
    no_obj = K - 1
    if kept is None:
        kept = np.ones(Q, dtype=bool)
    tgt_cls = np.full((B, Q), no_obj, dtype=int)
    w = np.where(kept, weights.no_object, 0.0)[None, :].repeat(B, axis=0)
    bi, qi, gb = [], [], []
    for b, ((cls, gboxes), asg) in enumerate(zip(targets, assignments)):
        for q, g in asg.pairs:
            if not kept[q]:
                raise ValueError(f"query {q} is dropped but was matched")
            tgt_cls[b, q] = cls[g]
            w[b, q] = 1.0
            bi.append(b)
            qi.append(q)
            gb.append(gboxes[g])
    logp = T.log_softmax(logits, axis=-1)
    picked = logp[np.arange(B)[:, None], np.arange(Q)[None, :], tgt_cls]
    ce = -(picked * w).sum() * (1.0 / max(w.sum(), 1e-12))
    loss = ce * weights.w_class
    num_boxes = max(sum(len(t[0]) for t in targets), 1)
    if bi:
        pb = boxes[np.array(bi), np.array(qi)]
        gbx = np.array(gb)
        l1 = T.relu(pb - gbx) + T.relu(gbx - pb)  # |x| with a defined subgradient
        l1 = l1.sum() * (1.0 / num_boxes)
        giou = (1.0 - tensor_iou(pb, gbx)).sum() * (1.0 / num_boxes)
        loss = loss + l1 * weights.w_l1 + giou * weights.w_iou
    return loss


def set_loss(output, gts, assignment: Assignment, weights: LossWeights = LossWeights(),
             kept: np.ndarray | None = None) -> Tensor:
    """Set loss for one :class:`DetectorOutput`: weighted cross-entropy (no-object
    down-weighted) plus L1 and 1-IoU box terms over matched pairs."""
    classes, boxes = _gt_arrays(gts) if len(gts) else (np.zeros(0, int), np.zeros((0, 4)))
    logits = output.class_logits.reshape(1, *output.class_logits.shape)
    pboxes = output.boxes.reshape(1, *output.boxes.shape)
    return batch_set_loss(logits, pboxes, [(classes, boxes)], [assignment], weights, kept)


def match_batch(logits: np.ndarray, boxes: np.ndarray, targets, weights: LossWeights = LossWeights(),
                kept: np.ndarray | None = None) -> list[Assignment]:
    """Hungarian matching per image, restricted to ``kept`` queries."""
    B, Q, _ = logits.shape
    qids = np.arange(Q) if kept is None else np.flatnonzero(kept)
    probs = _softmax(logits)
    out = []
    for b, (cls, gboxes) in enumerate(targets):
        if len(cls) == 0:
            out.append(Assignment([], list(range(Q)), 0.0))
            continue
        cm = cost_matrix(probs[b, qids], boxes[b, qids], cls, gboxes, weights)
        a = hungarian(cm)
        pairs = [(int(qids[q]), g) for q, g in a.pairs]
        matched = {q for q, _ in pairs}
        out.append(Assignment(pairs, [q for q in range(Q) if q not in matched], a.total_cost))
    return out
