"""Seeded training loop with random query drop and gradient-flow recording."""
from __future__ import annotations

import csv
import io
import json
import logging
import math
from dataclasses import asdict, dataclass, field, replace
from typing import Callable, Sequence

import numpy as np

from . import tensor as T
from .analytics import GradientFlowRecord, QueryGradientRecorder
from .data import AnnotatedSample, train_test_split
from .matching import LossWeights, batch_set_loss, match_batch
from .model import MiniDETR
from .perturb import GRID, patch_slices

log = logging.getLogger(__name__)


class TrainingDiverged(RuntimeError):
    pass


AUGMENTATIONS = ("none", "hflip", "dihedral")


@dataclass
class TrainConfig:
    epochs: int = 100
    learning_rate: float = 1e-4
    optimizer: str = "adam"
    beta1: float = 0.9
    beta2: float = 0.999
    adam_eps: float = 1e-8
    momentum: float = 0.9  # sgd only
    batch_size: int = 8
    seed: int = 0
    query_drop_p: float = 0.0
    loss_weights: LossWeights = field(default_factory=LossWeights)
    gradient_record: bool = False
    grad_clip: float | None = 0.1
    aux_loss: bool = True
    encoder_aux_weight: float = 1.0  # used when the model has encoder heads
    augment: str = "dihedral"  # none | hflip | dihedral
    patch_dropout: float = 0.0  # per-sample chance of zeroing random occlusion-grid patches
    patch_dropout_max: float = 0.5  # largest fraction of the grid zeroed in one image
    train_fraction: float = 0.8

    def validate(self) -> "TrainConfig":
        if not 0.0 <= self.query_drop_p < 1.0:
            raise ValueError(f"query_drop_p must be in [0, 1), got {self.query_drop_p}")
        if self.learning_rate < 0:
            raise ValueError("learning_rate must be >= 0")
        if self.optimizer not in ("adam", "sgd"):
            raise ValueError(f"unknown optimizer {self.optimizer!r}")
        if self.augment not in AUGMENTATIONS:
            raise ValueError(f"augment must be one of {AUGMENTATIONS}")
        if not 0.0 <= self.patch_dropout <= 1.0:
            raise ValueError(f"patch_dropout must be in [0, 1], got {self.patch_dropout}")
        if not 0.0 < self.patch_dropout_max <= 1.0:
            raise ValueError(f"patch_dropout_max must be in (0, 1], got {self.patch_dropout_max}")
        if self.encoder_aux_weight < 0:
            raise ValueError("encoder_aux_weight must be >= 0")
        if self.epochs < 0 or self.batch_size < 1:
            raise ValueError("epochs must be >= 0 and batch_size >= 1")
        return self

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "TrainConfig":
        d = dict(d)
        if isinstance(d.get("loss_weights"), dict):
            d["loss_weights"] = LossWeights(**d["loss_weights"])
        return cls(**d)


@dataclass
class LossCurve:
    train_loss: list[float] = field(default_factory=list)
    test_loss: list[float] = field(default_factory=list)

    def to_csv(self) -> str:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(["epoch", "train_loss", "test_loss"])
        for e, (a, b) in enumerate(zip(self.train_loss, self.test_loss), start=1):
            w.writerow([e, repr(a), repr(b)])
        return buf.getvalue()


@dataclass
class TrainResult:
    model: MiniDETR
    curve: LossCurve
    gradient_record: GradientFlowRecord | None = None


# ---------------------------------------------------------------------------
# optimisers
# ---------------------------------------------------------------------------
class Adam:
    def __init__(self, params: Sequence[T.Tensor], lr: float, beta1=0.9, beta2=0.999, eps=1e-8):
        self.params = list(params)
        self.lr, self.beta1, self.beta2, self.eps = lr, beta1, beta2, eps
        self.m = [np.zeros_like(p.data) for p in self.params]
        self.v = [np.zeros_like(p.data) for p in self.params]
        self.t = 0

    def step(self) -> None:
        self.t += 1
        c1 = 1.0 - self.beta1 ** self.t
        c2 = 1.0 - self.beta2 ** self.t
        for p, m, v in zip(self.params, self.m, self.v):
            g = p.grad
            m *= self.beta1
            m += (1.0 - self.beta1) * g
            v *= self.beta2
            v += (1.0 - self.beta2) * g * g
            p.data = p.data - self.lr * (m / c1) / (np.sqrt(v / c2) + self.eps)


class SGD:
    def __init__(self, params: Sequence[T.Tensor], lr: float, momentum: float = 0.9):
        self.params = list(params)
        self.lr, self.momentum = lr, momentum
        self.buf = [np.zeros_like(p.data) for p in self.params]

    def step(self) -> None:
        for p, b in zip(self.params, self.buf):
            b *= self.momentum
            b += p.grad
            p.data = p.data - self.lr * b


def _clip(params: Sequence[T.Tensor], max_norm: float) -> float:
    total = math.sqrt(sum(float((p.grad ** 2).sum()) for p in params))
    if total > max_norm:
        scale = max_norm / (total + 1e-6)
        for p in params:
            p.grad = p.grad * scale
    return total


# ---------------------------------------------------------------------------
# query drop
# ---------------------------------------------------------------------------
def random_query_drop(num_queries: int, p: float, rng: np.random.Generator) -> np.ndarray:
    """Boolean keep-mask: each query kept with probability 1-p, never all dropped."""
    if not 0.0 <= p < 1.0:
        raise ValueError(f"drop probability must be in [0, 1), got {p}")
    if p == 0.0:
        return np.ones(num_queries, dtype=bool)
    keep = rng.random(num_queries) >= p
    if not keep.any():
        keep[int(rng.integers(num_queries))] = True
    return keep


# ---------------------------------------------------------------------------
# loop
# ---------------------------------------------------------------------------
def _batch(samples: Sequence[AnnotatedSample], ops: np.ndarray | None = None):
    """Stack a batch; ``ops[b]`` = (hflip, vflip, transpose) flags for sample b."""
    imgs = np.stack([s.image for s in samples])
    targets = [s.targets() for s in samples]
    if ops is not None and ops.any():
        imgs = imgs.copy()
        for b in np.flatnonzero(ops.any(axis=1)):
            img = imgs[b]
            cls, boxes = targets[b]
            boxes = boxes.copy()
            if ops[b, 0]:
                img = img[:, ::-1]
                boxes[:, 0] = 1.0 - boxes[:, 0]
            if ops[b, 1]:
                img = img[::-1]
                boxes[:, 1] = 1.0 - boxes[:, 1]
            if ops[b, 2]:
                if img.shape[0] != img.shape[1]:
                    raise ValueError("transpose augmentation needs square images")
                img = img.transpose(1, 0, 2)
                boxes = boxes[:, [1, 0, 3, 2]]
            imgs[b] = img.copy()
            targets[b] = (cls, boxes)
    return imgs, targets


def augment_ops(mode: str, n: int, rng: np.random.Generator) -> np.ndarray | None:
    """Per-sample (hflip, vflip, transpose) flags, each a fair coin where enabled."""
    if mode == "none":
        return None
    flags = rng.random((n, 3)) < 0.5
    if mode == "hflip":
        flags[:, 1:] = False
    return flags


def patch_dropout(imgs: np.ndarray, p: float, rng: np.random.Generator,
                  max_fraction: float = 0.5) -> np.ndarray:
    """Zero a random number (1 to ``max_fraction`` of the grid) of occlusion-grid
    patches in each image, with probability ``p`` per image. Labels are kept:
    the model learns that blank patches are background, not objects."""
    if p <= 0.0:
        return imgs
    n = GRID[0] * GRID[1]
    hit = rng.random(len(imgs)) < p
    counts = rng.integers(1, int(max_fraction * n) + 1, len(imgs))
    if not hit.any():
        return imgs
    out = imgs.copy()
    slices = patch_slices(imgs.shape[1:3])
    for b in np.flatnonzero(hit):
        for q in rng.choice(n, size=counts[b], replace=False):
            out[(b,) + slices[q]] = 0.0
    return out


def evaluate_loss(model: MiniDETR, samples: Sequence[AnnotatedSample], weights: LossWeights,
                  batch_size: int = 16) -> float:
    """Mean set loss over ``samples`` (no query drop, no gradients)."""
    if not samples:
        return float("nan")
    total = 0.0
    with T.no_grad():
        for i in range(0, len(samples), batch_size):
            chunk = samples[i:i + batch_size]
            imgs, targets = _batch(chunk)
            logits, boxes, _ = model.forward_batch(imgs)
            asg = match_batch(logits.data, boxes.data, targets, weights)
            total += batch_set_loss(logits, boxes, targets, asg, weights).item() * len(chunk)
    return total / len(samples)


def training_loss(model: MiniDETR, imgs: np.ndarray, targets: list, config: TrainConfig,
                  kept: np.ndarray | None = None, assignments: list | None = None):
    """Loss of one batch: final decoder layer, auxiliary decoder layers and the
    encoder heads.

    Returns ``(total, final_term, assignments, (logits, boxes))``. Passing the
    returned assignments back in holds the matching fixed, which makes the
    total a smooth function of the weights (used for finite differences).
    """
    w = config.loss_weights
    aux: list | None = [] if config.aux_loss else None
    enc: list = []
    logits, boxes, _ = model.forward_batch(imgs, aux=aux, enc_out=enc)
    match_kept = kept if config.query_drop_p > 0 else None
    heads = [(lg, bx, kept, match_kept, 1.0) for lg, bx in (aux or [])] + [(logits, boxes, kept, match_kept, 1.0)]
    final = len(heads) - 1
    if enc and config.encoder_aux_weight:
        heads.append((*enc[0], None, None, config.encoder_aux_weight))
    total = term = None
    used = []
    for h, (lg, bx, k, mk, scale) in enumerate(heads):
        asg = assignments[h] if assignments is not None else match_batch(lg.data, bx.data, targets, w, mk)
        used.append(asg)
        t = batch_set_loss(lg, bx, targets, asg, w, k)
        if h == final:
            term = t
        t = t if scale == 1.0 else t * scale
        total = t if total is None else total + t
    return total, term, used, (logits, boxes)


def train(model: MiniDETR, dataset: Sequence[AnnotatedSample], config: TrainConfig,
          test_set: Sequence[AnnotatedSample] | None = None,
          on_epoch: Callable[[int, float, float], None] | None = None) -> TrainResult:
    """Train in place. Without ``test_set`` the dataset is split by index
    (``train_fraction`` for training, the rest for test loss)."""
    config.validate()
    if not dataset:
        raise ValueError("dataset is empty")
    if test_set is None:
        train_set, test_set = train_test_split(dataset, config.train_fraction)
    else:
        train_set = list(dataset)
    order_rng = np.random.default_rng([config.seed, 0])
    drop_rng = np.random.default_rng([config.seed, 1])
    aug_rng = np.random.default_rng([config.seed, 2])
    cut_rng = np.random.default_rng([config.seed, 3])
    params = model.parameters()
    if config.optimizer == "adam":
        opt = Adam(params, config.learning_rate, config.beta1, config.beta2, config.adam_eps)
    else:
        opt = SGD(params, config.learning_rate, config.momentum)
    recorder = QueryGradientRecorder(model.config.num_queries) if config.gradient_record else None
    Q = model.config.num_queries
    curve = LossCurve()
    w = config.loss_weights

    for epoch in range(config.epochs):
        perm = order_rng.permutation(len(train_set))
        losses, sizes = [], []
        for i in range(0, len(perm), config.batch_size):
            chunk = [train_set[j] for j in perm[i:i + config.batch_size]]
            imgs, targets = _batch(chunk, augment_ops(config.augment, len(chunk), aug_rng))
            imgs = patch_dropout(imgs, config.patch_dropout, cut_rng, config.patch_dropout_max)
            kept = random_query_drop(Q, config.query_drop_p, drop_rng)
            model.zero_grad()
            loss, term, _, (logits, boxes) = training_loss(model, imgs, targets, config, kept)
            # the curve tracks the final-layer loss so train and test are comparable
            value = term.item()
            if not math.isfinite(loss.item()) or not math.isfinite(value):
                raise TrainingDiverged(f"non-finite loss {value} at epoch {epoch + 1}, batch {i // config.batch_size}")
            loss.backward()
            if recorder is not None:
                out_norm = np.sqrt((logits.grad ** 2).sum(axis=(0, 2)) + (boxes.grad ** 2).sum(axis=(0, 2)))
                recorder.step(model.query_embed.grad, out_norm, kept)
            if config.grad_clip:
                _clip(params, config.grad_clip)
            opt.step()
            losses.append(value)
            sizes.append(len(chunk))
        train_loss = float(np.average(losses, weights=sizes))
        test_loss = evaluate_loss(model, test_set, w) if test_set else float("nan")
        curve.train_loss.append(train_loss)
        curve.test_loss.append(test_loss)
        log.info("epoch %d train %.4f test %.4f", epoch + 1, train_loss, test_loss)
        if on_epoch is not None:
            on_epoch(epoch + 1, train_loss, test_loss)
    record = recorder.finalize() if recorder is not None and recorder._steps else None
    return TrainResult(model, curve, record)


# ---------------------------------------------------------------------------
# A/B comparison
# ---------------------------------------------------------------------------
@dataclass
class ABReport:
    base: LossCurve
    drop: LossCurve
    base_p: float
    drop_p: float

    @property
    def final_test_delta(self) -> float:
        """drop arm minus base arm, final-epoch test loss (sign not asserted)."""
        return self.drop.test_loss[-1] - self.base.test_loss[-1]

    def to_dict(self) -> dict:
        return {"base_query_drop_p": self.base_p, "drop_query_drop_p": self.drop_p,
                "epochs": len(self.base.train_loss),
                "final_train_loss": {"base": self.base.train_loss[-1], "drop": self.drop.train_loss[-1]},
                "final_test_loss": {"base": self.base.test_loss[-1], "drop": self.drop.test_loss[-1]},
                "final_test_loss_delta": self.final_test_delta}

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=2, sort_keys=True)

    def to_csv(self) -> str:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(["epoch", "base_train_loss", "base_test_loss", "drop_train_loss", "drop_test_loss"])
        for e in range(len(self.base.train_loss)):
            w.writerow([e + 1, repr(self.base.train_loss[e]), repr(self.base.test_loss[e]),
                        repr(self.drop.train_loss[e]), repr(self.drop.test_loss[e])])
        return buf.getvalue()


def ab_compare(dataset: Sequence[AnnotatedSample], model_factory: Callable[[], MiniDETR],
               base_config: TrainConfig, drop_config: TrainConfig,
               test_set: Sequence[AnnotatedSample] | None = None) -> ABReport:
    """Train two fresh models that differ only in ``query_drop_p``."""
    if replace(base_config, query_drop_p=0.0) != replace(drop_config, query_drop_p=0.0):
        raise ValueError("A/B configs may differ only in query_drop_p")
    a = train(model_factory(), dataset, base_config, test_set)
    b = train(model_factory(), dataset, drop_config, test_set)
    return ABReport(a.curve, b.curve, base_config.query_drop_p, drop_config.query_drop_p)
