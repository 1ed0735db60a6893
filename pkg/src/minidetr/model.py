"""A toy-scale DETR built on :mod:`minidetr.tensor`.

conv backbone -> sine positional encoding -> transformer encoder ->
transformer decoder over learnable object queries -> class / box heads.
"""
from __future__ import annotations

import json
import math
import struct
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np

from . import tensor as T
from .tensor import Tensor

STAGES = ("encoder-self", "decoder-self", "decoder-cross")
ACTIVATIONS = ("relu", "leaky_relu")
INPUT_MEAN, INPUT_STD = 0.5, 0.25  # fixed pixel normalisation


class ConfigError(ValueError):
    pass


@dataclass
class ModelConfig:
    d_model: int = 64
    num_heads: int = 4
    enc_layers: int = 2
    dec_layers: int = 2
    num_queries: int = 16
    num_classes: int = 3
    backbone_channels: tuple[int, ...] = (8, 16, 32, 64)
    backbone_kernels: tuple[int, ...] | None = None  # odd sizes per stage; None = all 3
    backbone_depth: int = 2  # conv layers per stage: one stride-2, the rest 3x3 stride-1
    ffn_dim: int = 128
    image_size: int = 128
    cross_attention_window: int | None = None
    activation: str = "relu"
    reference_points: bool = True
    encoder_aux_head: bool = True  # per-token class/box heads on the encoder memory (training signal only)
    seed: int = 0

    def __post_init__(self):
        self.backbone_channels = tuple(int(c) for c in self.backbone_channels)
        if self.backbone_kernels is not None:
            self.backbone_kernels = tuple(int(k) for k in self.backbone_kernels)

    @property
    def kernels(self) -> tuple[int, ...]:
        return self.backbone_kernels or (3,) * len(self.backbone_channels)

    @property
    def stride(self) -> int:
        return 2 ** len(self.backbone_channels)

    @property
    def feature_extent(self) -> int:
        return self.image_size // self.stride

    def validate(self) -> "ModelConfig":
        if self.d_model <= 0 or self.num_heads <= 0 or self.d_model % self.num_heads:
            raise ConfigError(f"d_model={self.d_model} must be a positive multiple of num_heads={self.num_heads}")
        if self.d_model % 4:
            raise ConfigError("d_model must be divisible by 4 for the 2-d positional encoding")
        if self.num_queries < 1:
            raise ConfigError("num_queries must be >= 1")
        if self.num_classes < 1:
            raise ConfigError("num_classes must be >= 1")
        if self.backbone_kernels is not None and (len(self.backbone_kernels) != len(self.backbone_channels)
                                                  or any(k < 1 or k % 2 == 0 for k in self.backbone_kernels)):
            raise ConfigError("backbone_kernels needs one odd size per stage")
        if not self.backbone_channels:
            raise ConfigError("backbone needs at least one stage")
        if self.backbone_depth < 1:
            raise ConfigError("backbone_depth must be >= 1")
        if self.image_size % self.stride:
            raise ConfigError(f"image_size {self.image_size} not divisible by backbone stride {self.stride}")
        if self.cross_attention_window is not None:
            w = self.cross_attention_window
            if w < 1 or w > max(1, self.feature_extent):
                raise ConfigError(f"cross_attention_window={w} must lie in [1, {self.feature_extent}]")
        if self.activation not in ACTIVATIONS:
            raise ConfigError(f"activation must be one of {ACTIVATIONS}")
        return self

    def to_dict(self) -> dict:
        d = asdict(self)
        d["backbone_channels"] = list(self.backbone_channels)
        if self.backbone_kernels is not None:
            d["backbone_kernels"] = list(self.backbone_kernels)
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "ModelConfig":
        return cls(**d)


@dataclass
class AttentionRecord:
    stage: str
    layer: int
    head: int
    weights: np.ndarray  # [rows, keys]


@dataclass
class DetectorOutput:
    class_logits: Tensor  # [Q, C+1]
    boxes: Tensor  # [Q, 4] cxcywh in [0,1]
    attention: list[AttentionRecord] = field(default_factory=list)
    feature_shape: tuple[int, int] = (0, 0)
    image_shape: tuple[int, int] = (0, 0)
    stride: int = 1
    recorded: bool = False

    @property
    def num_queries(self) -> int:
        return self.class_logits.shape[0]

    def probs(self) -> np.ndarray:
        z = self.class_logits.data
        e = np.exp(z - z.max(axis=-1, keepdims=True))
        return e / e.sum(axis=-1, keepdims=True)


# ---------------------------------------------------------------------------
# building blocks
# ---------------------------------------------------------------------------
def leaky_relu(x: Tensor, slope: float = 0.01) -> Tensor:
    return T.maximum(x, x * slope)


def activate(x: Tensor, kind: str) -> Tensor:
    return T.relu(x) if kind == "relu" else leaky_relu(x)


def positional_encoding(h: int, w: int, d_model: int, temperature: float = 10000.0) -> Tensor:
    """Fixed 2-d sinusoidal encoding, one row per feature-map cell (row-major).

    The first half of the channels encode the row, the second half the column,
    each as interleaved sin/cos pairs over geometric frequencies.
    """
    rows, cols = np.meshgrid(np.arange(h, dtype=np.float64), np.arange(w, dtype=np.float64), indexing="ij")
    return Tensor(sine_encoding(rows.reshape(-1), cols.reshape(-1), d_model, temperature))


def sine_encoding(rows: np.ndarray, cols: np.ndarray, d_model: int, temperature: float = 10000.0) -> np.ndarray:
    """Encode (possibly fractional) grid coordinates; [..., d_model]."""
    if d_model % 4:
        raise ValueError(f"d_model={d_model} must be divisible by 4")
    quarter = d_model // 4
    freqs = temperature ** (-np.arange(quarter) / quarter)

    def enc(pos):
        ang = np.asarray(pos, dtype=np.float64)[..., None] * freqs
        out = np.empty(ang.shape[:-1] + (2 * quarter,))
        out[..., 0::2] = np.sin(ang)
        out[..., 1::2] = np.cos(ang)
        return out

    return np.concatenate([enc(rows), enc(cols)], axis=-1)


def reference_grid(num_queries: int) -> np.ndarray:
    """Initial (cx, cy) anchors: cell centres of the smallest square grid holding every query."""
    g = math.ceil(math.sqrt(num_queries))
    k = np.arange(num_queries)
    return np.stack([(k % g + 0.5) / g, (k // g + 0.5) / g], axis=1)


def windowed_cross_attention_mask(query_reference: tuple[float, float], window: int,
                                  feature_shape: tuple[int, int]) -> np.ndarray:
    """Boolean [h*w] mask of tokens within Chebyshev distance ``window`` of the
    token containing the normalised reference point ``(cx, cy)``."""
    if window < 1:
        raise ValueError("window must be >= 1")
    h, w = feature_shape
    cx, cy = query_reference
    col = min(max(int(math.floor(cx * w)), 0), w - 1)
    row = min(max(int(math.floor(cy * h)), 0), h - 1)
    rr, cc = np.meshgrid(np.arange(h), np.arange(w), indexing="ij")
    return (np.maximum(np.abs(rr - row), np.abs(cc - col)) <= window).reshape(-1)


def _window_masks(centers: np.ndarray, window: int, feature_shape: tuple[int, int]) -> np.ndarray:
    """Vectorised mask for reference points ``centers`` [..., 2] -> [..., h*w]."""
    h, w = feature_shape
    col = np.clip(np.floor(centers[..., 0] * w).astype(int), 0, w - 1)
    row = np.clip(np.floor(centers[..., 1] * h).astype(int), 0, h - 1)
    rr, cc = np.meshgrid(np.arange(h), np.arange(w), indexing="ij")
    dist = np.maximum(np.abs(rr.reshape(-1) - row[..., None]), np.abs(cc.reshape(-1) - col[..., None]))
    return dist <= window


def multi_head_attention(q_in: Tensor, k_in: Tensor, v_in: Tensor, params: dict[str, Tensor],
                         head_count: int, mask: np.ndarray | None = None,
                         return_weights: bool = False):
    """Scaled dot-product attention over ``head_count`` heads.

    ``q_in`` is [..., n_q, d], ``k_in``/``v_in`` are [..., n_k, d]. ``params``
    holds wq, wk, wv, wo ([d, d]) and bq, bk, bv, bo ([d]). ``mask`` is
    broadcastable to [..., n_q, n_k]; False entries receive zero weight.
    Returns the projected output, plus the [..., heads, n_q, n_k] weights
    when ``return_weights`` is set.
    """
    d = q_in.shape[-1]
    if d % head_count:
        raise T.ShapeError(f"d_model={d} not divisible by head_count={head_count}")
    if k_in.shape[-1] != d or v_in.shape[-1] != d or k_in.shape[-2] != v_in.shape[-2]:
        raise T.ShapeError(f"attention input mismatch: q {q_in.shape}, k {k_in.shape}, v {v_in.shape}")
    dh = d // head_count
    lead = q_in.shape[:-2]
    nq, nk = q_in.shape[-2], k_in.shape[-2]

    def split(x: Tensor, n: int) -> Tensor:
        nd = x.ndim
        x = x.reshape(*x.shape[:-1], head_count, dh)
        axes = tuple(range(nd - 2)) + (nd - 1, nd - 2, nd)
        return x.transpose(axes)

    q = split(q_in @ params["wq"] + params["bq"], nq)
    k = split(k_in @ params["wk"] + params["bk"], nk)
    v = split(v_in @ params["wv"] + params["bv"], nk)
    nd = k.ndim
    kt = k.transpose(tuple(range(nd - 2)) + (nd - 1, nd - 2))
    logits = (q @ kt) * (1.0 / math.sqrt(dh))
    if mask is not None:
        mask = np.asarray(mask, dtype=bool)
        mask = np.expand_dims(mask, -3)  # broadcast over heads
    attn = T.softmax(logits, axis=-1, mask=mask)
    ctx = attn @ v  # [..., H, nq, dh]
    nd = ctx.ndim
    ctx = ctx.transpose(tuple(range(nd - 3)) + (nd - 2, nd - 3, nd - 1)).reshape(*lead, nq, d)
    out = ctx @ params["wo"] + params["bo"]
    if return_weights:
        return out, attn.data
    return out


# ---------------------------------------------------------------------------
# the detector
# ---------------------------------------------------------------------------
class MiniDETR:
    def __init__(self, config: ModelConfig):
        self.config = config.validate()
        self.params: dict[str, Tensor] = {}
        self._rng = np.random.default_rng(config.seed)
        self._build()
        del self._rng

    # -- parameters ------------------------------------------------------
    def _xavier(self, name: str, shape: tuple[int, ...], fan_in: int, fan_out: int) -> None:
        a = math.sqrt(6.0 / (fan_in + fan_out))
        self.params[name] = Tensor(self._rng.uniform(-a, a, size=shape), requires_grad=True)

    def _he(self, name: str, shape: tuple[int, ...], fan_in: int) -> None:
        a = math.sqrt(6.0 / fan_in)  # keeps activation scale through ReLU stacks
        self.params[name] = Tensor(self._rng.uniform(-a, a, size=shape), requires_grad=True)

    def _const(self, name: str, shape, value: float) -> None:
        self.params[name] = Tensor(np.full(shape, value, dtype=np.float64), requires_grad=True)

    def _linear(self, name: str, d_in: int, d_out: int) -> None:
        self._xavier(f"{name}.w", (d_in, d_out), d_in, d_out)
        self._const(f"{name}.b", (d_out,), 0.0)

    def _attn(self, name: str, d: int) -> None:
        for p in ("q", "k", "v", "o"):
            self._xavier(f"{name}.w{p}", (d, d), d, d)
            self._const(f"{name}.b{p}", (d,), 0.0)

    def _norm(self, name: str, d: int) -> None:
        self._const(f"{name}.g", (d,), 1.0)
        self._const(f"{name}.b", (d,), 0.0)

    def _build(self) -> None:
        c = self.config
        d = c.d_model
        c_in = 3
        for i, (c_out, k) in enumerate(zip(c.backbone_channels, c.kernels)):
            self._he(f"backbone.{i}.w", (c_out, c_in, k, k), c_in * k * k)
            self._const(f"backbone.{i}.b", (c_out,), 0.0)
            for j in range(1, c.backbone_depth):
                self._he(f"backbone.{i}.{j}.w", (c_out, c_out, 3, 3), c_out * 9)
                self._const(f"backbone.{i}.{j}.b", (c_out,), 0.0)
            c_in = c_out
        self._linear("input_proj", c_in, d)
        for l in range(c.enc_layers):
            p = f"encoder.{l}"
            self._attn(f"{p}.self_attn", d)
            self._norm(f"{p}.norm1", d)
            self._linear(f"{p}.ffn1", d, c.ffn_dim)
            self._linear(f"{p}.ffn2", c.ffn_dim, d)
            self._norm(f"{p}.norm2", d)
        for l in range(c.dec_layers):
            p = f"decoder.{l}"
            self._attn(f"{p}.self_attn", d)
            self._norm(f"{p}.norm1", d)
            self._attn(f"{p}.cross_attn", d)
            self._norm(f"{p}.norm2", d)
            self._linear(f"{p}.ffn1", d, c.ffn_dim)
            self._linear(f"{p}.ffn2", c.ffn_dim, d)
            self._norm(f"{p}.norm3", d)
        self._norm("decoder_norm", d)
        self.params["query_embed"] = Tensor(self._rng.standard_normal((c.num_queries, d)), requires_grad=True)
        if c.reference_points:
            ref = reference_grid(c.num_queries)
            self.params["query_ref"] = Tensor(np.log(ref / (1.0 - ref)), requires_grad=True)  # logits
        self._linear("class_head", d, c.num_classes + 1)
        if c.encoder_aux_head:
            self._linear("enc_class_head", d, c.num_classes + 1)
            self._linear("enc_box_head.0", d, d)
            self._linear("enc_box_head.1", d, 4)
        self._linear("box_head.0", d, d)
        self._linear("box_head.1", d, d)
        self._linear("box_head.2", d, 4)

    @property
    def query_embed(self) -> Tensor:
        return self.params["query_embed"]

    def parameters(self) -> list[Tensor]:
        return list(self.params.values())

    def zero_grad(self) -> None:
        for p in self.params.values():
            p.zero_grad()

    def _sub(self, prefix: str) -> dict[str, Tensor]:
        n = len(prefix) + 1
        return {k[n:]: v for k, v in self.params.items() if k.startswith(prefix + ".")}

    # -- forward ---------------------------------------------------------
    def _lin(self, x: Tensor, name: str) -> Tensor:
        return x @ self.params[f"{name}.w"] + self.params[f"{name}.b"]

    def _ln(self, x: Tensor, name: str) -> Tensor:
        return T.layernorm(x, self.params[f"{name}.g"], self.params[f"{name}.b"])

    def _ffn(self, x: Tensor, prefix: str) -> Tensor:
        return self._lin(activate(self._lin(x, f"{prefix}.ffn1"), self.config.activation), f"{prefix}.ffn2")

    def _box(self, x: Tensor) -> Tensor:
        act = self.config.activation
        h = activate(self._lin(x, "box_head.0"), act)
        h = activate(self._lin(h, "box_head.1"), act)
        z = self._lin(h, "box_head.2")
        if self.config.reference_points:
            # centres are offsets from each query's anchor, in logit space
            ref = self.params["query_ref"]
            z = z + T.concat([ref, T.zeros(ref.shape)], axis=1)
        return T.sigmoid(z)

    def _query_pos(self, feature_shape: tuple[int, int]) -> Tensor:
        """Decoder positional query: the learned embedding, plus the sine code of
        each query's anchor in the memory's grid coordinates."""
        if not self.config.reference_points:
            return self.query_embed
        h, w = feature_shape
        d = self.config.d_model
        quarter = d // 4
        freqs = Tensor(10000.0 ** (-np.arange(quarter) / quarter))
        ref = T.sigmoid(self.params["query_ref"])
        parts = []
        for pos in (ref[:, 1:2] * float(h) - 0.5, ref[:, 0:1] * float(w) - 0.5):
            ang = pos * freqs  # [Q, quarter]
            # interleave sin/cos exactly as sine_encoding does
            pair = T.concat([T.tsin(ang).reshape(-1, quarter, 1), T.tcos(ang).reshape(-1, quarter, 1)], axis=2)
            parts.append(pair.reshape(-1, 2 * quarter))
        return self.query_embed + T.concat(parts, axis=1)

    def backbone(self, x: Tensor) -> Tensor:
        for i, k in enumerate(self.config.kernels):
            x = T.conv2d(x, self.params[f"backbone.{i}.w"], self.params[f"backbone.{i}.b"], stride=2, padding=k // 2)
            x = activate(x, self.config.activation)
            for j in range(1, self.config.backbone_depth):
                x = T.conv2d(x, self.params[f"backbone.{i}.{j}.w"], self.params[f"backbone.{i}.{j}.b"], padding=1)
                x = activate(x, self.config.activation)
        return x

    def _encoder_predictions(self, memory: Tensor, feature_shape: tuple[int, int]) -> tuple[Tensor, Tensor]:
        """Dense (logits, boxes) for every memory token; box centres are offsets
        from the token's own cell centre."""
        h, w = feature_shape
        rows, cols = np.divmod(np.arange(h * w), w)
        centre = np.stack([(cols + 0.5) / w, (rows + 0.5) / h], axis=1)
        offset = np.concatenate([np.log(centre / (1.0 - centre)), np.zeros_like(centre)], axis=1)
        hid = activate(self._lin(memory, "enc_box_head.0"), self.config.activation)
        boxes = T.sigmoid(self._lin(hid, "enc_box_head.1") + Tensor(offset))
        return self._lin(memory, "enc_class_head"), boxes

    def forward_batch(self, images: np.ndarray, _records: list | None = None,
                      aux: list | None = None, enc_out: list | None = None
                      ) -> tuple[Tensor, Tensor, tuple[int, int]]:
        """Run a batch of [B, H, W, 3] images; returns logits [B,Q,C+1], boxes [B,Q,4].

        When ``aux`` is a list, the (logits, boxes) predicted from every decoder
        layer but the last are appended to it (shared heads). When ``enc_out``
        is a list and the model has encoder heads, the dense per-token
        predictions are appended to it.
        """
        c = self.config
        images = np.asarray(images, dtype=np.float64)
        if images.ndim != 4 or images.shape[-1] != 3:
            raise ValueError(f"expected [B,H,W,3] images, got {images.shape}")
        B, H, W, _ = images.shape
        if H % c.stride or W % c.stride:
            raise ValueError(f"image size {H}x{W} not divisible by backbone stride {c.stride}")
        x = (images.transpose(0, 3, 1, 2) - INPUT_MEAN) / INPUT_STD
        feats = self.backbone(Tensor(x))
        h, w = feats.shape[-2:]
        n = h * w
        pos = positional_encoding(h, w, c.d_model)
        # position enters the token values once here (a shallow backbone carries
        # little absolute position) and the attention queries/keys at every layer
        src = self._lin(feats.reshape(B, feats.shape[1], n).transpose(0, 2, 1), "input_proj") + pos

        def rec(stage, layer, weights):
            if _records is not None:
                for hd in range(weights.shape[1]):
                    _records.append(AttentionRecord(stage, layer, hd, weights[0, hd].copy()))

        for l in range(c.enc_layers):
            p = f"encoder.{l}"
            qk = src + pos
            a, wts = multi_head_attention(qk, qk, src, self._sub(f"{p}.self_attn"), c.num_heads, return_weights=True)
            rec("encoder-self", l, wts)
            src = self._ln(src + a, f"{p}.norm1")
            src = self._ln(src + self._ffn(src, p), f"{p}.norm2")
        memory = src
        mem_k = memory + pos
        if enc_out is not None and c.encoder_aux_head:
            enc_out.append(self._encoder_predictions(memory, (h, w)))

        qpos = self._query_pos((h, w))
        tgt = T.zeros((B, c.num_queries, c.d_model))
        if c.reference_points:
            centers = np.broadcast_to(1.0 / (1.0 + np.exp(-self.params["query_ref"].data)), (B, c.num_queries, 2))
        else:
            centers = np.full((B, c.num_queries, 2), 0.5)
        for l in range(c.dec_layers):
            p = f"decoder.{l}"
            qk = tgt + qpos
            a, wts = multi_head_attention(qk, qk, tgt, self._sub(f"{p}.self_attn"), c.num_heads, return_weights=True)
            rec("decoder-self", l, wts)
            tgt = self._ln(tgt + a, f"{p}.norm1")
            mask = None
            if c.cross_attention_window is not None:
                mask = _window_masks(centers, c.cross_attention_window, (h, w))
            a, wts = multi_head_attention(tgt + qpos, mem_k, memory, self._sub(f"{p}.cross_attn"), c.num_heads,
                                          mask=mask, return_weights=True)
            rec("decoder-cross", l, wts)
            tgt = self._ln(tgt + a, f"{p}.norm2")
            tgt = self._ln(tgt + self._ffn(tgt, p), f"{p}.norm3")
            if l + 1 < c.dec_layers:
                if aux is not None:
                    hs = self._ln(tgt, "decoder_norm")
                    aux.append((self._lin(hs, "class_head"), self._box(hs)))
                if c.cross_attention_window is not None:
                    if aux is not None:
                        centers = aux[-1][1].data[..., :2]
                    else:
                        with T.no_grad():
                            centers = self._box(self._ln(tgt, "decoder_norm")).data[..., :2]
        hs = self._ln(tgt, "decoder_norm")
        return self._lin(hs, "class_head"), self._box(hs), (h, w)

    def forward(self, image: np.ndarray, record_attention: bool = False) -> DetectorOutput:
        """Detect on one [H, W, 3] image."""
        image = np.asarray(image, dtype=np.float64)
        if image.ndim != 3:
            raise ValueError(f"expected an [H,W,3] image, got {image.shape}")
        records: list[AttentionRecord] | None = [] if record_attention else None
        logits, boxes, fshape = self.forward_batch(image[None], _records=records)
        out = DetectorOutput(logits[0], boxes[0], records or [], fshape, image.shape[:2],
                             self.config.stride, record_attention)
        if record_attention:
            check_attention(out.attention)
        return out

    __call__ = forward

    # -- persistence -----------------------------------------------------
    def state_dict(self) -> dict[str, np.ndarray]:
        return {k: v.data.copy() for k, v in self.params.items()}

    def load_state_dict(self, state: dict[str, np.ndarray]) -> None:
        missing = set(self.params) - set(state)
        if missing:
            raise KeyError(f"checkpoint is missing tensors: {sorted(missing)}")
        for k, p in self.params.items():
            arr = np.asarray(state[k], dtype=np.float64)
            if arr.shape != p.shape:
                raise ValueError(f"tensor {k}: checkpoint shape {arr.shape} != model shape {p.shape}")
            p.data = arr.copy()


def check_attention(records: Sequence[AttentionRecord], tol: float = 1e-9) -> None:
    for r in records:
        if np.any(r.weights < 0) or np.max(np.abs(r.weights.sum(axis=-1) - 1.0)) > tol:
            raise AssertionError(f"attention rows not normalised at {r.stage} layer {r.layer} head {r.head}")


# ---------------------------------------------------------------------------
# attention maps
# ---------------------------------------------------------------------------
def _select(output: DetectorOutput, stage: str, layer: int, head: int | None) -> np.ndarray:
    if not output.recorded:
        raise ValueError("attention was not recorded for this output (use record_attention=True)")
    recs = [r for r in output.attention if r.stage == stage and r.layer == layer]
    if not recs:
        raise IndexError(f"no {stage} attention recorded at layer {layer}")
    if head is None:
        return np.mean([r.weights for r in recs], axis=0)
    for r in recs:
        if r.head == head:
            return r.weights
    raise IndexError(f"head {head} out of range")


def extract_encoder_attention(output: DetectorOutput, pixel: tuple[int, int], layer: int,
                              head: int | None = 0) -> np.ndarray:
    """Self-attention of the token under image ``pixel`` (row, col), as a [h, w] map.

    ``head=None`` averages over heads.
    """
    row, col = pixel
    H, W = output.image_shape
    if not (0 <= row < H and 0 <= col < W):
        raise IndexError(f"pixel {pixel} outside image of size {H}x{W}")
    wts = _select(output, "encoder-self", layer, head)
    h, w = output.feature_shape
    token = (row // output.stride) * w + col // output.stride
    return wts[token].reshape(h, w).copy()


def extract_decoder_cross_attention(output: DetectorOutput, query_id: int, layer: int,
                                    head: int | None = 0) -> np.ndarray:
    """Cross-attention of object query ``query_id`` over the feature map, as [h, w]."""
    if not 0 <= query_id < output.num_queries:
        raise IndexError(f"query_id {query_id} outside [0, {output.num_queries})")
    wts = _select(output, "decoder-cross", layer, head)
    return wts[query_id].reshape(output.feature_shape).copy()


def upsample_heatmap(heatmap: np.ndarray, stride: int) -> np.ndarray:
    """Spread each cell's mass evenly over its stride x stride pixel block."""
    return np.kron(heatmap, np.ones((stride, stride))) / (stride * stride)


# ---------------------------------------------------------------------------
# checkpoint file
#
# layout (all integers little-endian):
#   8 bytes   magic b"MDETRCK\x01"
#   4 bytes   uint32 header length N
#   N bytes   UTF-8 JSON header {"version": 1, "config": {...},
#             "tensors": [{"name", "shape", "offset"}], "extra": {...}}
#   payload   float64 '<f8' row-major data, offsets relative to payload start
# ---------------------------------------------------------------------------
CHECKPOINT_MAGIC = b"MDETRCK\x01"
CHECKPOINT_VERSION = 1


def checkpoint_bytes(model: MiniDETR, extra: dict | None = None) -> bytes:
    entries, blobs, offset = [], [], 0
    for name, arr in model.state_dict().items():
        blob = np.ascontiguousarray(arr, dtype="<f8").tobytes()
        entries.append({"name": name, "shape": list(arr.shape), "offset": offset})
        blobs.append(blob)
        offset += len(blob)
    header = json.dumps({"version": CHECKPOINT_VERSION, "config": model.config.to_dict(),
                         "tensors": entries, "extra": extra or {}}, sort_keys=True).encode()
    return b"".join([CHECKPOINT_MAGIC, struct.pack("<I", len(header)), header] + blobs)


def save_checkpoint(model: MiniDETR, path: str | Path, extra: dict | None = None) -> None:
    Path(path).write_bytes(checkpoint_bytes(model, extra))


def load_checkpoint(path: str | Path) -> tuple[MiniDETR, dict]:
    try:
        raw = Path(path).read_bytes()
    except FileNotFoundError:
        raise FileNotFoundError(f"checkpoint not found: {path}") from None
    if raw[:8] != CHECKPOINT_MAGIC:
        raise ValueError(f"{path}: not a mini-DETR checkpoint")
    (n,) = struct.unpack("<I", raw[8:12])
    header = json.loads(raw[12:12 + n].decode())
    if header.get("version") != CHECKPOINT_VERSION:
        raise ValueError(f"{path}: unsupported checkpoint version {header.get('version')}")
    payload = memoryview(raw)[12 + n:]
    state = {}
    for e in header["tensors"]:
        count = int(np.prod(e["shape"], dtype=np.int64))
        arr = np.frombuffer(payload, dtype="<f8", count=count, offset=e["offset"])
        state[e["name"]] = arr.reshape(e["shape"]).astype(np.float64)
    model = MiniDETR(ModelConfig.from_dict(header["config"]))
    model.load_state_dict(state)
    return model, header.get("extra", {})
