"""Occlusion, adversarial stickers and corruptions as pure seeded functions."""
from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

from .boxes import cxcywh_to_xyxy
from .corruptions import FAMILIES, SEVERITY_TABLES, apply_corruption

GRID = (10, 10)
STICKER_SIDE_RANGE = (0.1, 0.3)  # of min(image side)
DEFAULT_STICKER_SIZE = 16


def round_half_up(x: float) -> int:
    return int(math.floor(x + 0.5 + 1e-9))


def patch_edges(n: int, parts: int) -> list[int]:
    """Patch boundaries along one axis; the last patch absorbs the remainder."""
    size = n // parts
    return [i * size for i in range(parts)] + [n]


def patch_slices(shape: tuple[int, int], grid: tuple[int, int] = GRID) -> list[tuple[slice, slice]]:
    """Pixel slices of every grid patch, row-major patch index order."""
    ye, xe = patch_edges(shape[0], grid[0]), patch_edges(shape[1], grid[1])
    return [(slice(ye[r], ye[r + 1]), slice(xe[c], xe[c + 1])) for r in range(grid[0]) for c in range(grid[1])]


# ---------------------------------------------------------------------------
# occlusion
# ---------------------------------------------------------------------------
@dataclass
class OcclusionSpec:
    ratio: float
    mode: str = "random"  # random | salient
    seed: int = 0
    region: tuple[float, float, float, float] | None = None  # cxcywh, salient mode
    grid: tuple[int, int] = GRID

    def __post_init__(self):
        if not 0.0 <= self.ratio <= 1.0:
            raise ValueError(f"occlusion ratio must be in [0,1], got {self.ratio}")
        if self.mode not in ("random", "salient"):
            raise ValueError(f"unknown occlusion mode {self.mode!r}")
        self.grid = tuple(self.grid)
        if self.region is not None:
            self.region = tuple(float(v) for v in self.region)

    def to_dict(self) -> dict:
        return {"kind": "occlusion", "ratio": self.ratio, "mode": self.mode, "seed": self.seed,
                "region": None if self.region is None else list(self.region), "grid": list(self.grid)}


def _zero_patches(image: np.ndarray, patches: Sequence[int], grid) -> np.ndarray:
    out = np.array(image, dtype=np.float64, copy=True)
    sl = patch_slices(out.shape[:2], grid)
    for p in patches:
        out[sl[p]] = 0.0
    return out


def random_patches(spec: OcclusionSpec) -> list[int]:
    n = spec.grid[0] * spec.grid[1]
    k = round_half_up(spec.ratio * n)
    rng = np.random.default_rng(spec.seed)
    return sorted(int(p) for p in rng.choice(n, size=k, replace=False))


def random_occlude(image: np.ndarray, spec: OcclusionSpec) -> np.ndarray:
    """Zero ``round(ratio * patches)`` grid patches drawn uniformly without replacement."""
    return _zero_patches(image, random_patches(spec), spec.grid)


@dataclass
class SaliencyMap:
    scores: np.ndarray  # [grid rows, grid cols]
    region_patches: list[int]  # patch indices eligible for occlusion
    method: str


def region_patches(shape: tuple[int, int], region, grid=GRID) -> list[int]:
    """Indices of patches whose pixels overlap the normalised cxcywh ``region``."""
    if region is None:
        return list(range(grid[0] * grid[1]))
    H, W = shape
    x0, y0, x1, y1 = cxcywh_to_xyxy(np.asarray(region))
    px0, px1 = x0 * W, x1 * W
    py0, py1 = y0 * H, y1 * H
    out = []
    for i, (ys, xs) in enumerate(patch_slices(shape, grid)):
        if xs.start < px1 and xs.stop > px0 and ys.start < py1 and ys.stop > py0:
            out.append(i)
    return out


def edge_energy(image: np.ndarray) -> np.ndarray:
    """Per-pixel central-difference gradient magnitude summed over channels."""
    img = np.asarray(image, dtype=np.float64)
    gy, gx = np.gradient(img, axis=(0, 1))
    return np.sqrt(gx ** 2 + gy ** 2).sum(axis=-1)


def attention_energy(image: np.ndarray, model) -> np.ndarray:
    """Last-layer decoder cross-attention (head mean) of the most confident query, per pixel."""
    from .model import extract_decoder_cross_attention, upsample_heatmap

    out = model.forward(image, record_attention=True)
    top = int(out.probs()[:, :-1].max(axis=1).argmax())
    heat = extract_decoder_cross_attention(out, top, model.config.dec_layers - 1, head=None)
    return upsample_heatmap(heat, out.stride)


def saliency_map(image: np.ndarray, model=None, region=None, method: str = "attention",
                 grid: tuple[int, int] = GRID) -> SaliencyMap:
    if method == "attention":
        if model is None:
            raise ValueError("attention saliency needs a model")
        energy = attention_energy(image, model)
    elif method == "edge-energy":
        energy = edge_energy(image)
    else:
        raise ValueError(f"unknown saliency method {method!r}")
    shape = image.shape[:2]
    allowed = region_patches(shape, region, grid)
    if not allowed:
        raise ValueError("saliency region does not intersect the image grid")
    scores = np.zeros(grid[0] * grid[1])
    for i, (ys, xs) in enumerate(patch_slices(shape, grid)):
        scores[i] = energy[ys, xs].sum()
    mask = np.zeros_like(scores, dtype=bool)
    mask[allowed] = True
    scores[~mask] = 0.0
    return SaliencyMap(scores.reshape(grid), allowed, method)


def salient_patches(spec: OcclusionSpec, smap: SaliencyMap) -> list[int]:
    region = smap.region_patches
    if not region:
        raise ValueError("salient occlusion needs a non-empty region")
    k = round_half_up(spec.ratio * len(region))
    flat = smap.scores.reshape(-1)
    ranked = sorted(region, key=lambda p: (-flat[p], p))
    return sorted(ranked[:k])


def salient_occlude(image: np.ndarray, spec: OcclusionSpec, smap: SaliencyMap) -> np.ndarray:
    """Zero the ``round(ratio * |region|)`` highest-scoring region patches (ties: lower index first)."""
    return _zero_patches(image, salient_patches(spec, smap), spec.grid)


# ---------------------------------------------------------------------------
# stickers
# ---------------------------------------------------------------------------
@dataclass
class StickerSpec:
    patch: np.ndarray | None = None  # [h, w, 3]; None = seeded random texture
    location: tuple[int, int] | None = None  # (x, y) of the top-left corner, pixels
    scale: float | None = None
    seed: int = 0
    alpha: np.ndarray | None = None  # [h, w] bool, which patch pixels are pasted
    patch_size: int = DEFAULT_STICKER_SIZE

    def to_dict(self) -> dict:
        if self.patch is not None:
            raise ValueError("stickers with explicit patch pixels are not serialisable; store the patch as an image")
        return {"kind": "sticker", "location": None if self.location is None else list(self.location),
                "scale": self.scale, "seed": self.seed, "patch_size": self.patch_size}


@dataclass
class Placement:
    patch: np.ndarray
    alpha: np.ndarray
    x: int
    y: int
    height: int
    width: int

    @property
    def rectangle(self) -> tuple[int, int, int, int]:
        """(y0, x0, y1, x1), end exclusive."""
        return self.y, self.x, self.y + self.height, self.x + self.width


def default_sticker(seed: int, size: int = DEFAULT_STICKER_SIZE) -> np.ndarray:
    """High-frequency random RGB texture."""
    return np.random.default_rng([seed, 7]).random((size, size, 3))


def _scaled_size(patch_shape, scale: float) -> tuple[int, int]:
    return max(1, round_half_up(patch_shape[0] * scale)), max(1, round_half_up(patch_shape[1] * scale))


def place_sticker(image_shape: tuple[int, int], spec: StickerSpec) -> Placement:
    """Resolve random draws of ``spec`` into a concrete placement."""
    H, W = image_shape[:2]
    patch = default_sticker(spec.seed, spec.patch_size) if spec.patch is None else np.asarray(spec.patch, dtype=np.float64)
    alpha = np.ones(patch.shape[:2], dtype=bool) if spec.alpha is None else np.asarray(spec.alpha, dtype=bool)
    rng = np.random.default_rng(spec.seed)
    ph, pw = patch.shape[:2]
    lo_side = STICKER_SIDE_RANGE[0] * min(H, W)
    if max(_scaled_size((ph, pw), lo_side / max(ph, pw))) > min(H, W) and spec.scale is None:
        raise ValueError("sticker does not fit the image even at the minimum scale")
    for _ in range(1000):
        if spec.scale is None:
            side = rng.uniform(*STICKER_SIDE_RANGE) * min(H, W)
            scale = side / max(ph, pw)
        else:
            if spec.scale <= 0:
                raise ValueError("sticker scale must be positive")
            scale = spec.scale
        sh, sw = _scaled_size((ph, pw), scale)
        if sh > H or sw > W:
            if spec.scale is not None:
                raise ValueError(f"scaled sticker {sh}x{sw} larger than image {H}x{W}")
            continue
        if spec.location is None:
            x = int(rng.integers(0, W - sw + 1))
            y = int(rng.integers(0, H - sh + 1))
        else:
            x, y = (int(v) for v in spec.location)
            if x < 0 or y < 0 or x + sw > W or y + sh > H:
                raise ValueError(f"sticker at ({x},{y}) of size {sw}x{sh} leaves the {W}x{H} image")
        # nearest-neighbour resampling
        ri = np.minimum(((np.arange(sh) + 0.5) * ph / sh).astype(int), ph - 1)
        ci = np.minimum(((np.arange(sw) + 0.5) * pw / sw).astype(int), pw - 1)
        return Placement(patch[ri][:, ci], alpha[ri][:, ci], x, y, sh, sw)
    raise ValueError("could not place the sticker inside the image")


def apply_sticker(image: np.ndarray, spec: StickerSpec) -> np.ndarray:
    """Scale the patch (nearest neighbour) and overwrite the image at its location."""
    pl = place_sticker(image.shape, spec)
    out = np.array(image, dtype=np.float64, copy=True)
    region = out[pl.y:pl.y + pl.height, pl.x:pl.x + pl.width]
    region[pl.alpha] = np.clip(pl.patch[pl.alpha], 0.0, 1.0)
    return out


# ---------------------------------------------------------------------------
# corruptions
# ---------------------------------------------------------------------------
@dataclass
class CorruptionSpec:
    family: str
    severity: int
    seed: int = 0
    param: float | tuple | None = field(default=None)  # table override

    def __post_init__(self):
        if self.family not in FAMILIES:
            raise ValueError(f"unknown corruption family {self.family!r}")
        if not 1 <= int(self.severity) <= 5 or int(self.severity) != self.severity:
            raise ValueError(f"severity must be in 1..5, got {self.severity}")
        self.severity = int(self.severity)

    def to_dict(self) -> dict:
        return {"kind": "corruption", "family": self.family, "severity": self.severity, "seed": self.seed,
                "param": self.param}


def corrupt(image: np.ndarray, spec: CorruptionSpec) -> np.ndarray:
    return apply_corruption(image, spec.family, spec.severity, spec.seed, spec.param)


# ---------------------------------------------------------------------------
# tagged specs
# ---------------------------------------------------------------------------
def spec_from_dict(d: dict):
    d = dict(d)
    kind = d.pop("kind", None)
    if kind == "occlusion":
        return OcclusionSpec(**d)
    if kind == "sticker":
        if d.get("location") is not None:
            d["location"] = tuple(d["location"])
        return StickerSpec(**d)
    if kind == "corruption":
        if isinstance(d.get("param"), list):
            d["param"] = tuple(d["param"])
        return CorruptionSpec(**d)
    raise ValueError(f"unknown perturbation kind {kind!r}")


def apply_perturbation(image: np.ndarray, spec, model=None, saliency_method: str = "attention") -> np.ndarray:
    if isinstance(spec, OcclusionSpec):
        if spec.mode == "random":
            return random_occlude(image, spec)
        smap = saliency_map(image, model, spec.region, saliency_method, spec.grid)
        return salient_occlude(image, spec, smap)
    if isinstance(spec, StickerSpec):
        return apply_sticker(image, spec)
    if isinstance(spec, CorruptionSpec):
        return corrupt(image, spec)
    raise TypeError(f"not a perturbation spec: {spec!r}")


__all__ = [
    "FAMILIES", "SEVERITY_TABLES", "GRID", "OcclusionSpec", "StickerSpec", "CorruptionSpec", "SaliencyMap",
    "Placement", "random_occlude", "salient_occlude", "saliency_map", "apply_sticker", "place_sticker",
    "corrupt", "spec_from_dict", "apply_perturbation", "patch_slices", "random_patches", "salient_patches",
    "region_patches", "edge_energy",
]
