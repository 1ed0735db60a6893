"""Fifteen image corruptions, five severities each.

Parameter tables are tuned so that distortion (MSE to the clean image)
grows strictly with severity; they are not the ImageNet-C constants. All
randomness comes from ``np.random.default_rng(seed)`` and is drawn once per
call, so severities of one seed share their noise fields.
"""
from __future__ import annotations

import numpy as np
from scipy import ndimage
from scipy.fft import dctn, idctn

FAMILIES = (
    "gaussian-noise", "shot-noise", "impulse-noise",
    "defocus-blur", "glass-blur", "motion-blur", "zoom-blur",
    "snow", "frost", "fog",
    "brightness", "contrast", "elastic", "pixelate", "jpeg-like-blocking",
)

SEVERITY_TABLES: dict[str, tuple] = {
    "gaussian-noise": (0.04, 0.07, 0.10, 0.14, 0.19),  # sigma
    "shot-noise": (60.0, 30.0, 15.0, 8.0, 4.0),  # photons per unit intensity
    "impulse-noise": (0.02, 0.05, 0.09, 0.15, 0.24),  # salt+pepper fraction
    "defocus-blur": (1.0, 2.0, 3.0, 4.5, 6.0),  # disk radius (px)
    "glass-blur": ((0.5, 1, 1), (0.7, 1, 2), (0.9, 2, 2), (1.1, 3, 2), (1.4, 4, 3)),  # sigma, max shift, iterations
    "motion-blur": (3, 5, 9, 13, 19),  # kernel length (px)
    "zoom-blur": (1.06, 1.11, 1.16, 1.21, 1.28),  # max zoom
    "snow": ((0.02, 0.10), (0.04, 0.20), (0.07, 0.30), (0.10, 0.40), (0.14, 0.50)),  # flake density, whitening
    "frost": (0.25, 0.35, 0.45, 0.55, 0.65),  # blend weight
    "fog": (0.20, 0.30, 0.40, 0.50, 0.62),  # blend weight
    "brightness": (0.1, 0.2, 0.3, 0.4, 0.5),  # additive shift
    "contrast": (0.6, 0.45, 0.3, 0.2, 0.1),  # contrast factor
    "elastic": (1.5, 3.0, 4.5, 6.5, 9.0),  # displacement amplitude (px)
    "pixelate": (2, 3, 4, 6, 8),  # block size (px)
    "jpeg-like-blocking": (0.02, 0.05, 0.10, 0.18, 0.30),  # base quantiser step
}

# JPEG luminance table, scaled so the DC step is 1
_JPEG_Q = np.array([
    [16, 11, 10, 16, 24, 40, 51, 61], [12, 12, 14, 19, 26, 58, 60, 55],
    [14, 13, 16, 24, 40, 57, 69, 56], [14, 17, 22, 29, 51, 87, 80, 62],
    [18, 22, 37, 56, 68, 109, 103, 77], [24, 35, 55, 64, 81, 104, 113, 92],
    [49, 64, 78, 87, 103, 121, 120, 101], [72, 92, 95, 98, 112, 100, 103, 99],
], dtype=np.float64) / 16.0


def _per_channel(img: np.ndarray, fn) -> np.ndarray:
    return np.stack([fn(img[..., c]) for c in range(img.shape[-1])], axis=-1)


def gaussian_noise(x, sigma, rng):
    return x + sigma * rng.standard_normal(x.shape)


def shot_noise(x, lam, rng):
    return rng.poisson(np.clip(x, 0, 1) * lam) / lam


def impulse_noise(x, amount, rng):
    u = rng.random(x.shape)
    out = x.copy()
    out[u < amount / 2] = 1.0
    out[u > 1 - amount / 2] = 0.0
    return out


def _disk(radius: float) -> np.ndarray:
    r = int(np.ceil(radius))
    yy, xx = np.mgrid[-r:r + 1, -r:r + 1]
    k = (xx ** 2 + yy ** 2 <= radius ** 2).astype(np.float64)
    return k / k.sum()


def defocus_blur(x, radius, rng):
    k = _disk(radius)
    return _per_channel(x, lambda c: ndimage.convolve(c, k, mode="reflect"))


def glass_blur(x, params, rng):
    sigma, shift, iters = params
    h, w = x.shape[:2]
    out = _per_channel(x, lambda c: ndimage.gaussian_filter(c, sigma, mode="reflect"))
    yy, xx = np.mgrid[0:h, 0:w]
    for _ in range(iters):
        dy = rng.integers(-shift, shift + 1, (h, w))
        dx = rng.integers(-shift, shift + 1, (h, w))
        out = out[np.clip(yy + dy, 0, h - 1), np.clip(xx + dx, 0, w - 1)]
    return _per_channel(out, lambda c: ndimage.gaussian_filter(c, sigma, mode="reflect"))


def _line_kernel(length: int, angle: float) -> np.ndarray:
    r = length // 2
    k = np.zeros((2 * r + 1, 2 * r + 1))
    for t in np.linspace(-r, r, 4 * length + 1):
        k[int(round(r + t * np.sin(angle))), int(round(r + t * np.cos(angle)))] = 1.0
    return k / k.sum()


def motion_blur(x, length, rng):
    k = _line_kernel(int(length), rng.uniform(-np.pi / 4, np.pi / 4))
    return _per_channel(x, lambda c: ndimage.convolve(c, k, mode="reflect"))


def zoom_blur(x, max_zoom, rng):
    h, w = x.shape[:2]
    cy, cx = (h - 1) / 2, (w - 1) / 2
    yy, xx = np.mgrid[0:h, 0:w].astype(np.float64)
    acc = x.copy()
    zooms = np.arange(1.0, max_zoom + 1e-9, 0.02)[1:]
    for z in zooms:
        coords = [cy + (yy - cy) / z, cx + (xx - cx) / z]
        acc += _per_channel(x, lambda c: ndimage.map_coordinates(c, coords, order=1, mode="nearest"))
    return acc / (len(zooms) + 1)


def _smooth_field(rng, shape, sigma) -> np.ndarray:
    f = ndimage.gaussian_filter(rng.standard_normal(shape), sigma, mode="wrap")
    f -= f.min()
    return f / max(f.max(), 1e-12)


def snow(x, params, rng):
    density, whiten = params
    h, w = x.shape[:2]
    u = rng.random((h, w))
    angle = rng.uniform(-np.pi / 3, -np.pi / 6)
    flakes = (u < density).astype(np.float64)
    flakes = ndimage.convolve(flakes, _line_kernel(5, angle), mode="wrap") * 3.0
    gray = x.mean(axis=-1, keepdims=True)
    base = (1 - whiten) * x + whiten * np.maximum(x, gray * 1.5 + 0.5)
    return base + flakes[..., None]


def frost(x, weight, rng):
    h, w = x.shape[:2]
    tex = 0.5 * _smooth_field(rng, (h, w), 1.0) + 0.5 * _smooth_field(rng, (h, w), 4.0)
    ice = np.stack([0.75 + 0.2 * tex, 0.8 + 0.2 * tex, 0.9 + 0.1 * tex], axis=-1)
    return (1 - weight) * x + weight * ice


def fog(x, weight, rng):
    h, w = x.shape[:2]
    f = sum(_smooth_field(rng, (h, w), s) / (i + 1) for i, s in enumerate((16.0, 8.0, 4.0)))
    f = f / f.max()
    haze = (0.65 + 0.35 * f)[..., None]
    return (1 - weight) * x + weight * haze


def brightness(x, shift, rng):
    return x + shift


def contrast(x, factor, rng):
    m = x.mean()
    return (x - m) * factor + m


def elastic(x, amplitude, rng):
    h, w = x.shape[:2]
    dy = (_smooth_field(rng, (h, w), 6.0) * 2 - 1) * amplitude
    dx = (_smooth_field(rng, (h, w), 6.0) * 2 - 1) * amplitude
    yy, xx = np.mgrid[0:h, 0:w].astype(np.float64)
    coords = [yy + dy, xx + dx]
    return _per_channel(x, lambda c: ndimage.map_coordinates(c, coords, order=1, mode="reflect"))


def pixelate(x, block, rng):
    h, w = x.shape[:2]
    block = int(block)
    out = np.empty_like(x)
    for y0 in range(0, h, block):
        for x0 in range(0, w, block):
            tile = x[y0:y0 + block, x0:x0 + block]
            out[y0:y0 + block, x0:x0 + block] = tile.mean(axis=(0, 1))
    return out


def jpeg_like_blocking(x, step, rng):
    h, w = x.shape[:2]
    H, W = -(-h // 8) * 8, -(-w // 8) * 8
    pad = np.pad(x, ((0, H - h), (0, W - w), (0, 0)), mode="edge")
    blocks = pad.reshape(H // 8, 8, W // 8, 8, -1).transpose(0, 2, 4, 1, 3)
    coef = dctn(blocks, axes=(-2, -1), norm="ortho")
    q = step * 8 * _JPEG_Q
    coef = np.round(coef / q) * q
    rec = idctn(coef, axes=(-2, -1), norm="ortho")
    return rec.transpose(0, 3, 1, 4, 2).reshape(H, W, -1)[:h, :w]


_FUNCS = {
    "gaussian-noise": gaussian_noise, "shot-noise": shot_noise, "impulse-noise": impulse_noise,
    "defocus-blur": defocus_blur, "glass-blur": glass_blur, "motion-blur": motion_blur,
    "zoom-blur": zoom_blur, "snow": snow, "frost": frost, "fog": fog, "brightness": brightness,
    "contrast": contrast, "elastic": elastic, "pixelate": pixelate, "jpeg-like-blocking": jpeg_like_blocking,
}


def apply_corruption(image: np.ndarray, family: str, severity: int, seed: int = 0, param=None) -> np.ndarray:
    """Corrupt ``image`` ([H,W,3] in [0,1]); ``param`` overrides the table entry."""
    if family not in _FUNCS:
        raise ValueError(f"unknown corruption family {family!r}")
    if not isinstance(severity, (int, np.integer)) or not 1 <= severity <= 5:
        raise ValueError(f"severity must be an integer in 1..5, got {severity!r}")
    if param is None:
        param = SEVERITY_TABLES[family][severity - 1]
    rng = np.random.default_rng(seed)
    x = np.asarray(image, dtype=np.float64)
    return np.clip(_FUNCS[family](x, param, rng), 0.0, 1.0)
