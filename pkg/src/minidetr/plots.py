"""Minimal deterministic SVG charts: line, bar, scatter and heatmap.

Output is plain text with fixed float formatting, so identical inputs give
byte-identical files.
"""
from __future__ import annotations

import math
from typing import Sequence
from xml.sax.saxutils import escape

import numpy as np

WIDTH, HEIGHT = 480, 320
MARGIN = (40, 20, 20, 56)  # top, right, bottom-extra, left
PALETTE = ("#1f77b4", "#d62728", "#2ca02c", "#ff7f0e", "#9467bd", "#8c564b", "#e377c2", "#7f7f7f")


def _f(x: float) -> str:
    return f"{x:.2f}"


def _range(values: Sequence[float]) -> tuple[float, float]:
    vals = [v for v in values if math.isfinite(v)]
    if not vals:
        return 0.0, 1.0
    lo, hi = min(vals), max(vals)
    if hi - lo < 1e-12:
        lo, hi = lo - 0.5, hi + 0.5
    return lo, hi


class _Canvas:
    def __init__(self, title: str, xlabel: str = "", ylabel: str = "", width: int = WIDTH, height: int = HEIGHT):
        self.w, self.h = width, height
        top, right, bottom, left = MARGIN
        self.x0, self.x1 = left, width - right
        self.y0, self.y1 = top, height - 40 - bottom
        self.parts = [
            f'<svg xmlns="http://www.w3.org/2000/svg" width="{width}" height="{height}" '
            f'viewBox="0 0 {width} {height}" font-family="sans-serif" font-size="11">',
            f'<rect width="{width}" height="{height}" fill="white"/>',
            f'<text x="{width / 2:.1f}" y="18" text-anchor="middle" font-size="13">{escape(title)}</text>',
        ]
        if xlabel:
            self.parts.append(f'<text x="{(self.x0 + self.x1) / 2:.1f}" y="{height - 8}" '
                              f'text-anchor="middle">{escape(xlabel)}</text>')
        if ylabel:
            cy = (self.y0 + self.y1) / 2
            self.parts.append(f'<text x="12" y="{cy:.1f}" text-anchor="middle" '
                              f'transform="rotate(-90 12 {cy:.1f})">{escape(ylabel)}</text>')

    def axes(self, xlo, xhi, ylo, yhi, xticks=None) -> None:
        self.xlo, self.xhi, self.ylo, self.yhi = xlo, xhi, ylo, yhi
        p = self.parts
        p.append(f'<line x1="{self.x0}" y1="{self.y1}" x2="{self.x1}" y2="{self.y1}" stroke="black"/>')
        p.append(f'<line x1="{self.x0}" y1="{self.y0}" x2="{self.x0}" y2="{self.y1}" stroke="black"/>')
        for i in range(5):
            v = ylo + (yhi - ylo) * i / 4
            y = self.py(v)
            p.append(f'<line x1="{self.x0 - 3}" y1="{_f(y)}" x2="{self.x0}" y2="{_f(y)}" stroke="black"/>')
            p.append(f'<text x="{self.x0 - 5}" y="{_f(y + 4)}" text-anchor="end">{v:.3g}</text>')
        if xticks is None:
            xticks = [(xlo + (xhi - xlo) * i / 4, f"{xlo + (xhi - xlo) * i / 4:.3g}") for i in range(5)]
        for v, label in xticks:
            x = self.px(v)
            p.append(f'<line x1="{_f(x)}" y1="{self.y1}" x2="{_f(x)}" y2="{self.y1 + 3}" stroke="black"/>')
            p.append(f'<text x="{_f(x)}" y="{self.y1 + 15}" text-anchor="middle">{escape(label)}</text>')

    def px(self, v: float) -> float:
        return self.x0 + (v - self.xlo) / (self.xhi - self.xlo) * (self.x1 - self.x0)

    def py(self, v: float) -> float:
        return self.y1 - (v - self.ylo) / (self.yhi - self.ylo) * (self.y1 - self.y0)

    def legend(self, names: Sequence[str]) -> None:
        for i, name in enumerate(names):
            y = self.y0 + 4 + 14 * i
            self.parts.append(f'<rect x="{self.x1 - 110}" y="{y}" width="10" height="10" '
                              f'fill="{PALETTE[i % len(PALETTE)]}"/>')
            self.parts.append(f'<text x="{self.x1 - 96}" y="{y + 9}">{escape(name)}</text>')

    def render(self) -> str:
        return "\n".join(self.parts + ["</svg>"]) + "\n"


def line_chart(series: dict[str, tuple[Sequence[float], Sequence[float]]], title: str,
               xlabel: str = "", ylabel: str = "") -> str:
    """``series`` maps a name to (xs, ys); non-finite points are skipped."""
    c = _Canvas(title, xlabel, ylabel)
    xs = [x for xs_, _ in series.values() for x in xs_]
    ys = [y for _, ys_ in series.values() for y in ys_]
    c.axes(*_range(xs), *_range(ys))
    for i, (name, (sx, sy)) in enumerate(series.items()):
        pts = [(c.px(x), c.py(y)) for x, y in zip(sx, sy) if math.isfinite(x) and math.isfinite(y)]
        if not pts:
            continue
        color = PALETTE[i % len(PALETTE)]
        path = " ".join(f"{_f(x)},{_f(y)}" for x, y in pts)
        c.parts.append(f'<polyline points="{path}" fill="none" stroke="{color}" stroke-width="1.5"/>')
        for x, y in pts:
            c.parts.append(f'<circle cx="{_f(x)}" cy="{_f(y)}" r="2" fill="{color}"/>')
    if len(series) > 1:
        c.legend(list(series))
    return c.render()


def bar_chart(labels: Sequence[str], values: Sequence[float], title: str, xlabel: str = "",
              ylabel: str = "", groups: dict[str, Sequence[float]] | None = None) -> str:
    """Single bars, or grouped bars when ``groups`` (name -> values per label) is given."""
    groups = groups if groups is not None else {"": values}
    c = _Canvas(title, xlabel, ylabel)
    n = max(len(labels), 1)
    ys = [v for vals in groups.values() for v in vals]
    lo, hi = _range(ys + [0.0])
    c.axes(0.0, float(n), min(lo, 0.0), hi, xticks=[(i + 0.5, str(lab)) for i, lab in enumerate(labels)])
    k = len(groups)
    slot = (c.x1 - c.x0) / n
    bw = slot * 0.8 / k
    base = c.py(0.0)
    for gi, vals in enumerate(groups.values()):
        color = PALETTE[gi % len(PALETTE)]
        for i, v in enumerate(vals):
            if not math.isfinite(v):
                continue
            x = c.x0 + slot * i + slot * 0.1 + bw * gi
            y = c.py(v)
            c.parts.append(f'<rect x="{_f(x)}" y="{_f(min(y, base))}" width="{_f(bw)}" '
                           f'height="{_f(abs(base - y))}" fill="{color}"/>')
    if k > 1:
        c.legend(list(groups))
    return c.render()


def scatter_chart(xs: Sequence[float], ys: Sequence[float], title: str, xlabel: str = "", ylabel: str = "",
                  sizes: Sequence[float] | None = None, xlim=(0.0, 1.0), ylim=(0.0, 1.0)) -> str:
    """Points in a fixed box (normalised coordinates by default); ``sizes`` scale the marker radius."""
    c = _Canvas(title, xlabel, ylabel)
    c.axes(*xlim, *ylim)
    for i, (x, y) in enumerate(zip(xs, ys)):
        r = 2.0 if sizes is None else 1.0 + 10.0 * float(sizes[i])
        c.parts.append(f'<circle cx="{_f(c.px(x))}" cy="{_f(c.py(y))}" r="{_f(r)}" '
                       f'fill="{PALETTE[0]}" fill-opacity="0.5"/>')
    return c.render()


def heatmap(values: np.ndarray, title: str, cell: int = 0, highlight: tuple[int, int, int, int] | None = None) -> str:
    """Grey-scale grid of a 2-d array (max maps to white). ``highlight`` is a
    (row0, col0, row1, col1) rectangle outlined in red, end exclusive."""
    v = np.asarray(values, dtype=np.float64)
    rows, cols = v.shape
    cell = cell or max(2, 256 // max(rows, cols))
    W, H = cols * cell, rows * cell + 24
    hi = float(v.max()) if v.size and v.max() > 0 else 1.0
    parts = [f'<svg xmlns="http://www.w3.org/2000/svg" width="{W}" height="{H}" viewBox="0 0 {W} {H}" '
             f'font-family="sans-serif" font-size="11">',
             f'<text x="{W / 2:.1f}" y="15" text-anchor="middle">{escape(title)}</text>']
    for r in range(rows):
        for col in range(cols):
            g = int(round(255 * max(v[r, col], 0.0) / hi))
            parts.append(f'<rect x="{col * cell}" y="{24 + r * cell}" width="{cell}" height="{cell}" '
                         f'fill="rgb({g},{g},{g})"/>')
    if highlight is not None:
        r0, c0, r1, c1 = highlight
        parts.append(f'<rect x="{c0 * cell}" y="{24 + r0 * cell}" width="{(c1 - c0) * cell}" '
                     f'height="{(r1 - r0) * cell}" fill="none" stroke="red" stroke-width="1.5"/>')
    return "\n".join(parts + ["</svg>"]) + "\n"
