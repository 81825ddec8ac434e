"""Minimal static SVG 1.1 line plots."""

from __future__ import annotations

import math
from xml.sax.saxutils import escape

import numpy as np

PALETTE = ("#1f77b4", "#d62728", "#2ca02c", "#ff7f0e", "#9467bd", "#8c564b", "#e377c2", "#17becf")
WIDTH, HEIGHT = 640, 400
LEFT, RIGHT, TOP, BOTTOM = 78, 20, 36, 52


def _ticks(lo: float, hi: float, count: int = 5) -> list[float]:
    if hi <= lo:
        return [lo]
    raw = (hi - lo) / count
    mag = 10 ** math.floor(math.log10(raw))
    step = next(m * mag for m in (1, 2, 5, 10) if m * mag >= raw)
    start = math.ceil(lo / step) * step
    return [start + i * step for i in range(int((hi - start) / step + 1e-9) + 1)]


def _thin(x: np.ndarray, y: np.ndarray, max_points: int) -> tuple[np.ndarray, np.ndarray]:
    """Keep min and max of each bucket so spikes survive decimation."""
    if len(x) <= max_points:
        return x, y
    buckets = max_points // 2
    edges = np.linspace(0, len(x), buckets + 1).astype(int)
    keep = []
    for a, b in zip(edges[:-1], edges[1:]):
        seg = y[a:b]
        i, j = a + int(np.argmin(seg)), a + int(np.argmax(seg))
        keep.extend(sorted({i, j}))
    idx = np.array(keep)
    return x[idx], y[idx]


def line_plot(series, title: str, xlabel: str, ylabel: str, logy: bool = False,
              max_points: int = 1500) -> str:
    """Render ``series`` (a list of ``(label, x, y)``) as an SVG document."""
    prepared = []
    for label, x, y in series:
        x = np.asarray(x, dtype=float)
        y = np.asarray(y, dtype=float)
        ok = np.isfinite(x) & np.isfinite(y)
        if logy:
            ok &= y > 0
        x, y = x[ok], y[ok]
        if logy:
            y = np.log10(y)
        prepared.append((label, *_thin(x, y, max_points)))
    xs = [p[1] for p in prepared if len(p[1])]
    ys = [p[2] for p in prepared if len(p[2])]
    x_lo, x_hi = (min(a.min() for a in xs), max(a.max() for a in xs)) if xs else (0.0, 1.0)
    y_lo, y_hi = (min(a.min() for a in ys), max(a.max() for a in ys)) if ys else (0.0, 1.0)
    if x_hi == x_lo:
        x_hi = x_lo + 1.0
    if y_hi == y_lo:
        pad = abs(y_lo) * 0.1 or 1.0
        y_lo, y_hi = y_lo - pad, y_hi + pad
    pw, ph = WIDTH - LEFT - RIGHT, HEIGHT - TOP - BOTTOM

    def sx(v):
        return LEFT + (v - x_lo) / (x_hi - x_lo) * pw

    def sy(v):
        return TOP + (1 - (v - y_lo) / (y_hi - y_lo)) * ph

    out = [
        '<?xml version="1.0" encoding="UTF-8"?>',
        f'<svg xmlns="http://www.w3.org/2000/svg" version="1.1" width="{WIDTH}" height="{HEIGHT}" '
        f'viewBox="0 0 {WIDTH} {HEIGHT}">',
        f'<rect x="0" y="0" width="{WIDTH}" height="{HEIGHT}" fill="white"/>',
        f'<text x="{WIDTH / 2:.1f}" y="22" text-anchor="middle" font-family="sans-serif" '
        f'font-size="15">{escape(title)}</text>',
        f'<rect x="{LEFT}" y="{TOP}" width="{pw}" height="{ph}" fill="none" stroke="#444"/>',
    ]
    for v in _ticks(x_lo, x_hi):
        X = sx(v)
        out.append(f'<line x1="{X:.2f}" y1="{TOP + ph}" x2="{X:.2f}" y2="{TOP + ph + 5}" stroke="#444"/>')
        out.append(f'<text x="{X:.2f}" y="{TOP + ph + 18}" text-anchor="middle" font-family="sans-serif" '
                   f'font-size="11">{v:g}</text>')
    for v in _ticks(y_lo, y_hi):
        Y = sy(v)
        label = f"1e{v:g}" if logy else f"{v:.4g}"
        out.append(f'<line x1="{LEFT - 5}" y1="{Y:.2f}" x2="{LEFT + pw}" y2="{Y:.2f}" stroke="#ddd"/>')
        out.append(f'<text x="{LEFT - 8}" y="{Y + 4:.2f}" text-anchor="end" font-family="sans-serif" '
                   f'font-size="11">{label}</text>')
    out.append(f'<text x="{LEFT + pw / 2:.1f}" y="{HEIGHT - 12}" text-anchor="middle" '
               f'font-family="sans-serif" font-size="12">{escape(xlabel)}</text>')
    out.append(f'<text x="16" y="{TOP + ph / 2:.1f}" text-anchor="middle" font-family="sans-serif" '
               f'font-size="12" transform="rotate(-90 16 {TOP + ph / 2:.1f})">{escape(ylabel)}</text>')
    for k, (label, x, y) in enumerate(prepared):
        color = PALETTE[k % len(PALETTE)]
        if len(x):
            pts = " ".join(f"{sx(a):.2f},{sy(b):.2f}" for a, b in zip(x, y))
            out.append(f'<polyline fill="none" stroke="{color}" stroke-width="1.3" points="{pts}"/>')
        if label:
            ly = TOP + 14 + 16 * k
            out.append(f'<line x1="{LEFT + pw - 150}" y1="{ly - 4}" x2="{LEFT + pw - 130}" y2="{ly - 4}" '
                       f'stroke="{color}" stroke-width="2"/>')
            out.append(f'<text x="{LEFT + pw - 125}" y="{ly}" font-family="sans-serif" '
                       f'font-size="11">{escape(label)}</text>')
    out.append("</svg>")
    return "\n".join(out) + "\n"
