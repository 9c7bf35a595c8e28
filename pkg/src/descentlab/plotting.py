"""Dependency-free SVG line charts with shaded +-1 standard-error bands."""

from __future__ import annotations

import math
from dataclasses import dataclass
from xml.sax.saxutils import escape

import numpy as np

PALETTE = ("#1f77b4", "#d62728", "#2ca02c", "#ff7f0e", "#9467bd", "#8c564b", "#e377c2", "#17becf")


@dataclass
class Series:
    label: str
    x: np.ndarray
    mean: np.ndarray
    stderr: np.ndarray


def _ticks(lo: float, hi: float, count: int = 5) -> list[float]:
    if hi <= lo:
        return [lo]
    raw = (hi - lo) / count
    mag = 10 ** math.floor(math.log10(raw))
    step = next(m * mag for m in (1, 2, 5, 10) if m * mag >= raw)
    start = math.ceil(lo / step) * step
    return [start + i * step for i in range(int((hi - start) / step + 1e-9) + 1)]


def _fmt(v: float) -> str:
    return f"{v:.4g}"


def render_svg(series: list[Series], *, title: str = "", xlabel: str = "", ylabel: str = "",
               log_y: bool = False, width: int = 720, height: int = 440) -> str:
    """One ``<path>`` per series for the mean, one ``<polygon>`` per band."""
    if not series:
        raise ValueError("nothing to plot")
    left, right, top, bottom = 70, 160, 40, 50
    pw, ph = width - left - right, height - top - bottom

    xs = np.concatenate([s.x for s in series])
    lows = np.concatenate([s.mean - np.nan_to_num(s.stderr) for s in series])
    highs = np.concatenate([s.mean + np.nan_to_num(s.stderr) for s in series])
    x0, x1 = float(np.nanmin(xs)), float(np.nanmax(xs))
    if x1 == x0:
        x0, x1 = x0 - 0.5, x1 + 0.5

    if log_y:
        positive = np.concatenate([s.mean[s.mean > 0] for s in series] + [lows[lows > 0]])
        if positive.size == 0:
            raise ValueError("log-scale y needs positive values")
        ylo, yhi = math.log10(positive.min()), math.log10(np.nanmax(highs))
        ty = lambda v: math.log10(max(v, 10 ** ylo))  # noqa: E731
    else:
        ylo, yhi = float(np.nanmin(lows)), float(np.nanmax(highs))
        ty = float
    if yhi == ylo:
        ylo, yhi = ylo - 0.5, yhi + 0.5
    pad = 0.05 * (yhi - ylo)
    ylo, yhi = ylo - pad, yhi + pad

    def px(v):
        return left + (v - x0) / (x1 - x0) * pw

    def py(v):
        return top + (1 - (ty(v) - ylo) / (yhi - ylo)) * ph

    out = [
        '<?xml version="1.0" encoding="UTF-8"?>',
        f'<svg xmlns="http://www.w3.org/2000/svg" width="{width}" height="{height}" '
        f'viewBox="0 0 {width} {height}" font-family="sans-serif" font-size="12">',
        f'<rect x="0" y="0" width="{width}" height="{height}" fill="white"/>',
        f'<g class="axes" stroke="black" fill="none">'
        f'<line x1="{left}" y1="{top + ph}" x2="{left + pw}" y2="{top + ph}"/>'
        f'<line x1="{left}" y1="{top}" x2="{left}" y2="{top + ph}"/></g>',
    ]
    for t in _ticks(x0, x1):
        out.append(f'<line x1="{px(t):.2f}" y1="{top + ph}" x2="{px(t):.2f}" y2="{top + ph + 5}" stroke="black"/>')
        out.append(f'<text x="{px(t):.2f}" y="{top + ph + 18}" text-anchor="middle">{_fmt(t)}</text>')
    for t in _ticks(ylo, yhi):
        label = _fmt(10 ** t) if log_y else _fmt(t)
        y = top + (1 - (t - ylo) / (yhi - ylo)) * ph
        out.append(f'<line x1="{left - 5}" y1="{y:.2f}" x2="{left}" y2="{y:.2f}" stroke="black"/>')
        out.append(f'<text x="{left - 8}" y="{y + 4:.2f}" text-anchor="end">{label}</text>')

    for i, s in enumerate(series):
        color = PALETTE[i % len(PALETTE)]
        ok = np.isfinite(s.mean)
        x, m, e = s.x[ok], s.mean[ok], np.nan_to_num(s.stderr[ok])
        if len(x) == 0:
            continue
        band = [(px(a), py(b)) for a, b in zip(x, m + e)] + [(px(a), py(b)) for a, b in zip(x[::-1], (m - e)[::-1])]
        pts = " ".join(f"{a:.2f},{b:.2f}" for a, b in band)
        out.append(f'<polygon class="band" points="{pts}" fill="{color}" fill-opacity="0.2" stroke="none"/>')
        d = " ".join(f"{'M' if j == 0 else 'L'}{px(a):.2f},{py(b):.2f}" for j, (a, b) in enumerate(zip(x, m)))
        out.append(f'<path class="series" d="{d}" stroke="{color}" stroke-width="2" fill="none"/>')
        ly = top + 14 + 18 * i
        out.append(f'<line x1="{left + pw + 12}" y1="{ly}" x2="{left + pw + 32}" y2="{ly}" stroke="{color}" stroke-width="2"/>')
        out.append(f'<text x="{left + pw + 38}" y="{ly + 4}">{escape(s.label)}</text>')

    if title:
        out.append(f'<text x="{left + pw / 2}" y="{top - 14}" text-anchor="middle" font-size="14">{escape(title)}</text>')
    if xlabel:
        out.append(f'<text x="{left + pw / 2}" y="{height - 10}" text-anchor="middle">{escape(xlabel)}</text>')
    if ylabel:
        out.append(f'<text transform="translate(16,{top + ph / 2}) rotate(-90)" text-anchor="middle">{escape(ylabel)}</text>')
    out.append("</svg>")
    return "\n".join(out) + "\n"
