"""Tiny dependency-free SVG line plots for batch artifacts."""

from __future__ import annotations

import math
from typing import Optional, Sequence

_PALETTE = ["#1f77b4", "#d62728", "#2ca02c", "#9467bd", "#ff7f0e",
            "#8c564b", "#17becf", "#7f7f7f"]

_W, _H = 760, 480
_ML, _MR, _MT, _MB = 70, 20, 40, 50


def _esc(s: str) -> str:
    return (s.replace("&", "&amp;").replace("<", "&lt;").replace(">", "&gt;"))


def _ticks(lo: float, hi: float, n: int = 5) -> list[float]:
    if hi <= lo:
        return [lo]
    span = hi - lo
    step = 10 ** math.floor(math.log10(span / n))
    for mult in (1, 2, 5, 10):
        if span / (step * mult) <= n:
            step *= mult
            break
    first = math.ceil(lo / step) * step
    out = []
    v = first
    while v <= hi + 1e-12 * span:
        out.append(v)
        v += step
    return out or [lo]


def line_plot(series: Sequence[tuple[str, Sequence[tuple[float, float]]]],
              path: str, *, title: str = "", xlabel: str = "",
              ylabel: str = "", logx: bool = False,
              marker_series: Optional[Sequence[tuple[str, Sequence[tuple[float, float]]]]] = None
              ) -> None:
    """Write an SVG with one polyline per series (and optional point-only
    series, e.g. observed samples under fitted curves)."""
    marker_series = marker_series or []
    all_pts = [p for _, pts in list(series) + list(marker_series) for p in pts]
    if not all_pts:
        raise ValueError("nothing to plot")

    def tx(x: float) -> float:
        return math.log10(x) if logx else x

    xs = [tx(x) for x, _ in all_pts]
    ys = [y for _, y in all_pts]
    x0, x1 = min(xs), max(xs)
    y0, y1 = min(ys), max(ys)
    if x1 == x0:
        x1 = x0 + 1.0
    if y1 == y0:
        y1 = y0 + 1.0
    pad = 0.04 * (y1 - y0)
    y0, y1 = y0 - pad, y1 + pad
    iw = _W - _ML - _MR
    ih = _H - _MT - _MB

    def px(x: float) -> float:
        return _ML + (tx(x) - x0) / (x1 - x0) * iw

    def py(y: float) -> float:
        return _MT + (y1 - y) / (y1 - y0) * ih

    parts = [
        f'<svg xmlns="http://www.w3.org/2000/svg" width="{_W}" height="{_H}" '
        f'viewBox="0 0 {_W} {_H}" font-family="sans-serif" font-size="12">',
        f'<rect width="{_W}" height="{_H}" fill="white"/>',
        f'<text x="{_W / 2}" y="22" text-anchor="middle" font-size="15">{_esc(title)}</text>',
    ]
    # axes and ticks
    parts.append(f'<line x1="{_ML}" y1="{_MT + ih}" x2="{_ML + iw}" '
                 f'y2="{_MT + ih}" stroke="black"/>')
    parts.append(f'<line x1="{_ML}" y1="{_MT}" x2="{_ML}" y2="{_MT + ih}" stroke="black"/>')
    for v in _ticks(y0, y1):
        parts.append(f'<line x1="{_ML - 4}" y1="{py(v)}" x2="{_ML + iw}" y2="{py(v)}" '
                     f'stroke="#dddddd"/>')
        parts.append(f'<text x="{_ML - 8}" y="{py(v) + 4}" text-anchor="end">{v:.3g}</text>')
    for v in _ticks(x0, x1):
        label = f"1e{v:.0f}" if logx else f"{v:.3g}"
        xpix = _ML + (v - x0) / (x1 - x0) * iw
        parts.append(f'<line x1="{xpix}" y1="{_MT + ih}" x2="{xpix}" '
                     f'y2="{_MT + ih + 4}" stroke="black"/>')
        parts.append(f'<text x="{xpix}" y="{_MT + ih + 18}" text-anchor="middle">{label}</text>')
    parts.append(f'<text x="{_ML + iw / 2}" y="{_H - 12}" text-anchor="middle">{_esc(xlabel)}</text>')
    parts.append(f'<text x="16" y="{_MT + ih / 2}" text-anchor="middle" '
                 f'transform="rotate(-90 16 {_MT + ih / 2})">{_esc(ylabel)}</text>')

    legend_y = _MT + 6
    for idx, (label, pts) in enumerate(series):
        color = _PALETTE[idx % len(_PALETTE)]
        coords = " ".join(f"{px(x):.2f},{py(y):.2f}" for x, y in pts)
        parts.append(f'<polyline points="{coords}" fill="none" stroke="{color}" '
                     f'stroke-width="1.6"/>')
        parts.append(f'<rect x="{_ML + iw - 150}" y="{legend_y}" width="14" height="3" '
                     f'fill="{color}"/>')
        parts.append(f'<text x="{_ML + iw - 132}" y="{legend_y + 6}">{_esc(label)}</text>')
        legend_y += 16
    for idx, (label, pts) in enumerate(marker_series):
        color = _PALETTE[(idx + len(series)) % len(_PALETTE)]
        for x, y in pts:
            parts.append(f'<circle cx="{px(x):.2f}" cy="{py(y):.2f}" r="2.4" '
                         f'fill="{color}" fill-opacity="0.55"/>')
        if label:
            parts.append(f'<text x="{_ML + iw - 132}" y="{legend_y + 6}" '
                         f'fill="{color}">{_esc(label)}</text>')
            legend_y += 16
    parts.append("</svg>")
    with open(path, "w", encoding="utf-8") as fh:
        fh.write("\n".join(parts) + "\n")
