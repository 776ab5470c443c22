"""Minimal self-contained SVG line plots and heatmaps."""

from __future__ import annotations

import math
from typing import Sequence

import numpy as np

_COLORS = ["#2b8a3e", "#c92a2a", "#1864ab", "#e67700", "#5f3dc4", "#495057"]


def _fmt(v: float) -> str:
    return f"{v:.4g}"


def line_plot(
    series: Sequence[tuple[str, Sequence[float], Sequence[float]]],
    title: str = "",
    xlabel: str = "",
    ylabel: str = "",
    logy: bool = False,
    width: int = 640,
    height: int = 400,
) -> str:
    """``series`` is a list of ``(label, xs, ys)``; non-finite points are dropped."""
    ml, mr, mt, mb = 70, 150, 40, 50
    pts = []
    for label, xs, ys in series:
        xy = [
            (float(x), math.log10(y) if logy else float(y))
            for x, y in zip(xs, ys)
            if math.isfinite(y) and (not logy or y > 0)
        ]
        pts.append((label, xy))
    allx = [p[0] for _, xy in pts for p in xy] or [0.0, 1.0]
    ally = [p[1] for _, xy in pts for p in xy] or [0.0, 1.0]
    x0, x1 = min(allx), max(allx)
    y0, y1 = min(ally), max(ally)
    if x1 == x0:
        x1 = x0 + 1
    if y1 == y0:
        y1 = y0 + 1
    pw, ph = width - ml - mr, height - mt - mb

    def sx(x):
        return ml + (x - x0) / (x1 - x0) * pw

    def sy(y):
        return mt + ph - (y - y0) / (y1 - y0) * ph

    out = [
        f'<svg xmlns="http://www.w3.org/2000/svg" width="{width}" height="{height}" font-family="sans-serif" font-size="12">',
        f'<rect width="{width}" height="{height}" fill="white"/>',
        f'<text x="{width / 2}" y="20" text-anchor="middle" font-size="14">{title}</text>',
        f'<rect x="{ml}" y="{mt}" width="{pw}" height="{ph}" fill="none" stroke="black"/>',
    ]
    for k in range(5):
        fx = x0 + (x1 - x0) * k / 4
        fy = y0 + (y1 - y0) * k / 4
        ylab = _fmt(10**fy) if logy else _fmt(fy)
        out.append(f'<text x="{sx(fx):.1f}" y="{mt + ph + 16}" text-anchor="middle">{_fmt(fx)}</text>')
        out.append(f'<text x="{ml - 6}" y="{sy(fy) + 4:.1f}" text-anchor="end">{ylab}</text>')
    out.append(f'<text x="{ml + pw / 2}" y="{height - 10}" text-anchor="middle">{xlabel}</text>')
    out.append(
        f'<text x="16" y="{mt + ph / 2}" text-anchor="middle" transform="rotate(-90 16 {mt + ph / 2})">{ylabel}</text>'
    )
    for k, (label, xy) in enumerate(pts):
        color = _COLORS[k % len(_COLORS)]
        if xy:
            path = " ".join(f"{sx(x):.1f},{sy(y):.1f}" for x, y in xy)
            out.append(f'<polyline fill="none" stroke="{color}" stroke-width="1.5" points="{path}"/>')
        ly = mt + 16 * (k + 1)
        out.append(f'<line x1="{width - mr + 10}" y1="{ly - 4}" x2="{width - mr + 30}" y2="{ly - 4}" stroke="{color}" stroke-width="2"/>')
        out.append(f'<text x="{width - mr + 36}" y="{ly}">{label}</text>')
    out.append("</svg>")
    return "\n".join(out) + "\n"


def heatmap(M: np.ndarray, title: str = "", cell: int | None = None, max_cells: int = 256) -> str:
    """Diverging blue-white-red heatmap, symmetric color range; large matrices are block-averaged."""
    M = np.asarray(M, dtype=np.float64)
    k = M.shape[0]
    if k > max_cells:
        f = math.ceil(k / max_cells)
        pad = f * math.ceil(k / f) - k
        Mp = np.pad(M, ((0, pad), (0, pad)))
        m = Mp.shape[0] // f
        M = Mp.reshape(m, f, m, f).mean(axis=(1, 3))
        k = m
    cell = cell or max(1, 512 // k)
    vmax = float(np.max(np.abs(M))) or 1.0
    size = k * cell
    out = [
        f'<svg xmlns="http://www.w3.org/2000/svg" width="{size}" height="{size + 24}" font-family="sans-serif" font-size="12">',
        f'<text x="{size / 2}" y="16" text-anchor="middle">{title}</text>',
    ]
    for i in range(k):
        for j in range(k):
            v = M[i, j] / vmax
            if v >= 0:
                r, g, b = 255, int(255 * (1 - v)), int(255 * (1 - v))
            else:
                r, g, b = int(255 * (1 + v)), int(255 * (1 + v)), 255
            out.append(f'<rect x="{j * cell}" y="{24 + i * cell}" width="{cell}" height="{cell}" fill="rgb({r},{g},{b})"/>')
    out.append("</svg>")
    return "\n".join(out) + "\n"
