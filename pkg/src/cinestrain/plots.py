"""Minimal self-contained SVG line charts (no plotting dependency)."""

from __future__ import annotations

import numpy as np

_PALETTE = ("#1f6fb2", "#d45500", "#2e8b57", "#8b2e8b", "#b22222", "#5f5f5f")


def _ticks(lo, hi, n=5):
    if hi <= lo:
        hi = lo + 1.0
    raw = (hi - lo) / max(n - 1, 1)
    mag = 10.0 ** np.floor(np.log10(raw))
    step = min(s for s in (1.0 * mag, 2.0 * mag, 5.0 * mag, 10.0 * mag) if s >= raw)
    first = np.ceil(lo / step) * step
    vals = np.arange(first, hi + 0.5 * step, step)
    return [float(v) for v in vals]


def _fmt(v):
    return f"{v:.6g}"


def line_chart(series, path, title="", xlabel="", ylabel="",
               width=640, height=400) -> None:
    """Write an SVG polyline chart.

    ``series`` is a list of (label, x, y) with 1-D arrays; axes are shared.
    """
    ml, mr, mt, mb = 62, 16, 30, 44
    pw, ph = width - ml - mr, height - mt - mb
    xs = [np.asarray(x, dtype=np.float64) for _, x, _ in series]
    ys = [np.asarray(y, dtype=np.float64) for _, _, y in series]
    x_lo = min(x.min() for x in xs)
    x_hi = max(x.max() for x in xs)
    y_lo = min(y.min() for y in ys)
    y_hi = max(y.max() for y in ys)
    if x_hi == x_lo:
        x_hi = x_lo + 1.0
    if y_hi == y_lo:
        y_lo, y_hi = y_lo - 0.5, y_hi + 0.5
    pad = 0.04 * (y_hi - y_lo)
    y_lo, y_hi = y_lo - pad, y_hi + pad

    def px(x):
        return ml + (x - x_lo) / (x_hi - x_lo) * pw

    def py(y):
        return mt + ph - (y - y_lo) / (y_hi - y_lo) * ph

    out = [
        f'<svg xmlns="http://www.w3.org/2000/svg" width="{width}" height="{height}" '
        f'viewBox="0 0 {width} {height}" font-family="sans-serif" font-size="11">',
        f'<rect width="{width}" height="{height}" fill="white"/>',
        f'<text x="{width / 2:.1f}" y="18" text-anchor="middle" font-size="13">{title}</text>',
    ]
    for tv in _ticks(x_lo, x_hi):
        x = px(tv)
        out.append(f'<line x1="{x:.1f}" y1="{mt + ph}" x2="{x:.1f}" y2="{mt + ph + 4}" stroke="black"/>')
        out.append(f'<text x="{x:.1f}" y="{mt + ph + 16}" text-anchor="middle">{_fmt(tv)}</text>')
    for tv in _ticks(y_lo, y_hi):
        y = py(tv)
        out.append(f'<line x1="{ml - 4}" y1="{y:.1f}" x2="{ml}" y2="{y:.1f}" stroke="black"/>')
        out.append(f'<line x1="{ml}" y1="{y:.1f}" x2="{ml + pw}" y2="{y:.1f}" stroke="#dddddd"/>')
        out.append(f'<text x="{ml - 7}" y="{y + 3.5:.1f}" text-anchor="end">{_fmt(tv)}</text>')
    out.append(f'<rect x="{ml}" y="{mt}" width="{pw}" height="{ph}" fill="none" stroke="black"/>')
    for i, (label, x, y) in enumerate(series):
        color = _PALETTE[i % len(_PALETTE)]
        pts = " ".join(f"{px(a):.2f},{py(b):.2f}" for a, b in
                       zip(np.asarray(x, dtype=np.float64), np.asarray(y, dtype=np.float64)))
        out.append(f'<polyline points="{pts}" fill="none" stroke="{color}" stroke-width="1.5"/>')
        lx, ly = ml + pw - 8, mt + 14 + 14 * i
        out.append(f'<line x1="{lx - 26}" y1="{ly - 4}" x2="{lx - 8}" y2="{ly - 4}" '
                   f'stroke="{color}" stroke-width="1.5"/>')
        out.append(f'<text x="{lx - 30}" y="{ly}" text-anchor="end">{label}</text>')
    out.append(f'<text x="{ml + pw / 2:.1f}" y="{height - 8}" text-anchor="middle">{xlabel}</text>')
    out.append(f'<text x="16" y="{mt + ph / 2:.1f}" text-anchor="middle" '
               f'transform="rotate(-90 16 {mt + ph / 2:.1f})">{ylabel}</text>')
    out.append("</svg>")
    with open(path, "w", encoding="ascii") as f:
        f.write("\n".join(out) + "\n")
