"""Tiny static SVG line-chart writer."""

import math
from xml.sax.saxutils import escape

_COLORS = ["#1f77b4", "#ff7f0e", "#2ca02c", "#d62728", "#9467bd"]


def _ticks(lo, hi, n=5):
    if hi <= lo:
        hi = lo + 1.0
    return [lo + (hi - lo) * i / (n - 1) for i in range(n)]


def line_chart(series, title="", xlabel="", ylabel="", logx=False, logy=False, width=640, height=400):
    """``series`` is a list of ``(xs, ys, label)``; non-finite or non-positive-on-log points are dropped."""
    pad_l, pad_r, pad_t, pad_b = 70, 20, 40, 50
    fx = math.log10 if logx else float
    fy = math.log10 if logy else float
    clean = []
    for xs, ys, label in series:
        pts = [(fx(x), fy(y)) for x, y in zip(xs, ys)
               if math.isfinite(x) and math.isfinite(y) and (not logx or x > 0) and (not logy or y > 0)]
        clean.append((pts, label))
    allpts = [p for pts, _ in clean for p in pts] or [(0.0, 0.0)]
    x0, x1 = min(p[0] for p in allpts), max(p[0] for p in allpts)
    y0, y1 = min(p[1] for p in allpts), max(p[1] for p in allpts)
    if x1 == x0:
        x1 = x0 + 1.0
    if y1 == y0:
        y1 = y0 + 1.0
    pw, ph = width - pad_l - pad_r, height - pad_t - pad_b

    def sx(x):
        return pad_l + (x - x0) / (x1 - x0) * pw

    def sy(y):
        return pad_t + ph - (y - y0) / (y1 - y0) * ph

    out = [f'<svg xmlns="http://www.w3.org/2000/svg" width="{width}" height="{height}" font-family="sans-serif" font-size="12">',
           f'<rect width="{width}" height="{height}" fill="white"/>',
           f'<text x="{width / 2}" y="20" text-anchor="middle" font-size="14">{escape(title)}</text>',
           f'<rect x="{pad_l}" y="{pad_t}" width="{pw}" height="{ph}" fill="none" stroke="black"/>']
    for t in _ticks(x0, x1):
        lab = f"{10 ** t:.3g}" if logx else f"{t:.4g}"
        out.append(f'<text x="{sx(t):.1f}" y="{pad_t + ph + 16}" text-anchor="middle">{lab}</text>')
    for t in _ticks(y0, y1):
        lab = f"{10 ** t:.3g}" if logy else f"{t:.4g}"
        out.append(f'<text x="{pad_l - 6}" y="{sy(t) + 4:.1f}" text-anchor="end">{lab}</text>')
    out.append(f'<text x="{pad_l + pw / 2}" y="{height - 10}" text-anchor="middle">{escape(xlabel)}</text>')
    out.append(f'<text x="15" y="{pad_t + ph / 2}" text-anchor="middle" '
               f'transform="rotate(-90 15 {pad_t + ph / 2})">{escape(ylabel)}</text>')
    for i, (pts, label) in enumerate(clean):
        color = _COLORS[i % len(_COLORS)]
        if pts:
            path = " ".join(f"{sx(x):.2f},{sy(y):.2f}" for x, y in pts)
            out.append(f'<polyline fill="none" stroke="{color}" stroke-width="1.5" points="{path}"/>')
        out.append(f'<text x="{pad_l + 10}" y="{pad_t + 16 + 14 * i}" fill="{color}">{escape(label)}</text>')
    out.append("</svg>")
    return "\n".join(out) + "\n"
