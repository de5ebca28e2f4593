"""Minimal static SVG line charts."""

from __future__ import annotations

import math
from dataclasses import dataclass
from xml.sax.saxutils import escape

PALETTE = ("#1f77b4", "#d62728", "#2ca02c", "#9467bd", "#ff7f0e", "#8c564b", "#17becf")
WIDTH, HEIGHT = 640, 400
MARGIN = dict(left=70, right=150, top=40, bottom=50)


@dataclass
class Series:
    label: str
    x: list
    y: list
    lo: list | None = None
    hi: list | None = None
    dashed: bool = False


def _nice_ticks(lo, hi, n=5):
    if hi <= lo:
        hi = lo + 1.0
    raw = (hi - lo) / n
    mag = 10 ** math.floor(math.log10(raw))
    step = next(m * mag for m in (1, 2, 5, 10) if m * mag >= raw)
    start = math.ceil(lo / step) * step
    ticks = []
    t = start
    while t <= hi + 1e-12 * step:
        ticks.append(round(t, 12))
        t += step
    return ticks


def _fmt(v):
    return f"{v:.3g}"


def line_chart(series, title="", xlabel="", ylabel="", log_y=False, metadata="") -> str:
    """SVG text for ``series``; bands (lo, hi) are drawn as translucent areas."""
    def finite(v):
        return v is not None and math.isfinite(v) and (not log_y or v > 0)

    xs = [x for s in series for x in s.x]
    ys = []
    for s in series:
        for arr in (s.y, s.lo, s.hi):
            if arr is not None:
                ys.extend(v for v in arr if finite(v))
    if not xs or not ys:
        raise ValueError("nothing to plot")
    x0, x1 = min(xs), max(xs)
    if x1 == x0:
        x1 = x0 + 1
    tr = (lambda v: math.log10(v)) if log_y else (lambda v: v)
    y0, y1 = tr(min(ys)), tr(max(ys))
    if y1 == y0:
        y0, y1 = y0 - 0.5, y1 + 0.5
    pad = 0.05 * (y1 - y0)
    y0, y1 = y0 - pad, y1 + pad
    pw = WIDTH - MARGIN["left"] - MARGIN["right"]
    ph = HEIGHT - MARGIN["top"] - MARGIN["bottom"]

    def px(x):
        return MARGIN["left"] + (x - x0) / (x1 - x0) * pw

    def py(y):
        return MARGIN["top"] + (1 - (tr(y) - y0) / (y1 - y0)) * ph

    out = [
        f'<svg xmlns="http://www.w3.org/2000/svg" width="{WIDTH}" height="{HEIGHT}" '
        f'viewBox="0 0 {WIDTH} {HEIGHT}" font-family="sans-serif" font-size="12">',
        f"<metadata>{escape(metadata)}</metadata>",
        f'<rect width="{WIDTH}" height="{HEIGHT}" fill="white"/>',
        f'<text x="{WIDTH / 2:.1f}" y="22" text-anchor="middle" font-size="14">{escape(title)}</text>',
        f'<rect x="{MARGIN["left"]}" y="{MARGIN["top"]}" width="{pw}" height="{ph}" '
        'fill="none" stroke="black"/>',
    ]
    for t in _nice_ticks(x0, x1):
        X = px(t)
        out.append(f'<line x1="{X:.1f}" y1="{MARGIN["top"] + ph}" x2="{X:.1f}" '
                   f'y2="{MARGIN["top"] + ph + 5}" stroke="black"/>')
        out.append(f'<text x="{X:.1f}" y="{MARGIN["top"] + ph + 18}" text-anchor="middle">{_fmt(t)}</text>')
    if log_y:
        yt = [10.0**e for e in range(math.ceil(y0), math.floor(y1) + 1)]
    else:
        yt = _nice_ticks(y0, y1)
    for t in yt:
        Y = py(t)
        out.append(f'<line x1="{MARGIN["left"] - 5}" y1="{Y:.1f}" x2="{MARGIN["left"]}" '
                   f'y2="{Y:.1f}" stroke="black"/>')
        out.append(f'<text x="{MARGIN["left"] - 8}" y="{Y + 4:.1f}" text-anchor="end">{_fmt(t)}</text>')
    out.append(f'<text x="{MARGIN["left"] + pw / 2:.1f}" y="{HEIGHT - 10}" text-anchor="middle">'
               f"{escape(xlabel)}</text>")
    out.append(f'<text x="16" y="{MARGIN["top"] + ph / 2:.1f}" text-anchor="middle" '
               f'transform="rotate(-90 16 {MARGIN["top"] + ph / 2:.1f})">{escape(ylabel)}</text>')
    out.append(f'<clipPath id="plot"><rect x="{MARGIN["left"]}" y="{MARGIN["top"]}" '
               f'width="{pw}" height="{ph}"/></clipPath>')
    for i, s in enumerate(series):
        color = PALETTE[i % len(PALETTE)]
        if s.lo is not None and s.hi is not None:
            pts = [(x, lo, hi) for x, lo, hi in zip(s.x, s.lo, s.hi) if finite(lo) and finite(hi)]
            if pts:
                upper = " ".join(f"{px(x):.2f},{py(hi):.2f}" for x, _, hi in pts)
                lower = " ".join(f"{px(x):.2f},{py(lo):.2f}" for x, lo, _ in reversed(pts))
                out.append(f'<polygon points="{upper} {lower}" fill="{color}" fill-opacity="0.2" '
                           'stroke="none" clip-path="url(#plot)"/>')
        pts = " ".join(f"{px(x):.2f},{py(y):.2f}" for x, y in zip(s.x, s.y) if finite(y))
        dash = ' stroke-dasharray="6,4"' if s.dashed else ""
        out.append(f'<polyline points="{pts}" fill="none" stroke="{color}" stroke-width="1.5"{dash} '
                   'clip-path="url(#plot)"/>')
        ly = MARGIN["top"] + 14 + 18 * i
        lx = MARGIN["left"] + pw + 10
        out.append(f'<line x1="{lx}" y1="{ly - 4}" x2="{lx + 20}" y2="{ly - 4}" stroke="{color}" '
                   f'stroke-width="2"{dash}/>')
        out.append(f'<text x="{lx + 25}" y="{ly}">{escape(s.label)}</text>')
    out.append("</svg>")
    return "\n".join(out) + "\n"
