"""A minimal static SVG line chart for long-format plot rows."""
from __future__ import annotations

import math
from html import escape
from typing import Sequence

PALETTE = ("#1f77b4", "#d62728", "#2ca02c", "#9467bd", "#ff7f0e", "#8c564b")


def line_chart(rows: Sequence[dict], title: str = "", width: int = 480,
               height: int = 300) -> str:
    """One polyline per series with a translucent ±band; axes labelled by their ranges."""
    pad = 40
    pts = [r for r in rows if math.isfinite(r["y"])]
    head = (f'<svg xmlns="http://www.w3.org/2000/svg" width="{width}" height="{height}">'
            f'<text x="{pad}" y="20" font-size="13">{escape(title)}</text>')
    if not pts:
        return head + "</svg>\n"
    xs = [r["x"] for r in pts]
    lo = min(r["y"] - r["band"] for r in pts)
    hi = max(r["y"] + r["band"] for r in pts)
    x0, x1 = min(xs), max(xs)
    x1 = x1 if x1 > x0 else x0 + 1
    hi = hi if hi > lo else lo + 1.0

    def sx(x):
        return pad + (x - x0) / (x1 - x0) * (width - 2 * pad)

    def sy(y):
        return height - pad - (y - lo) / (hi - lo) * (height - 2 * pad)

    parts = [head,
             f'<rect x="{pad}" y="{pad}" width="{width - 2 * pad}" height="{height - 2 * pad}"'
             ' fill="none" stroke="#888"/>',
             f'<text x="{pad}" y="{height - 10}" font-size="10">{x0:g}</text>',
             f'<text x="{width - pad}" y="{height - 10}" font-size="10" text-anchor="end">'
             f'{x1:g}</text>',
             f'<text x="4" y="{height - pad}" font-size="10">{lo:.3g}</text>',
             f'<text x="4" y="{pad}" font-size="10">{hi:.3g}</text>']
    series = sorted({r["series"] for r in pts})
    for i, name in enumerate(series):
        color = PALETTE[i % len(PALETTE)]
        s = sorted((r for r in pts if r["series"] == name), key=lambda r: r["x"])
        upper = " ".join(f"{sx(r['x']):.1f},{sy(r['y'] + r['band']):.1f}" for r in s)
        lower = " ".join(f"{sx(r['x']):.1f},{sy(r['y'] - r['band']):.1f}" for r in reversed(s))
        line = " ".join(f"{sx(r['x']):.1f},{sy(r['y']):.1f}" for r in s)
        parts.append(f'<polygon points="{upper} {lower}" fill="{color}" opacity="0.2"/>')
        parts.append(f'<polyline points="{line}" fill="none" stroke="{color}"/>')
        parts.append(f'<text x="{width - pad + 4}" y="{pad + 14 * (i + 1)}" font-size="10" '
                     f'fill="{color}">{escape(name)}</text>')
    return "".join(parts) + "</svg>\n"
