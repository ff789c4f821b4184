"""Dependency-free static SVG line plot for objective-per-sweep curves."""
from __future__ import annotations

import math
from xml.sax.saxutils import escape

__all__ = ["write_svg"]


def write_svg(path, xs, ys, title: str = "", width: int = 480, height: int = 300) -> None:
    pts = [(float(x), float(y)) for x, y in zip(xs, ys) if math.isfinite(float(y))]
    pad = 48
    lines = [f'<svg xmlns="http://www.w3.org/2000/svg" width="{width}" height="{height}">',
             f'<text x="{width / 2}" y="20" text-anchor="middle" font-size="13">{escape(title)}</text>']
    if pts:
        x0, x1 = min(p[0] for p in pts), max(p[0] for p in pts)
        y0, y1 = min(p[1] for p in pts), max(p[1] for p in pts)
        if x1 == x0:
            x1 = x0 + 1
        if y1 == y0:
            y0, y1 = y0 - 0.5, y1 + 0.5

        def sx(x):
            return pad + (x - x0) / (x1 - x0) * (width - 2 * pad)

        def sy(y):
            return height - pad - (y - y0) / (y1 - y0) * (height - 2 * pad)

        poly = " ".join(f"{sx(x):.1f},{sy(y):.1f}" for x, y in pts)
        lines += [
            f'<line x1="{pad}" y1="{height - pad}" x2="{width - pad}" y2="{height - pad}" stroke="black"/>',
            f'<line x1="{pad}" y1="{pad}" x2="{pad}" y2="{height - pad}" stroke="black"/>',
            f'<polyline fill="none" stroke="steelblue" stroke-width="2" points="{poly}"/>',
            f'<text x="{pad - 4}" y="{sy(y1) + 4:.1f}" text-anchor="end" font-size="10">{y1:.6g}</text>',
            f'<text x="{pad - 4}" y="{sy(y0) + 4:.1f}" text-anchor="end" font-size="10">{y0:.6g}</text>',
            f'<text x="{width / 2}" y="{height - 12}" text-anchor="middle" font-size="11">sweep</text>',
        ]
        lines += [f'<circle cx="{sx(x):.1f}" cy="{sy(y):.1f}" r="3" fill="steelblue"/>' for x, y in pts]
    lines.append("</svg>")
    with open(path, "w") as fh:
        fh.write("\n".join(lines) + "\n")
