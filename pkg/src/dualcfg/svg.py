"""Bare-bones SVG polyline and scatter charts."""
from __future__ import annotations

from xml.sax.saxutils import escape

import numpy as np

W, H, PAD = 480, 320, 48
COLORS = ("#1f77b4", "#d62728", "#2ca02c", "#9467bd", "#ff7f0e", "#17becf")


def _frame(xs, ys):
    x0, x1 = float(np.min(xs)), float(np.max(xs))
    y0, y1 = float(np.min(ys)), float(np.max(ys))
    if x1 == x0:
        x1 = x0 + 1.0
    if y1 == y0:
        y1 = y0 + 1.0

    def sx(x):
        return PAD + (x - x0) / (x1 - x0) * (W - 2 * PAD)

    def sy(y):
        return H - PAD - (y - y0) / (y1 - y0) * (H - 2 * PAD)

    return sx, sy, (x0, x1, y0, y1)


def _doc(body: list, title: str, xlabel: str, ylabel: str, bounds) -> str:
    x0, x1, y0, y1 = bounds
    head = [
        f'<svg xmlns="http://www.w3.org/2000/svg" width="{W}" height="{H}" viewBox="0 0 {W} {H}">',
        f'<rect width="{W}" height="{H}" fill="white"/>',
        f'<text x="{W / 2:.1f}" y="20" text-anchor="middle" font-size="14">{escape(title)}</text>',
        f'<line x1="{PAD}" y1="{H - PAD}" x2="{W - PAD}" y2="{H - PAD}" stroke="black"/>',
        f'<line x1="{PAD}" y1="{PAD}" x2="{PAD}" y2="{H - PAD}" stroke="black"/>',
        f'<text x="{W / 2:.1f}" y="{H - 10}" text-anchor="middle" font-size="12">{escape(xlabel)}</text>',
        f'<text x="14" y="{H / 2:.1f}" text-anchor="middle" font-size="12" transform="rotate(-90 14 {H / 2:.1f})">{escape(ylabel)}</text>',
        f'<text x="{PAD}" y="{H - PAD + 16}" font-size="10">{x0:.4g}</text>',
        f'<text x="{W - PAD}" y="{H - PAD + 16}" font-size="10" text-anchor="end">{x1:.4g}</text>',
        f'<text x="{PAD - 4}" y="{H - PAD}" font-size="10" text-anchor="end">{y0:.4g}</text>',
        f'<text x="{PAD - 4}" y="{PAD + 4}" font-size="10" text-anchor="end">{y1:.4g}</text>',
    ]
    return "\n".join(head + body + ["</svg>"]) + "\n"


def line_chart(series: dict, title: str = "", xlabel: str = "", ylabel: str = "") -> str:
    """``series`` maps a legend name to ``(xs, ys)``."""
    all_x = np.concatenate([np.asarray(x, float) for x, _ in series.values()])
    all_y = np.concatenate([np.asarray(y, float) for _, y in series.values()])
    sx, sy, bounds = _frame(all_x, all_y)
    body = []
    for i, (name, (xs, ys)) in enumerate(series.items()):
        color = COLORS[i % len(COLORS)]
        pts = " ".join(f"{sx(x):.2f},{sy(y):.2f}" for x, y in zip(xs, ys))
        body.append(f'<polyline fill="none" stroke="{color}" stroke-width="1.5" points="{pts}"/>')
        body.append(f'<text x="{W - PAD + 2}" y="{PAD + 14 * i}" font-size="10" fill="{color}">{escape(str(name))}</text>')
    return _doc(body, title, xlabel, ylabel, bounds)


def scatter(points, title: str = "", xlabel: str = "", ylabel: str = "", max_points: int = 2000) -> str:
    pts = np.asarray(points, float)[:max_points]
    sx, sy, bounds = _frame(pts[:, 0], pts[:, 1])
    body = [f'<circle cx="{sx(x):.2f}" cy="{sy(y):.2f}" r="1.5" fill="{COLORS[0]}" fill-opacity="0.5"/>' for x, y in pts[:, :2]]
    return _doc(body, title, xlabel, ylabel, bounds)
