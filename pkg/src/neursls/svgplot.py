"""Plain SVG snapshot frames of multi-agent trajectories.

Past path colored, future path gray, each agent drawn as a ball of its radius,
obstacle bumps as shaded discs, targets as crosses.
"""
from __future__ import annotations

from xml.sax.saxutils import escape

import numpy as np

PALETTE = ("#1f77b4", "#d62728", "#2ca02c", "#ff7f0e", "#9467bd", "#8c564b",
           "#e377c2", "#17becf", "#bcbd22", "#7f7f7f", "#393b79", "#637939")


def _bounds(scenario, pos, pad=0.8):
    pts = [pos.reshape(-1, 2), scenario.params.targets]
    for ob in scenario.weights.obstacles:
        pts.append(np.atleast_2d(ob.center))
    allp = np.vstack(pts)
    lo, hi = allp.min(axis=0) - pad, allp.max(axis=0) + pad
    span = float(max(hi - lo))
    mid = (lo + hi) / 2
    return mid - span / 2, span


def snapshot_svg(scenario, x, t: int, size: int = 480) -> str:
    """Render the state trace ``x`` (shape ``(T+1, n)``) at step ``t``."""
    N = scenario.params.count
    pos = np.asarray(x).reshape(len(x), N, 4)[..., :2]
    lo, span = _bounds(scenario, pos)
    scale = size / span

    def px(p):
        # y axis points up in the figure
        return (p[0] - lo[0]) * scale, size - (p[1] - lo[1]) * scale

    out = [f'<svg xmlns="http://www.w3.org/2000/svg" width="{size}" height="{size}" '
           f'viewBox="0 0 {size} {size}">',
           f'<rect width="{size}" height="{size}" fill="white"/>']
    for ob in scenario.weights.obstacles:
        cx, cy = px(ob.center)
        for k, alpha in ((2.0, 0.15), (1.0, 0.35)):
            out.append(f'<circle cx="{cx:.2f}" cy="{cy:.2f}" r="{k * ob.width * scale:.2f}" '
                       f'fill="#8c6d31" fill-opacity="{alpha}"/>')
    for i in range(N):
        color = PALETTE[i % len(PALETTE)]
        past = " ".join("{:.2f},{:.2f}".format(*px(p)) for p in pos[: t + 1, i])
        future = " ".join("{:.2f},{:.2f}".format(*px(p)) for p in pos[t:, i])
        if len(pos) - t > 1:
            out.append(f'<polyline points="{future}" fill="none" stroke="#bbbbbb" '
                       f'stroke-width="1.5" stroke-dasharray="4,3"/>')
        if t > 0:
            out.append(f'<polyline points="{past}" fill="none" stroke="{color}" stroke-width="2"/>')
        tx, ty = px(scenario.params.targets[i])
        out.append(f'<path d="M{tx - 5:.2f},{ty - 5:.2f} L{tx + 5:.2f},{ty + 5:.2f} '
                   f'M{tx - 5:.2f},{ty + 5:.2f} L{tx + 5:.2f},{ty - 5:.2f}" stroke="{color}" stroke-width="1.5"/>')
        cx, cy = px(pos[t, i])
        out.append(f'<circle cx="{cx:.2f}" cy="{cy:.2f}" r="{scenario.radii[i] * scale:.2f}" '
                   f'fill="{color}" fill-opacity="0.5" stroke="{color}"/>')
    label = escape(f"{scenario.id}  t = {t * scenario.params.ts:.2f} s")
    out.append(f'<text x="8" y="18" font-family="sans-serif" font-size="13">{label}</text>')
    out.append("</svg>")
    return "\n".join(out) + "\n"


def snapshot_steps(scenario, horizon: int) -> list[int]:
    """Snapshot times (seconds) converted to steps, clipped to the horizon."""
    ts = scenario.params.ts
    steps = [min(horizon, max(0, int(round(tau / ts)))) for tau in scenario.snapshots]
    return steps or [horizon]
