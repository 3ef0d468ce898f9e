"""Dependency-free SVG renderings of scenes, samples, and transport trajectories.

Scenes live in the [-4, 4]^2 domain. Prohibited regions render as filled blue
squares, data/targets as green outlines, flow samples as solid green outlines,
and trajectories as polyline segments colored from blue (start time) to red
(end time).
"""

from __future__ import annotations

import numpy as np

from .tasks import Box, SceneRecord

HALF_EXTENT = 4.0


def _sx(x: float, size: int) -> float:
    return (x + HALF_EXTENT) / (2 * HALF_EXTENT) * size


def _sy(y: float, size: int) -> float:
    # flip: SVG y grows downward
    return (HALF_EXTENT - y) / (2 * HALF_EXTENT) * size


def _rect(b: Box, size: int, style: str) -> str:
    px = _sx(b.cx - b.w / 2, size)
    py = _sy(b.cy + b.w / 2, size)
    side = b.w / (2 * HALF_EXTENT) * size
    return f'<rect x="{px:.2f}" y="{py:.2f}" width="{side:.2f}" height="{side:.2f}" {style}/>'


def _time_color(frac: float) -> str:
    r = int(220 * frac + 30 * (1 - frac))
    g = 40
    b = int(30 * frac + 220 * (1 - frac))
    return f"rgb({r},{g},{b})"


def render_scene_svg(
    scene: SceneRecord | None,
    samples: list[list[Box]] | None = None,
    trajectories: list | None = None,
    size: int = 480,
) -> str:
    """One SVG document; any argument may be omitted.

    ``trajectories`` is a list of (t, rows (N, >=2)) snapshots from one transport.
    """
    parts = [
        f'<svg xmlns="http://www.w3.org/2000/svg" width="{size}" height="{size}" '
        f'viewBox="0 0 {size} {size}">',
        f'<rect x="0" y="0" width="{size}" height="{size}" fill="white" stroke="black" '
        'stroke-width="1"/>',
    ]
    # light frame ticks at integer coordinates
    for q in range(-3, 4):
        px = _sx(q, size)
        parts.append(
            f'<line x1="{px:.2f}" y1="0" x2="{px:.2f}" y2="{size}" stroke="#eeeeee" stroke-width="1"/>'
        )
        py = _sy(q, size)
        parts.append(
            f'<line x1="0" y1="{py:.2f}" x2="{size}" y2="{py:.2f}" stroke="#eeeeee" stroke-width="1"/>'
        )
    if scene is not None:
        for b in scene.prohibited:
            parts.append(_rect(b, size, 'fill="#4477cc" fill-opacity="0.55" stroke="#224488"'))
        for b in scene.targets:
            parts.append(_rect(b, size, 'fill="none" stroke="#22aa44" stroke-width="2" stroke-dasharray="4,3"'))
    if trajectories:
        times = [t for t, _ in trajectories]
        t0, t1 = times[0], times[-1]
        span = (t1 - t0) or 1.0
        n = trajectories[0][1].shape[0]
        for i in range(n):
            for (ta, xa), (tb, xb) in zip(trajectories[:-1], trajectories[1:]):
                frac = (0.5 * (ta + tb) - t0) / span
                parts.append(
                    f'<line x1="{_sx(xa[i, 0], size):.2f}" y1="{_sy(xa[i, 1], size):.2f}" '
                    f'x2="{_sx(xb[i, 0], size):.2f}" y2="{_sy(xb[i, 1], size):.2f}" '
                    f'stroke="{_time_color(frac)}" stroke-width="1.5"/>'
                )
    if samples:
        for boxes in samples:
            for b in boxes:
                parts.append(_rect(b, size, 'fill="none" stroke="#117733" stroke-width="2"'))
    parts.append("</svg>")
    return "\n".join(parts)
