"""Deterministic SVG rendering of scenes and multi-mode predictions.

Map polylines are drawn in gray, ground-truth tracks as solid lines, and
predicted waypoints as circles whose hue steps through the prediction
horizon.  Each mode is one ``<g>`` group whose opacity scales with its
score, so higher-confidence modes render brighter.
"""

from __future__ import annotations

import colorsys

import numpy as np

from .errors import ValidationError
from .scene import SceneSample

_MAP_STYLE = {
    "lane": ("#9aa0a6", 0.6),
    "boundary": ("#5f6368", 1.0),
    "crosswalk": ("#b38f00", 0.8),
}
_GT_COLORS = ["#1a73e8", "#188038", "#d93025", "#9334e6", "#e37400", "#007b83"]


def _fmt(x: float) -> str:
    return f"{x:.2f}"


def _polyline(points, color, width, opacity=1.0, dash=None) -> str:
    pts = " ".join(f"{_fmt(p[0])},{_fmt(p[1])}" for p in points)
    dash_attr = f' stroke-dasharray="{dash}"' if dash else ""
    return (
        f'<polyline points="{pts}" fill="none" stroke="{color}" '
        f'stroke-width="{_fmt(width)}" stroke-opacity="{_fmt(opacity)}"{dash_attr}/>'
    )


def _step_color(step: int, total: int) -> str:
    hue = 0.66 * (1.0 - step / max(total - 1, 1))  # blue (early) to red (late)
    r, g, b = colorsys.hsv_to_rgb(hue, 0.85, 0.95)
    return f"#{int(r * 255):02x}{int(g * 255):02x}{int(b * 255):02x}"


def render_scene_svg(
    scene: SceneSample,
    predictions: list[dict] | None = None,
    width: int = 800,
    margin: float = 10.0,
) -> str:
    """Render one scene (and optional prediction records) to SVG text.

    ``predictions`` rows follow the predictions JSONL schema and must
    reference this scene's id; unknown ids raise :class:`ValidationError`.
    """
    predictions = predictions or []
    agent_ids = {a.id for a in scene.agents}
    for rec in predictions:
        if rec["scene_id"] != scene.scene_id:
            raise ValidationError(
                f"prediction for scene {rec['scene_id']!r} passed to {scene.scene_id!r}"
            )
        if rec["agent_id"] not in agent_ids:
            raise ValidationError(f"prediction references unknown agent {rec['agent_id']!r}")

    xs, ys = [], []
    for p in scene.map:
        xs.extend(p.points[:, 0])
        ys.extend(p.points[:, 1])
    for a in scene.agents:
        ok = a.valid_mask()
        xs.extend(a.states[ok, 0])
        ys.extend(a.states[ok, 1])
    for rec in predictions:
        for mode in rec["modes"]:
            wp = np.asarray(mode["waypoints"])
            xs.extend(wp[:, 0])
            ys.extend(wp[:, 1])
    xs, ys = np.asarray(xs), np.asarray(ys)
    x0, x1 = xs.min() - margin, xs.max() + margin
    y0, y1 = ys.min() - margin, ys.max() + margin
    scale = width / (x1 - x0)
    height = max(int(round((y1 - y0) * scale)), 1)

    def tx(pts):
        pts = np.asarray(pts, dtype=np.float64)
        return np.stack([(pts[..., 0] - x0) * scale, (y1 - pts[..., 1]) * scale], axis=-1)

    parts = [
        f'<svg xmlns="http://www.w3.org/2000/svg" width="{width}" height="{height}" '
        f'viewBox="0 0 {width} {height}">',
        f'<rect width="{width}" height="{height}" fill="#ffffff"/>',
        "<g id=\"map\">",
    ]
    for p in scene.map:
        color, w = _MAP_STYLE[p.polyline_type]
        parts.append(_polyline(tx(p.points), color, w * 2.0, dash="6,4" if p.polyline_type == "lane" else None))
    parts.append("</g>")

    parts.append('<g id="tracks">')
    for i, a in enumerate(scene.agents):
        ok = a.valid_mask()
        color = _GT_COLORS[i % len(_GT_COLORS)]
        pts = tx(a.states[ok, 0:2])
        obs_count = int(ok[: scene.t_obs].sum())
        if obs_count > 1:
            parts.append(_polyline(pts[:obs_count], color, 2.5))
        if len(pts) > obs_count:
            parts.append(_polyline(pts[obs_count - 1 :], color, 1.2, opacity=0.7))
    parts.append("</g>")

    if predictions:
        max_score = max(m["score"] for rec in predictions for m in rec["modes"])
        parts.append('<g id="predictions">')
        for rec in predictions:
            for k, mode in enumerate(rec["modes"]):
                rel = mode["score"] / max_score if max_score > 0 else 1.0
                opacity = 0.25 + 0.75 * rel
                wp = tx(mode["waypoints"])
                total = len(wp)
                circles = "".join(
                    f'<circle cx="{_fmt(p[0])}" cy="{_fmt(p[1])}" r="2.2" '
                    f'fill="{_step_color(j, total)}"/>'
                    for j, p in enumerate(wp)
                )
                parts.append(
                    f'<g id="mode-{rec["agent_id"]}-{k}" opacity="{_fmt(opacity)}">'
                    f"{circles}</g>"
                )
        parts.append("</g>")

    parts.append("</svg>")
    return "\n".join(parts) + "\n"
