"""Deterministic bird's-eye-view SVG rendering.

The ego vehicle sits at the canvas center with +x pointing right and +y up.
Each track gets a color derived from a stable hash of its id, so the same
object keeps its color across frames and runs.
"""

from __future__ import annotations

import colorsys
import zlib
from dataclasses import dataclass
from typing import Mapping, Sequence
from xml.sax.saxutils import escape, quoteattr

import numpy as np

from tbakit.geometry import Box3D


@dataclass(frozen=True)
class RenderStyle:
    meters_per_unit: float = 0.1
    extent_m: float = 100.0
    point_size: float = 1.0
    max_points: int = 6000
    box_stroke: float = 2.0
    trajectory_stroke: float = 1.5
    trajectory_dash: str = "6,4"
    background: str = "#ffffff"
    point_color: str = "#9a9a9a"

    def __post_init__(self):
        if self.meters_per_unit <= 0 or self.extent_m <= 0:
            raise ValueError("scale and extent must be positive")
        if self.max_points < 0:
            raise ValueError("max_points must be >= 0")

    @property
    def size(self) -> float:
        return self.extent_m / self.meters_per_unit


def track_color(track_id: str) -> str:
    h = zlib.crc32(track_id.encode("utf-8"))
    hue = (h & 0xFFFF) / 0x10000
    light = 0.38 + 0.12 * ((h >> 16) & 0xFF) / 0xFF
    r, g, b = colorsys.hls_to_rgb(hue, light, 0.75)
    return "#{:02x}{:02x}{:02x}".format(round(255 * r), round(255 * g), round(255 * b))


def subsample(points: np.ndarray, budget: int) -> np.ndarray:
    """Evenly strided subset of at most ``budget`` rows (always the same rows)."""
    if len(points) <= budget:
        return points
    if budget == 0:
        return points[:0]
    return points[np.linspace(0, len(points) - 1, budget).round().astype(np.int64)]


def _fmt(v: float) -> str:
    s = f"{v:.2f}"
    return "0.00" if s == "-0.00" else s


def render_bev(
    boxes: Sequence[tuple[str, Box3D]] = (),
    trajectories: Mapping[str, Sequence[tuple[float, float]]] | None = None,
    points=None,
    style: RenderStyle = RenderStyle(),
    title: str | None = None,
) -> str:
    """SVG document for one frame; boxes, trajectories and points are in the ego frame."""
    size = style.size
    half = 0.5 * style.extent_m
    mpu = style.meters_per_unit

    def xy(x: float, y: float) -> str:
        return f"{_fmt((x + half) / mpu)},{_fmt((half - y) / mpu)}"

    out = [
        f'<svg xmlns="http://www.w3.org/2000/svg" width="{_fmt(size)}" height="{_fmt(size)}" '
        f'viewBox="0 0 {_fmt(size)} {_fmt(size)}">',
        f'<rect class="canvas" x="0" y="0" width="{_fmt(size)}" height="{_fmt(size)}" fill="{style.background}"/>',
    ]
    if title:
        out.append(f"<title>{escape(title)}</title>")
    if points is not None and len(points):
        pts = subsample(np.asarray(points)[:, :2], style.max_points)
        inside = (np.abs(pts[:, 0]) <= half) & (np.abs(pts[:, 1]) <= half)
        out.append(f'<g class="points" fill="{style.point_color}">')
        r = _fmt(style.point_size)
        for x, y in pts[inside]:
            cx, cy = xy(float(x), float(y)).split(",")
            out.append(f'<circle cx="{cx}" cy="{cy}" r="{r}"/>')
        out.append("</g>")
    for track_id, box in boxes:
        color = track_color(track_id)
        corners = " ".join(xy(float(x), float(y)) for x, y in box.bev_corners())
        out.append(
            f'<polygon class="box" data-track={quoteattr(track_id)} points="{corners}" fill="none" '
            f'stroke="{color}" stroke-width="{_fmt(style.box_stroke)}"/>'
        )
        # heading tick from the center to the front edge
        c, s = np.cos(box.yaw), np.sin(box.yaw)
        fx, fy = box.center[0] + 0.5 * box.length * c, box.center[1] + 0.5 * box.length * s
        a, b = xy(box.center[0], box.center[1]).split(","), xy(fx, fy).split(",")
        out.append(
            f'<line class="heading" x1="{a[0]}" y1="{a[1]}" x2="{b[0]}" y2="{b[1]}" stroke="{color}" '
            f'stroke-width="{_fmt(style.box_stroke)}"/>'
        )
    for track_id, traj in sorted((trajectories or {}).items()):
        if not traj:
            continue
        pts = " ".join(xy(float(x), float(y)) for x, y in traj)
        out.append(
            f'<polyline class="trajectory" data-track={quoteattr(track_id)} points="{pts}" fill="none" '
            f'stroke="{track_color(track_id)}" stroke-width="{_fmt(style.trajectory_stroke)}" '
            f'stroke-dasharray="{style.trajectory_dash}"/>'
        )
    out.append("</svg>")
    return "\n".join(out) + "\n"
