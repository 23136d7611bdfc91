"""Poses, oriented boxes and the bird's-eye-view geometry built on them.

Frames follow the nuScenes convention: x forward, y left, z up. A box's
length runs along its heading (local x), its width along local y. Yaw is
measured counter-clockwise from the frame's x axis.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

from tbakit import CLASS_INDEX, TRACKING_CLASSES

TWO_PI = 2.0 * math.pi
QUAT_TOL = 1e-9


def normalize_yaw(yaw: float) -> float:
    """Map an angle into (-pi, pi]; -pi itself maps to +pi."""
    y = math.remainder(float(yaw), TWO_PI)
    if y <= -math.pi:
        y += TWO_PI
    return y


def quat_multiply(a: Sequence[float], b: Sequence[float]) -> tuple[float, float, float, float]:
    aw, ax, ay, az = a
    bw, bx, by, bz = b
    return (
        aw * bw - ax * bx - ay * by - az * bz,
        aw * bx + ax * bw + ay * bz - az * by,
        aw * by - ax * bz + ay * bw + az * bx,
        aw * bz + ax * by - ay * bx + az * bw,
    )


def quat_to_matrix(q: Sequence[float]) -> np.ndarray:
    w, x, y, z = q
    return np.array(
        [
            [1 - 2 * (y * y + z * z), 2 * (x * y - w * z), 2 * (x * z + w * y)],
            [2 * (x * y + w * z), 1 - 2 * (x * x + z * z), 2 * (y * z - w * x)],
            [2 * (x * z - w * y), 2 * (y * z + w * x), 1 - 2 * (x * x + y * y)],
        ]
    )


def _unit_quat(q: Sequence[float]) -> tuple[float, float, float, float]:
    arr = np.asarray(q, dtype=float)
    n = float(np.linalg.norm(arr))
    return tuple(float(v) for v in arr / n)  # type: ignore[return-value]


@dataclass(frozen=True)
class Pose:
    """Rigid transform mapping points from a local frame into its parent frame.

    ``rotation`` is a unit quaternion in (w, x, y, z) order.
    """

    translation: tuple[float, float, float] = (0.0, 0.0, 0.0)
    rotation: tuple[float, float, float, float] = (1.0, 0.0, 0.0, 0.0)

    def __post_init__(self):
        t = tuple(float(v) for v in self.translation)
        q = tuple(float(v) for v in self.rotation)
        if len(t) != 3 or len(q) != 4:
            raise ValueError("pose needs a 3-vector translation and a 4-vector quaternion")
        if not all(math.isfinite(v) for v in t + q):
            raise ValueError("pose contains non-finite values")
        if abs(math.sqrt(sum(v * v for v in q)) - 1.0) > QUAT_TOL:
            raise ValueError(f"rotation quaternion is not unit length: {q}")
        object.__setattr__(self, "translation", t)
        object.__setattr__(self, "rotation", q)

    @classmethod
    def identity(cls) -> Pose:
        return cls()

    @classmethod
    def from_yaw(cls, yaw: float, translation: Sequence[float] = (0.0, 0.0, 0.0)) -> Pose:
        half = 0.5 * yaw
        return cls(tuple(translation), (math.cos(half), 0.0, 0.0, math.sin(half)))

    @classmethod
    def from_quaternion(cls, translation: Sequence[float], rotation: Sequence[float]) -> Pose:
        """Build a pose, renormalizing a quaternion that is not already unit length."""
        q = tuple(float(v) for v in rotation)
        if abs(math.sqrt(sum(v * v for v in q)) - 1.0) > QUAT_TOL:
            q = _unit_quat(q)
        return cls(tuple(translation), q)

    @property
    def matrix(self) -> np.ndarray:
        return quat_to_matrix(self.rotation)

    @property
    def yaw(self) -> float:
        r = self.matrix
        return math.atan2(r[1, 0], r[0, 0])

    def compose(self, other: Pose) -> Pose:
        """``self @ other``: apply ``other`` first, then ``self``."""
        t = self.matrix @ np.asarray(other.translation) + np.asarray(self.translation)
        q = _unit_quat(quat_multiply(self.rotation, other.rotation))
        return Pose(tuple(t), q)

    __matmul__ = compose

    def inverse(self) -> Pose:
        w, x, y, z = self.rotation
        conj = (w, -x, -y, -z)
        t = -(quat_to_matrix(conj) @ np.asarray(self.translation))
        return Pose(tuple(t), conj)

    def apply(self, points) -> np.ndarray:
        """Map points of shape (3,) or (N, 3) from the local into the parent frame."""
        pts = np.asarray(points, dtype=float)
        return pts @ self.matrix.T + np.asarray(self.translation)


@dataclass(frozen=True)
class Box3D:
    center: tuple[float, float, float]
    size_wlh: tuple[float, float, float]
    yaw: float = 0.0
    velocity: tuple[float, float] = (0.0, 0.0)
    class_name: str = "car"

    def __post_init__(self):
        center = tuple(float(v) for v in self.center)
        size = tuple(float(v) for v in self.size_wlh)
        vel = tuple(float(v) for v in self.velocity)
        if len(center) != 3 or len(size) != 3 or len(vel) != 2:
            raise ValueError("box needs 3-vector center, 3-vector size and 2-vector velocity")
        if not all(math.isfinite(v) for v in center + size + vel + (float(self.yaw),)):
            raise ValueError("box contains non-finite values")
        if min(size) <= 0.0:
            raise ValueError(f"box size must be strictly positive, got {size}")
        if self.class_name not in CLASS_INDEX:
            raise ValueError(f"unknown class {self.class_name!r}; expected one of {TRACKING_CLASSES}")
        object.__setattr__(self, "center", center)
        object.__setattr__(self, "size_wlh", size)
        object.__setattr__(self, "velocity", vel)
        object.__setattr__(self, "yaw", normalize_yaw(self.yaw))

    @property
    def width(self) -> float:
        return self.size_wlh[0]

    @property
    def length(self) -> float:
        return self.size_wlh[1]

    @property
    def height(self) -> float:
        return self.size_wlh[2]

    @property
    def bev_area(self) -> float:
        return self.width * self.length

    def bev_corners(self) -> np.ndarray:
        """Footprint corners, shape (4, 2), counter-clockwise."""
        hl, hw = 0.5 * self.length, 0.5 * self.width
        local = np.array([[hl, hw], [-hl, hw], [-hl, -hw], [hl, -hw]])
        c, s = math.cos(self.yaw), math.sin(self.yaw)
        rot = np.array([[c, -s], [s, c]])
        return local @ rot.T + np.asarray(self.center[:2])

    def to_object_frame(self, points) -> np.ndarray:
        """Express (N, >=3) points in the box frame: origin at center, x along length."""
        pts = np.asarray(points, dtype=float)[:, :3]
        c, s = math.cos(self.yaw), math.sin(self.yaw)
        d = pts - np.asarray(self.center)
        return np.stack([c * d[:, 0] + s * d[:, 1], -s * d[:, 0] + c * d[:, 1], d[:, 2]], axis=1)

    def from_object_frame(self, points) -> np.ndarray:
        pts = np.asarray(points, dtype=float)[:, :3]
        c, s = math.cos(self.yaw), math.sin(self.yaw)
        x = c * pts[:, 0] - s * pts[:, 1] + self.center[0]
        y = s * pts[:, 0] + c * pts[:, 1] + self.center[1]
        return np.stack([x, y, pts[:, 2] + self.center[2]], axis=1)

    def contains(self, points, *, bev_only: bool = False, slack: float = 0.0) -> np.ndarray:
        """Closed membership test for (N, >=3) points; returns a boolean mask."""
        local = self.to_object_frame(points)
        inside = (np.abs(local[:, 0]) <= 0.5 * self.length + slack) & (
            np.abs(local[:, 1]) <= 0.5 * self.width + slack
        )
        if not bev_only:
            inside &= np.abs(local[:, 2]) <= 0.5 * self.height + slack
        return inside


@dataclass(frozen=True)
class PointCloud:
    """LiDAR points as an (N, 4) float32 array of x, y, z, intensity."""

    points: np.ndarray = field(default_factory=lambda: np.zeros((0, 4), dtype=np.float32))

    def __post_init__(self):
        pts = np.ascontiguousarray(self.points, dtype=np.float32).reshape(-1, 4)
        if not np.isfinite(pts).all():
            raise ValueError("point cloud contains non-finite values")
        if (pts[:, 3] < 0).any():
            raise ValueError("point intensity must be non-negative")
        pts.setflags(write=False)
        object.__setattr__(self, "points", pts)

    def __len__(self) -> int:
        return len(self.points)

    def __eq__(self, other):
        if not isinstance(other, PointCloud):
            return NotImplemented
        return self.points.shape == other.points.shape and bool(
            np.array_equal(self.points.view(np.uint32), other.points.view(np.uint32))
        )

    __hash__ = None  # type: ignore[assignment]

    @property
    def xyz(self) -> np.ndarray:
        return self.points[:, :3]


# -- BEV overlap -------------------------------------------------------------


def _cross(o: np.ndarray, a: np.ndarray, b: np.ndarray) -> float:
    return float((a[0] - o[0]) * (b[1] - o[1]) - (a[1] - o[1]) * (b[0] - o[0]))


def _separated(pa: np.ndarray, pb: np.ndarray) -> bool:
    """Separating-axis test on the rectangles' edge normals; touching counts as separated."""
    for poly in (pa, pb):
        for i in range(2):
            edge = poly[i + 1] - poly[i]
            axis = np.array([-edge[1], edge[0]])
            proj_a = pa @ axis
            proj_b = pb @ axis
            if proj_a.max() <= proj_b.min() or proj_b.max() <= proj_a.min():
                return True
    return False


def _inside_convex(poly: np.ndarray, p: np.ndarray, eps: float) -> bool:
    n = len(poly)
    return all(_cross(poly[i], poly[(i + 1) % n], p) >= -eps for i in range(n))


def _segment_intersection(p1, p2, q1, q2):
    r = p2 - p1
    s = q2 - q1
    denom = r[0] * s[1] - r[1] * s[0]
    if denom == 0.0:
        return None
    qp = q1 - p1
    t = (qp[0] * s[1] - qp[1] * s[0]) / denom
    u = (qp[0] * r[1] - qp[1] * r[0]) / denom
    if 0.0 <= t <= 1.0 and 0.0 <= u <= 1.0:
        return p1 + t * r
    return None


def polygon_area(poly: np.ndarray) -> float:
    """Shoelace area of an ordered simple polygon."""
    if len(poly) < 3:
        return 0.0
    x, y = poly[:, 0], poly[:, 1]
    return 0.5 * abs(float(np.dot(x, np.roll(y, -1)) - np.dot(y, np.roll(x, -1))))


def bev_overlap_area(a: Box3D, b: Box3D) -> float:
    """Exact intersection area (m^2) of two boxes' rotated BEV footprints."""
    dx = a.center[0] - b.center[0]
    dy = a.center[1] - b.center[1]
    ra = 0.5 * math.hypot(a.length, a.width)
    rb = 0.5 * math.hypot(b.length, b.width)
    if dx * dx + dy * dy >= (ra + rb) ** 2:
        return 0.0
    pa, pb = a.bev_corners(), b.bev_corners()
    if _separated(pa, pb):
        return 0.0

    eps = 1e-12 * max(1.0, ra + rb)
    pts = [p for p in pa if _inside_convex(pb, p, eps)]
    pts += [p for p in pb if _inside_convex(pa, p, eps)]
    for i in range(4):
        for j in range(4):
            hit = _segment_intersection(pa[i], pa[(i + 1) % 4], pb[j], pb[(j + 1) % 4])
            if hit is not None:
                pts.append(hit)
    if len(pts) < 3:
        return 0.0
    pts_arr = np.unique(np.round(np.asarray(pts), 12), axis=0)
    if len(pts_arr) < 3:
        return 0.0
    centroid = pts_arr.mean(axis=0)
    order = np.argsort(np.arctan2(pts_arr[:, 1] - centroid[1], pts_arr[:, 0] - centroid[0]))
    return polygon_area(pts_arr[order])


def boxes_collide(a: Box3D, b: Box3D) -> bool:
    return bev_overlap_area(a, b) > 0.0


# -- frames ------------------------------------------------------------------


def compensate_ego_motion(center, pose_prev: Pose, pose_curr: Pose) -> np.ndarray:
    """Re-express a point seen in the ego frame at t-1 in the ego frame at t."""
    c = np.asarray(center, dtype=float)
    if pose_prev == pose_curr:
        return c.copy()
    return pose_curr.inverse().apply(pose_prev.apply(c))


def relative_pose(src: Pose, dst: Pose) -> Pose:
    """Pose mapping coordinates in ``src``'s frame into ``dst``'s frame."""
    return dst.inverse() @ src


def transform_box(box: Box3D, src: Pose, dst: Pose) -> Box3D:
    """Re-express a box given in frame ``src`` in frame ``dst``.

    Both poses map their frame into a shared parent (usually the world). Only
    the z-rotation of the relative pose touches yaw and velocity.
    """
    if src == dst:
        return box
    rel = relative_pose(src, dst)
    center = rel.apply(np.asarray(box.center))
    dyaw = rel.yaw
    c, s = math.cos(dyaw), math.sin(dyaw)
    vx, vy = box.velocity
    return Box3D(
        center=tuple(center),
        size_wlh=box.size_wlh,
        yaw=box.yaw + dyaw,
        velocity=(c * vx - s * vy, s * vx + c * vy),
        class_name=box.class_name,
    )


def world_to_ego(box: Box3D, ego_pose: Pose) -> Box3D:
    return transform_box(box, Pose.identity(), ego_pose)


def ego_to_world(box: Box3D, ego_pose: Pose) -> Box3D:
    return transform_box(box, ego_pose, Pose.identity())


# -- regression encoding -----------------------------------------------------

ENCODING_SIZE = 10


def encode_box(box: Box3D) -> np.ndarray:
    """(x, y, z, log w, log l, log h, sin yaw, cos yaw, vx, vy)."""
    return np.array(
        [
            *box.center,
            *(math.log(v) for v in box.size_wlh),
            math.sin(box.yaw),
            math.cos(box.yaw),
            *box.velocity,
        ]
    )


def decode_box(encoding, class_name: str) -> Box3D:
    e = np.asarray(encoding, dtype=float)
    if e.shape != (ENCODING_SIZE,):
        raise ValueError(f"box encoding must have shape ({ENCODING_SIZE},), got {e.shape}")
    if not np.isfinite(e).all():
        raise ValueError("box encoding contains non-finite values")
    s, c = e[6], e[7]
    if abs(math.hypot(s, c) - 1.0) > 1e-6:
        raise ValueError(f"inconsistent yaw encoding: sin={s}, cos={c}")
    return Box3D(
        center=tuple(e[0:3]),
        size_wlh=tuple(np.exp(e[3:6])),
        yaw=math.atan2(s, c),
        velocity=tuple(e[8:10]),
        class_name=class_name,
    )
