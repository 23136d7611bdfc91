"""Seeded synthetic scenes and a surrogate detector for desk-scale experiments.

Generated scenes have an ego vehicle driving a gentle arc, objects moving
under a noisy constant-velocity model, Poisson track births and geometric
lifetimes, and LiDAR-like points sampled on each box surface plus a ground
layer. The surrogate detector turns ground truth into noisy scored
detections with Poisson clutter.
"""

from __future__ import annotations

import math
import zlib
from dataclasses import dataclass, field

import numpy as np

from tbakit import CLASS_INDEX, TRACKING_CLASSES
from tbakit.assignment import GroundTruth
from tbakit.geometry import Box3D, PointCloud, Pose, bev_overlap_area, world_to_ego
from tbakit.scene_io import Annotation, Frame, Scene

# (width, length, height) in metres and mean speed in m/s per class
CLASS_TEMPLATES: dict[str, tuple[tuple[float, float, float], float]] = {
    "bicycle": ((0.6, 1.8, 1.3), 3.0),
    "bus": ((2.9, 11.0, 3.5), 5.0),
    "car": ((1.95, 4.6, 1.7), 6.0),
    "motorcycle": ((0.8, 2.1, 1.5), 5.0),
    "pedestrian": ((0.7, 0.7, 1.75), 1.2),
    "trailer": ((2.9, 12.0, 3.8), 3.0),
    "truck": ((2.5, 7.0, 3.0), 5.0),
}

DEFAULT_CLASS_WEIGHTS = {
    "bicycle": 0.05,
    "bus": 0.03,
    "car": 0.45,
    "motorcycle": 0.05,
    "pedestrian": 0.28,
    "trailer": 0.04,
    "truck": 0.10,
}


def derive_seed(*parts) -> int:
    """Stable 64-bit seed from ints and strings (independent of PYTHONHASHSEED)."""
    words = []
    for p in parts:
        if isinstance(p, str):
            words.append(zlib.crc32(p.encode("utf-8")))
        else:
            words.append(int(p) & 0xFFFFFFFFFFFFFFFF)
    return int(np.random.SeedSequence(words).generate_state(1, dtype=np.uint64)[0])


@dataclass(frozen=True)
class SceneScript:
    rng_seed: int = 0
    scene_id: str | None = None
    num_frames: int = 40
    frame_period_us: int = 500_000
    birth_rate: float = 0.7
    initial_tracks: int = 8
    mean_lifetime_frames: float = 25.0
    class_weights: dict[str, float] = field(default_factory=lambda: dict(DEFAULT_CLASS_WEIGHTS))
    spawn_radius: tuple[float, float] = (6.0, 45.0)
    accel_noise: float = 0.5
    yaw_rate_noise: float = 0.05
    ego_speed: float = 5.0
    ego_yaw_rate: float = 0.02
    surface_density: float = 60.0
    max_points_per_box: int = 400
    ground_points: int = 600
    ground_radius: float = 60.0

    def __post_init__(self):
        if self.num_frames < 1:
            raise ValueError("num_frames must be >= 1")
        if self.birth_rate < 0 or self.initial_tracks < 0:
            raise ValueError("birth_rate and initial_tracks must be >= 0")
        if self.mean_lifetime_frames < 1:
            raise ValueError("mean_lifetime_frames must be >= 1")
        if self.frame_period_us <= 0:
            raise ValueError("frame_period_us must be positive")
        unknown = set(self.class_weights) - set(CLASS_INDEX)
        if unknown or not self.class_weights or min(self.class_weights.values()) < 0:
            raise ValueError(f"bad class_weights: {self.class_weights}")

    @property
    def resolved_scene_id(self) -> str:
        return self.scene_id if self.scene_id is not None else f"sim{self.rng_seed:06d}"

    @classmethod
    def from_dict(cls, d: dict) -> SceneScript:
        d = dict(d)
        if "spawn_radius" in d:
            d["spawn_radius"] = tuple(d["spawn_radius"])
        return cls(**d)


@dataclass
class _Actor:
    track_id: str
    class_name: str
    x: float
    y: float
    yaw: float
    speed: float
    size: tuple[float, float, float]

    def box(self) -> Box3D:
        return Box3D(
            (self.x, self.y, 0.5 * self.size[2]),
            self.size,
            self.yaw,
            (self.speed * math.cos(self.yaw), self.speed * math.sin(self.yaw)),
            self.class_name,
        )


def _ego_pose(script: SceneScript, k: int) -> Pose:
    dt = script.frame_period_us / 1e6
    t = k * dt
    w = script.ego_yaw_rate
    if abs(w) < 1e-12:
        x, y = script.ego_speed * t, 0.0
    else:
        r = script.ego_speed / w
        x, y = r * math.sin(w * t), r * (1 - math.cos(w * t))
    return Pose.from_yaw(w * t, (x, y, 0.0))


def surface_points(box: Box3D, n: int, rng: np.random.Generator) -> np.ndarray:
    """``n`` points on the faces of ``box`` (shrunk 2% so float32 stays inside)."""
    if n <= 0:
        return np.zeros((0, 4), dtype=np.float32)
    half = 0.49 * np.array([box.length, box.width, box.height])
    face_areas = np.array([half[1] * half[2], half[0] * half[2], half[0] * half[1]])
    axis = rng.choice(3, size=n, p=face_areas / face_areas.sum())
    local = rng.uniform(-1.0, 1.0, (n, 3)) * half
    sign = rng.choice([-1.0, 1.0], size=n)
    local[np.arange(n), axis] = sign * half[axis]
    xyz = box.from_object_frame(local)
    intensity = rng.uniform(0.0, 1.0, n)
    return np.column_stack([xyz, intensity]).astype(np.float32)


def generate_scene(script: SceneScript) -> tuple[Scene, dict[str, PointCloud]]:
    """Build a scene and its point clouds; returns (scene, {lidar_path: cloud})."""
    rng = np.random.default_rng(derive_seed(script.rng_seed, "scene"))
    scene_id = script.resolved_scene_id
    dt = script.frame_period_us / 1e6
    classes = [c for c in TRACKING_CLASSES if script.class_weights.get(c, 0) > 0]
    weights = np.array([script.class_weights[c] for c in classes], dtype=float)
    weights /= weights.sum()
    death_p = 1.0 / script.mean_lifetime_frames
    actors: list[_Actor] = []
    serial = 0

    def spawn(ego: Pose) -> None:
        nonlocal serial
        cls = classes[int(rng.choice(len(classes), p=weights))]
        base, speed = CLASS_TEMPLATES[cls]
        size = tuple(float(v) for v in np.array(base) * rng.uniform(0.9, 1.1, 3))
        for _ in range(20):
            r = rng.uniform(*script.spawn_radius)
            ang = rng.uniform(-math.pi, math.pi)
            local = np.array([r * math.cos(ang), r * math.sin(ang), 0.0])
            x, y, _ = ego.apply(local)
            cand = _Actor(
                f"{scene_id}-t{serial:04d}", cls, float(x), float(y), float(rng.uniform(-math.pi, math.pi)),
                float(max(0.0, rng.normal(speed, 0.3 * speed))), size,
            )
            cb = cand.box()
            if all(bev_overlap_area(cb, a.box()) == 0.0 for a in actors):
                actors.append(cand)
                serial += 1
                return

    frames = []
    clouds = {}
    for k in range(script.num_frames):
        ego = _ego_pose(script, k)
        if k == 0:
            for _ in range(script.initial_tracks):
                spawn(ego)
        for _ in range(int(rng.poisson(script.birth_rate))):
            spawn(ego)

        anns = []
        pts = []
        for a in actors:
            world_box = a.box()
            ego_box = world_to_ego(world_box, ego)
            dist = math.hypot(ego_box.center[0], ego_box.center[1])
            area = 2 * (world_box.width * world_box.length + world_box.length * world_box.height + world_box.width * world_box.height)
            n = min(script.max_points_per_box, int(script.surface_density * area / max(dist, 2.0)))
            p = surface_points(ego_box, n, rng)
            pts.append(p)
            anns.append(Annotation(a.track_id, world_box, len(p)))
        g = script.ground_points
        radius = script.ground_radius * np.sqrt(rng.uniform(0, 1, g))
        theta = rng.uniform(-math.pi, math.pi, g)
        ground = np.column_stack(
            [radius * np.cos(theta), radius * np.sin(theta), rng.uniform(-0.3, -0.05, g), rng.uniform(0, 1, g)]
        ).astype(np.float32)
        pts.append(ground)
        lidar_path = f"lidar/{scene_id}/{k:04d}.bin"
        clouds[lidar_path] = PointCloud(np.concatenate(pts) if pts else np.zeros((0, 4), np.float32))
        frames.append(Frame(f"{scene_id}-f{k:04d}", k * script.frame_period_us, ego, lidar_path, tuple(anns)))

        survivors = []
        for a in actors:
            if rng.uniform() < death_p:
                continue
            a.speed = max(0.0, a.speed + rng.normal(0.0, script.accel_noise * dt))
            a.yaw += rng.normal(0.0, script.yaw_rate_noise)
            a.x += a.speed * dt * math.cos(a.yaw)
            a.y += a.speed * dt * math.sin(a.yaw)
            # an actor that would drive into another one leaves the scene
            if any(bev_overlap_area(a.box(), b.box()) > 0.0 for b in survivors):
                continue
            survivors.append(a)
        actors = survivors
    return Scene(scene_id, tuple(frames)), clouds


# -- surrogate detector ------------------------------------------------------


@dataclass(frozen=True)
class SurrogateDetectorConfig:
    p_det: float | dict[str, float] = 0.9
    sigma_xy: float = 0.15
    sigma_z: float = 0.05
    sigma_dim: float = 0.05
    sigma_yaw: float = 0.05
    sigma_vel: float = 0.2
    clutter_rate: float = 1.0
    clutter_range: float = 50.0
    # confidence = exp(-(center_err / conf_scale)^2 - (yaw_err / conf_yaw_scale)^2)
    conf_scale: float = 1.0
    conf_yaw_scale: float = 0.7
    # clutter confidence ~ Beta(a, b): mass concentrated at low values
    clutter_conf_a: float = 2.0
    clutter_conf_b: float = 5.0
    rng_seed: int = 0

    def __post_init__(self):
        probs = self.p_det.values() if isinstance(self.p_det, dict) else [self.p_det]
        if any(not 0.0 <= p <= 1.0 for p in probs):
            raise ValueError("detection probabilities must be in [0, 1]")
        sig = (self.sigma_xy, self.sigma_z, self.sigma_dim, self.sigma_yaw, self.sigma_vel)
        if min(sig) < 0 or self.clutter_rate < 0:
            raise ValueError("noise sigmas and clutter rate must be >= 0")
        if self.conf_scale <= 0 or self.conf_yaw_scale <= 0:
            raise ValueError("confidence scales must be positive")

    def detection_probability(self, class_name: str) -> float:
        if isinstance(self.p_det, dict):
            return float(self.p_det.get(class_name, 0.0))
        return float(self.p_det)

    @classmethod
    def from_dict(cls, d: dict) -> SurrogateDetectorConfig:
        return cls(**d)


@dataclass(frozen=True)
class Detection:
    box: Box3D
    class_scores: tuple[float, ...]
    confidence: float
    # ground-truth id for true detections, None for clutter; diagnostics only
    source: str | None = None


def _scores(class_name: str, conf: float) -> tuple[float, ...]:
    s = [0.0] * len(TRACKING_CLASSES)
    s[CLASS_INDEX[class_name]] = conf
    return tuple(s)


def surrogate_detect(
    gts: list[GroundTruth], cfg: SurrogateDetectorConfig, rng: np.random.Generator
) -> list[Detection]:
    """Noisy detections for ground-truth boxes given in the ego frame."""
    dets = []
    for gt in gts:
        b = gt.box
        if rng.uniform() >= cfg.detection_probability(b.class_name):
            continue
        dxy = rng.normal(0.0, cfg.sigma_xy, 2) if cfg.sigma_xy > 0 else np.zeros(2)
        dz = rng.normal(0.0, cfg.sigma_z) if cfg.sigma_z > 0 else 0.0
        dyaw = rng.normal(0.0, cfg.sigma_yaw) if cfg.sigma_yaw > 0 else 0.0
        scale = 1.0 + rng.normal(0.0, cfg.sigma_dim, 3) if cfg.sigma_dim > 0 else np.ones(3)
        dvel = rng.normal(0.0, cfg.sigma_vel, 2) if cfg.sigma_vel > 0 else np.zeros(2)
        if dxy.any() or dz or dyaw or (scale != 1.0).any() or dvel.any():
            box = Box3D(
                (b.center[0] + dxy[0], b.center[1] + dxy[1], b.center[2] + dz),
                tuple(np.maximum(np.asarray(b.size_wlh) * scale, 0.05)),
                b.yaw + dyaw,
                (b.velocity[0] + dvel[0], b.velocity[1] + dvel[1]),
                b.class_name,
            )
        else:
            box = b
        err = math.hypot(dxy[0], dxy[1])
        conf = math.exp(-((err / cfg.conf_scale) ** 2) - (dyaw / cfg.conf_yaw_scale) ** 2)
        dets.append(Detection(box, _scores(b.class_name, conf), conf, gt.track_id))

    n_fp = int(rng.poisson(cfg.clutter_rate)) if cfg.clutter_rate > 0 else 0
    classes = list(DEFAULT_CLASS_WEIGHTS)
    w = np.array([DEFAULT_CLASS_WEIGHTS[c] for c in classes])
    for _ in range(n_fp):
        cls = classes[int(rng.choice(len(classes), p=w / w.sum()))]
        size, _ = CLASS_TEMPLATES[cls]
        x, y = rng.uniform(-cfg.clutter_range, cfg.clutter_range, 2)
        box = Box3D((x, y, 0.5 * size[2]), size, rng.uniform(-math.pi, math.pi), (0.0, 0.0), cls)
        conf = float(rng.beta(cfg.clutter_conf_a, cfg.clutter_conf_b))
        dets.append(Detection(box, _scores(cls, conf), conf, None))
    return dets
