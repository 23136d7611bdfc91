"""File formats: scene documents, LiDAR point files and tracking results.

Scene documents are JSON lines: a header ``{"scene_id": ..., "version": 1}``
followed by one frame object per line. Annotations are stored in the world
frame. Point files are little-endian float32 (x, y, z, intensity) records.
"""

from __future__ import annotations

import json
import math
import os
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterator

import numpy as np

from tbakit import CLASS_INDEX
from tbakit.errors import FormatError
from tbakit.geometry import Box3D, PointCloud, Pose

FORMAT_VERSION = 1
POINT_RECORD = np.dtype("<f4")
POINT_RECORD_BYTES = 16
SCENE_SUFFIX = ".scene.jsonl"


@dataclass(frozen=True)
class Annotation:
    track_id: str
    box: Box3D
    num_lidar_pts: int = 0


@dataclass(frozen=True)
class Frame:
    frame_id: str
    timestamp_us: int
    ego_pose: Pose
    lidar_path: str
    annotations: tuple[Annotation, ...] = ()

    def __post_init__(self):
        object.__setattr__(self, "annotations", tuple(self.annotations))


@dataclass(frozen=True)
class Scene:
    scene_id: str
    frames: tuple[Frame, ...]

    def __post_init__(self):
        frames = tuple(self.frames)
        object.__setattr__(self, "frames", frames)
        validate_frames(frames)

    def __len__(self) -> int:
        return len(self.frames)

    def frame_period_s(self) -> float:
        """Median inter-frame gap in seconds (0.5 for a single-frame scene)."""
        return median_frame_period_s([f.timestamp_us for f in self.frames])

    def track_ids(self) -> set[str]:
        return {a.track_id for f in self.frames for a in f.annotations}


@dataclass(frozen=True)
class Clip:
    """``L`` consecutive frames of a scene with their point clouds loaded."""

    scene_id: str
    start: int
    frames: tuple[Frame, ...]
    clouds: tuple[PointCloud, ...]

    def __post_init__(self):
        object.__setattr__(self, "frames", tuple(self.frames))
        object.__setattr__(self, "clouds", tuple(self.clouds))
        if len(self.frames) < 1:
            raise ValueError("a clip needs at least one frame")
        if len(self.frames) != len(self.clouds):
            raise ValueError("a clip needs one point cloud per frame")

    def __len__(self) -> int:
        return len(self.frames)

    def track_ids(self) -> set[str]:
        return {a.track_id for f in self.frames for a in f.annotations}


def median_frame_period_s(timestamps_us) -> float:
    if len(timestamps_us) < 2:
        return 0.5
    return float(np.median(np.diff(np.asarray(timestamps_us, dtype=np.int64)))) / 1e6


def validate_frames(frames) -> None:
    if not frames:
        raise FormatError("scene has no frames")
    seen = set()
    prev_ts = None
    for i, f in enumerate(frames):
        if f.frame_id in seen:
            raise FormatError(f"duplicate frame_id {f.frame_id!r}", f"frame {i}")
        seen.add(f.frame_id)
        if prev_ts is not None and f.timestamp_us <= prev_ts:
            raise FormatError(
                f"timestamp {f.timestamp_us} is not after the previous frame's {prev_ts}", f"frame {i}"
            )
        prev_ts = f.timestamp_us
        ids = [a.track_id for a in f.annotations]
        if len(ids) != len(set(ids)):
            raise FormatError("duplicate track_id within a frame", f"frame {i}")


# -- scene documents ---------------------------------------------------------


def _floats(values) -> list[float]:
    return [float(v) for v in values]


def box_to_dict(box: Box3D) -> dict:
    return {
        "class": box.class_name,
        "center": _floats(box.center),
        "size_wlh": _floats(box.size_wlh),
        "yaw": float(box.yaw),
        "velocity": _floats(box.velocity),
    }


def box_from_dict(d: dict, where: str) -> Box3D:
    try:
        return Box3D(
            center=_vector(d, "center", 3, where),
            size_wlh=_vector(d, "size_wlh", 3, where),
            yaw=_number(d, "yaw", where),
            velocity=_vector(d, "velocity", 2, where),
            class_name=_string(d, "class", where),
        )
    except FormatError:
        raise
    except ValueError as exc:
        raise FormatError(str(exc), where) from None


def pose_to_dict(pose: Pose) -> dict:
    return {"translation": _floats(pose.translation), "rotation": _floats(pose.rotation)}


def pose_from_dict(d: dict, where: str) -> Pose:
    try:
        return Pose.from_quaternion(_vector(d, "translation", 3, where), _vector(d, "rotation", 4, where))
    except FormatError:
        raise
    except ValueError as exc:
        raise FormatError(str(exc), where) from None


def frame_to_dict(frame: Frame) -> dict:
    return {
        "frame_id": frame.frame_id,
        "timestamp_us": int(frame.timestamp_us),
        "ego_pose": pose_to_dict(frame.ego_pose),
        "lidar_path": frame.lidar_path,
        "anns": [
            {"track_id": a.track_id, **box_to_dict(a.box), "num_pts": int(a.num_lidar_pts)}
            for a in frame.annotations
        ],
    }


def _require(d: dict, key: str, where: str):
    if not isinstance(d, dict):
        raise FormatError("expected an object", where)
    if key not in d:
        raise FormatError(f"missing field {key!r}", where)
    return d[key]


def _number(d: dict, key: str, where: str) -> float:
    v = _require(d, key, where)
    if isinstance(v, bool) or not isinstance(v, (int, float)) or not math.isfinite(v):
        raise FormatError(f"field {key!r} must be a finite number", where)
    return float(v)


def _integer(d: dict, key: str, where: str) -> int:
    v = _require(d, key, where)
    if isinstance(v, bool) or not isinstance(v, int):
        raise FormatError(f"field {key!r} must be an integer", where)
    return v


def _string(d: dict, key: str, where: str) -> str:
    v = _require(d, key, where)
    if not isinstance(v, str):
        raise FormatError(f"field {key!r} must be a string", where)
    return v


def _vector(d: dict, key: str, n: int, where: str) -> tuple[float, ...]:
    v = _require(d, key, where)
    if not isinstance(v, list) or len(v) != n:
        raise FormatError(f"field {key!r} must be a list of {n} numbers", where)
    out = []
    for x in v:
        if isinstance(x, bool) or not isinstance(x, (int, float)) or not math.isfinite(x):
            raise FormatError(f"field {key!r} must contain finite numbers", where)
        out.append(float(x))
    return tuple(out)


def frame_from_dict(d: dict, index: int) -> Frame:
    where = f"frame {index}"
    pose = pose_from_dict(_require(d, "ego_pose", where), where + ".ego_pose")
    anns_raw = _require(d, "anns", where)
    if not isinstance(anns_raw, list):
        raise FormatError("field 'anns' must be a list", where)
    anns = []
    for j, a in enumerate(anns_raw):
        aw = f"{where}.anns[{j}]"
        num = _integer(a, "num_pts", aw)
        if num < 0:
            raise FormatError("field 'num_pts' must be >= 0", aw)
        anns.append(Annotation(_string(a, "track_id", aw), box_from_dict(a, aw), num))
    return Frame(
        frame_id=_string(d, "frame_id", where),
        timestamp_us=_integer(d, "timestamp_us", where),
        ego_pose=pose,
        lidar_path=_string(d, "lidar_path", where),
        annotations=tuple(anns),
    )


def _check_version(doc: dict, where: str) -> None:
    version = _require(doc, "version", where)
    try:
        major = int(str(version).split(".")[0])
    except ValueError:
        raise FormatError(f"unreadable version {version!r}", where) from None
    if major != FORMAT_VERSION:
        raise FormatError(f"unsupported format version {version!r}", where)


def _dumps(obj) -> str:
    return json.dumps(obj, separators=(",", ":"), allow_nan=False)


def read_scene_header(path) -> str:
    with open(path, encoding="utf-8") as fh:
        first = fh.readline()
    return _parse_header(first)


def _parse_header(line: str) -> str:
    try:
        header = json.loads(line)
    except json.JSONDecodeError as exc:
        raise FormatError(f"invalid JSON: {exc.msg}", "header") from None
    _check_version(header, "header")
    return _string(header, "scene_id", "header")


def iter_frames(path) -> Iterator[Frame]:
    """Stream frames from a scene document without loading the whole file."""
    with open(path, encoding="utf-8") as fh:
        _parse_header(fh.readline())
        index = 0
        for line in fh:
            if not line.strip():
                continue
            try:
                d = json.loads(line)
            except json.JSONDecodeError as exc:
                raise FormatError(f"invalid JSON: {exc.msg}", f"frame {index}") from None
            yield frame_from_dict(d, index)
            index += 1


def read_scene(path) -> Scene:
    scene_id = read_scene_header(path)
    return Scene(scene_id, tuple(iter_frames(path)))


def scene_to_lines(scene: Scene) -> list[str]:
    lines = [_dumps({"scene_id": scene.scene_id, "version": FORMAT_VERSION})]
    lines += [_dumps(frame_to_dict(f)) for f in scene.frames]
    return lines


def write_scene(scene: Scene, path) -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w", encoding="utf-8", newline="\n") as fh:
        for line in scene_to_lines(scene):
            fh.write(line + "\n")


def list_scene_files(directory) -> list[Path]:
    return sorted(Path(directory).glob("*" + SCENE_SUFFIX))


def read_scene_dir(directory) -> list[Scene]:
    return [read_scene(p) for p in list_scene_files(directory)]


def scene_path(directory, scene_id: str) -> Path:
    return Path(directory) / f"{scene_id}{SCENE_SUFFIX}"


# -- point files -------------------------------------------------------------


def read_points(path) -> PointCloud:
    raw = Path(path).read_bytes()
    rem = len(raw) % POINT_RECORD_BYTES
    if rem:
        offset = len(raw) - rem
        raise FormatError(f"truncated point record ({rem} trailing bytes)", f"byte offset {offset}")
    arr = np.frombuffer(raw, dtype=POINT_RECORD).reshape(-1, 4)
    bad = ~np.isfinite(arr).all(axis=1) | (arr[:, 3] < 0)
    if bad.any():
        i = int(np.flatnonzero(bad)[0])
        raise FormatError("non-finite value or negative intensity", f"byte offset {i * POINT_RECORD_BYTES}")
    return PointCloud(arr.astype(np.float32))


def write_points(cloud: PointCloud, path) -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_bytes(np.ascontiguousarray(cloud.points, dtype=POINT_RECORD).tobytes())


def load_clip(scene: Scene, start: int, length: int, point_root) -> Clip:
    if length < 1:
        raise ValueError("clip length must be >= 1")
    if start < 0 or start + length > len(scene.frames):
        raise ValueError(f"clip [{start}, {start + length}) outside scene of {len(scene.frames)} frames")
    frames = scene.frames[start : start + length]
    clouds = []
    for i, f in enumerate(frames):
        p = Path(point_root) / f.lidar_path
        if not p.exists():
            raise FormatError(f"missing point file {str(p)!r}", f"frame {start + i}")
        clouds.append(read_points(p))
    return Clip(scene.scene_id, start, frames, tuple(clouds))


# -- tracking results --------------------------------------------------------


@dataclass(frozen=True)
class TrackedBox:
    translation: tuple[float, float, float]
    size_wlh: tuple[float, float, float]
    rotation: tuple[float, float, float, float]
    velocity: tuple[float, float]
    tracking_id: str
    tracking_name: str
    tracking_score: float

    def __post_init__(self):
        if self.tracking_name not in CLASS_INDEX:
            raise ValueError(f"unknown class {self.tracking_name!r}")
        if not (0.0 <= self.tracking_score <= 1.0):
            raise ValueError(f"tracking_score {self.tracking_score} outside [0, 1]")

    @classmethod
    def from_box(cls, box: Box3D, tracking_id: str, score: float) -> TrackedBox:
        pose = Pose.from_yaw(box.yaw)
        return cls(box.center, box.size_wlh, pose.rotation, box.velocity, tracking_id, box.class_name, float(score))

    def to_box(self) -> Box3D:
        yaw = Pose.from_quaternion((0, 0, 0), self.rotation).yaw
        return Box3D(self.translation, self.size_wlh, yaw, self.velocity, self.tracking_name)

    @property
    def xy(self) -> tuple[float, float]:
        return self.translation[0], self.translation[1]


@dataclass
class TrackingResult:
    """Per-frame tracked boxes in the world frame, keyed by frame_id."""

    results: dict[str, list[TrackedBox]] = field(default_factory=dict)
    meta: dict = field(default_factory=lambda: {"use_lidar": True})

    def __post_init__(self):
        for frame_id, boxes in self.results.items():
            ids = [b.tracking_id for b in boxes]
            if len(ids) != len(set(ids)):
                raise ValueError(f"duplicate tracking_id in frame {frame_id!r}")

    def __eq__(self, other):
        if not isinstance(other, TrackingResult):
            return NotImplemented
        return self.meta == other.meta and self.results == other.results

    def boxes(self, frame_id: str) -> list[TrackedBox]:
        return self.results.get(frame_id, [])


def result_to_dict(result: TrackingResult) -> dict:
    return {
        "meta": dict(result.meta),
        "results": {
            frame_id: [
                {
                    "sample_token": frame_id,
                    "translation": _floats(b.translation),
                    "size": _floats(b.size_wlh),
                    "rotation": _floats(b.rotation),
                    "velocity": _floats(b.velocity),
                    "tracking_id": b.tracking_id,
                    "tracking_name": b.tracking_name,
                    "tracking_score": float(b.tracking_score),
                }
                for b in boxes
            ]
            for frame_id, boxes in result.results.items()
        },
    }


def result_from_dict(doc: dict) -> TrackingResult:
    if not isinstance(doc, dict):
        raise FormatError("results document must be an object", "root")
    meta = doc.get("meta", {"use_lidar": True})
    raw = _require(doc, "results", "root")
    if not isinstance(raw, dict):
        raise FormatError("field 'results' must be an object", "root")
    results: dict[str, list[TrackedBox]] = {}
    for frame_id, entries in raw.items():
        if not isinstance(entries, list):
            raise FormatError("expected a list of boxes", f"results[{frame_id!r}]")
        boxes = []
        seen = set()
        for j, e in enumerate(entries):
            where = f"results[{frame_id!r}][{j}]"
            name = _string(e, "tracking_name", where)
            if name not in CLASS_INDEX:
                raise FormatError(f"unknown tracking_name {name!r}", where)
            score = _number(e, "tracking_score", where)
            if not 0.0 <= score <= 1.0:
                raise FormatError(f"tracking_score {score} outside [0, 1]", where)
            tid = _string(e, "tracking_id", where)
            if tid in seen:
                raise FormatError(f"duplicate tracking_id {tid!r}", where)
            seen.add(tid)
            size = _vector(e, "size", 3, where)
            if min(size) <= 0:
                raise FormatError("size must be strictly positive", where)
            rot = _vector(e, "rotation", 4, where)
            if abs(math.sqrt(sum(v * v for v in rot)) - 1.0) > 1e-6:
                raise FormatError("rotation must be a unit quaternion", where)
            boxes.append(
                TrackedBox(
                    translation=_vector(e, "translation", 3, where),
                    size_wlh=size,
                    rotation=rot,
                    velocity=_vector(e, "velocity", 2, where),
                    tracking_id=tid,
                    tracking_name=name,
                    tracking_score=score,
                )
            )
        results[frame_id] = boxes
    return TrackingResult(results, meta)


def write_json(obj, path, *, indent: int | None = None) -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    text = json.dumps(obj, indent=indent, allow_nan=False, separators=None if indent else (",", ":"))
    tmp = path.with_name(path.name + f".tmp{os.getpid()}")
    tmp.write_text(text + "\n", encoding="utf-8")
    tmp.replace(path)


def read_json(path, what: str = "document"):
    try:
        return json.loads(Path(path).read_text(encoding="utf-8"))
    except FileNotFoundError:
        raise FormatError(f"{what} not found", str(path)) from None
    except json.JSONDecodeError as exc:
        raise FormatError(f"invalid JSON in {what}: {exc.msg} (line {exc.lineno})", str(path)) from None


def write_result(result: TrackingResult, path) -> None:
    write_json(result_to_dict(result), path)


def read_result(path) -> TrackingResult:
    return result_from_dict(read_json(path, "results file"))
