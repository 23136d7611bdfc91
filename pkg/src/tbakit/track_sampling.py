"""Ground-truth track database and temporally consistent track-sampling augmentation.

The database stores, for every annotated track, the per-frame world box and
the LiDAR points inside it (in the object frame). Augmentation samples whole
tracks from the database and injects ``L`` consecutive boxes into an
``L``-frame training clip, one per frame in chronological order. An injected
box that overlaps an original box or an earlier injected box in some frame
is dropped from that frame only, which reads like an occlusion.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np

from tbakit import TRACKING_CLASSES
from tbakit.errors import FormatError
from tbakit.geometry import Box3D, PointCloud, Pose, bev_overlap_area, ego_to_world, world_to_ego
from tbakit.scene_io import (
    Annotation,
    Clip,
    Scene,
    box_from_dict,
    box_to_dict,
    pose_from_dict,
    pose_to_dict,
    read_points,
    write_json,
    write_points,
)

DB_VERSION = 1
INDEX_FILE = "index.jsonl"
META_FILE = "meta.json"

# per-class injection quotas at sampling rate 1.0 (SECOND-style database sampling)
DEFAULT_TARGETS = {
    "bicycle": 6,
    "bus": 4,
    "car": 2,
    "motorcycle": 6,
    "pedestrian": 2,
    "trailer": 6,
    "truck": 3,
}

CROP_SLACK = 1e-6

WORLD = "world"
EGO = "ego"


@dataclass(frozen=True)
class TrackInstanceRecord:
    track_id: str
    source_track_id: str
    class_name: str
    frame_index: int
    scene_id: str
    source_frame: int
    timestamp_us: int
    world_box: Box3D
    ego_pose: Pose
    object_points: PointCloud

    @property
    def num_points(self) -> int:
        return len(self.object_points)

    @property
    def empty(self) -> bool:
        """True when the box held no LiDAR point in its source frame."""
        return self.num_points == 0


TrackKey = tuple[str, str]  # (class_name, track_id)


@dataclass
class TrackDatabase:
    tracks: dict[TrackKey, tuple[TrackInstanceRecord, ...]] = field(default_factory=dict)
    meta: dict = field(default_factory=dict)

    def __post_init__(self):
        self.tracks = {k: tuple(self.tracks[k]) for k in sorted(self.tracks)}
        for key, recs in self.tracks.items():
            if not recs:
                raise ValueError(f"track {key} is empty")
            if [r.frame_index for r in recs] != list(range(len(recs))):
                raise ValueError(f"track {key} frame indices are not contiguous from 0")
            if any((r.class_name, r.track_id) != key for r in recs):
                raise ValueError(f"track {key} holds records of another track")

    def __len__(self) -> int:
        return len(self.tracks)

    def keys(self, class_name: str | None = None) -> list[TrackKey]:
        return [k for k in self.tracks if class_name is None or k[0] == class_name]

    def num_instances(self) -> int:
        return sum(len(r) for r in self.tracks.values())

    def save(self, directory) -> None:
        d = Path(directory)
        (d / "points").mkdir(parents=True, exist_ok=True)
        lines = []
        n = 0
        for recs in self.tracks.values():
            for r in recs:
                rel = f"points/{n:07d}.bin"
                write_points(r.object_points, d / rel)
                lines.append(
                    json.dumps(
                        {
                            "track_id": r.track_id,
                            "source_track_id": r.source_track_id,
                            "class": r.class_name,
                            "frame_index": r.frame_index,
                            "scene_id": r.scene_id,
                            "source_frame": r.source_frame,
                            "timestamp_us": r.timestamp_us,
                            "box": box_to_dict(r.world_box),
                            "ego_pose": pose_to_dict(r.ego_pose),
                            "points": rel,
                            "num_points": r.num_points,
                        },
                        separators=(",", ":"),
                        allow_nan=False,
                    )
                )
                n += 1
        with open(d / INDEX_FILE, "w", encoding="utf-8", newline="\n") as fh:
            fh.write("".join(line + "\n" for line in lines))
        write_json({"version": DB_VERSION, **self.meta}, d / META_FILE, indent=2)

    @classmethod
    def load(cls, directory) -> TrackDatabase:
        d = Path(directory)
        if not (d / INDEX_FILE).exists():
            raise FormatError(f"no {INDEX_FILE} in {str(d)!r}", "track database")
        meta = {}
        if (d / META_FILE).exists():
            meta = json.loads((d / META_FILE).read_text(encoding="utf-8"))
            if int(meta.pop("version", DB_VERSION)) != DB_VERSION:
                raise FormatError("unsupported track database version", META_FILE)
        tracks: dict[TrackKey, list[TrackInstanceRecord]] = {}
        with open(d / INDEX_FILE, encoding="utf-8") as fh:
            for i, line in enumerate(fh):
                if not line.strip():
                    continue
                where = f"{INDEX_FILE} line {i + 1}"
                try:
                    e = json.loads(line)
                except json.JSONDecodeError as exc:
                    raise FormatError(f"invalid JSON: {exc.msg}", where) from None
                try:
                    pts = read_points(d / e["points"])
                    if len(pts) != e["num_points"]:
                        raise FormatError(f"point file holds {len(pts)} points, index says {e['num_points']}", where)
                    rec = TrackInstanceRecord(
                        track_id=e["track_id"],
                        source_track_id=e["source_track_id"],
                        class_name=e["class"],
                        frame_index=int(e["frame_index"]),
                        scene_id=e["scene_id"],
                        source_frame=int(e["source_frame"]),
                        timestamp_us=int(e["timestamp_us"]),
                        world_box=box_from_dict(e["box"], where),
                        ego_pose=pose_from_dict(e["ego_pose"], where),
                        object_points=pts,
                    )
                except KeyError as exc:
                    raise FormatError(f"missing field {exc.args[0]!r}", where) from None
                except FileNotFoundError:
                    raise FormatError(f"missing point file {e['points']!r}", where) from None
                tracks.setdefault((rec.class_name, rec.track_id), []).append(rec)
        for recs in tracks.values():
            recs.sort(key=lambda r: r.frame_index)
        return cls({k: tuple(v) for k, v in tracks.items()}, meta)


# -- building ----------------------------------------------------------------


def crop_object_points(cloud: PointCloud, box_ego: Box3D) -> PointCloud:
    """Points inside ``box_ego`` (closed, 1e-6 slack), re-expressed in the object frame.

    The slack absorbs float32 rounding of points on the box surface; kept
    coordinates are then clipped to the exact extents.
    """
    pts = cloud.points
    mask = box_ego.contains(pts, slack=CROP_SLACK)
    local = box_ego.to_object_frame(pts[mask])
    half = 0.5 * np.array([box_ego.length, box_ego.width, box_ego.height])
    local = np.clip(local, -half, half)
    return PointCloud(np.column_stack([local, pts[mask, 3]]))


def split_segments(frame_indices: Sequence[int]) -> list[list[int]]:
    """Split ascending frame indices into runs of consecutive frames."""
    runs: list[list[int]] = []
    for k in frame_indices:
        if runs and k == runs[-1][-1] + 1:
            runs[-1].append(k)
        else:
            runs.append([k])
    return runs


def segment_id(track_id: str, k: int) -> str:
    return track_id if k == 0 else f"{track_id}/{k}"


def _scene_tracks(scene: Scene, point_root) -> dict[TrackKey, tuple[TrackInstanceRecord, ...]]:
    per_track: dict[str, list[int]] = {}
    for fi, f in enumerate(scene.frames):
        for a in f.annotations:
            per_track.setdefault(a.track_id, []).append(fi)
    clouds: dict[int, PointCloud] = {}

    def cloud(fi: int) -> PointCloud:
        if fi not in clouds:
            f = scene.frames[fi]
            p = Path(point_root) / f.lidar_path
            if not p.exists():
                raise FormatError(f"missing point file {str(p)!r}", f"scene {scene.scene_id} frame {fi} ({f.frame_id})")
            clouds[fi] = read_points(p)
        return clouds[fi]

    out = {}
    for tid, frames in per_track.items():
        for k, seg in enumerate(split_segments(frames)):
            sid = segment_id(tid, k)
            recs = []
            for j, fi in enumerate(seg):
                f = scene.frames[fi]
                ann = next(a for a in f.annotations if a.track_id == tid)
                pts = crop_object_points(cloud(fi), world_to_ego(ann.box, f.ego_pose))
                recs.append(
                    TrackInstanceRecord(
                        sid, tid, ann.box.class_name, j, scene.scene_id, fi, f.timestamp_us, ann.box, f.ego_pose, pts
                    )
                )
            out[(recs[0].class_name, sid)] = tuple(recs)
    return out


def build_track_db(scenes: Sequence[Scene], point_root, *, executor=None) -> TrackDatabase:
    """One record per (track, frame); tracks with frame gaps are split into segments."""
    if executor is None:
        parts = [_scene_tracks(s, point_root) for s in scenes]
    else:
        parts = list(executor.map(_scene_tracks, scenes, [point_root] * len(scenes)))
    tracks: dict[TrackKey, tuple[TrackInstanceRecord, ...]] = {}
    owner: dict[str, str] = {}
    for scene, part in zip(scenes, parts):
        for key, recs in part.items():
            src = recs[0].source_track_id
            if owner.setdefault(src, scene.scene_id) != scene.scene_id:
                raise FormatError(f"track_id {src!r} appears in scenes {owner[src]!r} and {scene.scene_id!r}", "build_track_db")
            tracks[key] = recs
    meta = {
        "source_scenes": [s.scene_id for s in scenes],
        "num_tracks": len(tracks),
        "num_instances": sum(len(r) for r in tracks.values()),
        "num_empty_instances": sum(r.empty for recs in tracks.values() for r in recs),
    }
    return TrackDatabase(tracks, meta)


# -- sampling ----------------------------------------------------------------


@dataclass(frozen=True)
class SamplingConfig:
    targets: dict[str, int] = field(default_factory=lambda: dict(DEFAULT_TARGETS))
    sampling_rate: float = 1.0
    rng_seed: int = 0
    min_track_length: int = 1
    # "world" keeps the recorded world trajectory; "ego" keeps it relative to the recording ego
    placement: str = WORLD

    def __post_init__(self):
        if not 0.0 <= self.sampling_rate <= 1.0:
            raise ValueError("sampling_rate must be in [0, 1]")
        if any(int(v) != v or v < 0 for v in self.targets.values()):
            raise ValueError("per-class targets must be non-negative integers")
        if set(self.targets) - set(TRACKING_CLASSES):
            raise ValueError(f"unknown classes in targets: {sorted(set(self.targets) - set(TRACKING_CLASSES))}")
        if self.min_track_length < 1:
            raise ValueError("min_track_length must be >= 1")
        if self.placement not in (WORLD, EGO):
            raise ValueError(f"placement must be {WORLD!r} or {EGO!r}")

    def count(self, class_name: str) -> int:
        """Per-class sample count: rate x target, rounded half up."""
        return int(math.floor(self.sampling_rate * self.targets.get(class_name, 0) + 0.5))

    @classmethod
    def from_dict(cls, d: dict) -> SamplingConfig:
        return cls(**d)


@dataclass(frozen=True)
class SampledTrack:
    key: TrackKey
    start: int
    length: int

    @property
    def class_name(self) -> str:
        return self.key[0]

    @property
    def track_id(self) -> str:
        return self.key[1]


@dataclass(frozen=True)
class SamplingPlan:
    samples: tuple[SampledTrack, ...]
    requested: dict[str, int]
    available: dict[str, int]

    def __iter__(self):
        return iter(self.samples)

    def __len__(self) -> int:
        return len(self.samples)


def sample_tracks(db: TrackDatabase, clip: Clip, cfg: SamplingConfig, rng: np.random.Generator) -> SamplingPlan:
    """Draw tracks for one clip, avoiding every track id present in the clip."""
    L = len(clip)
    taken_ids = clip.track_ids()
    used_sources: set[str] = set()
    samples: list[SampledTrack] = []
    requested, available = {}, {}
    for cls in TRACKING_CLASSES:
        n = cfg.count(cls)
        requested[cls] = n
        eligible = []
        for key in db.keys(cls):
            recs = db.tracks[key]
            src = recs[0].source_track_id
            if key[1] in taken_ids or src in taken_ids:
                continue
            if len(recs) >= L or len(recs) >= cfg.min_track_length:
                eligible.append(key)
        available[cls] = len(eligible)
        if n == 0 or not eligible:
            continue
        got = 0
        for i in rng.permutation(len(eligible)):
            if got == n:
                break
            key = eligible[int(i)]
            src = db.tracks[key][0].source_track_id
            if src in used_sources:
                continue
            size = len(db.tracks[key])
            start = int(rng.integers(0, size - L + 1)) if size >= L else 0
            samples.append(SampledTrack(key, start, min(size, L)))
            used_sources.add(src)
            got += 1
    return SamplingPlan(tuple(samples), requested, available)


# -- injection ---------------------------------------------------------------


@dataclass
class InjectedTrackReport:
    track_id: str
    source_track_id: str
    class_name: str
    start_offset: int
    frames_present: list[int]
    pruned_frames: list[int]

    @property
    def has_gap(self) -> bool:
        f = self.frames_present
        return any(b - a > 1 for a, b in zip(f, f[1:]))


@dataclass
class AugmentationReport:
    scene_id: str
    start: int
    length: int
    requested: dict[str, int]
    available: dict[str, int]
    tracks: list[InjectedTrackReport]
    points_removed: int = 0
    points_added: int = 0

    @property
    def shortfall(self) -> dict[str, int]:
        sampled: dict[str, int] = {}
        for t in self.tracks:
            sampled[t.class_name] = sampled.get(t.class_name, 0) + 1
        return {c: n - sampled.get(c, 0) for c, n in self.requested.items() if n > sampled.get(c, 0)}

    def to_dict(self) -> dict:
        return {
            "scene_id": self.scene_id,
            "start": self.start,
            "length": self.length,
            "requested": dict(self.requested),
            "available": dict(self.available),
            "shortfall": self.shortfall,
            "tracks": [
                {
                    "track_id": t.track_id,
                    "source_track_id": t.source_track_id,
                    "class": t.class_name,
                    "start_offset": t.start_offset,
                    "frames_present": list(t.frames_present),
                    "pruned_frames": list(t.pruned_frames),
                    "gap": t.has_gap,
                }
                for t in self.tracks
            ],
            "injected_boxes": sum(len(t.frames_present) for t in self.tracks),
            "pruned_boxes": sum(len(t.pruned_frames) for t in self.tracks),
            "points_removed": self.points_removed,
            "points_added": self.points_added,
        }


def placed_box(rec: TrackInstanceRecord, target_pose: Pose, placement: str = WORLD) -> tuple[Box3D, Box3D]:
    """The record's box in the target frame's ego frame and in the world frame."""
    if placement == WORLD:
        return world_to_ego(rec.world_box, target_pose), rec.world_box
    local = world_to_ego(rec.world_box, rec.ego_pose)
    return local, ego_to_world(local, target_pose)


def inject_tracks(
    clip: Clip, plan: SamplingPlan | Iterable[SampledTrack], db: TrackDatabase, placement: str = WORLD
) -> tuple[Clip, AugmentationReport]:
    samples = tuple(plan)
    reports = [
        InjectedTrackReport(s.track_id, db.tracks[s.key][0].source_track_id, s.class_name, s.start, [], [])
        for s in samples
    ]
    frames, clouds = [], []
    removed = added = 0
    for k, (frame, cloud) in enumerate(zip(clip.frames, clip.clouds)):
        occupied = [world_to_ego(a.box, frame.ego_pose) for a in frame.annotations]
        survivors: list[tuple[int, TrackInstanceRecord, Box3D, Box3D]] = []
        for i, s in enumerate(samples):
            if k >= s.length:
                continue
            rec = db.tracks[s.key][s.start + k]
            local, world = placed_box(rec, frame.ego_pose, placement)
            if any(bev_overlap_area(local, b) > 0.0 for b in occupied):
                reports[i].pruned_frames.append(k)
                continue
            occupied.append(local)
            survivors.append((i, rec, local, world))
            reports[i].frames_present.append(k)

        pts = cloud.points
        keep = np.ones(len(pts), dtype=bool)
        for _, _, local, _ in survivors:
            keep &= ~local.contains(pts, bev_only=True)
        removed += int((~keep).sum())
        parts = [pts[keep]]
        anns = list(frame.annotations)
        for i, rec, local, world in survivors:
            obj = rec.object_points.points
            xyz = local.from_object_frame(obj)
            parts.append(np.column_stack([xyz, obj[:, 3]]).astype(np.float32))
            added += len(obj)
            anns.append(Annotation(rec.track_id, world, rec.num_points))
        frames.append(replace(frame, annotations=tuple(anns)))
        clouds.append(PointCloud(np.concatenate(parts)))

    plan_req = plan.requested if isinstance(plan, SamplingPlan) else {}
    plan_av = plan.available if isinstance(plan, SamplingPlan) else {}
    report = AugmentationReport(clip.scene_id, clip.start, len(clip), dict(plan_req), dict(plan_av), reports, removed, added)
    return Clip(clip.scene_id, clip.start, tuple(frames), tuple(clouds)), report


def augment_clip(clip: Clip, db: TrackDatabase, cfg: SamplingConfig, rng: np.random.Generator) -> tuple[Clip, AugmentationReport]:
    return inject_tracks(clip, sample_tracks(db, clip, cfg, rng), db, cfg.placement)
