"""Query lifecycle of a tracking-by-attention tracker with a surrogate decoder.

Each frame, track slots carried over from the previous frame are projected
forward (constant velocity) and ego-compensated, then re-associated with
the current detections. Detections nobody claimed enter as proposal slots.
Slots whose confidence exceeds ``tau_pass`` are emitted and, on first
emission, receive a persistent track id. Which slots survive into the next
frame depends on the propagation mode:

``confidence``
    keep every slot with confidence > tau_pass (inference-consistent).
``gt_matched``
    keep exactly the slots matched to a ground truth this frame.

The neural decoder is replaced by a nearest-center, class-constrained
association with a confidence bonus for tracked objects and multiplicative
decay for unmatched ones.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field, replace
from typing import Sequence

import numpy as np

from tbakit import CLASS_INDEX
from tbakit.assignment import PROPOSAL, TRACK, GroundTruth, Prediction, assign_two_stage
from tbakit.errors import PropagationError
from tbakit.geometry import Box3D, Pose, ego_to_world, transform_box, world_to_ego
from tbakit.scene_io import Scene, TrackedBox, TrackingResult
from tbakit.simulate import Detection, SurrogateDetectorConfig, derive_seed, surrogate_detect

CONFIDENCE = "confidence"
GT_MATCHED = "gt_matched"


@dataclass(frozen=True)
class PropagationPolicy:
    mode: str = CONFIDENCE
    tau_pass: float = 0.4
    max_proposals: int = 200

    def __post_init__(self):
        if self.mode not in (CONFIDENCE, GT_MATCHED):
            raise ValueError(f"unknown propagation mode {self.mode!r}")
        if not 0.0 < self.tau_pass < 1.0:
            raise ValueError("tau_pass must be in (0, 1)")
        if self.max_proposals < 0:
            raise ValueError("max_proposals must be >= 0")


@dataclass(frozen=True)
class DecoderConfig:
    gate: float = 2.0
    persistence_bonus: float = 0.15
    decay: float = 0.5
    # drop track slots unmatched for more than this many consecutive frames
    max_unmatched_frames: int | None = None
    horizon: int = 6
    # stage-2 (proposal) matches farther than this BEV distance do not count as
    # GT-matched for propagation and bookkeeping; None keeps every match
    gt_gate: float | None = 2.0

    def __post_init__(self):
        if self.gate <= 0 or not 0.0 <= self.decay <= 1.0 or self.persistence_bonus < 0:
            raise ValueError("invalid decoder configuration")
        if self.horizon < 1:
            raise ValueError("horizon must be >= 1")


@dataclass(frozen=True)
class QuerySlot:
    slot_id: int
    kind: str
    confidence: float
    box: Box3D
    class_scores: tuple[float, ...]
    track_uid: int | None = None
    prev_gt: str | None = None
    age_frames: int = 0
    unmatched_frames: int = 0
    trajectory: tuple[tuple[float, float], ...] = ()

    def __post_init__(self):
        if self.kind not in (PROPOSAL, TRACK):
            raise ValueError(f"bad slot kind {self.kind!r}")
        if self.kind == TRACK and self.age_frames < 1:
            raise ValueError("track slots must have age >= 1")
        if not math.isfinite(self.confidence):
            raise ValueError("slot confidence must be finite")

    def as_prediction(self) -> Prediction:
        return Prediction(self.slot_id, self.kind, self.box, self.class_scores, self.prev_gt if self.kind == TRACK else None)


@dataclass(frozen=True)
class EmittedBox:
    track_uid: int
    box: Box3D
    confidence: float
    slot_id: int


@dataclass
class StepStats:
    proposals: int = 0
    suppressed: int = 0
    births: int = 0
    propagated: int = 0
    # propagated slots that no ground truth was assigned to this frame
    fp_propagated: int = 0
    matched_proposal_conf: list[float] = field(default_factory=list)
    matched_track_conf: list[float] = field(default_factory=list)


@dataclass
class StepResult:
    emitted: list[EmittedBox]
    slots: tuple[QuerySlot, ...]
    next_uid: int
    next_slot_id: int
    predicted: dict[int, Box3D]
    stats: StepStats


def predict_trajectory(slot: QuerySlot, horizon: int, dt: float = 0.5) -> list[tuple[float, float]]:
    """Constant-velocity BEV centers for the next ``horizon`` frames."""
    if horizon < 1:
        raise ValueError("horizon must be >= 1")
    cx, cy = slot.box.center[0], slot.box.center[1]
    vx, vy = slot.box.velocity
    return [(cx + k * dt * vx, cy + k * dt * vy) for k in range(1, horizon + 1)]


def project_box(box: Box3D, ego_prev: Pose, ego_curr: Pose, dt: float) -> Box3D:
    """Advance a box one frame at constant velocity, then re-express it in the new ego frame."""
    moved = Box3D(
        (box.center[0] + dt * box.velocity[0], box.center[1] + dt * box.velocity[1], box.center[2]),
        box.size_wlh,
        box.yaw,
        box.velocity,
        box.class_name,
    ) if dt and (box.velocity[0] or box.velocity[1]) else box
    return transform_box(moved, ego_prev, ego_curr)


def _scores_with(scores: Sequence[float], class_name: str, conf: float) -> tuple[float, ...]:
    out = list(scores)
    out[CLASS_INDEX[class_name]] = conf
    return tuple(out)


def step(
    slots: Sequence[QuerySlot],
    detections: Sequence[Detection],
    policy: PropagationPolicy,
    ego_prev: Pose,
    ego_curr: Pose,
    *,
    decoder: DecoderConfig = DecoderConfig(),
    gts: Sequence[GroundTruth] | None = None,
    next_uid: int = 1,
    next_slot_id: int = 0,
    dt: float = 0.5,
) -> StepResult:
    """Advance the query set by one frame.

    ``slots`` carry boxes in the previous ego frame; ``detections`` and
    ``gts`` are in the current ego frame. Returns the boxes emitted for this
    frame and the slots that enter the next one.
    """
    uids = [s.track_uid for s in slots if s.track_uid is not None]
    if len(uids) != len(set(uids)):
        raise PropagationError("duplicate track_uid among input slots")
    if policy.mode == GT_MATCHED and gts is None:
        raise PropagationError("gt_matched propagation needs ground truth")

    stats = StepStats()
    predicted = {}
    tracks = []
    for s in slots:
        box = project_box(s.box, ego_prev, ego_curr, dt)
        predicted[s.slot_id] = box
        tracks.append(replace(s, box=box))

    # surrogate decoder: track slots re-detect their object, best first
    claimed: set[int] = set()
    order = sorted(range(len(tracks)), key=lambda i: (-tracks[i].confidence, tracks[i].slot_id))
    new_tracks: dict[int, QuerySlot] = {}
    for i in order:
        s = tracks[i]
        best, best_d = None, decoder.gate
        for k, det in enumerate(detections):
            if k in claimed or det.box.class_name != s.box.class_name:
                continue
            d = math.hypot(det.box.center[0] - s.box.center[0], det.box.center[1] - s.box.center[1])
            if d <= best_d and (best is None or d < best_d):
                best, best_d = k, d
        if best is not None:
            claimed.add(best)
            det = detections[best]
            conf = min(1.0, det.confidence + decoder.persistence_bonus)
            new_tracks[i] = replace(
                s, box=det.box, confidence=conf, class_scores=_scores_with(det.class_scores, det.box.class_name, conf),
                age_frames=s.age_frames + 1, unmatched_frames=0,
            )
        else:
            conf = s.confidence * decoder.decay
            new_tracks[i] = replace(
                s, confidence=conf, class_scores=_scores_with(s.class_scores, s.box.class_name, conf),
                age_frames=s.age_frames + 1, unmatched_frames=s.unmatched_frames + 1,
            )
    updated = [new_tracks[i] for i in range(len(tracks))]
    stats.suppressed = len(claimed)

    free = [k for k in range(len(detections)) if k not in claimed]
    free.sort(key=lambda k: -detections[k].confidence)
    for k in free[: policy.max_proposals]:
        det = detections[k]
        updated.append(QuerySlot(next_slot_id, PROPOSAL, det.confidence, det.box, det.class_scores))
        next_slot_id += 1
    stats.proposals = min(len(free), policy.max_proposals)

    # ground-truth assignment sees slot kinds as they entered the decoder
    matched = [False] * len(updated)
    if gts is not None:
        asg = assign_two_stage([s.as_prediction() for s in updated], gts)
        for idx, g in enumerate(asg.matches):
            s = updated[idx]
            if g is not None and asg.stages[idx] == 2 and decoder.gt_gate is not None:
                gc = gts[g].box.center
                if math.hypot(s.box.center[0] - gc[0], s.box.center[1] - gc[1]) > decoder.gt_gate:
                    g = None
            if g is not None:
                matched[idx] = True
                (stats.matched_track_conf if s.kind == TRACK else stats.matched_proposal_conf).append(s.confidence)
            updated[idx] = replace(s, prev_gt=None if g is None else gts[g].track_id)

    emitted = []
    for idx, s in enumerate(updated):
        if s.confidence > policy.tau_pass:
            if s.track_uid is None:
                s = replace(s, track_uid=next_uid, kind=TRACK, age_frames=max(1, s.age_frames))
                next_uid += 1
                stats.births += 1
            updated[idx] = s
            emitted.append(EmittedBox(s.track_uid, s.box, s.confidence, s.slot_id))

    keep = []
    for idx, s in enumerate(updated):
        if policy.mode == CONFIDENCE:
            survive = s.confidence > policy.tau_pass
        else:
            survive = matched[idx]
        if decoder.max_unmatched_frames is not None and s.unmatched_frames > decoder.max_unmatched_frames:
            survive = False
        if not survive:
            continue
        if s.kind == PROPOSAL:
            s = replace(s, kind=TRACK, age_frames=1)
        s = replace(s, trajectory=tuple(predict_trajectory(s, decoder.horizon, dt)))
        keep.append(s)
        if gts is not None and not matched[idx]:
            stats.fp_propagated += 1
    stats.propagated = len(keep)
    return StepResult(emitted, tuple(keep), next_uid, next_slot_id, predicted, stats)


@dataclass
class RunStats:
    frames: int = 0
    births: int = 0
    fp_propagated: int = 0
    propagated: int = 0
    suppressed: int = 0
    matched_proposal_conf: list[float] = field(default_factory=list)
    matched_track_conf: list[float] = field(default_factory=list)

    def add(self, s: StepStats) -> None:
        self.frames += 1
        self.births += s.births
        self.fp_propagated += s.fp_propagated
        self.propagated += s.propagated
        self.suppressed += s.suppressed
        self.matched_proposal_conf += s.matched_proposal_conf
        self.matched_track_conf += s.matched_track_conf

    def merge(self, other: RunStats) -> None:
        self.frames += other.frames
        self.births += other.births
        self.fp_propagated += other.fp_propagated
        self.propagated += other.propagated
        self.suppressed += other.suppressed
        self.matched_proposal_conf += other.matched_proposal_conf
        self.matched_track_conf += other.matched_track_conf

    def to_dict(self) -> dict:
        def mean(xs):
            return float(np.mean(xs)) if xs else None

        return {
            "frames": self.frames,
            "births": self.births,
            "propagated_slots": self.propagated,
            "fp_propagated_slots": self.fp_propagated,
            "suppressed_duplicates": self.suppressed,
            "avg_conf_matched_proposals": mean(self.matched_proposal_conf),
            "avg_conf_matched_tracks": mean(self.matched_track_conf),
        }


def scene_ground_truth(scene: Scene, k: int) -> list[GroundTruth]:
    f = scene.frames[k]
    return [GroundTruth(a.track_id, world_to_ego(a.box, f.ego_pose)) for a in f.annotations]


def run_tracker(
    scene: Scene,
    detector: SurrogateDetectorConfig,
    policy: PropagationPolicy = PropagationPolicy(),
    decoder: DecoderConfig = DecoderConfig(),
    *,
    use_gt: bool = True,
) -> tuple[TrackingResult, RunStats]:
    """Track one scene end to end with the surrogate detector.

    Ground truth is read from the scene's annotations. With ``use_gt`` it is
    also used for slot/GT bookkeeping (required by ``gt_matched``); in
    ``confidence`` mode it never changes the output.
    """
    if policy.mode == GT_MATCHED and not use_gt:
        raise PropagationError("gt_matched propagation needs ground truth")
    rng = np.random.default_rng(derive_seed(detector.rng_seed, scene.scene_id, "detector"))
    dt = scene.frame_period_s()
    slots: tuple[QuerySlot, ...] = ()
    next_uid, next_slot = 1, 0
    prev_pose = scene.frames[0].ego_pose
    results: dict[str, list[TrackedBox]] = {}
    stats = RunStats()
    for k, frame in enumerate(scene.frames):
        gts = scene_ground_truth(scene, k)
        dets = surrogate_detect(gts, detector, rng)
        frame_dt = (frame.timestamp_us - scene.frames[k - 1].timestamp_us) / 1e6 if k else dt
        res = step(
            slots, dets, policy, prev_pose, frame.ego_pose, decoder=decoder,
            gts=gts if use_gt else None, next_uid=next_uid, next_slot_id=next_slot, dt=frame_dt,
        )
        slots, next_uid, next_slot = res.slots, res.next_uid, res.next_slot_id
        prev_pose = frame.ego_pose
        stats.add(res.stats)
        results[frame.frame_id] = [
            TrackedBox.from_box(ego_to_world(e.box, frame.ego_pose), str(e.track_uid), e.confidence)
            for e in sorted(res.emitted, key=lambda e: e.track_uid)
        ]
    return TrackingResult(results), stats
