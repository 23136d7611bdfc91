"""Scalar evaluation of the per-frame and clip training losses.

A frame loss is the weighted sum of a heatmap term, a trajectory term and,
for each prediction head (``D`` for decoder outputs, ``R`` for refined
outputs), a box regression term and a classification term. The clip loss
sums frame losses. Nothing here computes gradients.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, fields
from typing import Mapping, Sequence

import numpy as np

from tbakit import CLASS_INDEX, TRACKING_CLASSES
from tbakit.assignment import AssignmentResult, GroundTruth, Prediction
from tbakit.geometry import encode_box

EPS = 1e-12
HEADS = ("D", "R")


@dataclass(frozen=True)
class LossWeights:
    heatmap: float = 1.0
    trajectory: float = 0.5
    reg_D: float = 0.25
    cls_D: float = 1.0
    reg_R: float = 0.25
    cls_R: float = 1.0

    def __post_init__(self):
        for f in fields(self):
            v = getattr(self, f.name)
            if not (math.isfinite(v) and v >= 0):
                raise ValueError(f"loss weight {f.name} must be finite and >= 0, got {v}")

    @classmethod
    def from_dict(cls, d: Mapping[str, float]) -> LossWeights:
        known = {f.name for f in fields(cls)}
        unknown = set(d) - known
        if unknown:
            raise ValueError(f"unknown loss weights: {sorted(unknown)}")
        return cls(**{k: float(v) for k, v in d.items()})


@dataclass(frozen=True)
class FrameLossBreakdown:
    heatmap: float
    trajectory: float
    reg: dict[str, float]
    cls: dict[str, float]
    weights: LossWeights

    @property
    def total(self) -> float:
        w = self.weights
        return (
            w.heatmap * self.heatmap
            + w.trajectory * self.trajectory
            + w.reg_D * self.reg["D"]
            + w.cls_D * self.cls["D"]
            + w.reg_R * self.reg["R"]
            + w.cls_R * self.cls["R"]
        )

    def to_dict(self) -> dict:
        return {
            "L_h": self.heatmap,
            "L_f": self.trajectory,
            "L_reg": dict(self.reg),
            "L_cls": dict(self.cls),
            "total": self.total,
        }


def l1_box_loss(preds: Sequence[Prediction], gts: Sequence[GroundTruth], assignment: AssignmentResult) -> float:
    """Mean L1 distance between encoded boxes over matched pairs; 0 with no matches."""
    pairs = assignment.pairs()
    if not pairs:
        return 0.0
    diffs = [np.abs(encode_box(preds[p].box) - encode_box(gts[g].box)).sum() for p, g in pairs]
    return float(np.mean(diffs))


def focal_cls_loss(
    class_scores: Sequence[Sequence[float]],
    assignment: AssignmentResult,
    gt_classes: Sequence[str],
    alpha: float = 0.25,
    gamma: float = 2.0,
) -> float:
    """Sigmoid focal loss summed over predictions and classes, divided by the match count.

    Matched predictions target their ground-truth class (and background
    elsewhere); unmatched predictions target background on every class.
    """
    scores = np.asarray(class_scores, dtype=float).reshape(-1, len(TRACKING_CLASSES))
    targets = np.zeros_like(scores)
    for p, g in assignment.pairs():
        targets[p, CLASS_INDEX[gt_classes[g]]] = 1.0
    p_t = np.where(targets == 1.0, scores, 1.0 - scores)
    alpha_t = np.where(targets == 1.0, alpha, 1.0 - alpha)
    loss = -alpha_t * (1.0 - p_t) ** gamma * np.log(np.clip(p_t, EPS, None))
    return float(loss.sum() / max(1, len(assignment.pairs())))


def gaussian_focal_heatmap_loss(pred_heatmap, gt_heatmap, alpha: float = 2.0, beta: float = 4.0) -> float:
    """Penalty-reduced focal loss on heatmaps, normalized by the number of peaks (min 1).

    Cells where the target is exactly 1 are peaks; elsewhere the negative term
    is down-weighted by ``(1 - target) ** beta``.
    """
    pred = np.asarray(pred_heatmap, dtype=float)
    gt = np.asarray(gt_heatmap, dtype=float)
    if pred.shape != gt.shape:
        raise ValueError(f"heatmap shapes differ: {pred.shape} vs {gt.shape}")
    pos = gt == 1.0
    pos_loss = -np.log(np.clip(pred, EPS, None)) * (1.0 - pred) ** alpha * pos
    neg_loss = -np.log(np.clip(1.0 - pred, EPS, None)) * pred**alpha * (1.0 - gt) ** beta * ~pos
    return float((pos_loss.sum() + neg_loss.sum()) / max(1, int(pos.sum())))


def trajectory_loss(pred_traj, gt_traj) -> float:
    """Mean per-waypoint L1 distance between (tracks, horizon, 2) trajectories."""
    pred = np.asarray(pred_traj, dtype=float)
    gt = np.asarray(gt_traj, dtype=float)
    if pred.shape != gt.shape:
        raise ValueError(f"trajectory shapes differ: {pred.shape} vs {gt.shape}")
    if pred.size == 0:
        return 0.0
    pred = pred.reshape(-1, pred.shape[-2], pred.shape[-1])
    gt = gt.reshape(pred.shape)
    return float(np.abs(pred - gt).sum(axis=-1).mean())


def frame_loss(
    heatmap: float,
    trajectory: float,
    reg: Mapping[str, float],
    cls: Mapping[str, float],
    weights: LossWeights = LossWeights(),
) -> FrameLossBreakdown:
    for name, parts in (("reg", reg), ("cls", cls)):
        if set(parts) != set(HEADS):
            raise ValueError(f"{name} losses need exactly the heads {HEADS}")
    return FrameLossBreakdown(float(heatmap), float(trajectory), dict(reg), dict(cls), weights)


def clip_loss(frames: Sequence[FrameLossBreakdown]) -> float:
    return float(sum(f.total for f in frames))


def evaluate_frame(
    heads: Mapping[str, Sequence[Prediction]],
    gts: Sequence[GroundTruth],
    assignments: Mapping[str, AssignmentResult],
    pred_heatmap=None,
    gt_heatmap=None,
    pred_traj=None,
    gt_traj=None,
    weights: LossWeights = LossWeights(),
    alpha: float = 0.25,
    gamma: float = 2.0,
) -> FrameLossBreakdown:
    """Compute every component of one frame's loss from raw predictions."""
    gt_classes = [g.box.class_name for g in gts]
    reg, cls = {}, {}
    for head in HEADS:
        preds = heads.get(head, ())
        asg = assignments[head]
        reg[head] = l1_box_loss(preds, gts, asg)
        cls[head] = focal_cls_loss([p.class_scores for p in preds], asg, gt_classes, alpha, gamma) if preds else 0.0
    lh = 0.0 if pred_heatmap is None else gaussian_focal_heatmap_loss(pred_heatmap, gt_heatmap)
    lf = 0.0 if pred_traj is None else trajectory_loss(pred_traj, gt_traj)
    return frame_loss(lh, lf, reg, cls, weights)
