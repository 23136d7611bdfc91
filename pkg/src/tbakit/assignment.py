"""Two-stage ground-truth assignment for track and proposal queries.

Stage 1 keeps each track query on the ground truth it was matched to in the
previous frame. Stage 2 runs an optimal (Hungarian) assignment between the
proposal queries and the ground truths left over, using an L1 box cost plus
a focal classification cost.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

from tbakit import CLASS_INDEX, TRACKING_CLASSES
from tbakit.errors import AssignmentError
from tbakit.geometry import Box3D, encode_box

PROPOSAL = "proposal"
TRACK = "track"
EPS = 1e-12


@dataclass(frozen=True)
class Prediction:
    slot_id: int
    kind: str
    box: Box3D
    class_scores: tuple[float, ...]
    prev_gt: str | None = None

    def __post_init__(self):
        scores = tuple(float(s) for s in self.class_scores)
        if self.kind not in (PROPOSAL, TRACK):
            raise ValueError(f"kind must be 'proposal' or 'track', got {self.kind!r}")
        if self.kind == PROPOSAL and self.prev_gt is not None:
            raise ValueError("a proposal prediction cannot carry a previous ground truth")
        if len(scores) != len(TRACKING_CLASSES):
            raise ValueError(f"expected {len(TRACKING_CLASSES)} class scores, got {len(scores)}")
        if not all(math.isfinite(s) and 0.0 <= s <= 1.0 for s in scores):
            raise ValueError("class scores must be finite and in [0, 1]")
        object.__setattr__(self, "class_scores", scores)


@dataclass(frozen=True)
class GroundTruth:
    track_id: str
    box: Box3D


@dataclass(frozen=True)
class CostConfig:
    alpha: float = 0.25
    gamma: float = 2.0
    l1_weight: float = 1.0
    cls_weight: float = 1.0
    # subtract the background focal term as well (DETR-style); can go negative
    bipolar: bool = False


def focal_cost(scores: Sequence[float], class_name: str, alpha: float = 0.25, gamma: float = 2.0, bipolar: bool = False) -> float:
    p = float(scores[CLASS_INDEX[class_name]])
    pos = -alpha * (1.0 - p) ** gamma * math.log(max(p, EPS))
    if not bipolar:
        return pos
    neg = -(1.0 - alpha) * p**gamma * math.log(max(1.0 - p, EPS))
    return pos - neg


def match_cost(pred: Prediction, gt: Box3D, cfg: CostConfig = CostConfig()) -> float:
    l1 = float(np.abs(encode_box(pred.box) - encode_box(gt)).sum())
    cls = focal_cost(pred.class_scores, gt.class_name, cfg.alpha, cfg.gamma, cfg.bipolar)
    return cfg.l1_weight * l1 + cfg.cls_weight * cls


# -- Hungarian ---------------------------------------------------------------


def _shortest_augmenting_path(c: np.ndarray):
    """Square min-cost assignment with dual potentials (Kuhn-Munkres, O(n^3)).

    Returns ``col_of_row`` and potentials ``u``, ``v`` such that
    ``c[i, j] - u[i] - v[j] >= 0`` everywhere with equality on the matching.
    """
    n = c.shape[0]
    u = np.zeros(n + 1)
    v = np.zeros(n + 1)
    owner = np.zeros(n + 1, dtype=np.int64)  # owner[j]: 1-based row holding column j
    way = np.zeros(n + 1, dtype=np.int64)
    for i in range(1, n + 1):
        owner[0] = i
        j0 = 0
        minv = np.full(n + 1, np.inf)
        used = np.zeros(n + 1, dtype=bool)
        while True:
            used[j0] = True
            i0 = owner[j0]
            free = ~used[1:]
            cur = c[i0 - 1] - u[i0] - v[1:]
            better = free & (cur < minv[1:])
            minv[1:][better] = cur[better]
            way[1:][better] = j0
            masked = np.where(free, minv[1:], np.inf)
            j1 = int(np.argmin(masked)) + 1
            delta = masked[j1 - 1]
            used_cols = np.flatnonzero(used)
            u[owner[used_cols]] += delta
            v[used_cols] -= delta
            minv[1:][free] -= delta
            j0 = j1
            if owner[j0] == 0:
                break
        while j0:
            j1 = way[j0]
            owner[j0] = owner[j1]
            j0 = j1
    col_of_row = np.empty(n, dtype=np.int64)
    for j in range(1, n + 1):
        col_of_row[owner[j] - 1] = j - 1
    return col_of_row, u[1:], v[1:]


def _lexicographic_optimum(tight: np.ndarray, col_of_row: np.ndarray) -> np.ndarray:
    """Lexicographically smallest perfect matching inside the equality subgraph.

    Every optimal assignment uses only tight edges of an optimal dual, so the
    smallest one is found row by row: give row i its smallest tight column
    that still admits a perfect matching of the remaining rows.
    """
    n = len(col_of_row)
    col_of_row = col_of_row.copy()
    row_of_col = np.empty(n, dtype=np.int64)
    row_of_col[col_of_row] = np.arange(n)
    fixed_col = np.zeros(n, dtype=bool)
    adj = [np.flatnonzero(tight[i]) for i in range(n)]

    for i in range(n):
        target = col_of_row[i]
        for j in adj[i]:
            if fixed_col[j]:
                continue
            if j == target:
                break
            # Look for an alternating path from j's owner back to the column i releases.
            start = row_of_col[j]
            parent: dict[int, tuple[int, int]] = {}  # col -> (row reached from, previous col)
            frontier = [(start, j)]
            seen_cols = {j}
            found = None
            while frontier and found is None:
                nxt = []
                for row, via in frontier:
                    for col in adj[row]:
                        if fixed_col[col] or col in seen_cols:
                            continue
                        seen_cols.add(col)
                        parent[col] = (row, via)
                        if col == target:
                            found = col
                            break
                        nxt.append((row_of_col[col], col))
                    if found is not None:
                        break
                frontier = nxt
            if found is None:
                continue
            col = found
            while True:
                row, via = parent[col]
                col_of_row[row] = col
                row_of_col[col] = row
                if via == j:
                    break
                col = via
            col_of_row[i] = j
            row_of_col[j] = i
            break
        fixed_col[col_of_row[i]] = True
    return col_of_row


def hungarian(costs) -> list[tuple[int, int]]:
    """Minimum-cost assignment of the smaller side of an n x m cost matrix.

    Rectangular inputs are padded to square with a finite sentinel (max + 1).
    Among optimal assignments the one whose column-per-row vector (over the
    padded square) is lexicographically smallest is returned, so results are
    reproducible under ties. Returns (row, col) pairs sorted by row.
    """
    c = np.asarray(costs, dtype=float)
    if c.ndim != 2:
        if c.size == 0:
            return []
        raise ValueError(f"cost matrix must be 2-D, got shape {c.shape}")
    n, m = c.shape
    if n == 0 or m == 0:
        return []
    if not np.isfinite(c).all():
        raise AssignmentError("cost matrix contains non-finite entries")
    size = max(n, m)
    if n != m:
        square = np.full((size, size), c.max() + 1.0)
        square[:n, :m] = c
    else:
        square = c
    col_of_row, u, v = _shortest_augmenting_path(square)
    reduced = square - u[:, None] - v[None, :]
    tol = 1e-10 * max(1.0, float(np.abs(square).max()))
    col_of_row = _lexicographic_optimum(reduced <= tol, col_of_row)
    return [(i, int(col_of_row[i])) for i in range(n) if col_of_row[i] < m]


def assignment_cost(costs, pairs) -> float:
    c = np.asarray(costs, dtype=float)
    return float(sum(c[i, j] for i, j in pairs))


# -- two-stage assignment ----------------------------------------------------


@dataclass
class AssignmentResult:
    """Per-prediction ground-truth index (or None) with the stage that set it."""

    matches: list[int | None]
    stages: list[int | None]
    cost_matrix: np.ndarray = field(default_factory=lambda: np.zeros((0, 0)))
    proposal_rows: list[int] = field(default_factory=list)
    gt_cols: list[int] = field(default_factory=list)

    def pairs(self) -> list[tuple[int, int]]:
        return [(p, g) for p, g in enumerate(self.matches) if g is not None]

    def matched_gts(self) -> set[int]:
        return {g for g in self.matches if g is not None}

    def to_dict(self, preds: Sequence[Prediction], gts: Sequence[GroundTruth]) -> dict:
        return {
            "matches": [
                {
                    "slot_id": preds[p].slot_id,
                    "kind": preds[p].kind,
                    "gt_index": g,
                    "gt_track_id": None if g is None else gts[g].track_id,
                    "stage": s,
                }
                for p, (g, s) in enumerate(zip(self.matches, self.stages))
            ],
            "cost_matrix": {
                "rows_slot_id": [preds[p].slot_id for p in self.proposal_rows],
                "cols_gt_track_id": [gts[g].track_id for g in self.gt_cols],
                "values": [[float(x) for x in row] for row in self.cost_matrix],
            },
        }


def assign_two_stage(
    preds: Sequence[Prediction], gts: Sequence[GroundTruth], cfg: CostConfig = CostConfig()
) -> AssignmentResult:
    gt_index = {}
    for g, gt in enumerate(gts):
        if gt.track_id in gt_index:
            raise AssignmentError(f"duplicate ground-truth id {gt.track_id!r}")
        gt_index[gt.track_id] = g

    matches: list[int | None] = [None] * len(preds)
    stages: list[int | None] = [None] * len(preds)
    claimed: dict[str, int] = {}
    for p, pred in enumerate(preds):
        if pred.kind != TRACK or pred.prev_gt is None:
            continue
        if pred.prev_gt in claimed:
            raise AssignmentError(
                f"track predictions {preds[claimed[pred.prev_gt]].slot_id} and {pred.slot_id} "
                f"both carry ground truth {pred.prev_gt!r}"
            )
        claimed[pred.prev_gt] = p
        g = gt_index.get(pred.prev_gt)
        if g is not None:
            matches[p] = g
            stages[p] = 1

    taken = {g for g in matches if g is not None}
    rows = [p for p, pred in enumerate(preds) if pred.kind == PROPOSAL]
    cols = [g for g in range(len(gts)) if g not in taken]
    costs = np.array([[match_cost(preds[p], gts[g].box, cfg) for g in cols] for p in rows]).reshape(len(rows), len(cols))
    for r, c in hungarian(costs):
        matches[rows[r]] = cols[c]
        stages[rows[r]] = 2
    return AssignmentResult(matches, stages, costs, rows, cols)


def one_hot_scores(class_name: str, p: float = 1.0) -> tuple[float, ...]:
    scores = [0.0] * len(TRACKING_CLASSES)
    scores[CLASS_INDEX[class_name]] = p
    return tuple(scores)
