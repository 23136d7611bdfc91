"""Independent reference implementations used as test oracles.

Nothing here imports the code paths it checks; each oracle is written
directly from the definition, favouring clarity over speed.
"""

from __future__ import annotations

import itertools
import math
from fractions import Fraction

import numpy as np


# -- geometry ----------------------------------------------------------------


def rect_corners(cx, cy, length, width, yaw):
    c, s = math.cos(yaw), math.sin(yaw)
    out = []
    for lx, ly in ((length / 2, width / 2), (-length / 2, width / 2), (-length / 2, -width / 2), (length / 2, -width / 2)):
        out.append((cx + c * lx - s * ly, cy + s * lx + c * ly))
    return out


def _clip(subject, a, b):
    """Keep the part of ``subject`` left of the directed edge a->b."""

    def inside(p):
        return (b[0] - a[0]) * (p[1] - a[1]) - (b[1] - a[1]) * (p[0] - a[0]) >= 0

    def intersect(p, q):
        x1, y1, x2, y2 = p[0], p[1], q[0], q[1]
        x3, y3, x4, y4 = a[0], a[1], b[0], b[1]
        den = (x1 - x2) * (y3 - y4) - (y1 - y2) * (x3 - x4)
        t = ((x1 - x3) * (y3 - y4) - (y1 - y3) * (x3 - x4)) / den
        return (x1 + t * (x2 - x1), y1 + t * (y2 - y1))

    out = []
    n = len(subject)
    for i in range(n):
        cur, prev = subject[i], subject[i - 1]
        if inside(cur):
            if not inside(prev):
                out.append(intersect(prev, cur))
            out.append(cur)
        elif inside(prev):
            out.append(intersect(prev, cur))
    return out


def sutherland_hodgman_area(poly_a, poly_b):
    """Intersection area of two convex CCW polygons by Sutherland-Hodgman clipping."""
    out = list(poly_a)
    for i in range(len(poly_b)):
        if not out:
            return 0.0
        out = _clip(out, poly_b[i], poly_b[(i + 1) % len(poly_b)])
    if len(out) < 3:
        return 0.0
    s = 0.0
    for i in range(len(out)):
        x1, y1 = out[i]
        x2, y2 = out[(i + 1) % len(out)]
        s += x1 * y2 - x2 * y1
    return abs(s) / 2


def rotate_z(point, angle):
    c, s = math.cos(angle), math.sin(angle)
    x, y, z = point
    return (c * x - s * y, s * x + c * y, z)


# -- assignment --------------------------------------------------------------


def brute_force_assignment(costs):
    """Minimum-cost assignment by enumeration.

    Rectangular matrices are padded to square with a constant sentinel, and
    the winner is the lexicographically first column-per-row permutation
    among the optima. Returns (pairs, total) with pairs on real cells only.
    """
    n = len(costs)
    m = len(costs[0]) if n else 0
    if n == 0 or m == 0:
        return [], 0
    size = max(n, m)
    big = max(max(row) for row in costs)
    big = abs(big) + 1 if big >= 0 else 1

    def cell(i, j):
        if i < n and j < m:
            return costs[i][j]
        return big

    best = None
    best_perm = None
    for perm in itertools.permutations(range(size)):
        total = sum(Fraction(cell(i, perm[i])) for i in range(size))
        if best is None or total < best:
            best, best_perm = total, perm
    pairs = [(i, best_perm[i]) for i in range(size) if i < n and best_perm[i] < m]
    return pairs, sum(Fraction(costs[i][j]) for i, j in pairs)


def brute_force_min_total(costs):
    """Minimum total over injective assignments of the smaller side (no padding)."""
    n = len(costs)
    m = len(costs[0]) if n else 0
    if n == 0 or m == 0:
        return 0
    if n <= m:
        return min(sum(costs[i][p[i]] for i in range(n)) for p in itertools.permutations(range(m), n))
    return min(sum(costs[p[j]][j] for j in range(m)) for p in itertools.permutations(range(n), m))


def permutation_min_total(costs):
    """Exact minimum over injective assignments of the smaller side, by full enumeration.

    Sums run row by row in vectorized form; candidates within a small band of
    the minimum are re-summed with ``math.fsum`` so float inputs get the
    correctly rounded optimum. Integer inputs are exact throughout.
    """
    c = np.asarray(costs)
    if c.size == 0:
        return 0
    if c.shape[0] > c.shape[1]:
        c = c.T
    n, m = c.shape
    perms = np.array(list(itertools.permutations(range(m), n)), dtype=np.int64)
    totals = np.zeros(len(perms), dtype=c.dtype)
    for i in range(n):
        totals += c[i, perms[:, i]]
    if np.issubdtype(c.dtype, np.integer):
        return int(totals.min())
    lo = totals.min()
    near = perms[totals <= lo + 1e-9 * max(1.0, abs(lo))]
    return min(math.fsum(c[i, p[i]] for i in range(n)) for p in near)


# -- tracking metrics --------------------------------------------------------


def greedy_frame_match(gts, preds, max_dist):
    """gts: list of (gt_id, x, y); preds: list of (pred_id, x, y, score).

    Predictions in descending score (ties by list position) each take the
    nearest still-free GT within ``max_dist`` (ties by GT position).
    Returns a dict gt position -> (pred position, distance).
    """
    order = sorted(range(len(preds)), key=lambda k: (-preds[k][3], k))
    used = set()
    matches = {}
    for k in order:
        _, px, py, _ = preds[k]
        best = None
        for g, (_, gx, gy) in enumerate(gts):
            if g in used:
                continue
            d = math.hypot(px - gx, py - gy)
            if d <= max_dist and (best is None or d < best[1]):
                best = (g, d)
        if best is not None:
            used.add(best[0])
            matches[best[0]] = (k, best[1])
    return matches


def count_clear_mot(frames, max_dist=2.0):
    """Brute-force CLEAR-MOT counter for one scene and one class.

    ``frames`` is a list of (gts, preds) per frame in the format of
    ``greedy_frame_match``. Returns a dict of TP, FP, FN, IDS, FRAG, P, MOTA
    (clamped at 0) and MOTP.
    """
    tp = fp = fn = ids = 0
    dist_sum = 0.0
    history = {}  # gt_id -> list of matched pred id or None, per frame present
    for gts, preds in frames:
        matches = greedy_frame_match(gts, preds, max_dist)
        tp += len(matches)
        fp += len(preds) - len(matches)
        fn += len(gts) - len(matches)
        for g, (gt_id, _, _) in enumerate(gts):
            if g in matches:
                k, d = matches[g]
                dist_sum += d
                history.setdefault(gt_id, []).append(preds[k][0])
            else:
                history.setdefault(gt_id, []).append(None)
    frag = 0
    for seq in history.values():
        last = None
        for v in seq:
            if v is not None:
                if last is not None and v != last:
                    ids += 1
                last = v
        matched_flags = [v is not None for v in seq]
        seen_match = False
        for i in range(1, len(matched_flags)):
            if matched_flags[i - 1]:
                seen_match = True
            if matched_flags[i] and not matched_flags[i - 1] and seen_match:
                frag += 1
    p = tp + fn
    mota = max(0.0, 1 - (fp + fn + ids) / p) if p else float("nan")
    motp = dist_sum / tp if tp else float("nan")
    return {"TP": tp, "FP": fp, "FN": fn, "IDS": ids, "FRAG": frag, "P": p, "MOTA": mota, "MOTP": motp}
