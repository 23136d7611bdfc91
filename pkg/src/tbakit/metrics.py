"""nuScenes-style tracking evaluation.

Per class, predictions are matched to ground truth frame by frame with a
greedy, score-ordered assignment on BEV center distance. Because a greedy
match only depends on higher-scored predictions, one matching pass over all
predictions yields the matches for every score threshold: a threshold just
drops the lower-scored predictions and their matches.

AMOTA/AMOTP average MOTAR and MOTP over a sweep of recall targets; the
remaining CLEAR-MOT style metrics are reported at the threshold that
maximizes MOTA.
"""

from __future__ import annotations

import math
from dataclasses import asdict, dataclass, field
from typing import Sequence

import numpy as np

from tbakit import TRACKING_CLASSES
from tbakit.errors import FormatError, TbaKitError
from tbakit.scene_io import Scene, TrackingResult

COLUMNS = (
    "AMOTA", "AMOTP", "RECALL", "MOTAR", "MOTA", "MOTP", "MT", "ML", "FAF",
    "TP", "FP", "FN", "IDS", "FRAG", "TID", "LGD",
)
COUNT_COLUMNS = ("MT", "ML", "TP", "FP", "FN", "IDS", "FRAG")


@dataclass(frozen=True)
class MatchingConfig:
    match_distance: float = 2.0
    recall_points: int = 40
    min_recall: float = 0.1
    mt_ratio: float = 0.8
    ml_ratio: float = 0.2
    # MOTP charged at recall targets the tracker never reaches; None -> match_distance
    worst_motp: float | None = None

    def __post_init__(self):
        if self.match_distance <= 0:
            raise ValueError("match_distance must be positive")
        if self.recall_points < 2:
            raise ValueError("recall_points must be >= 2")
        if not 0.0 < self.min_recall <= 1.0:
            raise ValueError("min_recall must be in (0, 1]")

    @property
    def recall_targets(self) -> np.ndarray:
        return np.linspace(self.min_recall, 1.0, self.recall_points).round(12)

    @property
    def motp_penalty(self) -> float:
        return self.match_distance if self.worst_motp is None else self.worst_motp


# -- per-frame matching ------------------------------------------------------


def match_frame(gt_xy, pred_xy, scores, match_distance: float = 2.0):
    """Greedy matching of one frame and one class.

    Predictions are visited in descending score (ties keep input order) and
    each takes the nearest unclaimed ground truth within ``match_distance``
    (ties go to the lower index). Returns ``(tp, fp, fn)`` where ``tp`` is a
    list of ``(gt_index, pred_index, distance)``.
    """
    gt_xy = np.asarray(gt_xy, dtype=float).reshape(-1, 2)
    pred_xy = np.asarray(pred_xy, dtype=float).reshape(-1, 2)
    scores = np.asarray(scores, dtype=float).reshape(-1)
    if len(pred_xy) != len(scores):
        raise ValueError("one score per prediction required")
    tp: list[tuple[int, int, float]] = []
    used = np.zeros(len(gt_xy), dtype=bool)
    matched_pred = np.zeros(len(pred_xy), dtype=bool)
    if len(gt_xy) and len(pred_xy):
        dist = np.hypot(pred_xy[:, None, 0] - gt_xy[None, :, 0], pred_xy[:, None, 1] - gt_xy[None, :, 1])
        for k in np.argsort(-scores, kind="stable"):
            d = np.where(used, np.inf, dist[k])
            g = int(np.argmin(d))
            if d[g] <= match_distance:
                used[g] = True
                matched_pred[k] = True
                tp.append((g, int(k), float(d[g])))
    fp = [int(k) for k in np.flatnonzero(~matched_pred)]
    fn = [int(g) for g in np.flatnonzero(~used)]
    return tp, fp, fn


# -- class-level data --------------------------------------------------------


@dataclass
class _GtTrack:
    frames: np.ndarray  # frame indices where the GT is present (ascending)
    pred_ids: list  # matched tracking id per presence frame (None if unmatched)
    scores: np.ndarray  # score of the matching prediction, NaN if unmatched
    dists: np.ndarray
    period: float


@dataclass
class ClassData:
    """All matches of one class, computed once with every prediction included."""

    tracks: list[_GtTrack] = field(default_factory=list)
    pred_scores: np.ndarray = field(default_factory=lambda: np.zeros(0))
    num_frames: int = 0

    @property
    def num_gt(self) -> int:
        return int(sum(len(t.frames) for t in self.tracks))

    def tp_scores(self) -> np.ndarray:
        if not self.tracks:
            return np.zeros(0)
        s = np.concatenate([t.scores for t in self.tracks])
        return s[np.isfinite(s)]


def _frame_index(scenes: Sequence[Scene]) -> dict[str, tuple[int, int]]:
    index = {}
    for si, scene in enumerate(scenes):
        for fi, f in enumerate(scene.frames):
            if f.frame_id in index:
                raise FormatError(f"frame_id {f.frame_id!r} appears in more than one scene", f"scene {scene.scene_id}")
            index[f.frame_id] = (si, fi)
    return index


def build_class_data(scenes: Sequence[Scene], result: TrackingResult, class_name: str, cfg: MatchingConfig = MatchingConfig()) -> ClassData:
    index = _frame_index(scenes)
    for frame_id in result.results:
        if frame_id not in index:
            raise FormatError(f"result refers to unknown frame_id {frame_id!r}", "results")
    data = ClassData(num_frames=sum(len(s.frames) for s in scenes))
    scores_all = []
    for scene in scenes:
        period = scene.frame_period_s()
        rows: dict[str, list] = {}
        order: list[str] = []
        for fi, frame in enumerate(scene.frames):
            gts = [a for a in frame.annotations if a.box.class_name == class_name]
            preds = [b for b in result.boxes(frame.frame_id) if b.tracking_name == class_name]
            scores = [b.tracking_score for b in preds]
            scores_all.extend(scores)
            tp, _, _ = match_frame(
                [a.box.center[:2] for a in gts], [b.xy for b in preds], scores, cfg.match_distance
            )
            hit = {g: (k, d) for g, k, d in tp}
            for g, a in enumerate(gts):
                if a.track_id not in rows:
                    rows[a.track_id] = []
                    order.append(a.track_id)
                if g in hit:
                    k, d = hit[g]
                    rows[a.track_id].append((fi, preds[k].tracking_id, preds[k].tracking_score, d))
                else:
                    rows[a.track_id].append((fi, None, np.nan, 0.0))
        for tid in order:
            r = rows[tid]
            data.tracks.append(
                _GtTrack(
                    frames=np.array([x[0] for x in r], dtype=np.int64),
                    pred_ids=[x[1] for x in r],
                    scores=np.array([x[2] for x in r], dtype=float),
                    dists=np.array([x[3] for x in r], dtype=float),
                    period=period,
                )
            )
    data.pred_scores = np.asarray(scores_all, dtype=float)
    return data


# -- CLEAR-MOT at one threshold ----------------------------------------------


@dataclass(frozen=True)
class ClearMot:
    TP: int
    FP: int
    FN: int
    IDS: int
    FRAG: int
    MT: int
    ML: int
    P: int
    MOTA: float
    MOTP: float | None
    MOTAR: float | None
    RECALL: float
    FAF: float
    TID: float | None
    LGD: float | None


def _track_stats(t: _GtTrack, threshold: float, cfg: MatchingConfig):
    m = t.scores >= threshold
    n = len(m)
    ids = frag = 0
    last = None
    for present, pid in zip(m, t.pred_ids):
        if present:
            if last is not None and pid != last:
                ids += 1
            last = pid
    runs = int(m[0]) + int(np.count_nonzero(m[1:] & ~m[:-1])) if n else 0
    frag = max(0, runs - 1)
    ratio = m.sum() / n
    mt = ratio > cfg.mt_ratio
    ml = ratio < cfg.ml_ratio
    if m.any():
        mf = t.frames[m]
        tid = (mf[0] - t.frames[0]) * t.period
        gaps = [mf[0] - t.frames[0], t.frames[-1] - mf[-1]]
        if len(mf) > 1:
            gaps.append(int(np.max(np.diff(mf) - 1)))
        lgd = max(gaps) * t.period
    else:
        tid = None
        lgd = (t.frames[-1] - t.frames[0] + 1) * t.period
    return ids, frag, mt, ml, tid, lgd


def clear_mot(data: ClassData, threshold: float = -np.inf, cfg: MatchingConfig = MatchingConfig()) -> ClearMot:
    """CLEAR-MOT counts and derived metrics with predictions scored >= ``threshold``."""
    p = data.num_gt
    tp = ids = frag = mt = ml = 0
    dist_sum = 0.0
    tids, lgds = [], []
    for t in data.tracks:
        m = t.scores >= threshold
        tp += int(m.sum())
        dist_sum += float(t.dists[m].sum())
        i, f, a, b, tid, lgd = _track_stats(t, threshold, cfg)
        ids += i
        frag += f
        mt += int(a)
        ml += int(b)
        if tid is not None:
            tids.append(tid)
        lgds.append(lgd)
    fp = int(np.count_nonzero(data.pred_scores >= threshold)) - tp
    fn = p - tp
    recall = tp / p if p else 0.0
    mota = max(0.0, 1.0 - (fp + fn + ids) / p) if p else 0.0
    motp = dist_sum / tp if tp else None
    motar = motar_value(tp, fp, fn, ids, p) if tp else None
    faf = 100.0 * fp / data.num_frames if data.num_frames else 0.0
    return ClearMot(
        TP=tp, FP=fp, FN=fn, IDS=ids, FRAG=frag, MT=mt, ML=ml, P=p,
        MOTA=mota, MOTP=motp, MOTAR=motar, RECALL=recall, FAF=faf,
        TID=float(np.mean(tids)) if tids else None,
        LGD=float(np.mean(lgds)) if lgds else None,
    )


def motar_value(tp: int, fp: int, fn: int, ids: int, p: int) -> float:
    """Recall-normalized MOTA at the operating point's achieved recall ``tp / p``."""
    r = tp / p
    return max(0.0, 1.0 - (ids + fp + fn - (1.0 - r) * p) / (r * p))


# -- recall sweep ------------------------------------------------------------


@dataclass(frozen=True)
class SweepPoint:
    target_recall: float
    threshold: float | None
    motar: float
    motp: float
    metrics: ClearMot | None


@dataclass(frozen=True)
class SweepResult:
    amota: float
    amotp: float
    curve: tuple[SweepPoint, ...]
    best: ClearMot


def recall_thresholds(data: ClassData, cfg: MatchingConfig = MatchingConfig()) -> list[float | None]:
    """Per recall target, the highest score threshold whose recall reaches it (None if unreachable)."""
    tp_scores = np.sort(data.tp_scores())[::-1]
    p = data.num_gt
    out: list[float | None] = []
    for r in cfg.recall_targets:
        k = max(1, math.ceil(r * p - 1e-9))
        out.append(float(tp_scores[k - 1]) if k <= len(tp_scores) else None)
    return out


def amota_sweep(data: ClassData, cfg: MatchingConfig = MatchingConfig()) -> SweepResult:
    if data.num_gt == 0:
        raise TbaKitError("no ground truth for this class")
    cache: dict[float, ClearMot] = {}
    curve = []
    for r, thr in zip(cfg.recall_targets, recall_thresholds(data, cfg)):
        if thr is None:
            curve.append(SweepPoint(float(r), None, 0.0, cfg.motp_penalty, None))
            continue
        if thr not in cache:
            cache[thr] = clear_mot(data, thr, cfg)
        m = cache[thr]
        curve.append(SweepPoint(float(r), thr, m.MOTAR or 0.0, m.MOTP if m.MOTP is not None else cfg.motp_penalty, m))
    achieved = [pt.metrics for pt in curve if pt.metrics is not None]
    if achieved:
        best = achieved[0]
        for m in achieved[1:]:
            if m.MOTA > best.MOTA:
                best = m
    else:
        best = clear_mot(data, -np.inf, cfg)
    return SweepResult(
        amota=float(np.mean([pt.motar for pt in curve])),
        amotp=float(np.mean([pt.motp for pt in curve])),
        curve=tuple(curve),
        best=best,
    )


# -- detection mAP -----------------------------------------------------------


def average_precision(data_frames, threshold: float, min_recall: float = 0.1, min_precision: float = 0.1) -> float | None:
    """nuScenes-style AP for one class and one center-distance threshold.

    ``data_frames`` is a list of (gt_xy, pred_xy, scores) per frame. Returns
    None when the class has no ground truth.
    """
    npos = sum(len(g) for g, _, _ in data_frames)
    if npos == 0:
        return None
    entries = []
    for fi, (_, pxy, sc) in enumerate(data_frames):
        for k in range(len(sc)):
            entries.append((float(sc[k]), fi, k))
    if not entries:
        return 0.0
    order = sorted(range(len(entries)), key=lambda i: -entries[i][0])
    taken = [np.zeros(len(g), dtype=bool) for g, _, _ in data_frames]
    tp = np.zeros(len(entries))
    for rank, i in enumerate(order):
        _, fi, k = entries[i]
        gxy = np.asarray(data_frames[fi][0], dtype=float).reshape(-1, 2)
        if not len(gxy):
            continue
        pxy = np.asarray(data_frames[fi][1], dtype=float).reshape(-1, 2)[k]
        d = np.hypot(gxy[:, 0] - pxy[0], gxy[:, 1] - pxy[1])
        d[taken[fi]] = np.inf
        g = int(np.argmin(d))
        if d[g] <= threshold:
            taken[fi][g] = True
            tp[rank] = 1.0
    ctp = np.cumsum(tp)
    cfp = np.cumsum(1.0 - tp)
    prec = ctp / (ctp + cfp)
    rec = ctp / npos
    rec_interp = np.linspace(0.0, 1.0, 101)
    prec_interp = np.interp(rec_interp, rec, prec, right=0.0)
    kept = prec_interp[round(100 * min_recall) + 1 :] - min_precision
    kept[kept < 0] = 0.0
    return float(np.mean(kept) / (1.0 - min_precision))


def detection_map(
    scenes: Sequence[Scene], result: TrackingResult, thresholds: Sequence[float] = (0.5, 1.0, 2.0, 4.0)
) -> float:
    """Mean AP over classes with ground truth, each averaged over distance thresholds."""
    aps = []
    for cls in TRACKING_CLASSES:
        frames = []
        for scene in scenes:
            for f in scene.frames:
                preds = [b for b in result.boxes(f.frame_id) if b.tracking_name == cls]
                frames.append(
                    (
                        [a.box.center[:2] for a in f.annotations if a.box.class_name == cls],
                        [b.xy for b in preds],
                        [b.tracking_score for b in preds],
                    )
                )
        per = [average_precision(frames, t) for t in thresholds]
        if per[0] is not None:
            aps.append(float(np.mean(per)))
    return float(np.mean(aps)) if aps else 0.0


# -- reports -----------------------------------------------------------------


@dataclass
class ClassReport:
    AMOTA: float
    AMOTP: float
    RECALL: float
    MOTAR: float
    MOTA: float
    MOTP: float | None
    MT: int
    ML: int
    FAF: float
    TP: int
    FP: int
    FN: int
    IDS: int
    FRAG: int
    TID: float | None
    LGD: float | None

    @classmethod
    def from_sweep(cls, sweep: SweepResult) -> ClassReport:
        b = sweep.best
        return cls(
            AMOTA=sweep.amota, AMOTP=sweep.amotp, RECALL=b.RECALL, MOTAR=b.MOTAR or 0.0, MOTA=b.MOTA,
            MOTP=b.MOTP, MT=b.MT, ML=b.ML, FAF=b.FAF, TP=b.TP, FP=b.FP, FN=b.FN, IDS=b.IDS,
            FRAG=b.FRAG, TID=b.TID, LGD=b.LGD,
        )


@dataclass
class MetricsReport:
    classes: dict[str, ClassReport | None]
    mAP: float | None = None
    config: MatchingConfig = field(default_factory=MatchingConfig)

    @property
    def present(self) -> dict[str, ClassReport]:
        return {k: v for k, v in self.classes.items() if v is not None}

    def overall(self) -> dict:
        rows = list(self.present.values())
        out = {}
        for col in COLUMNS:
            vals = [getattr(r, col) for r in rows if getattr(r, col) is not None]
            if col in COUNT_COLUMNS:
                out[col] = int(sum(vals))
            else:
                out[col] = float(np.mean(vals)) if vals else None
        return out

    def to_dict(self) -> dict:
        return {
            "version": 1,
            "columns": list(COLUMNS),
            "classes": {k: (None if v is None else {c: getattr(v, c) for c in COLUMNS}) for k, v in self.classes.items()},
            "overall": self.overall(),
            "mAP": self.mAP,
            "config": asdict(self.config),
        }

    def format_table(self) -> str:
        head = f"{'Class':<11}" + "".join(f"{c:>9}" for c in COLUMNS)
        lines = [head, "-" * len(head)]

        def fmt(col, v):
            if v is None:
                return f"{'-':>9}"
            if col in COUNT_COLUMNS:
                return f"{int(v):>9d}"
            if col == "FAF":
                return f"{v:>9.1f}"
            if col in ("TID", "LGD"):
                return f"{v:>9.2f}"
            return f"{v:>9.3f}"

        for name, rep in self.classes.items():
            if rep is None:
                continue
            lines.append(f"{name.capitalize():<11}" + "".join(fmt(c, getattr(rep, c)) for c in COLUMNS))
        ov = self.overall()
        lines.append("-" * len(head))
        lines.append(f"{'Overall':<11}" + "".join(fmt(c, ov[c]) for c in COLUMNS))
        if self.mAP is not None:
            lines.append(f"mAP {self.mAP:.4f}")
        return "\n".join(lines)


def evaluate_class(scenes: Sequence[Scene], result: TrackingResult, class_name: str, cfg: MatchingConfig = MatchingConfig()) -> ClassReport | None:
    data = build_class_data(scenes, result, class_name, cfg)
    if data.num_gt == 0:
        return None
    return ClassReport.from_sweep(amota_sweep(data, cfg))


def evaluate(
    scenes: Sequence[Scene],
    result: TrackingResult,
    cfg: MatchingConfig = MatchingConfig(),
    *,
    with_map: bool = True,
    executor=None,
) -> MetricsReport:
    """Full report over the seven classes; classes without ground truth are marked absent."""
    if not any(a for s in scenes for f in s.frames for a in f.annotations):
        raise TbaKitError("ground truth contains no annotations for any class")
    _frame_index(scenes)
    if executor is None:
        reports = [evaluate_class(scenes, result, c, cfg) for c in TRACKING_CLASSES]
    else:
        futures = [executor.submit(evaluate_class, scenes, result, c, cfg) for c in TRACKING_CLASSES]
        reports = [f.result() for f in futures]
    return MetricsReport(
        classes=dict(zip(TRACKING_CLASSES, reports)),
        mAP=detection_map(scenes, result) if with_map else None,
        config=cfg,
    )
