"""Seeded desk-scale experiments on simulated scenes.

* propagation: confidence vs GT-matched query propagation, with full
  tracking reports for both modes.
* sampling rate / clip length: augmentation statistics (injected boxes,
  pruned boxes, replaced points) as the rate or the clip length varies.
"""

from __future__ import annotations

from concurrent.futures import Executor
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np

from tbakit.engine import CONFIDENCE, GT_MATCHED, DecoderConfig, PropagationPolicy, RunStats, run_tracker
from tbakit.metrics import MatchingConfig, evaluate
from tbakit.scene_io import Scene, TrackingResult, load_clip, write_points
from tbakit.simulate import SceneScript, SurrogateDetectorConfig, derive_seed, generate_scene
from tbakit.track_sampling import SamplingConfig, TrackDatabase, augment_clip, build_track_db


@dataclass(frozen=True)
class BenchmarkConfig:
    num_scenes: int = 100
    num_frames: int = 40
    seed: int = 0
    script: dict = field(default_factory=dict)

    def scripts(self) -> list[SceneScript]:
        return [
            SceneScript.from_dict({**self.script, "rng_seed": self.seed + i, "num_frames": self.num_frames})
            for i in range(self.num_scenes)
        ]


def _map(executor: Executor | None, fn, *iterables):
    return list(executor.map(fn, *iterables)) if executor is not None else list(map(fn, *iterables))


def _scene_only(script: SceneScript) -> Scene:
    return generate_scene(script)[0]


def benchmark_scenes(cfg: BenchmarkConfig, executor: Executor | None = None) -> list[Scene]:
    return _map(executor, _scene_only, cfg.scripts())


def _track(scene, detector, policy, decoder):
    return run_tracker(scene, detector, policy, decoder)


def track_all(scenes, detector, policy, decoder=DecoderConfig(), executor=None) -> tuple[TrackingResult, RunStats]:
    n = len(scenes)
    outs = _map(executor, _track, scenes, [detector] * n, [policy] * n, [decoder] * n)
    results, stats = {}, RunStats()
    for res, st in outs:
        results.update(res.results)
        stats.merge(st)
    return TrackingResult(results), stats


def run_propagation_ablation(
    bench: BenchmarkConfig = BenchmarkConfig(),
    detector: SurrogateDetectorConfig = SurrogateDetectorConfig(p_det=0.9, clutter_rate=1.0),
    tau_pass: float = 0.4,
    decoder: DecoderConfig = DecoderConfig(),
    executor: Executor | None = None,
) -> dict:
    """Run both propagation modes on the same scenes and detector seeds."""
    scenes = benchmark_scenes(bench, executor)
    out = {"benchmark": asdict(bench), "detector": asdict(detector), "tau_pass": tau_pass, "modes": {}}
    for mode in (GT_MATCHED, CONFIDENCE):
        result, stats = track_all(scenes, detector, PropagationPolicy(mode, tau_pass), decoder, executor)
        report = evaluate(scenes, result, MatchingConfig())
        out["modes"][mode] = {"stats": stats.to_dict(), "report": report.to_dict(), "table": report.format_table()}
    return out


def _write_scene_points(root: Path, script: SceneScript) -> Scene:
    scene, clouds = generate_scene(script)
    for rel, cloud in clouds.items():
        write_points(cloud, root / rel)
    return scene


def augmentation_statistics(
    scenes: Sequence[Scene], db: TrackDatabase, point_root, clip_len: int, cfg: SamplingConfig
) -> dict:
    """Aggregate injection statistics over all non-overlapping clips of every scene."""
    totals = {"clips": 0, "sampled_tracks": 0, "injected_boxes": 0, "pruned_boxes": 0, "gap_tracks": 0,
              "points_removed": 0, "points_added": 0, "shortfall": 0}
    for scene in scenes:
        for start in range(0, len(scene.frames) - clip_len + 1, clip_len):
            clip = load_clip(scene, start, clip_len, point_root)
            rng = np.random.default_rng(derive_seed(cfg.rng_seed, scene.scene_id, start))
            _, rep = augment_clip(clip, db, cfg, rng)
            d = rep.to_dict()
            totals["clips"] += 1
            totals["sampled_tracks"] += len(d["tracks"])
            totals["injected_boxes"] += d["injected_boxes"]
            totals["pruned_boxes"] += d["pruned_boxes"]
            totals["gap_tracks"] += sum(t["gap"] for t in d["tracks"])
            totals["points_removed"] += d["points_removed"]
            totals["points_added"] += d["points_added"]
            totals["shortfall"] += sum(d["shortfall"].values())
    c = max(1, totals["clips"])
    totals["injected_per_clip"] = totals["injected_boxes"] / c
    n = totals["injected_boxes"] + totals["pruned_boxes"]
    totals["prune_rate"] = totals["pruned_boxes"] / n if n else 0.0
    return totals


def run_sampling_ablation(
    workdir,
    bench: BenchmarkConfig = BenchmarkConfig(num_scenes=10, num_frames=24),
    rates: Sequence[float] = (0.0, 0.25, 0.5, 1.0),
    clip_lengths: Sequence[int] = (3,),
    seed: int = 0,
) -> list[dict]:
    """Augmentation statistics for every (rate, clip length) pair on one simulated dataset."""
    root = Path(workdir)
    scenes = [_write_scene_points(root, s) for s in bench.scripts()]
    db = build_track_db(scenes, root)
    rows = []
    for L in clip_lengths:
        for rate in rates:
            stats = augmentation_statistics(scenes, db, root, L, SamplingConfig(sampling_rate=rate, rng_seed=seed))
            rows.append({"clip_len": L, "rate": rate, **stats})
    return rows
