"""Confidence vs GT-matched query propagation on a seeded simulated benchmark.

    python3 scripts/propagation_ablation.py --scenes 100 --out results/propagation.json
"""

import argparse
import json
from concurrent.futures import ProcessPoolExecutor
from pathlib import Path

from tbakit.experiments import BenchmarkConfig, run_propagation_ablation
from tbakit.simulate import SurrogateDetectorConfig


def main():
    p = argparse.ArgumentParser(description=__doc__, formatter_class=argparse.RawDescriptionHelpFormatter)
    p.add_argument("--scenes", type=int, default=100)
    p.add_argument("--frames", type=int, default=40)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--p-det", type=float, default=0.9)
    p.add_argument("--clutter", type=float, default=1.0)
    p.add_argument("--tau", type=float, default=0.4)
    p.add_argument("--jobs", type=int, default=1)
    p.add_argument("--out", type=Path)
    a = p.parse_args()

    bench = BenchmarkConfig(num_scenes=a.scenes, num_frames=a.frames, seed=a.seed)
    det = SurrogateDetectorConfig(p_det=a.p_det, clutter_rate=a.clutter, rng_seed=a.seed)
    if a.jobs > 1:
        with ProcessPoolExecutor(a.jobs) as ex:
            out = run_propagation_ablation(bench, det, a.tau, executor=ex)
    else:
        out = run_propagation_ablation(bench, det, a.tau)

    print(f"{'mode':<12}{'AMOTA':>8}{'MOTA':>8}{'IDS':>7}{'FP slots':>10}{'propagated':>12}")
    for mode, r in out["modes"].items():
        ov = r["report"]["overall"]
        st = r["stats"]
        print(f"{mode:<12}{ov['AMOTA']:>8.3f}{ov['MOTA']:>8.3f}{ov['IDS']:>7d}{st['fp_propagated_slots']:>10d}{st['propagated_slots']:>12d}")
    for mode, r in out["modes"].items():
        print(f"\n[{mode}]\n{r['table']}")
    if a.out:
        a.out.parent.mkdir(parents=True, exist_ok=True)
        a.out.write_text(json.dumps(out, indent=2))


if __name__ == "__main__":
    main()
