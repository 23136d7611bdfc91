"""Track-sampling augmentation statistics across sampling rates and clip lengths.

    python3 scripts/sampling_ablation.py --rates 0 0.25 0.5 1 --clip-lens 3
    python3 scripts/sampling_ablation.py --rates 1 --clip-lens 1 2 3 4 5
"""

import argparse
import json
import tempfile
from pathlib import Path

from tbakit.experiments import BenchmarkConfig, run_sampling_ablation

COLS = ("clip_len", "rate", "clips", "sampled_tracks", "injected_per_clip", "prune_rate", "gap_tracks", "points_added", "points_removed")


def main():
    p = argparse.ArgumentParser(description=__doc__, formatter_class=argparse.RawDescriptionHelpFormatter)
    p.add_argument("--scenes", type=int, default=10)
    p.add_argument("--frames", type=int, default=24)
    p.add_argument("--rates", type=float, nargs="+", default=[0.0, 0.25, 0.5, 1.0])
    p.add_argument("--clip-lens", type=int, nargs="+", default=[3])
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out", type=Path)
    a = p.parse_args()

    with tempfile.TemporaryDirectory() as tmp:
        rows = run_sampling_ablation(tmp, BenchmarkConfig(a.scenes, a.frames, a.seed), a.rates, a.clip_lens, a.seed)
    print("".join(f"{c:>18}" for c in COLS))
    for r in rows:
        print("".join(f"{r[c]:>18.3f}" if isinstance(r[c], float) else f"{r[c]:>18}" for c in COLS))
    if a.out:
        a.out.parent.mkdir(parents=True, exist_ok=True)
        a.out.write_text(json.dumps(rows, indent=2))


if __name__ == "__main__":
    main()
