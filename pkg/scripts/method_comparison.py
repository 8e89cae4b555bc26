"""Unlearning-method grid: curriculum against the baselines.

Regenerates the seed-7 corpus with an 18% forget split (20 sequences) and
runs every method x weighting cell over five seeds from the same reference
checkpoint, early-stopping at the initial-model bars. The settings are the
ones under which the curriculum's update-count advantage is stable: lr
5e-5, an 800-step budget, difficulty refresh every 25 steps with 16 draws.

Exit code 4 means the curriculum did not beat uniform ascent in the
summary; the per-run compare_table.csv is still written. Set
FORGETLAB_WORKERS to parallelize cells across processes.
"""

import argparse
import os
import sys

from forgetlab.experiments import ExperimentConfig, run_experiment

FULL_GRID = [["sga", "uniform"],
             ["cga", "mrd_proportional"],
             ["cga", "inverse_mrd_proportional"],
             ["graddiff", "uniform"],
             ["npo", "uniform"],
             ["po", "uniform"]]


def main():
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--artifacts", default="runs/reference")
    ap.add_argument("--out", default="runs/compare")
    ap.add_argument("--seeds", type=int, nargs="+", default=[0, 1, 2, 3, 4])
    ap.add_argument("--headline-only", action="store_true",
                    help="run just the sga and cga cells the summary grades")
    args = ap.parse_args()

    grid = FULL_GRID[:2] if args.headline_only else FULL_GRID
    config = ExperimentConfig.from_dict({
        "kind": "compare",
        "out_dir": args.out,
        "seed": 7,
        "corpus": {"seed": 7, "forget_fraction": 0.18},
        "checkpoint_path": os.path.join(args.artifacts, "model.ckpt"),
        "unlearn": {"learning_rate": 5e-5, "max_steps": 800,
                    "mrd_refresh_interval": 25, "mrd_draws": 16,
                    "mrd_sigma": 1e-3},
        "experiment": {"seeds": args.seeds, "grid": grid},
    })
    return run_experiment(config)


if __name__ == "__main__":
    sys.exit(main())
