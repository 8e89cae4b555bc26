"""Per-tier difficulty table over the reference model.

Scores every corpus sequence with the Monte-Carlo estimator and groups the
values along the four sample-characteristic axes (frequency, complexity,
rare tokens, generation probability), with one-sided significance tests on
the assertable directions. Outputs characteristics.csv, per_sample.csv and
summary.json under --out.
"""

import argparse
import os
import sys

from forgetlab.experiments import ExperimentConfig, run_experiment


def main():
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--artifacts", default="runs/reference",
                    help="directory produced by train_reference.py")
    ap.add_argument("--out", default="runs/characteristics")
    ap.add_argument("--seed", type=int, default=0)
    ap.add_argument("--draws", type=int, default=32)
    ap.add_argument("--sigma", type=float, default=1e-3)
    args = ap.parse_args()

    config = ExperimentConfig.from_dict({
        "kind": "characteristics",
        "out_dir": args.out,
        "seed": args.seed,
        "corpus_path": os.path.join(args.artifacts, "corpus.jsonl"),
        "checkpoint_path": os.path.join(args.artifacts, "model.ckpt"),
        "estimator": {"sigma": args.sigma, "n_draws": args.draws},
    })
    return run_experiment(config)


if __name__ == "__main__":
    sys.exit(main())
