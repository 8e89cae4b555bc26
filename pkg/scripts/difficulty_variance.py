"""Per-sample unlearning effort on the reference model.

Takes a tier-stratified set of memorized sequences, ascends each one alone
to the stop bars, and tabulates updates-to-stop and mean parameter change
next to the difficulty score. The headline number is the coefficient of
variation of the parameter change: forgetting cost is a property of the
sample, not a constant of the model.
"""

import argparse
import os
import sys

from forgetlab.experiments import ExperimentConfig, run_experiment


def main():
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--artifacts", default="runs/reference")
    ap.add_argument("--out", default="runs/diffvar")
    ap.add_argument("--seed", type=int, default=0)
    ap.add_argument("--n", type=int, default=20, dest="n_samples")
    args = ap.parse_args()

    config = ExperimentConfig.from_dict({
        "kind": "diffvar",
        "out_dir": args.out,
        "seed": args.seed,
        "corpus_path": os.path.join(args.artifacts, "corpus.jsonl"),
        "checkpoint_path": os.path.join(args.artifacts, "model.ckpt"),
        "estimator": {"sigma": 1e-3, "n_draws": 32},
        "unlearn": {"learning_rate": 5e-5, "max_steps": 300},
        "experiment": {"n_samples": args.n_samples},
    })
    return run_experiment(config)


if __name__ == "__main__":
    sys.exit(main())
