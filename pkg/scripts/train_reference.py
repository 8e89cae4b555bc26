"""Train the reference model every other experiment script picks up.

Corpus seed 7 with the stock tier mix, 150 epochs at lr 1e-3. The run
directory ends up holding model.ckpt, corpus.jsonl, loss_curve.csv and
summary.json; point the other scripts at it via --artifacts.
"""

import argparse
import sys

from forgetlab.experiments import ExperimentConfig, run_experiment


def main():
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--out", default="runs/reference")
    ap.add_argument("--seed", type=int, default=7)
    ap.add_argument("--epochs", type=int, default=150)
    ap.add_argument("--lr", type=float, default=1e-3)
    args = ap.parse_args()

    config = ExperimentConfig.from_dict({
        "kind": "train",
        "out_dir": args.out,
        "seed": args.seed,
        "optimizer": {"learning_rate": args.lr, "epochs": args.epochs,
                      "batch_size": 32, "seed": 0},
    })
    return run_experiment(config)


if __name__ == "__main__":
    sys.exit(main())
