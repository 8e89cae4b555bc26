"""Three-estimator difficulty table for the forget split.

Runs the single-draw probe, the Monte-Carlo estimator, and the curvature
approximation over each forget sequence of the reference corpus, writing
mrd_report.jsonl plus a side-by-side CSV with rank agreement in the
summary. Pass --all-splits to score retain sequences too.
"""

import argparse
import os
import sys

from forgetlab.experiments import ExperimentConfig, run_experiment


def main():
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--artifacts", default="runs/reference")
    ap.add_argument("--out", default="runs/mrd")
    ap.add_argument("--seed", type=int, default=0)
    ap.add_argument("--draws", type=int, default=64)
    ap.add_argument("--all-splits", action="store_true")
    args = ap.parse_args()

    doc = {
        "kind": "mrd",
        "out_dir": args.out,
        "seed": args.seed,
        "corpus_path": os.path.join(args.artifacts, "corpus.jsonl"),
        "checkpoint_path": os.path.join(args.artifacts, "model.ckpt"),
        "estimator": {"sigma": 1e-3, "n_draws": args.draws},
    }
    if args.all_splits:
        doc["experiment"] = {"splits": "all"}
    return run_experiment(ExperimentConfig.from_dict(doc))


if __name__ == "__main__":
    sys.exit(main())
