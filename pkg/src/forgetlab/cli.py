"""Command-line front end.

Each verb runs one experiment kind and writes its tables into the output
directory.  Settings resolve as flags > config file > defaults.  Exit
codes: 0 success, 2 invalid configuration or input file, 3 numerical
failure, 4 a compare/sensitivity summary assertion failed.
"""

from __future__ import annotations

import argparse
import json
import sys

from .errors import (CheckpointError, ConfigError, CorpusFormatError,
                     InvalidArgument, NumericalFailure)
from .experiments import EXPERIMENT_KINDS, ExperimentConfig, run_experiment

_HELP = {
    "train": "train a character model on a synthetic corpus",
    "mrd": "score forget samples with all difficulty estimators",
    "unlearn": "run one unlearning method to the early-stop bars",
    "evaluate": "metrics report for a checkpoint over all splits",
    "characteristics": "per-tier difficulty table with direction checks",
    "sensitivity": "draw-count and noise-scale stability sweeps",
    "compare": "methods x weightings x seeds efficiency grid",
    "diffvar": "per-sample parameter-change table after unlearning",
}

_WEIGHTING_FLAG = {"mrd": "mrd_proportional", "inverse": "inverse_mrd_proportional"}


def build_parser():
    parser = argparse.ArgumentParser(
        prog="forgetlab",
        description="Workbench for measuring and steering how hard "
                    "individual training sequences are to unlearn.")
    sub = parser.add_subparsers(dest="kind", required=True, metavar="VERB")
    for kind in EXPERIMENT_KINDS:
        sp = sub.add_parser(kind, help=_HELP[kind])
        sp.add_argument("--config", metavar="PATH",
                        help="JSON experiment config")
        sp.add_argument("--seed", type=int, metavar="N",
                        help="master seed (overrides config)")
        sp.add_argument("--out", metavar="DIR",
                        help="output directory (overrides config)")
        sp.add_argument("--method",
                        choices=("sga", "cga", "graddiff", "npo", "po"),
                        help="unlearning method (overrides config)")
        sp.add_argument("--weighting", choices=sorted(_WEIGHTING_FLAG),
                        help="curriculum weighting (overrides config)")
    return parser


def resolve_config(args):
    doc = {}
    if args.config:
        try:
            with open(args.config) as fh:
                doc = json.load(fh)
        except (OSError, json.JSONDecodeError) as exc:
            raise ConfigError(f"{args.config}: {exc}") from exc
        if not isinstance(doc, dict):
            raise ConfigError(f"{args.config}: config must be a JSON object")
    doc["kind"] = args.kind
    if args.seed is not None:
        doc["seed"] = args.seed
    if args.out:
        doc["out_dir"] = args.out
    unlearn = dict(doc.get("unlearn", {}))
    if args.method:
        unlearn["method"] = args.method
    if args.weighting:
        unlearn["weighting_scheme"] = _WEIGHTING_FLAG[args.weighting]
    if unlearn:
        doc["unlearn"] = unlearn
    if "out_dir" not in doc:
        raise ConfigError("an output directory is required (--out or config)")
    return ExperimentConfig.from_dict(doc)


def main(argv=None):
    args = build_parser().parse_args(argv)
    try:
        config = resolve_config(args)
        return run_experiment(config)
    except (ConfigError, InvalidArgument, CheckpointError,
            CorpusFormatError) as exc:
        print(f"forgetlab: error: {exc}", file=sys.stderr)
        return 2
    except NumericalFailure as exc:
        print(f"forgetlab: numerical failure: {exc}", file=sys.stderr)
        return 3


if __name__ == "__main__":
    sys.exit(main())
