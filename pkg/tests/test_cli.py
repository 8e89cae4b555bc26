"""Command-line front end: flag resolution, exit codes, tiny end-to-end runs.

Most tests call main() in process so coverage and tracebacks stay useful;
one subprocess test proves the module entry point works from a shell.
"""

import json
import shutil
import subprocess
import sys

import numpy as np
import pytest

from forgetlab.cli import build_parser, main, resolve_config
from forgetlab.experiments import EXPERIMENT_KINDS
from forgetlab.lm import load_checkpoint
from forgetlab.mrd import load_mrd_report
from forgetlab.unlearn import load_run_log


def _write_config(path, doc):
    path.write_text(json.dumps(doc))
    return str(path)


# ---------------------------------------------------------------------------
# parser and config resolution
# ---------------------------------------------------------------------------

def test_parser_accepts_every_verb(tmp_path):
    parser = build_parser()
    for kind in EXPERIMENT_KINDS:
        args = parser.parse_args([kind, "--out", str(tmp_path)])
        assert args.kind == kind


def test_parser_rejects_unknown_verb():
    with pytest.raises(SystemExit):
        build_parser().parse_args(["frobnicate"])


def test_flags_override_config_file(tmp_path):
    cfg_path = _write_config(tmp_path / "c.json", {
        "seed": 3, "out_dir": "from_config",
        "unlearn": {"learning_rate": 1e-6}})
    args = build_parser().parse_args(
        ["unlearn", "--config", cfg_path, "--seed", "9",
         "--out", str(tmp_path / "out"), "--method", "cga",
         "--weighting", "mrd"])
    cfg = resolve_config(args)
    assert cfg.seed == 9
    assert cfg.out_dir == str(tmp_path / "out")
    assert cfg.unlearn["method"] == "cga"
    assert cfg.unlearn["weighting_scheme"] == "mrd_proportional"
    # untouched section keys survive the flag merge
    assert cfg.unlearn["learning_rate"] == 1e-6


def test_config_file_wins_when_flags_absent(tmp_path):
    cfg_path = _write_config(tmp_path / "c.json",
                             {"seed": 5, "out_dir": "somewhere"})
    args = build_parser().parse_args(["train", "--config", cfg_path])
    cfg = resolve_config(args)
    assert cfg.seed == 5
    assert cfg.out_dir == "somewhere"
    assert cfg.kind == "train"


def test_inverse_weighting_flag_maps_to_scheme(tmp_path):
    args = build_parser().parse_args(
        ["unlearn", "--out", str(tmp_path), "--weighting", "inverse"])
    cfg = resolve_config(args)
    assert cfg.unlearn["weighting_scheme"] == "inverse_mrd_proportional"


# ---------------------------------------------------------------------------
# exit codes
# ---------------------------------------------------------------------------

def test_missing_out_dir_exits_2(capsys):
    assert main(["train"]) == 2
    err = capsys.readouterr().err
    assert err.startswith("forgetlab: error:")
    assert "output directory" in err


def test_unreadable_config_exits_2(tmp_path, capsys):
    bad = tmp_path / "bad.json"
    bad.write_text("{nope")
    assert main(["train", "--config", str(bad),
                 "--out", str(tmp_path / "o")]) == 2
    assert "forgetlab: error:" in capsys.readouterr().err
    arr = tmp_path / "arr.json"
    arr.write_text("[1]")
    assert main(["train", "--config", str(arr),
                 "--out", str(tmp_path / "o")]) == 2


def test_unknown_config_field_exits_2(tmp_path, capsys):
    cfg = _write_config(tmp_path / "c.json", {"bogus": 1})
    assert main(["train", "--config", cfg, "--out", str(tmp_path / "o")]) == 2
    assert "unknown config fields" in capsys.readouterr().err


def test_malformed_corpus_file_exits_2(tmp_path, tiny_assets, capsys):
    broken = tmp_path / "broken.jsonl"
    broken.write_text("not a corpus\n")
    cfg = _write_config(tmp_path / "c.json", {
        "corpus_path": str(broken),
        "checkpoint_path": tiny_assets.ckpt_path,
        "experiment": {"heldout_size": 4}})
    assert main(["evaluate", "--config", cfg,
                 "--out", str(tmp_path / "o")]) == 2
    assert "forgetlab: error:" in capsys.readouterr().err


def test_corrupt_checkpoint_exits_2(tmp_path, tiny_assets, capsys):
    junk = tmp_path / "junk.ckpt"
    junk.write_bytes(b"\x00\x01 definitely not a checkpoint")
    cfg = _write_config(tmp_path / "c.json", {
        "corpus_path": tiny_assets.corpus_path,
        "checkpoint_path": str(junk),
        "experiment": {"heldout_size": 4}})
    assert main(["evaluate", "--config", cfg,
                 "--out", str(tmp_path / "o")]) == 2
    assert "forgetlab: error:" in capsys.readouterr().err


def test_invalid_method_in_config_exits_2(tmp_path, tiny_assets, capsys):
    cfg = _write_config(tmp_path / "c.json", {
        "corpus_path": tiny_assets.corpus_path,
        "checkpoint_path": tiny_assets.ckpt_path,
        "unlearn": {"method": "bogus", "max_steps": 2}})
    assert main(["unlearn", "--config", cfg,
                 "--out", str(tmp_path / "o")]) == 2
    assert "forgetlab: error:" in capsys.readouterr().err


def test_numerical_failure_exits_3(tmp_path, tiny_assets, capsys):
    cfg = _write_config(tmp_path / "c.json", {
        "corpus_path": tiny_assets.corpus_path,
        "checkpoint_path": tiny_assets.ckpt_path,
        "unlearn": {"method": "sga", "learning_rate": 1e300,
                    "max_steps": 3}})
    # the blow-up emits overflow warnings before the failure is raised
    with np.errstate(over="ignore", invalid="ignore"):
        rc = main(["unlearn", "--config", cfg, "--out", str(tmp_path / "o")])
    assert rc == 3
    assert "forgetlab: numerical failure:" in capsys.readouterr().err


def test_compare_gate_failure_exits_4(tmp_path, tiny_assets):
    # a learning rate this small cannot move anything, so both methods
    # exhaust the budget with equal medians and the CGA gate fails
    cfg = _write_config(tmp_path / "c.json", {
        "corpus_path": tiny_assets.corpus_path,
        "checkpoint_path": tiny_assets.ckpt_path,
        "unlearn": {"learning_rate": 1e-9, "max_steps": 3,
                    "mrd_draws": 2, "mrd_refresh_interval": 10},
        "experiment": {"grid": [["sga", "uniform"],
                                ["cga", "mrd_proportional"]],
                       "seeds": [0], "heldout_size": 4}})
    out = tmp_path / "o"
    assert main(["compare", "--config", cfg, "--out", str(out)]) == 4
    summary = json.loads((out / "summary.json").read_text())
    assert summary["pass"] is False
    assert summary["cga_beats_sga"] is False


# ---------------------------------------------------------------------------
# tiny end-to-end runs
# ---------------------------------------------------------------------------

def _train_config(tmp_path, tiny_assets, name="t.json"):
    return _write_config(tmp_path / name, {
        "corpus": {**tiny_assets.spec_dict, "seed": 11},
        "lm": {"embed_dim": 8, "num_layers": 1, "num_heads": 2, "seed": 2},
        "optimizer": {"epochs": 3, "batch_size": 8}})


def test_train_verb_is_deterministic(tmp_path, tiny_assets):
    cfg = _train_config(tmp_path, tiny_assets)
    out_a, out_b = tmp_path / "a", tmp_path / "b"
    assert main(["train", "--config", cfg, "--out", str(out_a)]) == 0
    assert main(["train", "--config", cfg, "--out", str(out_b)]) == 0
    for name in ("model.ckpt", "corpus.jsonl", "loss_curve.csv",
                 "summary.json"):
        assert (out_a / name).read_bytes() == (out_b / name).read_bytes()
    assert load_checkpoint(out_a / "model.ckpt").config.embed_dim == 8


def test_mrd_verb(tmp_path, tiny_assets):
    cfg = _write_config(tmp_path / "c.json", {
        "corpus_path": tiny_assets.corpus_path,
        "checkpoint_path": tiny_assets.ckpt_path,
        "estimator": {"n_draws": 2, "sigma": 1e-3, "probes": 2}})
    out = tmp_path / "o"
    assert main(["mrd", "--config", cfg, "--out", str(out)]) == 0
    estimates = load_mrd_report(out / "mrd_report.jsonl")
    assert len(estimates) == 3 * len(tiny_assets.corpus.forget)


def test_unlearn_verb_with_method_flag(tmp_path, tiny_assets):
    cfg = _write_config(tmp_path / "c.json", {
        "corpus_path": tiny_assets.corpus_path,
        "checkpoint_path": tiny_assets.ckpt_path,
        "unlearn": {"learning_rate": 1e-3, "max_steps": 4}})
    out = tmp_path / "o"
    assert main(["unlearn", "--config", cfg, "--out", str(out),
                 "--method", "graddiff"]) == 0
    summary = json.loads((out / "summary.json").read_text())
    assert summary["method"] == "graddiff"
    log = load_run_log(out / "run_log.jsonl")
    assert log.total_updates <= 4
    assert load_checkpoint(out / "unlearned.ckpt").params.values.shape \
        == tiny_assets.model.params.values.shape


def test_evaluate_verb(tmp_path, tiny_assets):
    cfg = _write_config(tmp_path / "c.json", {
        "corpus_path": tiny_assets.corpus_path,
        "checkpoint_path": tiny_assets.ckpt_path,
        "experiment": {"heldout_size": 4}})
    out = tmp_path / "o"
    assert main(["evaluate", "--config", cfg, "--out", str(out)]) == 0
    doc = json.loads((out / "metrics.json").read_text())
    assert set(doc["splits"]) == {"forget", "retain", "heldout"}


def test_module_entry_point_prints_help():
    proc = subprocess.run([sys.executable, "-m", "forgetlab", "--help"],
                          capture_output=True, text=True, timeout=60)
    assert proc.returncode == 0
    for kind in EXPERIMENT_KINDS:
        assert kind in proc.stdout


def test_console_script_installed():
    exe = shutil.which("forgetlab")
    assert exe is not None
    proc = subprocess.run([exe, "train", "--help"], capture_output=True,
                          text=True, timeout=60)
    assert proc.returncode == 0
    assert "--seed" in proc.stdout
