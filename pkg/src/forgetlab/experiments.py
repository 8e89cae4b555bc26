"""Experiment recipes behind the CLI verbs.

Each run_* function takes an ExperimentConfig, writes its tables (CSV for
plotting, JSON for structure) plus a provenance snapshot into the output
directory, and returns a process exit code: 0 success, 4 when a summary
assertion fails (compare / sensitivity only).  Config errors raise
ConfigError before any work happens.

Every table is reproducible bit-exactly from its snapshot: floats are
serialized with repr, all randomness flows from the master seed, and
worker fan-out (FORGETLAB_WORKERS) never changes results, only wall time.
"""

from __future__ import annotations

import csv
import json
import os
import sys
import time
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field, asdict, replace

import numpy as np
from scipy import stats

from . import __version__
from .corpus import (CorpusSpec, generate_corpus, generate_heldout,
                     load_corpus, load_rejection_targets, save_corpus,
                     save_rejection_targets)
from .errors import ConfigError, ForgetLabError
from .lm import (LmConfig, OptimizerConfig, load_checkpoint, save_checkpoint,
                 train)
from .metrics import batch_memorization_accuracy, evaluate_model
from .mrd import (MrdConfig, MrdEstimate, hutchinson_trace,
                  mrd_hessian_approx, mrd_monte_carlo, mrd_naive,
                  save_mrd_report)
from .paramspace import child_rng, gaussian_perturbation
from .unlearn import (EarlyStopThresholds, UnlearnConfig, compute_thresholds,
                      early_stop_check, efficiency_report, run_cga,
                      run_graddiff, run_npo, run_po, run_sga, save_run_log)

EXPERIMENT_KINDS = ("train", "mrd", "unlearn", "evaluate", "characteristics",
                    "sensitivity", "compare", "diffvar")


@dataclass
class ExperimentConfig:
    """One experiment run: what to do, on which artifacts, with which knobs.

    Section dicts override the corresponding dataclass defaults field by
    field; unknown keys are rejected up front so typos fail fast.
    """

    kind: str
    out_dir: str
    seed: int = 0
    corpus_path: str | None = None
    checkpoint_path: str | None = None
    corpus: dict = field(default_factory=dict)
    lm: dict = field(default_factory=dict)
    optimizer: dict = field(default_factory=dict)
    unlearn: dict = field(default_factory=dict)
    estimator: dict = field(default_factory=dict)
    experiment: dict = field(default_factory=dict)

    def __post_init__(self):
        if self.kind not in EXPERIMENT_KINDS:
            raise ConfigError(f"unknown experiment kind {self.kind!r}")
        if not self.out_dir:
            raise ConfigError("out_dir is required")

    @classmethod
    def from_dict(cls, doc):
        unknown = set(doc) - {f for f in cls.__dataclass_fields__}
        if unknown:
            raise ConfigError(f"unknown config fields: {sorted(unknown)}")
        if "kind" not in doc:
            raise ConfigError("config must name an experiment kind")
        if "out_dir" not in doc:
            raise ConfigError("config must name an out_dir")
        return cls(**doc)

    @classmethod
    def from_file(cls, path):
        try:
            with open(path) as fh:
                doc = json.load(fh)
        except (OSError, json.JSONDecodeError) as exc:
            raise ConfigError(f"{path}: {exc}") from exc
        if not isinstance(doc, dict):
            raise ConfigError(f"{path}: config must be a JSON object")
        return cls.from_dict(doc)


def _build(dc_type, overrides, **extra):
    fields = {f for f in dc_type.__dataclass_fields__}
    unknown = set(overrides) - fields
    if unknown:
        raise ConfigError(
            f"{dc_type.__name__}: unknown fields {sorted(unknown)}")
    try:
        return dc_type(**{**extra, **overrides})
    except (ForgetLabError, TypeError, ValueError) as exc:
        raise ConfigError(f"{dc_type.__name__}: {exc}") from exc


# ---------------------------------------------------------------------------
# artifact plumbing
# ---------------------------------------------------------------------------

def _write_csv(path, header, rows):
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(header)
        for row in rows:
            w.writerow([repr(v) if isinstance(v, float) else v for v in row])


def _write_json(path, doc):
    with open(path, "w") as fh:
        json.dump(doc, fh, indent=2, sort_keys=True)
        fh.write("\n")


def _snapshot(config, out_dir):
    os.makedirs(out_dir, exist_ok=True)
    doc = asdict(config)
    doc["_environment"] = {
        "package_version": __version__,
        "numpy_version": np.__version__,
        "float_mode": "float64",
        "python": sys.version.split()[0],
    }
    _write_json(os.path.join(out_dir, "config_snapshot.json"), doc)


def _get_corpus(config):
    if config.corpus_path:
        return load_corpus(config.corpus_path)
    section = dict(config.corpus)
    corpus_seed = section.pop("seed", config.seed)
    forget_fraction = section.pop("forget_fraction", 0.1)
    spec = _build(CorpusSpec, section)
    return generate_corpus(spec, corpus_seed, forget_fraction)


def _get_model(config, corpus):
    if config.checkpoint_path:
        return load_checkpoint(config.checkpoint_path)
    lm_cfg = _build(LmConfig, config.lm,
                    vocab_size=len(corpus.vocab.tokens))
    opt = _build(OptimizerConfig, {"learning_rate": 1e-3, "epochs": 150,
                                   **config.optimizer})
    return train(corpus, lm_cfg, opt)


def _mrd_config(config):
    section = {k: v for k, v in config.estimator.items()
               if k in MrdConfig.__dataclass_fields__}
    return _build(MrdConfig, section)


def _heldout(config, corpus, n=None):
    n = n or config.experiment.get("heldout_size", 24)
    return generate_heldout(corpus, n, config.seed + 1)


# ---------------------------------------------------------------------------
# train
# ---------------------------------------------------------------------------

def run_train(config):
    _snapshot(config, config.out_dir)
    corpus = _get_corpus(config)
    if not config.corpus_path:
        save_corpus(corpus, os.path.join(config.out_dir, "corpus.jsonl"))
    lm_cfg = _build(LmConfig, config.lm, vocab_size=len(corpus.vocab.tokens))
    opt = _build(OptimizerConfig, {"learning_rate": 1e-3, "epochs": 150,
                                   **config.optimizer})
    model = train(corpus, lm_cfg, opt)
    save_checkpoint(model, os.path.join(config.out_dir, "model.ckpt"))
    curve = model.training_state.loss_curve
    _write_csv(os.path.join(config.out_dir, "loss_curve.csv"),
               ("epoch", "loss"),
               [(i + 1, float(v)) for i, v in enumerate(curve)])
    samples = corpus.all_samples()
    mean_ma = float(np.mean(batch_memorization_accuracy(model, samples)))
    _write_json(os.path.join(config.out_dir, "summary.json"), {
        "final_loss": float(curve[-1]),
        "epochs": opt.epochs,
        "mean_ma": mean_ma,
        "memorization_target_met": mean_ma >= 0.9,
        "param_count": int(model.params.values.size),
        "training_rows": len(corpus.training_rows()),
    })
    return 0


# ---------------------------------------------------------------------------
# mrd
# ---------------------------------------------------------------------------

def run_mrd(config):
    _snapshot(config, config.out_dir)
    corpus = _get_corpus(config)
    model = _get_model(config, corpus)
    mrd_cfg = _mrd_config(config)
    probes = config.estimator.get("probes", 64)
    fd_step = config.estimator.get("fd_step", 1e-4)
    samples = corpus.forget
    if config.experiment.get("splits") == "all":
        samples = corpus.all_samples()
    estimates, rows = [], []
    for x in samples:
        delta = gaussian_perturbation(model.params.values.size, mrd_cfg.sigma,
                                      seed=config.seed)
        naive_value = mrd_naive(model, x, delta)
        naive = MrdEstimate(sample_id=x.sample_id, estimator="naive",
                            value=naive_value, std_error=0.0,
                            sigma=mrd_cfg.sigma, n_draws=1,
                            excluded_positions=())
        mc = mrd_monte_carlo(model, x, mrd_cfg, seed=config.seed)
        trace = hutchinson_trace(model, x, probes=probes, fd_step=fd_step,
                                 seed=config.seed, p_floor=mrd_cfg.p_floor)
        approx = mrd_hessian_approx(model, x, sigma=mrd_cfg.sigma, trace=trace,
                                    p_floor=mrd_cfg.p_floor)
        estimates.extend([naive, mc, approx])
        rows.append((x.sample_id, len(x.tokens), naive_value, mc.value,
                     mc.std_error, approx.value, len(mc.excluded_positions),
                     mrd_cfg.sigma, mrd_cfg.n_draws, probes))
    save_mrd_report(estimates, os.path.join(config.out_dir, "mrd_report.jsonl"))
    _write_csv(os.path.join(config.out_dir, "mrd_table.csv"),
               ("sample_id", "length", "naive", "monte_carlo", "std_error",
                "hessian_approx", "excluded_positions", "sigma", "n_draws",
                "probes"), rows)
    mc_vals = [r[3] for r in rows]
    ap_vals = [r[5] for r in rows]
    summary = {"n_samples": len(rows)}
    if len(rows) >= 3:
        rho = float(stats.spearmanr(mc_vals, ap_vals).statistic)
        summary["spearman_mc_approx"] = rho
        summary["estimators_agree"] = rho >= 0.8
    _write_json(os.path.join(config.out_dir, "summary.json"), summary)
    return 0


# ---------------------------------------------------------------------------
# unlearn
# ---------------------------------------------------------------------------

def _unlearn_config(config, method=None):
    overrides = dict(config.unlearn)
    if method is not None:
        overrides["method"] = method
    overrides.setdefault("seed", config.seed)
    return _build(UnlearnConfig, overrides)


def _dispatch_run(method, model, corpus, ucfg, thresholds, targets_path=None,
                  forget=None):
    forget = corpus.forget if forget is None else forget
    if method == "sga":
        return run_sga(model, forget, ucfg, thresholds)
    if method == "cga":
        return run_cga(model, forget, ucfg, thresholds)
    if method == "graddiff":
        return run_graddiff(model, forget, corpus.retain, ucfg, thresholds)
    if method == "npo":
        return run_npo(model, model, forget, corpus.retain, ucfg, thresholds)
    if method == "po":
        pairs = _po_pairs(forget, corpus, targets_path)
        return run_po(model, pairs, corpus.retain, ucfg, thresholds)
    raise ConfigError(f"unknown method {method!r}")


def _po_pairs(forget, corpus, targets_path):
    if targets_path:
        loaded = load_rejection_targets(targets_path, corpus.vocab)
        by_prompt = {tuple(corpus.vocab.tokenize(p)):
                     corpus.vocab.tokenize(t) for p, t in loaded}
        pairs = []
        for x in forget:
            key = tuple(x.prompt_tokens())
            if key not in by_prompt:
                raise ConfigError(
                    f"no rejection target for prompt of {x.sample_id}")
            pairs.append((x, by_prompt[key]))
        return pairs
    target = corpus.vocab.tokenize("no.")
    return [(x, target) for x in forget]


def run_unlearn(config):
    _snapshot(config, config.out_dir)
    corpus = _get_corpus(config)
    model = _get_model(config, corpus)
    ucfg = _unlearn_config(config)
    thresholds = compute_thresholds(model, corpus.all_samples(), ucfg.n_gram)
    targets_path = config.experiment.get("rejection_targets")
    after, log = _dispatch_run(ucfg.method, model, corpus, ucfg, thresholds,
                               targets_path)
    save_checkpoint(after, os.path.join(config.out_dir, "unlearned.ckpt"))
    save_run_log(log, os.path.join(config.out_dir, "run_log.jsonl"))
    doc = {
        "method": ucfg.method,
        "stop_reason": log.stop_reason,
        "thresholds": {"el_bar": thresholds.el_bar,
                       "ma_bar": thresholds.ma_bar,
                       "n_gram": thresholds.n_gram},
        "updates_per_sample": log.updates_per_sample(),
        "total_updates": log.total_updates,
    }
    if log.steps:
        m, c, e = efficiency_report(log)
        doc.update({"per_update_cost": c, "efficiency": e})
    _write_json(os.path.join(config.out_dir, "summary.json"), doc)
    return 0


# ---------------------------------------------------------------------------
# evaluate
# ---------------------------------------------------------------------------

def run_evaluate(config):
    _snapshot(config, config.out_dir)
    corpus = _get_corpus(config)
    model = _get_model(config, corpus)
    heldout = _heldout(config, corpus)
    n_gram = config.experiment.get("n_gram", 1)
    k_fraction = config.experiment.get("k_fraction", 0.2)
    report = evaluate_model(model, corpus.forget, corpus.retain, heldout,
                            n=n_gram, k_fraction=k_fraction)
    with open(os.path.join(config.out_dir, "metrics.json"), "w") as fh:
        fh.write(report.to_json() + "\n")
    report.write_csv(os.path.join(config.out_dir, "metrics.csv"))
    return 0


# ---------------------------------------------------------------------------
# characteristics
# ---------------------------------------------------------------------------

def _welch_one_sided(low_group, high_group):
    """p-value for mean(high_group) > mean(low_group)."""
    res = stats.ttest_ind(high_group, low_group, equal_var=False,
                          alternative="greater")
    return float(res.pvalue)


def run_characteristics(config):
    _snapshot(config, config.out_dir)
    corpus = _get_corpus(config)
    model = _get_model(config, corpus)
    mrd_cfg = _mrd_config(config)
    samples = corpus.all_samples()
    values = {}
    for x in samples:
        values[x.sample_id] = mrd_monte_carlo(model, x, mrd_cfg,
                                              seed=config.seed).value

    # generation-probability tier is derived, not a generation knob: mean
    # per-token probability under this model, thresholded at the corpus mean
    from .lm import batched_token_log_probs
    scored = batched_token_log_probs(model, [x.tokens for x in samples])
    gen_prob = {x.sample_id: float(np.exp(per_token).mean())
                for x, per_token in zip(samples, scored)}
    gen_threshold = float(np.mean(list(gen_prob.values())))

    def tier_of(x, axis):
        if axis == "frequency":
            return x.labels["frequency_tier"]
        if axis == "complexity":
            return x.labels["complexity_tier"]
        if axis == "rare_token":
            return "high" if x.labels["rare_token"] else "low"
        return "high" if gen_prob[x.sample_id] > gen_threshold else "low"

    axes = ("frequency", "complexity", "rare_token", "generation_probability")
    rows, groups = [], {}
    for axis in axes:
        for tier in ("high", "low"):
            vals = [values[x.sample_id] for x in samples
                    if tier_of(x, axis) == tier]
            groups[(axis, tier)] = vals
            if vals:
                rows.append((axis, tier, len(vals), float(np.mean(vals)),
                             float(np.std(vals, ddof=1)) if len(vals) > 1 else 0.0,
                             float(np.std(vals, ddof=1) / np.sqrt(len(vals)))
                             if len(vals) > 1 else 0.0))
    _write_csv(os.path.join(config.out_dir, "characteristics.csv"),
               ("axis", "tier", "n", "mean_mrd", "std", "std_error"), rows)
    per_sample = [(x.sample_id, values[x.sample_id], tier_of(x, "frequency"),
                   tier_of(x, "complexity"), tier_of(x, "rare_token"),
                   tier_of(x, "generation_probability"), len(x.tokens))
                  for x in samples]
    _write_csv(os.path.join(config.out_dir, "per_sample_mrd.csv"),
               ("sample_id", "mrd", "frequency_tier", "complexity_tier",
                "rare_token_tier", "generation_probability_tier", "length"),
               per_sample)

    freq_p = _welch_one_sided(groups[("frequency", "high")],
                              groups[("frequency", "low")])
    comp_p = _welch_one_sided(groups[("complexity", "low")],
                              groups[("complexity", "high")])
    summary = {
        "mean_mrd": {f"{axis}_{tier}": float(np.mean(groups[(axis, tier)]))
                     for (axis, tier) in groups if groups[(axis, tier)]},
        "directions": {
            "frequency_high_lt_low": bool(
                np.mean(groups[("frequency", "high")])
                < np.mean(groups[("frequency", "low")])),
            "complexity_high_gt_low": bool(
                np.mean(groups[("complexity", "high")])
                > np.mean(groups[("complexity", "low")])),
        },
        "p_values": {"frequency_low_gt_high": freq_p,
                     "complexity_high_gt_low": comp_p},
        "asserted_directions_hold": bool(
            np.mean(groups[("frequency", "high")])
            < np.mean(groups[("frequency", "low")])
            and np.mean(groups[("complexity", "high")])
            > np.mean(groups[("complexity", "low")])
            and freq_p < 0.05 and comp_p < 0.05),
        "generation_probability_note":
            "reported, not asserted: high tier vs low tier means",
    }
    _write_json(os.path.join(config.out_dir, "summary.json"), summary)
    return 0


# ---------------------------------------------------------------------------
# sensitivity
# ---------------------------------------------------------------------------

def run_sensitivity(config):
    _snapshot(config, config.out_dir)
    corpus = _get_corpus(config)
    model = _get_model(config, corpus)
    mrd_cfg = _mrd_config(config)
    exp = config.experiment
    k_values = exp.get("k_values", [10, 25, 50, 100, 200])
    repeats = exp.get("repeats", 20)
    multipliers = exp.get("sigma_multipliers", [1, 2, 3, 4])
    probe = corpus.forget[0]

    k_rows = []
    stds = {}
    for k in k_values:
        cfg_k = replace(mrd_cfg, n_draws=int(k))
        vals = [mrd_monte_carlo(model, probe, cfg_k, seed=config.seed + r).value
                for r in range(repeats)]
        stds[int(k)] = float(np.std(vals, ddof=1))
        k_rows.append((int(k), repeats, float(np.mean(vals)), stds[int(k)]))
    _write_csv(os.path.join(config.out_dir, "k_sweep.csv"),
               ("K", "repeats", "mean", "std"), k_rows)

    rank_samples = exp.get("rank_samples", 12)
    ranked = sorted(corpus.all_samples(), key=lambda s: s.sample_id)
    step = max(1, len(ranked) // rank_samples)
    subset = ranked[::step][:rank_samples]
    by_mult = {}
    for mult in multipliers:
        cfg_m = replace(mrd_cfg, sigma=mrd_cfg.sigma * mult)
        by_mult[mult] = [mrd_monte_carlo(model, x, cfg_m, seed=config.seed).value
                         for x in subset]
    sweep_rows = []
    min_rho = 1.0
    for i, a in enumerate(multipliers):
        for b in multipliers[i + 1:]:
            rho = float(stats.spearmanr(by_mult[a], by_mult[b]).statistic)
            min_rho = min(min_rho, rho)
            sweep_rows.append((a, b, rho))
    _write_csv(os.path.join(config.out_dir, "sigma_sweep.csv"),
               ("multiplier_a", "multiplier_b", "spearman"), sweep_rows)
    _write_csv(os.path.join(config.out_dir, "sigma_values.csv"),
               ("sample_id", *(f"x{m}" for m in multipliers)),
               [(x.sample_id, *(by_mult[m][i] for m in multipliers))
                for i, x in enumerate(subset)])

    lo_k = int(min(k_values))
    hi_k = 100 if 100 in stds else int(max(k_values))
    ratio = stds[lo_k] / stds[hi_k] if stds[hi_k] > 0 else float("inf")
    predicted = float(np.sqrt(hi_k / lo_k))
    summary = {
        "std_by_k": {str(k): v for k, v in stds.items()},
        "std_shrinks": stds[hi_k] < stds[lo_k],
        "std_ratio": ratio,
        "std_ratio_predicted": predicted,
        "ratio_within_factor_2": bool(predicted / 2 <= ratio <= predicted * 2),
        "min_pairwise_spearman": min_rho,
        "ranking_stable": min_rho >= 0.9,
    }
    summary["pass"] = bool(summary["std_shrinks"]
                           and summary["ratio_within_factor_2"]
                           and summary["ranking_stable"])
    _write_json(os.path.join(config.out_dir, "summary.json"), summary)
    return 0 if summary["pass"] else 4


# ---------------------------------------------------------------------------
# compare
# ---------------------------------------------------------------------------

DEFAULT_GRID = (("sga", "uniform"),
                ("cga", "mrd_proportional"),
                ("cga", "inverse_mrd_proportional"),
                ("graddiff", "uniform"),
                ("npo", "uniform"),
                ("po", "uniform"))


def _compare_one(args):
    (method, weighting, seed, corpus_path, ckpt_path, unlearn_overrides,
     thresholds_doc, heldout_seed, heldout_size, targets_path) = args
    corpus = load_corpus(corpus_path)
    model = load_checkpoint(ckpt_path)
    thresholds = EarlyStopThresholds(**thresholds_doc)
    overrides = dict(unlearn_overrides)
    overrides.update(method=method, weighting_scheme=weighting, seed=seed)
    ucfg = UnlearnConfig(**overrides)
    t0 = time.perf_counter()
    after, log = _dispatch_run(method, model, corpus, ucfg, thresholds,
                               targets_path)
    wall = time.perf_counter() - t0
    heldout = generate_heldout(corpus, heldout_size, heldout_seed)
    report = evaluate_model(after, corpus.forget, corpus.retain, heldout,
                            n=thresholds.n_gram)
    forget_m = report.splits["forget"]
    retain_m = report.splits["retain"]
    heldout_m = report.splits["heldout"]
    ua = forget_m["ua"]
    rr = 1.0 - forget_m["rouge_l"]
    uc_avg = float(np.mean([ua, report.mia_auc, rr]))
    ut_vals = [retain_m["ma"], retain_m["el"], retain_m["rouge_l"],
               heldout_m["ma"], heldout_m["el"], heldout_m["rouge_l"]]
    m, c, e = (log.total_updates, log.per_update_cost,
               None if not log.steps else efficiency_report(log)[2])
    flags_by_step = [(rec.step, sum(rec.forgotten)) for rec in log.steps]
    return {
        "method": method, "weighting": weighting, "seed": seed,
        "M": m, "C": c, "E": e, "stop_reason": log.stop_reason,
        "wall_seconds": wall,
        "ua": ua, "mia_auc": report.mia_auc, "rr": rr, "uc_avg": uc_avg,
        "retain_ma": retain_m["ma"], "retain_el": retain_m["el"],
        "retain_rouge": retain_m["rouge_l"],
        "heldout_ma": heldout_m["ma"], "heldout_el": heldout_m["el"],
        "heldout_rouge": heldout_m["rouge_l"],
        "ut_avg": float(np.mean(ut_vals)),
        "n_forget": len(corpus.forget),
        "flags_by_step": flags_by_step,
        "final_forgotten": int(sum(log.steps[-1].forgotten)) if log.steps
        else len(corpus.forget),
    }


def _forgotten_within(row, budget):
    # empty step list means every sample was already under the bars
    if not row["flags_by_step"]:
        return row["n_forget"]
    count = 0
    for step, flagged in row["flags_by_step"]:
        if step > budget:
            break
        count = flagged
    return count


def run_compare(config):
    _snapshot(config, config.out_dir)
    corpus = _get_corpus(config)
    model = _get_model(config, corpus)
    exp = config.experiment
    seeds = exp.get("seeds", [0, 1, 2, 3, 4])
    grid = [tuple(g) for g in exp.get("grid", DEFAULT_GRID)]
    for method, weighting in grid:
        if method not in ("sga", "cga", "graddiff", "npo", "po"):
            raise ConfigError(f"unknown method {method!r} in grid")

    ucfg_probe = _unlearn_config(config)
    thresholds = compute_thresholds(model, corpus.all_samples(),
                                    ucfg_probe.n_gram)
    corpus_path = os.path.join(config.out_dir, "corpus.jsonl")
    ckpt_path = os.path.join(config.out_dir, "initial.ckpt")
    save_corpus(corpus, corpus_path)
    save_checkpoint(model, ckpt_path)
    targets_path = exp.get("rejection_targets")
    if any(m == "po" for m, _ in grid) and not targets_path:
        targets_path = os.path.join(config.out_dir, "rejection_targets.json")
        target = corpus.vocab.detokenize(corpus.vocab.tokenize("no."))
        save_rejection_targets(
            [(corpus.vocab.detokenize(x.prompt_tokens()), target)
             for x in corpus.forget], targets_path)

    overrides = dict(config.unlearn)
    overrides.pop("method", None)
    overrides.pop("weighting_scheme", None)
    overrides.pop("seed", None)
    thresholds_doc = {"el_bar": thresholds.el_bar, "ma_bar": thresholds.ma_bar,
                      "n_gram": thresholds.n_gram}
    jobs = [(method, weighting, seed, corpus_path, ckpt_path, overrides,
             thresholds_doc, config.seed + 1,
             exp.get("heldout_size", 24), targets_path)
            for method, weighting in grid for seed in seeds]

    workers = int(os.environ.get("FORGETLAB_WORKERS", "1"))
    if workers > 1:
        with ProcessPoolExecutor(max_workers=workers) as pool:
            results = list(pool.map(_compare_one, jobs))
    else:
        results = [_compare_one(j) for j in jobs]

    header = ("method", "weighting", "seed", "M", "C", "E", "stop_reason",
              "ua", "mia_auc", "rr", "uc_avg", "retain_ma", "retain_el",
              "retain_rouge", "heldout_ma", "heldout_el", "heldout_rouge",
              "ut_avg", "final_forgotten", "wall_seconds")
    _write_csv(os.path.join(config.out_dir, "compare_table.csv"), header,
               [[row[k] for k in header] for row in results])

    def median_m(method, weighting):
        ms = [r["M"] for r in results
              if r["method"] == method and r["weighting"] == weighting]
        return float(np.median(ms)) if ms else None

    medians = {f"{m}:{w}": median_m(m, w) for m, w in grid}
    summary = {"median_M": medians, "seeds": seeds,
               "n_forget": len(corpus.forget)}
    sga_med = median_m("sga", "uniform")
    cga_cells = [(m, w) for m, w in grid if m == "cga"]
    if sga_med is not None and cga_cells:
        # first cga cell in the grid is the one the pass check grades
        primary = exp.get("primary_cga")
        best = (("cga", primary) if primary in [w for _, w in cga_cells]
                else cga_cells[0])
        cga_med = median_m(*best)
        budget = int(sga_med)
        cga_rows = [r for r in results
                    if (r["method"], r["weighting"]) == best]
        sga_rows = [r for r in results if r["method"] == "sga"]
        cga_at_budget = float(np.median(
            [_forgotten_within(r, budget) for r in cga_rows]))
        sga_at_budget = float(np.median(
            [_forgotten_within(r, budget) for r in sga_rows]))
        summary.update({
            "cga_cell": f"{best[0]}:{best[1]}",
            "cga_median_M": cga_med,
            "sga_median_M": sga_med,
            "cga_beats_sga": bool(cga_med < sga_med),
            "budget": budget,
            "cga_forgotten_at_budget": cga_at_budget,
            "sga_forgotten_at_budget": sga_at_budget,
            "cga_matches_at_budget": bool(cga_at_budget >= sga_at_budget),
        })
        summary["pass"] = bool(summary["cga_beats_sga"]
                               and summary["cga_matches_at_budget"])
    _write_json(os.path.join(config.out_dir, "summary.json"), summary)
    if "pass" in summary and not summary["pass"]:
        return 4
    return 0


# ---------------------------------------------------------------------------
# diffvar
# ---------------------------------------------------------------------------

def _stratified_sample_ids(samples, flags_ok, n):
    """Round-robin over groups, preferring samples above the stop bars."""
    by_group = {}
    for s in samples:
        by_group.setdefault(s.sample_id[:2], []).append(s.sample_id)
    rr_order = []
    columns = [sorted(v) for _, v in sorted(by_group.items())]
    for depth in range(max(len(c) for c in columns)):
        for col in columns:
            if depth < len(col):
                rr_order.append(col[depth])
    picked = [sid for sid in rr_order if flags_ok(sid)][:n]
    if len(picked) < n:
        rest = [sid for sid in rr_order if sid not in picked]
        picked.extend(rest[:n - len(picked)])
    return picked


def run_diffvar(config):
    _snapshot(config, config.out_dir)
    corpus = _get_corpus(config)
    model = _get_model(config, corpus)
    exp = config.experiment
    n_samples = exp.get("n_samples", 20)
    mrd_cfg = _mrd_config(config)
    ucfg = _unlearn_config(config, method="sga")
    samples = corpus.all_samples()
    thresholds = compute_thresholds(model, samples, ucfg.n_gram)
    bysid = {s.sample_id: s for s in samples}

    def above_bars(sid):
        return not early_stop_check(model, bysid[sid], thresholds)

    chosen = exp.get("samples") or _stratified_sample_ids(
        samples, above_bars, n_samples)
    rows = []
    for sid in chosen:
        x = bysid[sid]
        value = mrd_monte_carlo(model, x, mrd_cfg, seed=config.seed).value
        after, log = run_sga(model, [x], ucfg, thresholds)
        change = float(np.mean(np.abs(after.params.values
                                      - model.params.values)))
        rows.append((sid, sid[:2], value, log.total_updates, log.stop_reason,
                     change))
    rows.sort(key=lambda r: -r[5])
    _write_csv(os.path.join(config.out_dir, "diffvar.csv"),
               ("sample_id", "group", "mrd", "updates", "stop_reason",
                "mean_abs_change"), rows)
    changes = [r[5] for r in rows]
    cv = float(np.std(changes, ddof=1) / np.mean(changes)) \
        if np.mean(changes) > 0 else 0.0
    summary = {
        "n_samples": len(rows),
        "cv_mean_abs_change": cv,
        "difficulty_non_uniform": cv > 0.1,
        "thresholds": {"el_bar": thresholds.el_bar,
                       "ma_bar": thresholds.ma_bar},
    }
    finished = [(r[2], r[3]) for r in rows if r[4] == "constraint_met"]
    if len(finished) >= 3:
        rho = stats.spearmanr([f[0] for f in finished],
                              [f[1] for f in finished]).statistic
        summary["spearman_mrd_updates"] = float(rho)
    _write_json(os.path.join(config.out_dir, "summary.json"), summary)
    return 0


RUNNERS = {
    "train": run_train,
    "mrd": run_mrd,
    "unlearn": run_unlearn,
    "evaluate": run_evaluate,
    "characteristics": run_characteristics,
    "sensitivity": run_sensitivity,
    "compare": run_compare,
    "diffvar": run_diffvar,
}


def run_experiment(config):
    return RUNNERS[config.kind](config)
