"""Unlearning runners sharing one loop: sample, step, check, log.

All methods minimize a per-step loss with the configured optimizer.  The
ascent family (sga, cga, graddiff) puts the sequence log-likelihood itself
in the loss so minimizing it raises the forget sample's NLL; npo and po are
preference-style baselines.  A frozen pair of threshold bars decides when a
sample counts as forgotten; runs stop when every forget sample is flagged
or the step budget runs out.
"""

from __future__ import annotations

import json
import time
from dataclasses import dataclass, field, asdict

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor
from .errors import (ContractViolation, DegenerateWeightError,
                     InvalidArgument, NumericalFailure)
from .lm import (LanguageModel, TrainingState, OptimizerConfig,
                 _adamw_step, _batch_loss_graph, sequence_log_prob_graph)
from .metrics import (batch_memorization_accuracy, extraction_likelihood,
                      memorization_accuracy)
from .mrd import MrdConfig, mrd_monte_carlo
from .paramspace import ParamVector, bind, child_rng, collect_gradient

METHODS = ("sga", "cga", "graddiff", "npo", "po")
WEIGHTING_SCHEMES = ("uniform", "mrd_proportional", "inverse_mrd_proportional")


@dataclass(frozen=True)
class UnlearnConfig:
    """Knobs shared by every runner; per-method fields are ignored elsewhere."""

    method: str = "sga"
    learning_rate: float = 5e-5
    max_steps: int = 400
    batch_size: int = 1
    mrd_refresh_interval: int | None = None
    weighting_scheme: str = "mrd_proportional"
    retain_weight: float = 1.0
    npo_beta: float = 0.1
    seed: int = 0
    optimizer: str = "adamw"
    retain_batch_size: int = 4
    eval_interval: int = 1
    mrd_sigma: float = 1e-3
    mrd_draws: int = 32
    n_gram: int = 1
    cost_mode: str = "flops"

    def __post_init__(self):
        if self.method not in METHODS:
            raise InvalidArgument(f"unknown method {self.method!r}")
        if self.learning_rate <= 0:
            raise InvalidArgument("learning_rate must be > 0")
        if self.max_steps < 1 or self.batch_size < 1:
            raise InvalidArgument("max_steps and batch_size must be >= 1")
        if self.mrd_refresh_interval is not None and self.mrd_refresh_interval < 1:
            raise InvalidArgument("mrd_refresh_interval must be >= 1")
        if self.weighting_scheme not in WEIGHTING_SCHEMES:
            raise InvalidArgument(f"unknown weighting {self.weighting_scheme!r}")
        if self.retain_weight < 0:
            raise InvalidArgument("retain_weight must be >= 0")
        if self.npo_beta <= 0:
            raise InvalidArgument("npo_beta must be > 0")
        if self.optimizer not in ("adamw", "sgd"):
            raise InvalidArgument(f"unknown optimizer {self.optimizer!r}")
        if self.retain_batch_size < 1 or self.eval_interval < 1:
            raise InvalidArgument("retain_batch_size and eval_interval must be >= 1")
        if self.cost_mode not in ("flops", "seconds"):
            raise InvalidArgument(f"unknown cost_mode {self.cost_mode!r}")

    @property
    def refresh_interval(self):
        if self.mrd_refresh_interval is not None:
            return self.mrd_refresh_interval
        return max(1, self.max_steps // 4)


@dataclass(frozen=True)
class EarlyStopThresholds:
    """Initial-model means of EL and MA over all samples; computed once."""

    el_bar: float
    ma_bar: float
    n_gram: int = 1


def compute_thresholds(model, samples, n_gram=1):
    if not samples:
        raise InvalidArgument("need at least one sample for thresholds")
    mas = batch_memorization_accuracy(model, samples)
    els = [extraction_likelihood(model, s, n_gram) for s in samples]
    return EarlyStopThresholds(el_bar=float(np.mean(els)),
                               ma_bar=float(np.mean(mas)),
                               n_gram=n_gram)


def early_stop_check(model, x, thresholds):
    """True iff the sample scores below both frozen bars on this model.

    MA is one forward pass while EL decodes from every prefix, so MA acts
    as the cheap gate.
    """
    if memorization_accuracy(model, x) >= thresholds.ma_bar:
        return False
    return extraction_likelihood(model, x, thresholds.n_gram) < thresholds.el_bar


@dataclass(frozen=True)
class SamplingWeights:
    per_sample: tuple

    def __post_init__(self):
        p = np.asarray(self.per_sample)
        if p.size == 0 or np.any(p < 0) or abs(p.sum() - 1.0) > 1e-9:
            raise ContractViolation("weights must be a probability vector")

    def as_array(self):
        return np.asarray(self.per_sample)


def compute_weights(mrd_values, scheme):
    """Sampling distribution over the forget set from its MRD values."""
    values = np.asarray(list(mrd_values), dtype=np.float64)
    if values.size == 0:
        raise InvalidArgument("mrd_values must be non-empty")
    if scheme == "uniform":
        return SamplingWeights(per_sample=(1.0 / values.size,) * values.size)
    if scheme not in WEIGHTING_SCHEMES:
        raise InvalidArgument(f"unknown weighting {scheme!r}")
    if np.any(values == 0) or not np.all(np.isfinite(values)):
        raise DegenerateWeightError("MRD values must be finite and nonzero")
    if scheme == "inverse_mrd_proportional":
        values = 1.0 / values
    p = values / values.sum()
    return SamplingWeights(per_sample=tuple(float(w) for w in p))


# ---------------------------------------------------------------------------
# run log
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class StepRecord:
    step: int
    sample_ids: tuple
    loss: float
    loss_forget: float
    loss_retain: float
    update_norm: float
    cost: float
    forgotten: tuple


@dataclass
class UnlearnRunLog:
    method: str
    sample_ids: tuple
    steps: list = field(default_factory=list)
    stop_reason: str = "budget_exhausted"
    weight_events: list = field(default_factory=list)

    @property
    def total_updates(self):
        return len(self.steps)

    @property
    def per_update_cost(self):
        if not self.steps:
            return 0.0
        return float(np.mean([s.cost for s in self.steps]))

    def updates_per_sample(self):
        counts = {sid: 0 for sid in self.sample_ids}
        for rec in self.steps:
            for sid in rec.sample_ids:
                counts[sid] += 1
        return counts


def efficiency_report(log):
    """(M, C, E) with E = 1 / (M * C)."""
    if not log.steps:
        raise InvalidArgument("run log is empty")
    m = log.total_updates
    c = log.per_update_cost
    return m, c, 1.0 / (m * c)


def save_run_log(log, path):
    with open(path, "w") as fh:
        for rec in log.steps:
            doc = asdict(rec)
            doc["kind"] = "step"
            fh.write(json.dumps(doc) + "\n")
        for step, weights in log.weight_events:
            fh.write(json.dumps({"kind": "weights", "step": step,
                                 "per_sample": list(weights)}) + "\n")
        m, c, e = (log.total_updates, log.per_update_cost,
                   None if not log.steps else 1.0 / (log.total_updates * log.per_update_cost))
        fh.write(json.dumps({
            "kind": "summary", "method": log.method,
            "sample_ids": list(log.sample_ids), "stop_reason": log.stop_reason,
            "total_updates": m, "per_update_cost": c, "efficiency": e,
        }) + "\n")


def load_run_log(path):
    steps, weight_events, summary = [], [], None
    with open(path) as fh:
        for line in fh:
            doc = json.loads(line)
            if doc["kind"] == "step":
                steps.append(StepRecord(
                    step=doc["step"], sample_ids=tuple(doc["sample_ids"]),
                    loss=doc["loss"], loss_forget=doc["loss_forget"],
                    loss_retain=doc["loss_retain"],
                    update_norm=doc["update_norm"], cost=doc["cost"],
                    forgotten=tuple(doc["forgotten"])))
            elif doc["kind"] == "weights":
                weight_events.append((doc["step"], tuple(doc["per_sample"])))
            elif doc["kind"] == "summary":
                summary = doc
    if summary is None:
        raise InvalidArgument(f"{path}: missing summary record")
    log = UnlearnRunLog(method=summary["method"],
                        sample_ids=tuple(summary["sample_ids"]),
                        steps=steps, stop_reason=summary["stop_reason"],
                        weight_events=weight_events)
    return log


# ---------------------------------------------------------------------------
# shared loop
# ---------------------------------------------------------------------------

def _clone_model(model):
    params = ParamVector(model.params.values.copy(), model.params.layout)
    return LanguageModel(config=model.config, params=params,
                         training_state=TrainingState(
                             m=np.zeros_like(params.values),
                             v=np.zeros_like(params.values)))


def _draw(rng, weights, count):
    cum = np.cumsum(weights)
    picks = []
    for _ in range(count):
        u = rng.random()
        picks.append(min(int(np.searchsorted(cum, u, side="right")),
                         len(weights) - 1))
    return picks


def _flop_proxy(token_positions, dim):
    # Cost unit: token-positions pushed through the network times width,
    # which is what actually scales a step at fixed depth.
    return float(token_positions * dim)


class _Loop:
    """One unlearning run over a fixed forget set."""

    def __init__(self, model, forget, config, thresholds, retain=None,
                 weights_fn=None):
        if not forget:
            raise InvalidArgument("forget set must be non-empty")
        self.model = _clone_model(model)
        self.forget = list(forget)
        self.config = config
        self.thresholds = thresholds
        self.retain = list(retain) if retain is not None else None
        self.weights_fn = weights_fn
        self.rng_forget = child_rng(config.seed, "forget-draw")
        self.rng_retain = child_rng(config.seed, "retain-draw")
        self.opt = OptimizerConfig(learning_rate=config.learning_rate,
                                   seed=config.seed)
        self.log = UnlearnRunLog(method=config.method,
                                 sample_ids=tuple(s.sample_id for s in self.forget))
        self.flags = [False] * len(self.forget)

    def _refresh_weights(self, step):
        if self.weights_fn is None:
            w = compute_weights([1.0] * len(self.forget), "uniform")
        else:
            w = self.weights_fn(self.model, self.forget)
        self.weights = w.as_array()
        self.log.weight_events.append((step, w.per_sample))

    def _retain_rows(self):
        idx = self.rng_retain.integers(0, len(self.retain),
                                       size=self.config.retain_batch_size)
        return [list(self.retain[int(i)].tokens) for i in idx]

    def _update_flags(self):
        pending = [i for i, f in enumerate(self.flags) if not f]
        if not pending:
            return
        mas = batch_memorization_accuracy(self.model,
                                          [self.forget[i] for i in pending])
        for i, ma in zip(pending, mas):
            if ma >= self.thresholds.ma_bar:
                continue
            el = extraction_likelihood(self.model, self.forget[i],
                                       self.thresholds.n_gram)
            if el < self.thresholds.el_bar:
                self.flags[i] = True

    def run(self, step_fn):
        cfg = self.config
        self._update_flags()
        if all(self.flags):
            self.log.stop_reason = "constraint_met"
            return self.model, self.log
        self._refresh_weights(0)
        for t in range(1, cfg.max_steps + 1):
            picks = _draw(self.rng_forget, self.weights, cfg.batch_size)
            t0 = time.perf_counter()
            loss, loss_forget, loss_retain, positions = step_fn(self, picks)
            if not np.isfinite(loss):
                raise NumericalFailure(f"non-finite loss at step {t}")
            if cfg.cost_mode == "seconds":
                cost = time.perf_counter() - t0
            else:
                cost = _flop_proxy(positions, self.model.config.embed_dim)
            if t % cfg.eval_interval == 0 or t == cfg.max_steps:
                self._update_flags()
            self.log.steps.append(StepRecord(
                step=t,
                sample_ids=tuple(self.forget[i].sample_id for i in picks),
                loss=float(loss), loss_forget=float(loss_forget),
                loss_retain=float(loss_retain),
                update_norm=self._last_norm, cost=cost,
                forgotten=tuple(self.flags)))
            if all(self.flags):
                self.log.stop_reason = "constraint_met"
                break
            if self.weights_fn is not None and t % cfg.refresh_interval == 0:
                self._refresh_weights(t)
        return self.model, self.log

    def apply_gradient(self, grad):
        params = self.model.params
        before = params.values
        if self.config.optimizer == "sgd":
            after = before - self.config.learning_rate * grad.values
            self.model.training_state.step += 1
        else:
            after = _adamw_step(before, grad.values, self.model.training_state,
                                self.opt)
        self._last_norm = float(np.linalg.norm(after - before))
        self.model.params = ParamVector(after, params.layout)


def _graph_loss(loop, graphs, scale=None):
    """Sum the scalar graphs, backprop, and apply one optimizer step."""
    total = graphs[0]
    for g in graphs[1:]:
        total = ad.add(total, g)
    if scale is not None:
        total = ad.mul(total, scale)
    leaves = loop._leaves
    ad.backward(total)
    grad = collect_gradient(leaves, loop.model.params.layout)
    loop.apply_gradient(grad)
    return float(total.data)


def _ascent_step(loop, picks, retain_scale):
    """Shared by sga/cga/graddiff: raise forget NLL, optionally hold retain."""
    cfg = loop.model.config
    loop._leaves = bind(loop.model.params, requires_grad=True)
    graphs = []
    positions = 0
    forget_vals = []
    for i in picks:
        tokens = loop.forget[i].tokens
        g = sequence_log_prob_graph(cfg, loop._leaves, tokens)
        graphs.append(ad.mul(g, 1.0 / len(picks)))
        positions += len(tokens)
        forget_vals.append(float(g.data))
    loss_forget = float(np.mean(forget_vals))
    loss_retain = 0.0
    if retain_scale:
        rows = loop._retain_rows()
        rg = _batch_loss_graph(cfg, loop._leaves, rows)
        loss_retain = float(rg.data)
        graphs.append(ad.mul(rg, retain_scale))
        positions += sum(len(r) + 1 for r in rows)
    loss = _graph_loss(loop, graphs)
    return loss, loss_forget, loss_retain, positions


def run_sga(model, forget, config, thresholds):
    """Uniform-draw gradient ascent on forget-sample NLL."""
    loop = _Loop(model, forget, config, thresholds)
    return loop.run(lambda lp, picks: _ascent_step(lp, picks, 0.0))


def _mrd_weights_fn(config):
    mrd_cfg = MrdConfig(sigma=config.mrd_sigma, n_draws=config.mrd_draws)

    def fn(model, forget):
        values = [mrd_monte_carlo(model, x, mrd_cfg, seed=config.seed).value
                  for x in forget]
        try:
            return compute_weights(values, config.weighting_scheme)
        except DegenerateWeightError:
            return compute_weights(values, "uniform")

    return fn


def run_cga(model, forget, config, thresholds):
    """Ascent with MRD-derived sampling weights, refreshed every m steps."""
    weights_fn = None
    if config.weighting_scheme != "uniform":
        weights_fn = _mrd_weights_fn(config)
    loop = _Loop(model, forget, config, thresholds, weights_fn=weights_fn)
    return loop.run(lambda lp, picks: _ascent_step(lp, picks, 0.0))


def run_graddiff(model, forget, retain, config, thresholds):
    """Ascent on forget NLL plus weighted descent on retain NLL."""
    if not retain:
        raise InvalidArgument("graddiff needs a non-empty retain set")
    loop = _Loop(model, forget, config, thresholds, retain=retain)
    lam = config.retain_weight
    return loop.run(lambda lp, picks: _ascent_step(lp, picks, lam))


def run_npo(model, reference_model, forget, retain, config, thresholds):
    """Push forget likelihood below the frozen reference model's.

    Per-sample loss (2/beta) log(1 + (p/p_ref)^beta) has exact gradient
    2 sigmoid(beta z) grad log p with z = log p - log p_ref, so the graph is
    the log-likelihood scaled by a constant computed from the forward value.
    """
    if not retain:
        raise InvalidArgument("npo needs a non-empty retain set")
    beta = config.npo_beta
    lam = config.retain_weight
    ref_cache = {}

    def ref_logp(x):
        if x.sample_id not in ref_cache:
            leaves = bind(reference_model.params)
            with ad.no_grad():
                g = sequence_log_prob_graph(reference_model.config, leaves,
                                            x.tokens)
            ref_cache[x.sample_id] = float(g.data)
        return ref_cache[x.sample_id]

    def step(loop, picks):
        cfg = loop.model.config
        loop._leaves = bind(loop.model.params, requires_grad=True)
        graphs = []
        positions = 0
        vals = []
        for i in picks:
            x = loop.forget[i]
            g = sequence_log_prob_graph(cfg, loop._leaves, x.tokens)
            z = float(g.data) - ref_logp(x)
            # Constant multiplier: d/dtheta of the npo term is
            # 2 sigmoid(beta z) * dlogp/dtheta.
            coef = 2.0 / (1.0 + np.exp(-beta * z)) / len(picks)
            graphs.append(ad.mul(g, coef))
            vals.append((2.0 / beta) * np.logaddexp(0.0, beta * z))
            # nominal cost: one policy pass plus one reference pass, kept
            # fixed so caching the reference never changes reported C
            positions += 2 * len(x.tokens)
        loss_forget = float(np.mean(vals))
        loss_retain = 0.0
        if lam:
            rows = loop._retain_rows()
            rg = _batch_loss_graph(cfg, loop._leaves, rows)
            loss_retain = float(rg.data)
            graphs.append(ad.mul(rg, lam))
            positions += sum(len(r) + 1 for r in rows)
        _graph_loss(loop, graphs)
        loss = loss_forget + lam * loss_retain
        return loss, loss_forget, loss_retain, positions

    loop = _Loop(model, forget, config, thresholds, retain=retain)
    return loop.run(step)


def run_po(model, forget_with_targets, retain, config, thresholds):
    """Supervised training toward rejection targets on forget prompts.

    forget_with_targets pairs each original forget sample with rejection
    target tokens; the loss is NLL of the target given the sample's prompt,
    while stopping still tracks the original continuations.
    """
    pairs = list(forget_with_targets)
    if not pairs:
        raise InvalidArgument("forget set must be non-empty")
    for x, target in pairs:
        if not target:
            raise InvalidArgument(f"{x.sample_id}: empty rejection target")
    targets = {x.sample_id: list(t) for x, t in pairs}
    forget = [x for x, _ in pairs]
    lam = config.retain_weight

    def step(loop, picks):
        cfg = loop.model.config
        loop._leaves = bind(loop.model.params, requires_grad=True)
        graphs = []
        positions = 0
        vals = []
        for i in picks:
            x = loop.forget[i]
            prompt = x.prompt_tokens()
            row = prompt + targets[x.sample_id]
            g = sequence_log_prob_graph(cfg, loop._leaves, row,
                                        start=len(prompt))
            graphs.append(ad.mul(g, -1.0 / len(picks)))
            vals.append(-float(g.data))
            positions += len(row)
        loss_forget = float(np.mean(vals))
        loss_retain = 0.0
        if lam:
            rows = loop._retain_rows()
            rg = _batch_loss_graph(cfg, loop._leaves, rows)
            loss_retain = float(rg.data)
            graphs.append(ad.mul(rg, lam))
            positions += sum(len(r) + 1 for r in rows)
        # graphs already carry their signs; total is the minimized objective
        loss = _graph_loss(loop, graphs)
        return loss, loss_forget, loss_retain, positions

    loop = _Loop(model, forget, config, thresholds,
                 retain=retain if lam else None)
    if lam and not retain:
        raise InvalidArgument("po with retain_weight > 0 needs retain data")
    return loop.run(step)
