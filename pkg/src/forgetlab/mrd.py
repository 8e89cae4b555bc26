"""Per-sample memory removal difficulty (MRD) estimators.

The quantity scored for a sequence x with per-token conditional
log-probabilities P_t(theta) is

    MRD(x; theta) = | E_{delta ~ N(0, sigma^2 I)}
                      sum_t (P_t(theta) - P_t(theta + delta)) / P_t(theta) |

Low MRD marks samples whose scores barely move under parameter noise:
robust memories that resist unlearning.  Three routes are implemented:

* mrd_naive         -- one supplied perturbation, absolute (non-relative) sum,
* mrd_monte_carlo   -- K seeded draws; each draw contributes the absolute
                       value of its relative sum, and the estimate is the
                       mean over draws (abs inside the mean, so opposite-sign
                       draws cannot cancel), with a standard error over draws,
* mrd_hessian_approx -- second-order closed form
                       |(sigma^2 / 2) * sum_t Tr(H_t) / P_t(theta)| with
                       per-position Hessian traces from Hutchinson probing;
                       trace Hessian-vector products come from central
                       finite differences of first-order gradients, never
                       second-order autodiff.

Positions with |P_t| below p_floor are excluded from every sum and
reported in the estimate metadata, so both estimators score the same
positions.  Draw k for sample s derives its seed by hashing
(master seed, s, k): results are independent of evaluation order and
safe to fan out over workers as long as the per-draw values are reduced
in k order, which is how this serial implementation sums them.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field

import numpy as np

from . import autodiff as ad
from . import lm
from .errors import DegenerateTokenError, InvalidArgument
from .paramspace import ParamVector, bind, gaussian_perturbation, rademacher_probe, stable_hash

P_FLOOR_DEFAULT = 1e-8


@dataclass(frozen=True)
class MrdConfig:
    sigma: float = 1e-5
    n_draws: int = 200
    p_floor: float = P_FLOOR_DEFAULT

    def __post_init__(self):
        if not self.sigma > 0:
            raise InvalidArgument("sigma must be > 0")
        if self.n_draws < 1:
            raise InvalidArgument("n_draws must be >= 1")


@dataclass(frozen=True)
class MrdEstimate:
    sample_id: str
    estimator: str
    value: float
    std_error: float
    sigma: float
    n_draws: int
    excluded_positions: tuple = ()


@dataclass(frozen=True)
class TraceEstimate:
    """Hutchinson Tr(H_t) estimates, one entry per scored position."""

    per_token: np.ndarray
    positions: tuple
    excluded_positions: tuple
    probes: int
    fd_step: float


class SequenceScorer:
    """Anything exposing dim, theta, and scores(theta_values) -> per-token array.

    The language-model adapter below is the production implementation;
    tests substitute closed-form surrogates through the same interface.
    `theta` is the unperturbed base point; `sample_id` keys the per-draw
    seed stream.
    """

    dim: int
    theta: np.ndarray
    sample_id: str = ""

    def scores(self, values):
        raise NotImplementedError

    def position_gradients(self, values):
        raise NotImplementedError("this scorer does not provide gradients")


class LmSequenceScorer(SequenceScorer):
    """Scores one token sequence under a model with substituted parameters."""

    def __init__(self, model, x):
        self._config = model.config
        self._layout = model.params.layout
        self._tokens = lm._tokens_of(x)
        if len(self._tokens) < 2:
            raise InvalidArgument("sequence length must be >= 2")
        self.dim = self._layout.dim
        self.theta = model.params.values
        self.sample_id = getattr(x, "sample_id", "")

    def scores(self, values):
        model = lm.LanguageModel(self._config, ParamVector(values, self._layout))
        return lm.batched_token_log_probs(model, [self._tokens])[0]

    def position_gradients(self, values):
        """(n, dim) matrix of d P_t / d theta at the given parameter values."""
        leaves = bind(ParamVector(values, self._layout), requires_grad=True)
        tokens = self._tokens
        n = len(tokens)
        inp = np.empty((1, n), dtype=np.int64)
        inp[0, 0] = lm.BOS_ID
        inp[0, 1:] = tokens[:-1]
        tgt = np.asarray([tokens], dtype=np.int64)
        logits = lm.forward_logits(self._config, leaves, inp)
        picked = ad.gather_last(ad.log_softmax(logits), tgt)
        layout = self._layout
        grads = np.empty((n, layout.dim))
        for t in range(n):
            selector = np.zeros((1, n))
            selector[0, t] = 1.0
            ad.backward(ad.tensor_sum(ad.mul(picked, ad.Tensor(selector))))
            g = np.zeros(layout.dim)
            for name, offset, shape in layout.entries:
                leaf = leaves[name]
                if leaf.grad is not None:
                    size = int(np.prod(shape)) if shape else 1
                    g[offset:offset + size] = np.asarray(leaf.grad).reshape(-1)
            grads[t] = g
        return grads


def _scored_positions(base, p_floor):
    keep = np.abs(base) >= p_floor
    excluded = tuple(int(i) for i in np.nonzero(~keep)[0])
    if not keep.any():
        raise DegenerateTokenError(
            f"all {base.size} positions fall below p_floor={p_floor}; "
            f"first degenerate position 0"
        )
    return keep, excluded


def _draw_seed(master_seed, sample_id, k):
    return stable_hash(int(master_seed), str(sample_id), int(k))


def mrd_naive(model_or_scorer, x, delta):
    """Single-perturbation preliminary score |sum_t (P_t(theta) - P_t(theta+delta))|.

    Absolute (non-relative) differences: no division by P_t, no floor.
    """
    scorer = _as_scorer(model_or_scorer, x)
    base_theta = _theta_of(model_or_scorer)
    direction = delta.delta if hasattr(delta, "delta") else np.asarray(delta, dtype=np.float64)
    if direction.shape != (scorer.dim,):
        raise InvalidArgument("perturbation dimension does not match parameters")
    base = scorer.scores(base_theta)
    pert = scorer.scores(base_theta + direction)
    return float(abs(np.sum(base - pert)))


def mrd_monte_carlo(model_or_scorer, x=None, config=MrdConfig(), seed=0):
    """Monte-Carlo relative MRD with per-draw absolute values.

    For each draw k (seeded by hashing (seed, sample_id, k)):
        d_k = sum over scored t of (P_t(theta) - P_t(theta + delta_k)) / P_t(theta)
        contribution |d_k|
    Returns mean over draws plus the sample standard error.
    """
    scorer = _as_scorer(model_or_scorer, x)
    theta = _theta_of(model_or_scorer)
    base = np.asarray(scorer.scores(theta), dtype=np.float64)
    keep, excluded = _scored_positions(base, config.p_floor)
    kept_base = base[keep]
    draws = np.empty(config.n_draws)
    for k in range(config.n_draws):
        delta = gaussian_perturbation(scorer.dim, config.sigma,
                                      _draw_seed(seed, scorer.sample_id, k))
        pert = np.asarray(scorer.scores(theta + delta.delta), dtype=np.float64)
        draws[k] = abs(float(np.sum((kept_base - pert[keep]) / kept_base)))
    value = float(draws.mean())
    std_error = float(draws.std(ddof=1) / math.sqrt(config.n_draws)) if config.n_draws > 1 else 0.0
    return MrdEstimate(
        sample_id=str(scorer.sample_id),
        estimator="monte_carlo",
        value=value,
        std_error=std_error,
        sigma=config.sigma,
        n_draws=config.n_draws,
        excluded_positions=excluded,
    )


def hutchinson_trace(model_or_scorer, x=None, probes=64, fd_step=1e-4, seed=0,
                     p_floor=P_FLOOR_DEFAULT):
    """Per-position Hessian traces Tr(H_t) by Rademacher probing.

    Each probe v contributes v . (grad P_t(theta + h v) - grad P_t(theta - h v)) / (2 h),
    a finite-difference Hessian-vector product against first-order
    gradients only.  Entries cover scored positions (|P_t| >= p_floor).
    """
    if probes < 1:
        raise InvalidArgument("probes must be >= 1")
    if not fd_step > 0:
        raise InvalidArgument("fd_step must be > 0")
    scorer = _as_scorer(model_or_scorer, x)
    theta = _theta_of(model_or_scorer)
    base = np.asarray(scorer.scores(theta), dtype=np.float64)
    keep, excluded = _scored_positions(base, p_floor)
    acc = np.zeros(int(keep.sum()))
    for j in range(probes):
        v = rademacher_probe(scorer.dim, stable_hash(int(seed), str(scorer.sample_id), "probe", j))
        g_plus = scorer.position_gradients(theta + fd_step * v)
        g_minus = scorer.position_gradients(theta - fd_step * v)
        hvp = (g_plus[keep] - g_minus[keep]) @ v / (2.0 * fd_step)
        acc += hvp
    return TraceEstimate(
        per_token=acc / probes,
        positions=tuple(int(i) for i in np.nonzero(keep)[0]),
        excluded_positions=excluded,
        probes=probes,
        fd_step=fd_step,
    )


def mrd_hessian_approx(model_or_scorer, x=None, sigma=1e-5, trace=None,
                       p_floor=P_FLOOR_DEFAULT):
    """Second-order closed form |(sigma^2 / 2) * sum_t Tr(H_t) / P_t(theta)|.

    `trace` must cover exactly the scored positions (as produced by
    hutchinson_trace with the same floor).
    """
    if trace is None:
        raise InvalidArgument("a TraceEstimate is required")
    if not sigma > 0:
        raise InvalidArgument("sigma must be > 0")
    scorer = _as_scorer(model_or_scorer, x)
    theta = _theta_of(model_or_scorer)
    base = np.asarray(scorer.scores(theta), dtype=np.float64)
    keep, excluded = _scored_positions(base, p_floor)
    positions = tuple(int(i) for i in np.nonzero(keep)[0])
    if positions != tuple(trace.positions):
        raise InvalidArgument("trace does not cover the scored positions")
    value = abs(0.5 * sigma * sigma * float(np.sum(trace.per_token / base[keep])))
    return MrdEstimate(
        sample_id=str(scorer.sample_id),
        estimator="hessian_approx",
        value=value,
        std_error=0.0,
        sigma=sigma,
        n_draws=trace.probes,
        excluded_positions=excluded,
    )


def rank_by_mrd(model, samples, config=MrdConfig(), seed=0):
    """Estimates for every sample, sorted by descending value.

    Ties break toward the lexically smaller sample id.  Each sample's
    draws are seeded independently, so the ranking is invariant to the
    order samples are supplied in.
    """
    estimates = [mrd_monte_carlo(model, s, config=config, seed=seed) for s in samples]
    return sorted(estimates, key=lambda e: (-e.value, e.sample_id))


def _as_scorer(model_or_scorer, x):
    if isinstance(model_or_scorer, SequenceScorer):
        return model_or_scorer
    if x is None:
        raise InvalidArgument("a sequence is required when passing a model")
    return LmSequenceScorer(model_or_scorer, x)


def _theta_of(model_or_scorer):
    if isinstance(model_or_scorer, SequenceScorer):
        return np.asarray(model_or_scorer.theta, dtype=np.float64)
    return model_or_scorer.params.values


# ---------------------------------------------------------------------------
# report files
# ---------------------------------------------------------------------------

def save_mrd_report(estimates, path):
    """JSON lines, one record per estimate."""
    with open(path, "w", encoding="utf-8") as fh:
        for e in estimates:
            fh.write(json.dumps({
                "sample_id": e.sample_id,
                "estimator": e.estimator,
                "value": e.value,
                "std_error": e.std_error,
                "sigma": e.sigma,
                "K": e.n_draws,
                "excluded_positions": list(e.excluded_positions),
            }, sort_keys=True) + "\n")


def load_mrd_report(path):
    estimates = []
    with open(path, "r", encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, start=1):
            if not line.strip():
                continue
            try:
                r = json.loads(line)
                estimates.append(MrdEstimate(
                    sample_id=r["sample_id"],
                    estimator=r["estimator"],
                    value=float(r["value"]),
                    std_error=float(r["std_error"]),
                    sigma=float(r["sigma"]),
                    n_draws=int(r["K"]),
                    excluded_positions=tuple(r["excluded_positions"]),
                ))
            except (KeyError, TypeError, ValueError, json.JSONDecodeError) as exc:
                raise InvalidArgument(f"line {lineno}: bad MRD record ({exc})") from None
    return estimates
