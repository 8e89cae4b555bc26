"""Evaluation metrics for memorization and unlearning runs.

Sequence metrics (memorization accuracy, extraction likelihood) measure how
much of a specific token sequence the model reproduces.  Generation metrics
(exact-match accuracy, Rouge-L recall) grade prompted decodes against stored
answers.  The membership-inference score measures how separable trained
sequences are from fresh text.  Every score lands in [0, 1].
"""

from __future__ import annotations

import csv
import json
import math
from dataclasses import dataclass, field

import numpy as np
from scipy.stats import rankdata

from .errors import InvalidArgument
from .lm import (batched_token_log_probs, greedy_continuations,
                 next_token_argmax)


def _tokens_of(x):
    return list(x.tokens) if hasattr(x, "tokens") else list(x)


# ---------------------------------------------------------------------------
# memorization accuracy
# ---------------------------------------------------------------------------

def memorization_accuracy(model, x):
    """Fraction of next-token argmax hits over positions 1..T-1.

    Event t checks the prediction of x_{t+1} from the BOS-framed prefix
    x_<=t, so the first token of the sequence is never itself a target.
    """
    return batch_memorization_accuracy(model, [x])[0]


def batch_memorization_accuracy(model, samples):
    """One score per sample; a single batched forward pass for all of them."""
    token_rows = [_tokens_of(s) for s in samples]
    for row in token_rows:
        if len(row) < 2:
            raise InvalidArgument("memorization accuracy needs length >= 2")
    preds = next_token_argmax(model, token_rows)
    out = []
    for row, p in zip(token_rows, preds):
        # p[i] is the argmax given BOS + row[:i+1], aligned against row[i+1].
        hits = int(np.sum(p[:len(row) - 1] == np.asarray(row[1:])))
        out.append(hits / (len(row) - 1))
    return out


# ---------------------------------------------------------------------------
# n-gram overlap and extraction likelihood
# ---------------------------------------------------------------------------

def ngram_overlap(a, b, n):
    """Fraction of a's n-grams (as a list, duplicates kept) present in b's set."""
    a = _tokens_of(a)
    b = _tokens_of(b)
    if n < 1:
        raise InvalidArgument("n must be >= 1")
    if len(a) < n:
        raise InvalidArgument("ngram_overlap needs len(a) >= n")
    grams_a = [tuple(a[i:i + n]) for i in range(len(a) - n + 1)]
    grams_b = {tuple(b[i:i + n]) for i in range(len(b) - n + 1)}
    return sum(g in grams_b for g in grams_a) / len(grams_a)


def extraction_likelihood(model, x, n=1):
    """Mean n-gram overlap of greedy continuations against the true suffixes.

    For each cut t the model continues the prefix x_<t for at most |x_>=t|
    tokens; a continuation that stops early (EOS) and ends up shorter than n
    contributes 0, the empty-generation convention.
    """
    tokens = _tokens_of(x)
    T = len(tokens)
    if T <= n:
        raise InvalidArgument("extraction likelihood needs length > n")
    prefixes = [tokens[:t - 1] for t in range(1, T - n + 1)]
    budgets = [T - t + 1 for t in range(1, T - n + 1)]
    continuations = greedy_continuations(model, prefixes, budgets)
    total = 0.0
    for t, gen in zip(range(1, T - n + 1), continuations):
        if len(gen) >= n:
            total += ngram_overlap(gen, tokens[t - 1:], n)
    return total / (T - n)


# ---------------------------------------------------------------------------
# Rouge-L recall
# ---------------------------------------------------------------------------

def rouge_l_recall(reference, hypothesis):
    """LCS(reference, hypothesis) / len(reference)."""
    ref = _tokens_of(reference)
    hyp = _tokens_of(hypothesis)
    if not ref:
        raise InvalidArgument("reference must be non-empty")
    if not hyp:
        return 0.0
    prev = [0] * (len(hyp) + 1)
    for r in ref:
        cur = [0]
        for j, h in enumerate(hyp):
            cur.append(prev[j] + 1 if r == h else max(cur[j], prev[j + 1]))
        prev = cur
    return prev[-1] / len(ref)


# ---------------------------------------------------------------------------
# prompted generation metrics
# ---------------------------------------------------------------------------

def _decode_answers(model, qa_pairs):
    prompts = [_tokens_of(p) for p, _ in qa_pairs]
    answers = [_tokens_of(a) for _, a in qa_pairs]
    if any(not a for a in answers):
        raise InvalidArgument("answers must be non-empty")
    gens = greedy_continuations(model, prompts, [len(a) for a in answers])
    return answers, gens


def unlearning_accuracy(model, qa_pairs):
    """1 - exact-match rate of greedy decodes against the stored answers."""
    if not qa_pairs:
        raise InvalidArgument("qa_pairs must be non-empty")
    answers, gens = _decode_answers(model, qa_pairs)
    matches = sum(g == a for g, a in zip(gens, answers))
    return 1.0 - matches / len(qa_pairs)


def mean_rouge_l_recall(model, qa_pairs):
    if not qa_pairs:
        raise InvalidArgument("qa_pairs must be non-empty")
    answers, gens = _decode_answers(model, qa_pairs)
    return float(np.mean([rouge_l_recall(a, g) for a, g in zip(answers, gens)]))


# ---------------------------------------------------------------------------
# membership inference
# ---------------------------------------------------------------------------

def min_k_scores(model, sequences, k_fraction=0.2):
    """Per-sequence mean of the lowest ceil(k_fraction * n) token log-probs."""
    if not 0.0 < k_fraction <= 1.0:
        raise InvalidArgument("k_fraction must lie in (0, 1]")
    rows = [_tokens_of(s) for s in sequences]
    scored = batched_token_log_probs(model, rows)
    out = []
    for per_token in scored:
        k = math.ceil(k_fraction * per_token.size)
        out.append(float(np.sort(per_token)[:k].mean()))
    return out


def min_k_prob_mia(model, members, nonmembers, k_fraction=0.2):
    """AUC of ranking nonmembers above members by min-k% score.

    0.5 means the sets are indistinguishable; 1.0 means every nonmember
    outscores every member, i.e. the members look thoroughly forgotten.
    Ties contribute half, via midranks.
    """
    if not members or not nonmembers:
        raise InvalidArgument("both membership classes must be non-empty")
    s_mem = min_k_scores(model, members, k_fraction)
    s_non = min_k_scores(model, nonmembers, k_fraction)
    return rank_auc(s_non, s_mem)


def rank_auc(positives, negatives):
    """P(positive > negative) + half the tie mass, from midranks."""
    ranks = rankdata(np.concatenate([positives, negatives]))
    n_pos, n_neg = len(positives), len(negatives)
    return float((ranks[:n_pos].sum() - n_pos * (n_pos + 1) / 2) / (n_pos * n_neg))


# ---------------------------------------------------------------------------
# aggregate report
# ---------------------------------------------------------------------------

@dataclass
class MetricsReport:
    """Per-split metric means plus the forget-vs-heldout MIA AUC."""

    splits: dict = field(default_factory=dict)
    mia_auc: float | None = None

    def __post_init__(self):
        for split, metrics in self.splits.items():
            for name, value in metrics.items():
                if not 0.0 <= value <= 1.0:
                    raise InvalidArgument(
                        f"metric {split}/{name} = {value} outside [0, 1]")
        if self.mia_auc is not None and not 0.0 <= self.mia_auc <= 1.0:
            raise InvalidArgument("mia_auc outside [0, 1]")

    def to_json(self):
        doc = {"splits": self.splits, "mia_auc": self.mia_auc}
        return json.dumps(doc, indent=2, sort_keys=True)

    @classmethod
    def from_json(cls, text):
        doc = json.loads(text)
        return cls(splits=doc["splits"], mia_auc=doc.get("mia_auc"))

    def csv_rows(self):
        rows = [("split", "metric", "value")]
        for split in sorted(self.splits):
            for name in sorted(self.splits[split]):
                rows.append((split, name, repr(self.splits[split][name])))
        if self.mia_auc is not None:
            rows.append(("forget_vs_heldout", "mia_auc", repr(self.mia_auc)))
        return rows

    def write_csv(self, path):
        with open(path, "w", newline="") as fh:
            csv.writer(fh).writerows(self.csv_rows())


def _qa_pairs(samples):
    return [(s.prompt_tokens(), s.answer_tokens()) for s in samples]


def _split_summary(model, samples, n):
    mas = batch_memorization_accuracy(model, samples)
    els = [extraction_likelihood(model, s, n) for s in samples]
    return {
        "ma": float(np.mean(mas)),
        "el": float(np.mean(els)),
        "rouge_l": mean_rouge_l_recall(model, _qa_pairs(samples)),
    }


def utility_report(model, retain, heldout, n=1):
    """Mean MA / EL_n / Rouge-L recall on the retain and held-out splits."""
    if not retain or not heldout:
        raise InvalidArgument("splits must be non-empty")
    return {
        "retain": _split_summary(model, retain, n),
        "heldout": _split_summary(model, heldout, n),
    }


def evaluate_model(model, forget, retain, heldout, n=1, k_fraction=0.2):
    """Full completeness-plus-utility report for one checkpoint."""
    if not forget:
        raise InvalidArgument("forget split must be non-empty")
    splits = utility_report(model, retain, heldout, n)
    forget_summary = _split_summary(model, forget, n)
    forget_summary["ua"] = unlearning_accuracy(model, _qa_pairs(forget))
    splits["forget"] = forget_summary
    auc = min_k_prob_mia(model, forget, heldout, k_fraction)
    return MetricsReport(splits=splits, mia_auc=auc)
