"""Evaluation metric oracles.

Hand-computable fixtures: a zero-parameter model emits EOS everywhere
(uniform logits argmax ties break to id 0), and the trained memorizer
from test_lm reproduces its two sequences exactly. Between them every
metric hits both ends of its range with known intermediate values.
"""

import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from forgetlab.corpus import Corpus, CorpusSpec, TokenSequence, default_vocab
from forgetlab.errors import InvalidArgument
from forgetlab.lm import (LmConfig, OptimizerConfig, batched_token_log_probs,
                          new_model, train)
from forgetlab.metrics import (MetricsReport, batch_memorization_accuracy,
                               evaluate_model, extraction_likelihood,
                               mean_rouge_l_recall, memorization_accuracy,
                               min_k_prob_mia, min_k_scores, ngram_overlap,
                               rank_auc, rouge_l_recall, unlearning_accuracy,
                               utility_report)
from forgetlab.paramspace import ParamVector


@pytest.fixture(scope="module")
def eos_model():
    """Zero parameters: every argmax is EOS, every log-prob is -log(V)."""
    cfg = LmConfig(vocab_size=15, context_length=32, embed_dim=8,
                   num_layers=1, num_heads=2)
    model = new_model(cfg)
    model.params = ParamVector(np.zeros(model.params.dim), model.params.layout)
    return model


@pytest.fixture(scope="module")
def solo_memorizer():
    vocab = default_vocab()
    text = "nuv:seke."
    sample = TokenSequence(sample_id="solo", text=text,
                           tokens=vocab.tokenize(text), labels={}, prompt_len=4)
    corpus = Corpus(vocab=vocab, forget=[sample], retain=[sample],
                    spec=CorpusSpec(), seed=0)
    cfg = LmConfig(vocab_size=vocab.size, context_length=24, embed_dim=16,
                   num_layers=1, num_heads=2, seed=2)
    model = train(corpus, cfg, OptimizerConfig(learning_rate=3e-3, epochs=250,
                                               batch_size=2, seed=0))
    return sample, model


@pytest.fixture(scope="module")
def memorizer():
    vocab = default_vocab()
    texts = ["bak:dudu.", "lem:gigi."]
    samples = [
        TokenSequence(sample_id=f"s{i}", text=t, tokens=vocab.tokenize(t),
                      labels={}, prompt_len=4)
        for i, t in enumerate(texts)
    ]
    corpus = Corpus(vocab=vocab, forget=samples[:1], retain=samples[1:],
                    spec=CorpusSpec(), seed=0)
    cfg = LmConfig(vocab_size=vocab.size, context_length=24, embed_dim=16,
                   num_layers=1, num_heads=2, seed=1)
    model = train(corpus, cfg, OptimizerConfig(learning_rate=3e-3, epochs=300,
                                               batch_size=2, seed=0))
    return corpus, model


def test_memorization_accuracy_extremes(memorizer, eos_model):
    corpus, model = memorizer
    for s in corpus.all_samples():
        assert memorization_accuracy(model, s) == 1.0
    # EOS model never predicts a content token
    assert memorization_accuracy(eos_model, [3, 4, 5, 6]) == 0.0
    with pytest.raises(InvalidArgument):
        memorization_accuracy(eos_model, [3])


def test_batch_memorization_matches_single(memorizer):
    corpus, model = memorizer
    rows = [s.tokens for s in corpus.all_samples()] + [[5, 5, 5]]
    batch = batch_memorization_accuracy(model, rows)
    singles = [memorization_accuracy(model, r) for r in rows]
    assert batch == singles


def test_ngram_overlap_oracles():
    # "abab" vs "ab": bigrams ab, ba, ab -> ab hits, ba misses
    assert ngram_overlap([7, 8, 7, 8], [7, 8], 2) == pytest.approx(2 / 3)
    assert ngram_overlap([7, 8], [9, 10], 1) == 0.0
    assert ngram_overlap([7, 8], [8, 7], 1) == 1.0
    # duplicates in a count every occurrence
    assert ngram_overlap([5, 5, 6], [5], 1) == pytest.approx(2 / 3)
    with pytest.raises(InvalidArgument):
        ngram_overlap([5], [5, 6], 2)
    with pytest.raises(InvalidArgument):
        ngram_overlap([5, 6], [5], 0)


def test_extraction_likelihood_extremes(memorizer, solo_memorizer, eos_model):
    # single-sequence memorizer: every cut, including the empty prefix,
    # regenerates the sequence, so EL is exactly 1
    solo_sample, solo_model = solo_memorizer
    assert extraction_likelihood(solo_model, solo_sample, n=1) == 1.0
    assert extraction_likelihood(solo_model, solo_sample, n=2) == 1.0
    # with two memorized sequences the empty-prefix cut can decode the
    # other one, so the score stays high but need not be exact
    corpus, model = memorizer
    for s in corpus.all_samples():
        assert extraction_likelihood(model, s, n=1) >= 0.85
    # EOS-degenerate continuations are empty, the zero convention
    assert extraction_likelihood(eos_model, [3, 4, 5, 6], n=1) == 0.0
    with pytest.raises(InvalidArgument):
        extraction_likelihood(eos_model, [3, 4], n=2)


def test_rouge_l_recall_oracles():
    # LCS("abcde", "ace") = 3 against reference length 5
    assert rouge_l_recall([1, 2, 3, 4, 5], [1, 3, 5]) == pytest.approx(0.6)
    assert rouge_l_recall([1, 2, 3], [1, 2, 3]) == 1.0
    assert rouge_l_recall([1, 2, 3], [4, 5]) == 0.0
    assert rouge_l_recall([1, 2, 3], []) == 0.0
    # order matters: reversed hypothesis shares only one step
    assert rouge_l_recall([1, 2, 3], [3, 2, 1]) == pytest.approx(1 / 3)
    with pytest.raises(InvalidArgument):
        rouge_l_recall([], [1])


def test_unlearning_accuracy_extremes(memorizer, eos_model):
    corpus, model = memorizer
    pairs = [(s.prompt_tokens(), s.answer_tokens()) for s in corpus.all_samples()]
    assert unlearning_accuracy(model, pairs) == 0.0
    assert mean_rouge_l_recall(model, pairs) == 1.0
    assert unlearning_accuracy(eos_model, [([3, 4], [5, 6])]) == 1.0
    assert mean_rouge_l_recall(eos_model, [([3, 4], [5, 6])]) == 0.0
    with pytest.raises(InvalidArgument):
        unlearning_accuracy(model, [])
    with pytest.raises(InvalidArgument):
        unlearning_accuracy(model, [([3, 4], [])])


def test_min_k_scores_uniform_oracle(eos_model):
    # every token scores exactly -log(V), so any k-fraction mean does too
    vals = min_k_scores(eos_model, [[3, 4, 5, 6, 7]], k_fraction=0.4)
    assert vals[0] == pytest.approx(-math.log(15.0), rel=1e-12)
    with pytest.raises(InvalidArgument):
        min_k_scores(eos_model, [[3, 4]], k_fraction=0.0)
    with pytest.raises(InvalidArgument):
        min_k_scores(eos_model, [[3, 4]], k_fraction=1.5)


def test_min_k_scores_pick_lowest(memorizer):
    corpus, model = memorizer
    row = corpus.all_samples()[0].tokens
    per = batched_token_log_probs(model, [row])[0]
    k = math.ceil(0.2 * per.size)
    expect = float(np.sort(per)[:k].mean())
    assert min_k_scores(model, [row], 0.2)[0] == pytest.approx(expect, rel=1e-12)


def _auc_oracle(pos, neg):
    total = 0.0
    for p in pos:
        for q in neg:
            total += 1.0 if p > q else (0.5 if p == q else 0.0)
    return total / (len(pos) * len(neg))


def test_rank_auc_matches_pairwise_oracle():
    rng = np.random.default_rng(0)
    for trial in range(20):
        pos = rng.integers(0, 6, size=rng.integers(1, 8)).astype(float)
        neg = rng.integers(0, 6, size=rng.integers(1, 8)).astype(float)
        assert rank_auc(list(pos), list(neg)) == pytest.approx(
            _auc_oracle(pos, neg), abs=1e-12)


def test_rank_auc_degenerate_values():
    assert rank_auc([2.0, 3.0], [0.0, 1.0]) == 1.0
    assert rank_auc([0.0, 1.0], [2.0, 3.0]) == 0.0
    assert rank_auc([1.0, 2.0], [1.0, 2.0]) == 0.5


def test_rank_auc_monotone_transform_invariance():
    rng = np.random.default_rng(1)
    pos = list(rng.normal(size=9))
    neg = list(rng.normal(size=7))
    base = rank_auc(pos, neg)
    assert rank_auc([math.exp(v) for v in pos],
                    [math.exp(v) for v in neg]) == pytest.approx(base)
    assert rank_auc([3 * v + 2 for v in pos],
                    [3 * v + 2 for v in neg]) == pytest.approx(base)


def test_min_k_prob_mia_directions(memorizer):
    # orientation: 1.0 means the members look thoroughly forgotten, so a
    # model that still memorizes its members scores exactly 0
    corpus, model = memorizer
    members = [s.tokens for s in corpus.all_samples()]
    vocab = corpus.vocab
    fresh = [vocab.tokenize("vut:popo."), vocab.tokenize("dif:keke.")]
    assert min_k_prob_mia(model, members, fresh) == 0.0
    # swap the classes: "members" the model has never seen look erased
    assert min_k_prob_mia(model, fresh, members) == 1.0
    # identical sets are indistinguishable by construction
    assert min_k_prob_mia(model, members, members) == 0.5
    with pytest.raises(InvalidArgument):
        min_k_prob_mia(model, [], fresh)


def test_metrics_report_roundtrip(tmp_path):
    report = MetricsReport(
        splits={"forget": {"ma": 0.25, "el": 0.1, "rouge_l": 0.5, "ua": 0.75},
                "retain": {"ma": 1.0, "el": 0.9, "rouge_l": 1.0}},
        mia_auc=0.625)
    back = MetricsReport.from_json(report.to_json())
    assert back == report
    rows = report.csv_rows()
    assert rows[0] == ("split", "metric", "value")
    assert ("forget_vs_heldout", "mia_auc", repr(0.625)) in rows
    path = tmp_path / "report.csv"
    report.write_csv(path)
    assert path.read_text().startswith("split,metric,value")

    with pytest.raises(InvalidArgument):
        MetricsReport(splits={"forget": {"ma": 1.5}})
    with pytest.raises(InvalidArgument):
        MetricsReport(splits={}, mia_auc=-0.1)


def test_evaluate_model_shape(memorizer):
    corpus, model = memorizer
    vocab = corpus.vocab
    heldout = [
        TokenSequence(sample_id="h0", text="vut:popo.",
                      tokens=vocab.tokenize("vut:popo."), labels={},
                      prompt_len=4)
    ]
    report = evaluate_model(model, corpus.forget, corpus.retain, heldout)
    assert set(report.splits) == {"forget", "retain", "heldout"}
    assert set(report.splits["forget"]) == {"ma", "el", "rouge_l", "ua"}
    assert set(report.splits["retain"]) == {"ma", "el", "rouge_l"}
    assert report.splits["forget"]["ma"] == 1.0  # nothing unlearned yet
    assert report.mia_auc == 0.0  # forget split still looks fully memorized

    util = utility_report(model, corpus.retain, heldout)
    assert set(util) == {"retain", "heldout"}
    with pytest.raises(InvalidArgument):
        utility_report(model, [], heldout)
    with pytest.raises(InvalidArgument):
        evaluate_model(model, [], corpus.retain, heldout)


@settings(max_examples=40, deadline=None)
@given(st.lists(st.integers(2, 9), min_size=1, max_size=12),
       st.lists(st.integers(2, 9), min_size=1, max_size=12))
def test_rouge_l_recall_bounds_and_symmetry(ref, hyp):
    r = rouge_l_recall(ref, hyp)
    assert 0.0 <= r <= 1.0
    # LCS is symmetric, so recall scales by the length ratio
    r_swap = rouge_l_recall(hyp, ref)
    assert r * len(ref) == pytest.approx(r_swap * len(hyp))


@settings(max_examples=40, deadline=None)
@given(st.lists(st.floats(-5, 5, allow_nan=False), min_size=1, max_size=10),
       st.lists(st.floats(-5, 5, allow_nan=False), min_size=1, max_size=10))
def test_rank_auc_complement(pos, neg):
    # swapping the classes reflects the statistic around one half
    assert rank_auc(pos, neg) + rank_auc(neg, pos) == pytest.approx(1.0)
