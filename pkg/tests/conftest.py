"""Shared fixtures.

The expensive fixtures (trained model, early-stop bars) are deterministic
functions of their configs, so they are cached on disk between sessions.
Set FORGETLAB_TEST_CACHE to choose the cache directory, or set it to "0"
to disable caching and rebuild everything in-process.
"""

import json
import os
import pathlib
import tempfile
from types import SimpleNamespace

import numpy as np
import pytest

from forgetlab.corpus import (CorpusSpec, generate_corpus, generate_heldout,
                              save_corpus)
from forgetlab.lm import (LmConfig, OptimizerConfig, load_checkpoint,
                          new_model, save_checkpoint, train)
from forgetlab.unlearn import EarlyStopThresholds, compute_thresholds

CORPUS_SEED = 7
TRAIN_EPOCHS = 150
TRAIN_LR = 1e-3


def _cache_dir():
    env = os.environ.get("FORGETLAB_TEST_CACHE", "")
    if env == "0":
        return None
    if env:
        path = pathlib.Path(env)
    else:
        path = pathlib.Path(tempfile.gettempdir()) / "forgetlab-test-cache"
    path.mkdir(parents=True, exist_ok=True)
    return path


@pytest.fixture(scope="session")
def corpus():
    return generate_corpus(CorpusSpec(), seed=CORPUS_SEED)


@pytest.fixture(scope="session")
def trained_model(corpus):
    """150-epoch model over the seed-7 corpus; memorizes nearly all rows."""
    cfg = LmConfig(vocab_size=len(corpus.vocab.tokens))
    opt = OptimizerConfig(learning_rate=TRAIN_LR, epochs=TRAIN_EPOCHS,
                          batch_size=32, seed=0)
    cache = _cache_dir()
    key = f"model-c{CORPUS_SEED}-e{TRAIN_EPOCHS}-lr{TRAIN_LR}.ckpt"
    if cache is not None and (cache / key).exists():
        return load_checkpoint(cache / key)
    model = train(corpus, cfg, opt)
    if cache is not None:
        save_checkpoint(model, cache / key)
    return model


@pytest.fixture(scope="session")
def thresholds(trained_model, corpus):
    """Initial-model bars over the full corpus, frozen for every test."""
    cache = _cache_dir()
    key = f"bars-c{CORPUS_SEED}-e{TRAIN_EPOCHS}-lr{TRAIN_LR}.json"
    if cache is not None and (cache / key).exists():
        doc = json.loads((cache / key).read_text())
        return EarlyStopThresholds(**doc)
    th = compute_thresholds(trained_model, corpus.all_samples())
    if cache is not None:
        (cache / key).write_text(json.dumps(
            {"el_bar": th.el_bar, "ma_bar": th.ma_bar, "n_gram": th.n_gram}))
    return th


@pytest.fixture(scope="session")
def heldout(corpus):
    return generate_heldout(corpus, 24, seed=CORPUS_SEED + 1)


@pytest.fixture(scope="session")
def tiny_model():
    """Untrained 4k-parameter model for mechanics tests."""
    rng = np.random.default_rng(3)
    model = new_model(LmConfig(vocab_size=11, context_length=16, embed_dim=8,
                               num_layers=1, num_heads=2, seed=5))
    model.params.values[:] += rng.normal(0.0, 0.05, model.params.dim)
    return model


TINY_SPEC = dict(n_frequency_high=3, n_frequency_low=3, n_complexity_high=3,
                 n_complexity_low=3, n_rare=2, n_common=2, replication_high=2)


@pytest.fixture(scope="session")
def tiny_assets(tmp_path_factory):
    """16-sample corpus and a briefly trained checkpoint, saved to disk.

    Experiment and CLI tests load these through corpus_path and
    checkpoint_path so they never pay for in-run training.
    """
    root = tmp_path_factory.mktemp("tiny-assets")
    tiny = generate_corpus(CorpusSpec(**TINY_SPEC), seed=11)
    cfg = LmConfig(vocab_size=len(tiny.vocab.tokens), embed_dim=8,
                   num_layers=1, num_heads=2, seed=2)
    opt = OptimizerConfig(learning_rate=1e-3, epochs=5, batch_size=8, seed=0)
    model = train(tiny, cfg, opt)
    corpus_path = root / "corpus.jsonl"
    ckpt_path = root / "model.ckpt"
    save_corpus(tiny, corpus_path)
    save_checkpoint(model, ckpt_path)
    return SimpleNamespace(corpus=tiny, model=model,
                           corpus_path=str(corpus_path),
                           ckpt_path=str(ckpt_path),
                           spec_dict=dict(TINY_SPEC))
