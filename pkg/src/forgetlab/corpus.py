"""Synthetic character corpus with controlled memorization tiers.

Every sample reads ``name:body.`` where the name is a unique
consonant-vowel-consonant key and the body is built from random
consonant-vowel syllables.  Generation knobs control four tier axes:

* frequency   -- high-tier samples repeat in the training stream,
* complexity  -- body word count scales sequence length,
* rare tokens -- reserved characters that appear nowhere else,
* plus plain filler samples.

Token ids 0 and 1 are reserved for EOS and BOS; content characters map
to ids 2 and up in sorted order.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field, asdict

from .errors import CorpusFormatError, InvalidArgument
from .lm import BOS_ID, EOS_ID, RESERVED_TOKENS
from .paramspace import child_rng

CONSONANTS = "bdfgklmnprstv"
VOWELS = "aeiou"
SEPARATOR = ":"
TERMINATOR = "."
JOINER = "-"
RARE_CHARS = "jqwxz"

_FORMAT_VERSION = 1
_CORPUS_KIND = "forgetlab-corpus"


@dataclass(frozen=True)
class Vocab:
    """Token id table: index 0 EOS, index 1 BOS, then single characters."""

    tokens: tuple

    def __post_init__(self):
        if len(self.tokens) < 3:
            raise InvalidArgument("vocab needs EOS, BOS, and content entries")
        if self.tokens[EOS_ID] != "<eos>" or self.tokens[BOS_ID] != "<bos>":
            raise InvalidArgument("vocab entries 0 and 1 must be <eos> and <bos>")

    @property
    def size(self):
        return len(self.tokens)

    def _char_ids(self):
        return {ch: i for i, ch in enumerate(self.tokens) if i >= RESERVED_TOKENS}

    def tokenize(self, text):
        table = self._char_ids()
        ids = []
        for pos, ch in enumerate(text):
            if ch not in table:
                raise InvalidArgument(
                    f"character {ch!r} at position {pos} is not in the vocabulary"
                )
            ids.append(table[ch])
        return ids

    def detokenize(self, ids):
        chars = []
        for pos, i in enumerate(ids):
            if not RESERVED_TOKENS <= int(i) < self.size:
                raise InvalidArgument(
                    f"token id {i} at position {pos} is reserved or out of range"
                )
            chars.append(self.tokens[int(i)])
        return "".join(chars)


def default_vocab():
    chars = sorted(set(CONSONANTS + VOWELS + SEPARATOR + TERMINATOR + JOINER + RARE_CHARS))
    return Vocab(tokens=("<eos>", "<bos>") + tuple(chars))


@dataclass
class TokenSequence:
    """One corpus sample; prompt_len counts the key-plus-separator tokens."""

    sample_id: str
    text: str
    tokens: list
    labels: dict = field(default_factory=dict)
    prompt_len: int = 0

    @property
    def replication_count(self):
        return int(self.labels.get("replication_count", 1))

    def prompt_tokens(self):
        return self.tokens[:self.prompt_len]

    def answer_tokens(self):
        return self.tokens[self.prompt_len:]


@dataclass(frozen=True)
class CorpusSpec:
    n_frequency_high: int = 22
    n_frequency_low: int = 22
    n_complexity_high: int = 22
    n_complexity_low: int = 22
    n_rare: int = 10
    n_common: int = 12
    replication_high: int = 5
    words_default: int = 3
    words_low: int = 1
    words_high: int = 5
    syllables_min: int = 2
    syllables_max: int = 3
    rare_min_count: int = 3
    max_length: int = 56

    def __post_init__(self):
        if self.replication_high < 2:
            raise InvalidArgument("replication_high must be >= 2")
        if self.words_high < 2 * self.words_low:
            raise InvalidArgument("high-complexity word count must dominate low tier")
        if min(self.n_frequency_high, self.n_frequency_low, self.n_complexity_high,
               self.n_complexity_low, self.n_rare, self.n_common) < 1:
            raise InvalidArgument("every corpus group needs at least one sample")


@dataclass
class Corpus:
    vocab: Vocab
    forget: list
    retain: list
    spec: CorpusSpec
    seed: int

    def all_samples(self):
        return list(self.forget) + list(self.retain)

    def training_rows(self):
        """Flattened stream: each sample repeated by its replication count."""
        rows = []
        for s in self.all_samples():
            rows.extend([s.tokens] * s.replication_count)
        return rows

    def by_sample_id(self):
        return {s.sample_id: s for s in self.all_samples()}


def _word(rng, spec):
    n_syll = int(rng.integers(spec.syllables_min, spec.syllables_max + 1))
    return "".join(
        CONSONANTS[rng.integers(len(CONSONANTS))] + VOWELS[rng.integers(len(VOWELS))]
        for _ in range(n_syll)
    )


def _body(rng, spec, words):
    return JOINER.join(_word(rng, spec) for _ in range(words))


def _fresh_name(rng, used):
    while True:
        name = (
            CONSONANTS[rng.integers(len(CONSONANTS))]
            + VOWELS[rng.integers(len(VOWELS))]
            + CONSONANTS[rng.integers(len(CONSONANTS))]
        )
        if name not in used:
            used.add(name)
            return name


def _inject_rare(rng, body, count):
    letters = [i for i, ch in enumerate(body) if ch not in (JOINER,)]
    if len(letters) < count:
        raise InvalidArgument("body too short for rare-token injection")
    chosen = rng.choice(len(letters), size=count, replace=False)
    out = list(body)
    for j in chosen:
        out[letters[j]] = RARE_CHARS[rng.integers(len(RARE_CHARS))]
    return "".join(out)


def _make_sample(vocab, used_names, rng, spec, group, index, words,
                 frequency_tier, complexity_tier, rare, replication):
    name = _fresh_name(rng, used_names)
    body = _body(rng, spec, words)
    if rare:
        body = _inject_rare(rng, body, spec.rare_min_count)
    text = name + SEPARATOR + body + TERMINATOR
    if len(text) > spec.max_length:
        raise InvalidArgument(f"generated sample exceeds max_length {spec.max_length}")
    tokens = vocab.tokenize(text)
    labels = {
        "frequency_tier": frequency_tier,
        "complexity_tier": complexity_tier,
        "rare_token": bool(rare),
        "replication_count": int(replication),
    }
    return TokenSequence(
        sample_id=f"{group}{index:03d}",
        text=text,
        tokens=tokens,
        labels=labels,
        prompt_len=len(name) + 1,
    )


def generate_corpus(spec, seed, forget_fraction=0.1):
    """Deterministically build, label, and split the tiered corpus."""
    vocab = default_vocab()
    rng = child_rng(seed, "corpus")
    used = set()
    samples = []
    groups = [
        ("fh", spec.n_frequency_high, spec.words_default, "high", "mid", False, spec.replication_high),
        ("fl", spec.n_frequency_low, spec.words_default, "low", "mid", False, 1),
        ("ch", spec.n_complexity_high, spec.words_high, "low", "high", False, 1),
        ("cl", spec.n_complexity_low, spec.words_low, "low", "low", False, 1),
        ("rt", spec.n_rare, spec.words_default, "low", "mid", True, 1),
        ("cm", spec.n_common, spec.words_default, "low", "mid", False, 1),
    ]
    for tag, count, words, freq, cplx, rare, rep in groups:
        for i in range(count):
            samples.append(
                _make_sample(vocab, used, rng, spec, tag, i, words, freq, cplx, rare, rep)
            )

    high = [len(s.tokens) for s in samples if s.labels["complexity_tier"] == "high"]
    low = [len(s.tokens) for s in samples if s.labels["complexity_tier"] == "low"]
    if sum(high) / len(high) < 2.0 * sum(low) / len(low):
        raise InvalidArgument("complexity tiers failed the 2x mean-length contract")

    forget, retain = split_forget_retain(samples, forget_fraction, seed)
    return Corpus(vocab=vocab, forget=forget, retain=retain, spec=spec, seed=int(seed))


def split_forget_retain(samples, fraction, seed):
    """Random split; forget side gets ceil(fraction * N) samples."""
    if not 0.0 < fraction < 1.0:
        raise InvalidArgument(f"fraction must lie in (0, 1), got {fraction}")
    n = len(samples)
    n_forget = math.ceil(fraction * n)
    if n_forget >= n:
        raise InvalidArgument("fraction leaves the retain side empty")
    order = child_rng(seed, "split").permutation(n)
    forget = [samples[i] for i in sorted(order[:n_forget])]
    retain = [samples[i] for i in sorted(order[n_forget:])]
    return forget, retain


def generate_heldout(corpus, n, seed):
    """Fresh same-grammar samples whose keys never occur in the corpus."""
    if n < 1:
        raise InvalidArgument("heldout size must be >= 1")
    rng = child_rng(seed, "heldout")
    used = {s.text[:3] for s in corpus.all_samples()}
    spec = corpus.spec
    return [
        _make_sample(corpus.vocab, used, rng, spec, "ho", i, spec.words_default,
                     "low", "mid", False, 1)
        for i in range(n)
    ]


# ---------------------------------------------------------------------------
# persistence
# ---------------------------------------------------------------------------

def save_corpus(corpus, path):
    with open(path, "w", encoding="utf-8") as fh:
        header = {
            "format_version": _FORMAT_VERSION,
            "kind": _CORPUS_KIND,
            "vocab": list(corpus.vocab.tokens),
            "spec": asdict(corpus.spec),
            "seed": corpus.seed,
        }
        fh.write(json.dumps(header, sort_keys=True) + "\n")
        for split_name, split in (("forget", corpus.forget), ("retain", corpus.retain)):
            for s in split:
                record = {
                    "sample_id": s.sample_id,
                    "split": split_name,
                    "text": s.text,
                    "labels": s.labels,
                    "prompt_len": s.prompt_len,
                }
                fh.write(json.dumps(record, sort_keys=True) + "\n")


def load_corpus(path):
    with open(path, "r", encoding="utf-8") as fh:
        lines = fh.read().splitlines()
    if not lines:
        raise CorpusFormatError("line 1: empty corpus file")
    try:
        header = json.loads(lines[0])
    except json.JSONDecodeError as exc:
        raise CorpusFormatError(f"line 1: bad header ({exc})") from None
    if header.get("kind") != _CORPUS_KIND:
        raise CorpusFormatError("line 1: not a forgetlab corpus")
    if header.get("format_version") != _FORMAT_VERSION:
        raise CorpusFormatError(
            f"line 1: unsupported format_version {header.get('format_version')}"
        )
    vocab = Vocab(tokens=tuple(header["vocab"]))
    spec = CorpusSpec(**header["spec"])
    forget, retain = [], []
    for lineno, line in enumerate(lines[1:], start=2):
        if not line.strip():
            continue
        try:
            record = json.loads(line)
            sample = TokenSequence(
                sample_id=record["sample_id"],
                text=record["text"],
                tokens=vocab.tokenize(record["text"]),
                labels=record["labels"],
                prompt_len=int(record["prompt_len"]),
            )
            split = record["split"]
        except (KeyError, TypeError, json.JSONDecodeError, InvalidArgument) as exc:
            raise CorpusFormatError(f"line {lineno}: {exc}") from None
        if split == "forget":
            forget.append(sample)
        elif split == "retain":
            retain.append(sample)
        else:
            raise CorpusFormatError(f"line {lineno}: unknown split {split!r}")
    return Corpus(vocab=vocab, forget=forget, retain=retain, spec=spec,
                  seed=int(header["seed"]))


# ---------------------------------------------------------------------------
# rejection-target fixtures (preference-optimization unlearning)
# ---------------------------------------------------------------------------

def save_rejection_targets(pairs, path):
    """pairs: iterable of (prompt_text, target_text)."""
    with open(path, "w", encoding="utf-8") as fh:
        json.dump([{"prompt": p, "target": t} for p, t in pairs], fh, indent=0)


def load_rejection_targets(path, vocab):
    """Load (prompt, target) text pairs; both must tokenize under vocab."""
    with open(path, "r", encoding="utf-8") as fh:
        try:
            raw = json.load(fh)
        except json.JSONDecodeError as exc:
            raise CorpusFormatError(f"bad rejection-target file: {exc}") from None
    pairs = []
    for i, entry in enumerate(raw):
        try:
            prompt, target = entry["prompt"], entry["target"]
        except (KeyError, TypeError):
            raise CorpusFormatError(f"entry {i}: need prompt and target") from None
        vocab.tokenize(prompt)
        if not target:
            raise CorpusFormatError(f"entry {i}: empty rejection target")
        vocab.tokenize(target)
        pairs.append((prompt, target))
    return pairs
