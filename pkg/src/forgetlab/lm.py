"""Miniature autoregressive character-level transformer.

Decoder-only, pre-norm blocks, learned token and position embeddings,
causal attention, tied output projection.  All arithmetic is float64 on
the shared autodiff engine; a no-grad forward through the identical code
path serves scoring and decoding.

Sequence framing: the model always sees a reserved begin-of-sequence
token in front of the tokens it conditions on, so even the first content
token has a defined conditional log-probability.  An end-of-sequence
token is the training target after the final content token; decoding
stops when it is emitted.
"""

from __future__ import annotations

import hashlib
import json
from dataclasses import dataclass, field, asdict

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor
from .errors import CheckpointError, InvalidArgument, NumericalFailure
from .paramspace import ParamLayout, ParamVector, bind, child_rng

EOS_ID = 0
BOS_ID = 1
RESERVED_TOKENS = 2

_INIT_STD = 0.02
_CHECKPOINT_KIND = "forgetlab-checkpoint"
_CHECKPOINT_VERSION = 1


@dataclass(frozen=True)
class LmConfig:
    vocab_size: int
    context_length: int = 64
    embed_dim: int = 64
    num_layers: int = 2
    num_heads: int = 2
    seed: int = 0

    def __post_init__(self):
        if self.vocab_size < 3:
            raise InvalidArgument("vocab_size must be >= 3 (EOS, BOS, content)")
        if self.context_length < 2:
            raise InvalidArgument("context_length must be >= 2")
        if self.embed_dim < 1 or self.num_layers < 1 or self.num_heads < 1:
            raise InvalidArgument("embed_dim, num_layers, num_heads must be positive")
        if self.embed_dim % self.num_heads != 0:
            raise InvalidArgument("embed_dim must be divisible by num_heads")


@dataclass(frozen=True)
class OptimizerConfig:
    learning_rate: float = 5e-5
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    weight_decay: float = 0.0
    epochs: int = 100
    batch_size: int = 32
    seed: int = 0

    def __post_init__(self):
        if not self.learning_rate > 0:
            raise InvalidArgument("learning_rate must be > 0")
        if self.epochs < 1 or self.batch_size < 1:
            raise InvalidArgument("epochs and batch_size must be >= 1")


@dataclass
class TrainingState:
    m: np.ndarray
    v: np.ndarray
    step: int = 0
    loss_curve: list = field(default_factory=list)


@dataclass
class LanguageModel:
    config: LmConfig
    params: ParamVector
    training_state: TrainingState | None = None


def build_layout(config):
    d = config.embed_dim
    shapes = [
        ("tok_emb", (config.vocab_size, d)),
        ("pos_emb", (config.context_length, d)),
    ]
    for i in range(config.num_layers):
        p = f"layer{i}."
        shapes += [
            (p + "ln1_g", (d,)), (p + "ln1_b", (d,)),
            (p + "w_q", (d, d)), (p + "b_q", (d,)),
            (p + "w_k", (d, d)), (p + "b_k", (d,)),
            (p + "w_v", (d, d)), (p + "b_v", (d,)),
            (p + "w_proj", (d, d)), (p + "b_proj", (d,)),
            (p + "ln2_g", (d,)), (p + "ln2_b", (d,)),
            (p + "w_fc", (d, 4 * d)), (p + "b_fc", (4 * d,)),
            (p + "w_out", (4 * d, d)), (p + "b_out", (d,)),
        ]
    shapes += [("lnf_g", (d,)), ("lnf_b", (d,))]
    return ParamLayout.build(shapes)


def init_params(config):
    layout = build_layout(config)
    rng = child_rng(config.seed, "lm-init")
    values = np.zeros(layout.dim)
    views = layout.views(values)
    for name, view in views.items():
        if name.endswith(("ln1_g", "ln2_g", "lnf_g")):
            view[...] = 1.0
        elif name.endswith("_b") or name.startswith("b_") or ".b_" in name:
            view[...] = 0.0
        else:
            view[...] = rng.standard_normal(view.shape) * _INIT_STD
    return ParamVector(values, layout)


def new_model(config):
    params = init_params(config)
    state = TrainingState(m=np.zeros(params.dim), v=np.zeros(params.dim))
    return LanguageModel(config=config, params=params, training_state=state)


# ---------------------------------------------------------------------------
# forward
# ---------------------------------------------------------------------------

def forward_logits(config, leaves, ids):
    """Logits (B, T, vocab) for a batch of BOS-framed id rows."""
    ids = np.asarray(ids, dtype=np.int64)
    if ids.ndim != 2:
        raise InvalidArgument("ids must be a (batch, time) array")
    B, T = ids.shape
    if T > config.context_length:
        raise InvalidArgument(
            f"sequence length {T} exceeds context_length {config.context_length}"
        )
    if ids.min() < 0 or ids.max() >= config.vocab_size:
        raise InvalidArgument("token id out of vocabulary range")

    d = config.embed_dim
    heads = config.num_heads
    dh = d // heads
    scale = 1.0 / np.sqrt(dh)
    mask = Tensor(ad.causal_mask(T))

    x = ad.add(ad.embedding(leaves["tok_emb"], ids), ad.take_rows(leaves["pos_emb"], T))
    for i in range(config.num_layers):
        p = f"layer{i}."
        h = ad.layer_norm(x, leaves[p + "ln1_g"], leaves[p + "ln1_b"])

        def split_heads(t):
            return ad.transpose(ad.reshape(t, (B, T, heads, dh)), (0, 2, 1, 3))

        q = split_heads(ad.add(ad.matmul(h, leaves[p + "w_q"]), leaves[p + "b_q"]))
        k = split_heads(ad.add(ad.matmul(h, leaves[p + "w_k"]), leaves[p + "b_k"]))
        v = split_heads(ad.add(ad.matmul(h, leaves[p + "w_v"]), leaves[p + "b_v"]))

        att = ad.mul(ad.matmul(q, ad.transpose(k, (0, 1, 3, 2))), scale)
        att = ad.add(att, mask)
        ctx = ad.matmul(ad.softmax(att), v)
        ctx = ad.reshape(ad.transpose(ctx, (0, 2, 1, 3)), (B, T, d))
        x = ad.add(x, ad.add(ad.matmul(ctx, leaves[p + "w_proj"]), leaves[p + "b_proj"]))

        h2 = ad.layer_norm(x, leaves[p + "ln2_g"], leaves[p + "ln2_b"])
        ff = ad.gelu(ad.add(ad.matmul(h2, leaves[p + "w_fc"]), leaves[p + "b_fc"]))
        x = ad.add(x, ad.add(ad.matmul(ff, leaves[p + "w_out"]), leaves[p + "b_out"]))

    x = ad.layer_norm(x, leaves["lnf_g"], leaves["lnf_b"])
    return ad.matmul(x, ad.transpose(leaves["tok_emb"], (1, 0)))


def _tokens_of(x):
    tokens = list(x.tokens) if hasattr(x, "tokens") else list(x)
    return [int(t) for t in tokens]


@dataclass(frozen=True)
class TokenLogProbs:
    """Per-token conditional log-probabilities for one sequence."""

    per_token: np.ndarray
    sequence_total: float


def token_log_probs(model, x):
    """log p(x_t | x_<t) for t = 1..n, first token conditioned on BOS alone.

    Requires 2 <= n <= context_length.  Entries are <= 0.
    """
    tokens = _tokens_of(x)
    n = len(tokens)
    if n < 2:
        raise InvalidArgument(f"sequence length must be >= 2, got {n}")
    if n > model.config.context_length:
        raise InvalidArgument(
            f"sequence length {n} exceeds context_length {model.config.context_length}"
        )
    per = batched_token_log_probs(model, [tokens])[0]
    return TokenLogProbs(per_token=per, sequence_total=float(per.sum()))


def batched_token_log_probs(model, rows):
    """Per-token log-prob arrays for several token rows in one forward.

    Right-padding with EOS is invisible to causal positions before it,
    so entries match the single-row computation.
    """
    if not rows:
        return []
    rows = [_tokens_of(r) for r in rows]
    lengths = [len(r) for r in rows]
    if min(lengths) < 1:
        raise InvalidArgument("empty sequence cannot be scored")
    max_len = max(lengths)
    if max_len > model.config.context_length:
        raise InvalidArgument("sequence length exceeds context_length")
    B = len(rows)
    inp = np.full((B, max_len), EOS_ID, dtype=np.int64)
    tgt = np.full((B, max_len), EOS_ID, dtype=np.int64)
    for b, r in enumerate(rows):
        inp[b, 0] = BOS_ID
        inp[b, 1:len(r)] = r[:-1]
        tgt[b, :len(r)] = r
    leaves = bind(model.params)
    with ad.no_grad():
        logits = forward_logits(model.config, leaves, inp)
        lp = ad.log_softmax(logits)
        picked = ad.gather_last(lp, tgt)
    data = picked.data
    return [data[b, :lengths[b]].copy() for b in range(B)]


def sequence_log_prob_graph(model_config, leaves, tokens, start=0):
    """Scalar graph for sum_{t>start} log p(token_t | prefix), BOS-framed.

    `start` counts tokens (0-based) whose log-probabilities are excluded,
    which is how prompt-conditioned losses mask the prompt.
    """
    tokens = _tokens_of(tokens)
    n = len(tokens)
    inp = np.empty((1, n), dtype=np.int64)
    inp[0, 0] = BOS_ID
    inp[0, 1:] = tokens[:-1]
    tgt = np.asarray([tokens], dtype=np.int64)
    logits = forward_logits(model_config, leaves, inp)
    picked = ad.gather_last(ad.log_softmax(logits), tgt)
    if start > 0:
        weights = np.zeros((1, n))
        weights[0, start:] = 1.0
        picked = ad.mul(picked, Tensor(weights))
    return ad.tensor_sum(picked)


def next_token_argmax(model, rows):
    """Greedy next-token ids at every position of each BOS-framed row.

    Returns one int array per row; entry t is argmax over the vocabulary
    of p(. | BOS, row[:t+1]).
    """
    rows = [_tokens_of(r) for r in rows]
    if not rows:
        return []
    lengths = [len(r) for r in rows]
    max_len = max(lengths) + 1
    if max_len > model.config.context_length:
        raise InvalidArgument("sequence length exceeds context_length")
    B = len(rows)
    inp = np.full((B, max_len), EOS_ID, dtype=np.int64)
    for b, r in enumerate(rows):
        inp[b, 0] = BOS_ID
        inp[b, 1:len(r) + 1] = r
    leaves = bind(model.params)
    with ad.no_grad():
        logits = forward_logits(model.config, leaves, inp)
    arg = logits.data.argmax(axis=-1)
    return [arg[b, 1:lengths[b] + 1].copy() for b in range(B)]


# ---------------------------------------------------------------------------
# decoding
# ---------------------------------------------------------------------------

def greedy_decode(model, prefix, max_new):
    """Extend a non-empty prefix by repeated argmax; stop at EOS or max_new.

    Ties break toward the lowest token id.  Returns the full token list
    (prefix plus continuation, EOS excluded).  max_new = 0 returns the
    prefix unchanged.
    """
    tokens = _tokens_of(prefix)
    if len(tokens) < 1:
        raise InvalidArgument("prefix must contain at least one token")
    if max_new < 0:
        raise InvalidArgument("max_new must be >= 0")
    if len(tokens) + max_new + 1 > model.config.context_length:
        raise InvalidArgument("prefix plus continuation exceeds context_length")
    cont = greedy_continuations(model, [tokens], [max_new])[0]
    return tokens + cont


def greedy_continuations(model, prefixes, max_new):
    """Batched greedy continuations; prefixes may be empty (BOS-only start).

    Each row decodes until its own max_new or an EOS emission.  Rows are
    right-padded with EOS; causal attention keeps padding inert.
    """
    if len(prefixes) != len(max_new):
        raise InvalidArgument("prefixes and max_new must align")
    rows = [[BOS_ID] + _tokens_of(p) for p in prefixes]
    budget = [int(m) for m in max_new]
    if any(m < 0 for m in budget):
        raise InvalidArgument("max_new must be >= 0")
    generated = [[] for _ in rows]
    active = [i for i, m in enumerate(budget) if m > 0]
    leaves = bind(model.params)
    while active:
        max_len = max(len(rows[i]) for i in active)
        if max_len > model.config.context_length:
            raise InvalidArgument("decode exceeded context_length")
        inp = np.full((len(active), max_len), EOS_ID, dtype=np.int64)
        for j, i in enumerate(active):
            inp[j, :len(rows[i])] = rows[i]
        with ad.no_grad():
            logits = forward_logits(model.config, leaves, inp)
        still = []
        for j, i in enumerate(active):
            nxt = int(np.argmax(logits.data[j, len(rows[i]) - 1]))
            if nxt == EOS_ID:
                continue
            rows[i].append(nxt)
            generated[i].append(nxt)
            if len(generated[i]) < budget[i]:
                still.append(i)
        active = still
    return generated


# ---------------------------------------------------------------------------
# training
# ---------------------------------------------------------------------------

def _adamw_step(params, grad, state, opt):
    state.step += 1
    state.m = opt.beta1 * state.m + (1.0 - opt.beta1) * grad
    state.v = opt.beta2 * state.v + (1.0 - opt.beta2) * grad * grad
    m_hat = state.m / (1.0 - opt.beta1 ** state.step)
    v_hat = state.v / (1.0 - opt.beta2 ** state.step)
    update = m_hat / (np.sqrt(v_hat) + opt.eps)
    if opt.weight_decay:
        update = update + opt.weight_decay * params
    return params - opt.learning_rate * update


def _batch_loss_graph(config, leaves, token_rows):
    """Mean over rows of per-row NLL (sum of token and EOS log-probs)."""
    B = len(token_rows)
    lengths = [len(r) + 1 for r in token_rows]  # content tokens plus EOS target
    max_len = max(lengths)
    inp = np.full((B, max_len), EOS_ID, dtype=np.int64)
    tgt = np.full((B, max_len), EOS_ID, dtype=np.int64)
    weight = np.zeros((B, max_len))
    for b, r in enumerate(token_rows):
        inp[b, 0] = BOS_ID
        inp[b, 1:len(r) + 1] = r
        tgt[b, :len(r)] = r
        tgt[b, len(r)] = EOS_ID
        weight[b, :len(r) + 1] = 1.0
    logits = forward_logits(config, leaves, inp)
    picked = ad.gather_last(ad.log_softmax(logits), tgt)
    total = ad.tensor_sum(ad.mul(picked, Tensor(weight)))
    return ad.mul(total, -1.0 / B)


def train(corpus, config, optimizer):
    """Fit a fresh model on the corpus training stream.

    The stream is every sequence repeated by its replication count;
    order is reshuffled each epoch from the optimizer seed, so identical
    (corpus, config, optimizer) inputs give identical checkpoints.
    """
    rows = [_tokens_of(r) for r in corpus.training_rows()]
    if not rows:
        raise InvalidArgument("corpus has no training rows")
    for r in rows:
        if len(r) + 1 > config.context_length:
            raise InvalidArgument("training row exceeds context_length - 1")
        if any(t < RESERVED_TOKENS or t >= config.vocab_size for t in r):
            raise InvalidArgument("training row contains reserved or out-of-range id")

    model = new_model(config)
    values = model.params.values.copy()
    layout = model.params.layout
    state = model.training_state

    for epoch in range(optimizer.epochs):
        order = child_rng(optimizer.seed, "shuffle", epoch).permutation(len(rows))
        epoch_loss = 0.0
        seen = 0
        for lo in range(0, len(rows), optimizer.batch_size):
            batch = [rows[i] for i in order[lo:lo + optimizer.batch_size]]
            pv = ParamVector(values, layout)
            leaves = bind(pv, requires_grad=True)
            loss = _batch_loss_graph(config, leaves, batch)
            ad.backward(loss)
            grad = np.zeros(layout.dim)
            for name, offset, shape in layout.entries:
                leaf = leaves[name]
                if leaf.grad is not None:
                    size = int(np.prod(shape)) if shape else 1
                    grad[offset:offset + size] = np.asarray(leaf.grad).reshape(-1)
            values = _adamw_step(values, grad, state, optimizer)
            epoch_loss += float(loss.data) * len(batch)
            seen += len(batch)
        if not np.all(np.isfinite(values)):
            raise NumericalFailure(f"non-finite parameters after epoch {epoch}")
        state.loss_curve.append(epoch_loss / seen)

    model.params = ParamVector(values, layout)
    return model


# ---------------------------------------------------------------------------
# checkpoints
# ---------------------------------------------------------------------------

def save_checkpoint(model, path):
    """Write a versioned container: JSON header line + raw little-endian f64."""
    payload = np.ascontiguousarray(model.params.values, dtype="<f8").tobytes()
    header = {
        "format_version": _CHECKPOINT_VERSION,
        "kind": _CHECKPOINT_KIND,
        "config": asdict(model.config),
        "layout": [[n, o, list(s)] for n, o, s in model.params.layout.entries],
        "dtype": "<f8",
        "param_count": model.params.dim,
        "checksum": hashlib.sha256(payload).hexdigest(),
    }
    with open(path, "wb") as fh:
        fh.write(json.dumps(header, sort_keys=True).encode("utf-8"))
        fh.write(b"\n")
        fh.write(payload)


def load_checkpoint(path):
    """Read a checkpoint; any malformation or checksum mismatch raises."""
    with open(path, "rb") as fh:
        header_line = fh.readline()
        payload = fh.read()
    try:
        header = json.loads(header_line.decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise CheckpointError(f"unreadable checkpoint header: {exc}") from None
    if header.get("kind") != _CHECKPOINT_KIND:
        raise CheckpointError("not a forgetlab checkpoint")
    if header.get("format_version") != _CHECKPOINT_VERSION:
        raise CheckpointError(f"unsupported format_version {header.get('format_version')}")
    if hashlib.sha256(payload).hexdigest() != header.get("checksum"):
        raise CheckpointError("checksum mismatch: checkpoint payload corrupted")
    config = LmConfig(**header["config"])
    values = np.frombuffer(payload, dtype="<f8").astype(np.float64)
    if values.size != header.get("param_count"):
        raise CheckpointError("parameter payload length mismatch")
    layout = build_layout(config)
    stored = [(n, int(o), tuple(s)) for n, o, s in header["layout"]]
    if stored != list(layout.entries):
        raise CheckpointError("layout does not match configuration")
    params = ParamVector(values, layout)
    state = TrainingState(m=np.zeros(params.dim), v=np.zeros(params.dim))
    return LanguageModel(config=config, params=params, training_state=state)
