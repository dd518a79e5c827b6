"""Single-layer LSTM caption decoder in float64 numpy with hand-written BPTT.

Step 0 of the recurrence consumes the embedded feature vector (zero initial
state) and emits nothing.  Step t >= 1 consumes the embedding of w_{t-1}, with
w_0 = BOS, and emits the logits o_t that predict w_t.  Every forward function
is batched over rows; the single-sequence functions are thin wrappers.

Decoding (sampling, greedy, beam) never emits BOS and must emit EOS at step
``max_len``: those tokens are masked out of the softmax, and the cache keeps
the renormalised distribution that was actually used.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, fields
from pathlib import Path
from typing import Sequence

import numpy as np

from .data import BOS_ID, EOS_ID

INIT_SCALE = 0.08
CHECKPOINT_FORMAT = "cst-checkpoint"
CHECKPOINT_VERSION = 1


@dataclass
class _Tensors:
    feat_w: np.ndarray   # (d, D_f)
    feat_b: np.ndarray   # (d,)
    embed: np.ndarray    # (V, d)
    lstm_wx: np.ndarray  # (4d, d), gate order i, f, o, g
    lstm_wh: np.ndarray  # (4d, d)
    lstm_b: np.ndarray   # (4d,)
    out_w: np.ndarray    # (V, d)
    out_b: np.ndarray    # (V,)

    @classmethod
    def names(cls) -> tuple[str, ...]:
        return tuple(f.name for f in fields(cls))

    def tensors(self) -> dict:
        return {n: getattr(self, n) for n in self.names()}

    @property
    def d(self) -> int:
        return self.feat_w.shape[0]

    @property
    def V(self) -> int:
        return self.embed.shape[0]

    @property
    def D_f(self) -> int:
        return self.feat_w.shape[1]

    def copy(self):
        return type(self)(**{n: t.copy() for n, t in self.tensors().items()})

    def map(self, fn, *others):
        return type(self)(**{n: fn(t, *(getattr(o, n) for o in others)) for n, t in self.tensors().items()})

    def zeros_like(self):
        return type(self)(**{n: np.zeros_like(t) for n, t in self.tensors().items()})

    def flat(self) -> np.ndarray:
        return np.concatenate([t.ravel() for t in self.tensors().values()])

    def check_shapes(self, other) -> None:
        for n, t in self.tensors().items():
            if getattr(other, n).shape != t.shape:
                raise ValueError(f"shape mismatch for {n}: {getattr(other, n).shape} vs {t.shape}")


class ModelParams(_Tensors):
    """All learnable tensors of the decoder."""


class ParamGrads(_Tensors):
    """Gradients, one array per :class:`ModelParams` tensor."""


def init_params(d: int, V: int, D_f: int, seed: int) -> ModelParams:
    if min(d, V, D_f) < 1:
        raise ValueError("d, V and D_f must be >= 1")
    rng = np.random.default_rng(seed)

    def u(*shape):
        return rng.uniform(-INIT_SCALE, INIT_SCALE, size=shape)

    p = ModelParams(u(d, D_f), u(d), u(V, d), u(4 * d, d), u(4 * d, d), u(4 * d), u(V, d), u(V))
    p.lstm_b[d:2 * d] = 1.0
    return p


def zero_params(d: int, V: int, D_f: int) -> ModelParams:
    return ModelParams(np.zeros((d, D_f)), np.zeros(d), np.zeros((V, d)), np.zeros((4 * d, d)),
                       np.zeros((4 * d, d)), np.zeros(4 * d), np.zeros((V, d)), np.zeros(V))


def _sigmoid(x):
    return 0.5 * (1.0 + np.tanh(0.5 * x))


class ForwardCache:
    """Everything the backward pass needs, for a batch of B rows.

    Step arrays are indexed by LSTM step s = 0..T (s = 0 is the feature
    step); ``logits`` and ``probs`` have shape (T, B, V) and entry t-1 holds
    the distribution for output token t.  ``lengths[b]`` is the number of
    output tokens that belong to row b.
    """

    def __init__(self, params: "ModelParams", features: np.ndarray):
        self.params = params
        self.features = features
        self.inputs: list = []        # token ids fed at steps 1..T, each (B,)
        self.x: list = []             # LSTM inputs per step, after dropout
        self.in_mask: list = []       # input dropout masks or None
        self.out_mask: list = []      # output dropout masks or None (steps 1..T)
        self.h_prev: list = []
        self.c_prev: list = []
        self.gates: list = []         # (i, f, o, g, tanh(c)) per step
        self.h: list = []
        self.h_out: list = []         # h after output dropout, steps 1..T
        self.logits_list: list = []
        self.probs_list: list = []
        self.lengths = np.zeros(features.shape[0], dtype=int)

    @property
    def batch(self) -> int:
        return self.features.shape[0]

    @property
    def T(self) -> int:
        return len(self.logits_list)

    @property
    def logits(self) -> np.ndarray:
        return np.stack(self.logits_list)

    @property
    def probs(self) -> np.ndarray:
        return np.stack(self.probs_list)

    def row(self, b: int) -> "CacheRow":
        return CacheRow(self, b)


class CacheRow:
    """View of one row of a batched cache, trimmed to that row's length."""

    def __init__(self, cache: ForwardCache, b: int):
        self.cache, self.b = cache, b

    @property
    def length(self) -> int:
        return int(self.cache.lengths[self.b])

    @property
    def probs(self) -> np.ndarray:
        return np.stack([p[self.b] for p in self.cache.probs_list[:self.length]])

    @property
    def logits(self) -> np.ndarray:
        return np.stack([o[self.b] for o in self.cache.logits_list[:self.length]])


def sequence_probs(cache) -> np.ndarray:
    """(T, V) per-step distributions of a single-row cache or a :class:`CacheRow`."""
    if isinstance(cache, CacheRow):
        return cache.probs
    if cache.batch != 1:
        raise ValueError("batched cache: select a row with cache.row(b)")
    return cache.row(0).probs


def _dropout_mask(rng, shape, rate):
    if not rate:
        return None
    keep = 1.0 - rate
    return (rng.random(shape) < keep) / keep


def _cell(p: ModelParams, x, h_prev, c_prev):
    d = p.d
    z = x @ p.lstm_wx.T + h_prev @ p.lstm_wh.T + p.lstm_b
    i = _sigmoid(z[:, :d])
    f = _sigmoid(z[:, d:2 * d])
    o = _sigmoid(z[:, 2 * d:3 * d])
    g = np.tanh(z[:, 3 * d:])
    c = f * c_prev + i * g
    tc = np.tanh(c)
    return o * tc, c, (i, f, o, g, tc)


def _lstm_step(p: ModelParams, cache: ForwardCache, x, h_prev, c_prev, in_mask):
    if in_mask is not None:
        x = x * in_mask
    h, c, gates = _cell(p, x, h_prev, c_prev)
    cache.x.append(x)
    cache.in_mask.append(in_mask)
    cache.h_prev.append(h_prev)
    cache.c_prev.append(c_prev)
    cache.gates.append(gates)
    cache.h.append(h)
    return h, c


def _emit(p: ModelParams, cache: ForwardCache, h, out_mask, allowed=None):
    h_out = h if out_mask is None else h * out_mask
    logits = h_out @ p.out_w.T + p.out_b
    masked = logits if allowed is None else np.where(allowed, logits, -np.inf)
    shifted = masked - masked.max(axis=1, keepdims=True)
    e = np.exp(shifted)
    probs = e / e.sum(axis=1, keepdims=True)
    cache.out_mask.append(out_mask)
    cache.h_out.append(h_out)
    cache.logits_list.append(logits)
    cache.probs_list.append(probs)
    return probs


def _start(p: ModelParams, features: np.ndarray, rng=None, dropout: float = 0.0):
    features = np.atleast_2d(np.asarray(features, dtype=np.float64))
    if features.shape[1] != p.D_f:
        raise ValueError(f"feature dimension {features.shape[1]} != model D_f {p.D_f}")
    B = features.shape[0]
    cache = ForwardCache(p, features)
    x0 = features @ p.feat_w.T + p.feat_b
    zeros = np.zeros((B, p.d))
    h, c = _lstm_step(p, cache, x0, zeros, zeros, _dropout_mask(rng, (B, p.d), dropout))
    return cache, h, c


def forward_teacher_batch(p: ModelParams, features: np.ndarray, targets: Sequence[Sequence[int]],
                          dropout: float = 0.0, rng=None, bos_id: int = BOS_ID,
                          decode_max_len: int | None = None, eos_id: int = EOS_ID) -> ForwardCache:
    """Teacher-forced forward over rows of (possibly ragged) target sequences.

    With ``decode_max_len`` the cached distributions are those of the decoding
    policy (BOS masked, EOS forced at ``decode_max_len``), i.e. exactly what
    :func:`sample_batch` would have recorded for the same sequences.
    """
    if any(len(t) == 0 for t in targets):
        raise ValueError("empty target sequence")
    if dropout and rng is None:
        raise ValueError("dropout needs an rng")
    cache, h, c = _start(p, features, rng, dropout)
    B = cache.batch
    if len(targets) != B:
        raise ValueError("one target per feature row required")
    T = max(len(t) for t in targets)
    padded = np.full((B, T), bos_id, dtype=int)
    for b, t in enumerate(targets):
        padded[b, :len(t)] = t
    cache.lengths = np.array([len(t) for t in targets])
    prev = np.full(B, bos_id, dtype=int)
    for t in range(T):
        cache.inputs.append(prev)
        h, c = _lstm_step(p, cache, p.embed[prev], h, c, _dropout_mask(rng, (B, p.d), dropout))
        allowed = None if decode_max_len is None else _allowed(p.V, t + 1, decode_max_len, bos_id, eos_id)
        _emit(p, cache, h, _dropout_mask(rng, (B, p.d), dropout), allowed)
        prev = padded[:, t]
    return cache


def forward_teacher(p: ModelParams, features: np.ndarray, target: Sequence[int], **kw) -> ForwardCache:
    features = np.asarray(features, dtype=np.float64)
    if features.ndim != 1:
        raise ValueError("features must be a vector")
    return forward_teacher_batch(p, features[None, :], [tuple(target)], **kw)


def log_prob(p: ModelParams, features: np.ndarray, target: Sequence[int]) -> float:
    """Teacher-forced sum of log p(w_t | h_t) over the target (always <= 0)."""
    probs = forward_teacher(p, features, target).probs[:, 0, :]
    return float(np.sum(np.log(probs[np.arange(len(target)), list(target)])))


def _allowed(V: int, t: int, max_len: int, bos_id, eos_id) -> np.ndarray:
    allowed = np.ones(V, dtype=bool)
    if t == max_len:
        allowed[:] = False
        allowed[eos_id] = True
    elif bos_id is not None:
        allowed[bos_id] = False
    return allowed


def sample_batch(p: ModelParams, features: np.ndarray, max_len: int, rng: np.random.Generator,
                 bos_id: int | None = BOS_ID, eos_id: int = EOS_ID):
    """Ancestral sampling (temperature 1) for every feature row.

    Returns the sampled id tuples and the cache of the distributions sampled
    from.  Finished rows keep stepping but their later steps are outside the
    row's length and are ignored.
    """
    if max_len < 1:
        raise ValueError("max_len must be >= 1")
    cache, h, c = _start(p, features)
    B = cache.batch
    seqs: list[list[int]] = [[] for _ in range(B)]
    done = np.zeros(B, dtype=bool)
    prev = np.full(B, BOS_ID if bos_id is None else bos_id, dtype=int)
    for t in range(1, max_len + 1):
        cache.inputs.append(prev)
        h, c = _lstm_step(p, cache, p.embed[prev], h, c, None)
        probs = _emit(p, cache, h, None, _allowed(p.V, t, max_len, bos_id, eos_id))
        cdf = np.cumsum(probs, axis=1)
        u = rng.random(B)
        tok = (cdf <= u[:, None]).sum(axis=1)
        overflow = tok >= p.V
        if overflow.any():
            last_pos = p.V - 1 - np.argmax(probs[:, ::-1] > 0, axis=1)
            tok = np.where(overflow, last_pos, tok)
        for b in np.flatnonzero(~done):
            seqs[b].append(int(tok[b]))
            cache.lengths[b] = t
        done |= tok == eos_id
        prev = tok
        if done.all():
            break
    return [tuple(s) for s in seqs], cache


def sample_sequence(p: ModelParams, features: np.ndarray, max_len: int, rng_seed: int, **kw):
    seqs, cache = sample_batch(p, np.asarray(features, dtype=np.float64)[None, :], max_len,
                               np.random.default_rng(rng_seed), **kw)
    return seqs[0], cache


def greedy_batch(p: ModelParams, features: np.ndarray, max_len: int,
                 bos_id: int | None = BOS_ID, eos_id: int = EOS_ID) -> list[tuple]:
    """Argmax decoding per row; ties go to the lowest token id."""
    if max_len < 1:
        raise ValueError("max_len must be >= 1")
    cache, h, c = _start(p, features)
    B = cache.batch
    seqs: list[list[int]] = [[] for _ in range(B)]
    done = np.zeros(B, dtype=bool)
    prev = np.full(B, BOS_ID if bos_id is None else bos_id, dtype=int)
    for t in range(1, max_len + 1):
        h, c, _ = _cell(p, p.embed[prev], h, c)
        logits = h @ p.out_w.T + p.out_b
        tok = np.argmax(np.where(_allowed(p.V, t, max_len, bos_id, eos_id), logits, -np.inf), axis=1)
        for b in np.flatnonzero(~done):
            seqs[b].append(int(tok[b]))
        done |= tok == eos_id
        prev = tok
        if done.all():
            break
    return [tuple(s) for s in seqs]


def greedy_decode(p: ModelParams, features: np.ndarray, max_len: int, **kw) -> tuple:
    return greedy_batch(p, np.asarray(features, dtype=np.float64)[None, :], max_len, **kw)[0]


def _log_softmax(logits: np.ndarray) -> np.ndarray:
    m = logits.max(axis=-1, keepdims=True)
    return logits - m - np.log(np.exp(logits - m).sum(axis=-1, keepdims=True))


def beam_search(p: ModelParams, features: np.ndarray, beam: int = 5, max_len: int = 20,
                bos_id: int | None = BOS_ID, eos_id: int = EOS_ID) -> tuple:
    """Beam search on summed decoding log-probabilities, no length normalisation.

    Candidates are ranked by score, then by parent rank, then by token id.
    An EOS candidate ranked above the ``beam``-th live candidate is set aside
    as finished.  Search stops once the best finished score is at least the
    best live score, or at ``max_len``.
    """
    if beam < 1:
        raise ValueError("beam must be >= 1")
    if max_len < 1:
        raise ValueError("max_len must be >= 1")
    _, h, c = _start(p, features)
    live_seqs: list[tuple] = [()]
    live_scores = np.zeros(1)
    prev = np.array([BOS_ID if bos_id is None else bos_id])
    finished: list[tuple[float, tuple]] = []
    for t in range(1, max_len + 1):
        h, c, _ = _cell(p, p.embed[prev], h, c)
        logits = h @ p.out_w.T + p.out_b
        allowed = _allowed(p.V, t, max_len, bos_id, eos_id)
        logp = _log_softmax(np.where(allowed, logits, -np.inf))
        cand = (live_scores[:, None] + logp).ravel()
        order = np.argsort(-cand, kind="stable")
        new_parent, new_tok = [], []
        for idx in order:
            score = cand[idx]
            if score == -np.inf:
                break
            parent, tok = divmod(int(idx), p.V)
            if tok == eos_id:
                finished.append((float(score), live_seqs[parent] + (tok,)))
            else:
                new_parent.append(parent)
                new_tok.append(tok)
                if len(new_parent) == beam:
                    break
        if not new_parent:
            break
        live_seqs = [live_seqs[a] + (b,) for a, b in zip(new_parent, new_tok)]
        live_scores = cand[np.array(new_parent) * p.V + np.array(new_tok)]
        h, c, prev = h[new_parent], c[new_parent], np.array(new_tok)
        if finished and max(s for s, _ in finished) >= live_scores.max():
            break
    best = max(finished, key=lambda f: f[0])
    return best[1]


def decode_log_prob(p: ModelParams, features: np.ndarray, seq: Sequence[int], max_len: int,
                    bos_id: int | None = BOS_ID, eos_id: int = EOS_ID) -> float:
    """Log-probability of ``seq`` under the masked decoding distribution."""
    seqs = [tuple(seq)]
    cache = forward_teacher_batch(p, np.asarray(features, dtype=np.float64)[None, :], seqs,
                                  bos_id=BOS_ID if bos_id is None else bos_id)
    total = 0.0
    for t, tok in enumerate(seq, start=1):
        allowed = _allowed(p.V, t, max_len, bos_id, eos_id)
        total += _log_softmax(np.where(allowed, cache.logits_list[t - 1][0], -np.inf))[tok]
    return float(total)


def backward(cache: ForwardCache, logit_grads) -> ParamGrads:
    """Reverse-mode gradients of sum_t <dL/do_t, o_t> with respect to every parameter.

    ``logit_grads`` has shape (T, B, V), or (T, V) / a list of T vectors for a
    single-row cache.
    """
    dl = np.asarray(logit_grads, dtype=np.float64)
    if dl.ndim == 2:
        dl = dl[:, None, :]
    p = cache.params
    T, B, V, d = cache.T, cache.batch, p.V, p.d
    if dl.shape != (T, B, V):
        raise ValueError(f"logit gradients have shape {dl.shape}, expected {(T, B, V)}")
    g = ParamGrads(**p.zeros_like().tensors())

    h_out = np.stack(cache.h_out)                      # (T, B, d)
    g.out_w = np.einsum("tbv,tbd->vd", dl, h_out)
    g.out_b = dl.sum(axis=(0, 1))
    dh_out = dl @ p.out_w                               # (T, B, d)

    dh_next = np.zeros((B, d))
    dc_next = np.zeros((B, d))
    for s in range(T, -1, -1):
        i, f, o, gg, tc = cache.gates[s]
        dh = dh_next
        if s >= 1:
            out_mask = cache.out_mask[s - 1]
            dh = dh + (dh_out[s - 1] if out_mask is None else dh_out[s - 1] * out_mask)
        do = dh * tc
        dc = dh * o * (1.0 - tc * tc) + dc_next
        dz = np.concatenate([
            dc * gg * i * (1.0 - i),
            dc * cache.c_prev[s] * f * (1.0 - f),
            do * o * (1.0 - o),
            dc * i * (1.0 - gg * gg),
        ], axis=1)
        dc_next = dc * f
        g.lstm_wx += dz.T @ cache.x[s]
        g.lstm_wh += dz.T @ cache.h_prev[s]
        g.lstm_b += dz.sum(axis=0)
        dh_next = dz @ p.lstm_wh
        dx = dz @ p.lstm_wx
        if cache.in_mask[s] is not None:
            dx = dx * cache.in_mask[s]
        if s >= 1:
            np.add.at(g.embed, cache.inputs[s - 1], dx)
        else:
            g.feat_w += dx.T @ cache.features
            g.feat_b += dx.sum(axis=0)
    return g


def save_checkpoint(path, params: ModelParams, vocab_tokens: Sequence[str] | None = None) -> None:
    """Write params as JSON: ``{format, version, config:{d,V,D_f}, tensors:{name:[dims, values]}}``."""
    obj = {
        "format": CHECKPOINT_FORMAT,
        "version": CHECKPOINT_VERSION,
        "config": {"d": params.d, "V": params.V, "D_f": params.D_f},
        "tensors": {n: [list(t.shape), [float(x) for x in t.ravel()]] for n, t in params.tensors().items()},
    }
    if vocab_tokens is not None:
        obj["vocab"] = list(vocab_tokens)
    Path(path).write_text(json.dumps(obj) + "\n")


def load_checkpoint(path):
    """Return ``(params, vocab_tokens_or_None)``."""
    obj = json.loads(Path(path).read_text())
    if obj.get("format") != CHECKPOINT_FORMAT or obj.get("version") != CHECKPOINT_VERSION:
        raise ValueError(f"{path}: not a version-{CHECKPOINT_VERSION} {CHECKPOINT_FORMAT} file")
    cfg = obj["config"]
    tensors = {}
    for name in ModelParams.names():
        dims, values = obj["tensors"][name]
        tensors[name] = np.asarray(values, dtype=np.float64).reshape(dims)
    params = ModelParams(**tensors)
    ref = zero_params(cfg["d"], cfg["V"], cfg["D_f"])
    ref.check_shapes(params)
    return params, obj.get("vocab")
