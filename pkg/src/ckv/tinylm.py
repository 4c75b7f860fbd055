"""Tiny deterministic decoder-only transformer.

Provides exact full and compressed-cache window NLLs for reward computation
and evaluation.  Pre-norm blocks, no biases, fixed sinusoidal positions, all
arithmetic in float64 with a fixed operation order, so identical inputs give
bit-identical outputs.

Compressed-cache semantics: for query positions inside the observation
window, the attention softmax support is restricted to the retained key set
(renormalization), which is how a gathered cache behaves at decode time.
Window positions themselves always stay attendable to window queries -- the
window is being scored, not evicted.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .errors import FormatError, InputError, SelectionError, TruncationError
from .trace import FULL, PrefillTrace

WEIGHTS_MAGIC = b"CKVW"
WEIGHTS_VERSION = 1
_W_HEADER = struct.Struct("<4sH5Iq")

_NEG_INF = -1e30


@dataclass(frozen=True)
class TinyLMConfig:
    num_layers: int = 4
    num_heads: int = 4
    head_dim: int = 16
    vocab_size: int = 256
    max_seq_len: int = 512
    seed: int = 0

    @property
    def model_dim(self) -> int:
        return self.num_heads * self.head_dim


@dataclass
class TinyLMWeights:
    """All model parameters, a pure function of (config, seed)."""

    config: TinyLMConfig
    embedding: np.ndarray            # (V, D)
    wq: np.ndarray                   # (L, D, D)
    wk: np.ndarray
    wv: np.ndarray
    wo: np.ndarray
    w_ff1: np.ndarray                # (L, D, 4D)
    w_ff2: np.ndarray                # (L, 4D, D)
    unembed: np.ndarray              # (D, V)
    pos: np.ndarray = field(default=None)  # (max_seq_len, D) sinusoidal, derived

    def __post_init__(self):
        if self.pos is None:
            self.pos = _sinusoidal(self.config.max_seq_len, self.config.model_dim)


def _sinusoidal(n: int, dim: int) -> np.ndarray:
    pos = np.arange(n, dtype=np.float64)[:, None]
    i = np.arange(dim // 2, dtype=np.float64)[None, :]
    angles = pos / np.power(10000.0, 2.0 * i / dim)
    enc = np.zeros((n, dim), dtype=np.float64)
    enc[:, 0::2] = np.sin(angles)
    enc[:, 1::2] = np.cos(angles)
    return enc


def init_weights(config: TinyLMConfig, qk_scale: float = 3.0,
                 out_scale: float = 1.0) -> TinyLMWeights:
    """Draw weights from scaled-uniform distributions with a Philox stream.

    The Q/K projections use a larger scale so that attention rows are
    reasonably peaked at toy scale rather than near-uniform; ``qk_scale``
    controls that peakedness and ``out_scale`` the weight of the attention
    output in the residual stream (how much the model relies on context).
    Both affect initialization only, so saved weight files stay
    self-describing.
    """
    rng = np.random.Generator(np.random.Philox(key=config.seed))
    D, V, L = config.model_dim, config.vocab_size, config.num_layers
    s = 1.0 / np.sqrt(D)

    def u(shape, scale):
        return rng.uniform(-scale, scale, size=shape)

    return TinyLMWeights(
        config=config,
        embedding=u((V, D), 1.0),
        wq=u((L, D, D), qk_scale * s),
        wk=u((L, D, D), qk_scale * s),
        wv=u((L, D, D), s),
        wo=u((L, D, D), out_scale * s),
        w_ff1=u((L, D, 4 * D), s),
        w_ff2=u((L, 4 * D, D), 0.5 / np.sqrt(4 * D)),
        unembed=u((D, V), s),
    )


def _rmsnorm(x: np.ndarray) -> np.ndarray:
    return x / np.sqrt(np.mean(x * x, axis=-1, keepdims=True) + 1e-6)


def _gelu(x: np.ndarray) -> np.ndarray:
    return 0.5 * x * (1.0 + np.tanh(0.7978845608028654 * (x + 0.044715 * x ** 3)))


def _softmax_rows(scores: np.ndarray) -> np.ndarray:
    m = scores.max(axis=-1, keepdims=True)
    e = np.exp(scores - m)
    return e / e.sum(axis=-1, keepdims=True)


def _check_tokens(config: TinyLMConfig, tokens: np.ndarray) -> np.ndarray:
    tokens = np.asarray(tokens, dtype=np.int64)
    if tokens.ndim != 1 or tokens.size == 0:
        raise InputError("tokens must be a non-empty 1-D sequence")
    if tokens.size > config.max_seq_len:
        raise InputError(f"sequence length {tokens.size} exceeds max_seq_len")
    if np.any(tokens < 0) or np.any(tokens >= config.vocab_size):
        raise InputError("token id outside vocabulary")
    return tokens


def _forward(weights: TinyLMWeights, tokens: np.ndarray,
             key_masks: np.ndarray | None = None,
             collect: bool = False):
    """Run the decoder; returns (logits, attention, v_heads).

    ``key_masks`` is an optional (L, T, T) boolean array of allowed
    (query, key) pairs applied on top of causality.  ``attention`` and
    ``v_heads`` are collected only when ``collect`` is set.
    """
    cfg = weights.config
    T = tokens.size
    H, dh, D = cfg.num_heads, cfg.head_dim, cfg.model_dim

    x = weights.embedding[tokens] + weights.pos[:T]
    causal = np.tril(np.ones((T, T), dtype=bool))

    att_all = np.zeros((cfg.num_layers, H, T, T)) if collect else None
    v_all = np.zeros((cfg.num_layers, H, T, dh)) if collect else None

    for l in range(cfg.num_layers):
        h_in = _rmsnorm(x)
        q = (h_in @ weights.wq[l]).reshape(T, H, dh).transpose(1, 0, 2)
        k = (h_in @ weights.wk[l]).reshape(T, H, dh).transpose(1, 0, 2)
        v = (h_in @ weights.wv[l]).reshape(T, H, dh).transpose(1, 0, 2)

        scores = q @ k.transpose(0, 2, 1) / np.sqrt(dh)
        allowed = causal if key_masks is None else (causal & key_masks[l])
        scores = np.where(allowed[None, :, :], scores, _NEG_INF)
        att = _softmax_rows(scores)

        if collect:
            att_all[l] = att
            v_all[l] = v

        ctx = (att @ v).transpose(1, 0, 2).reshape(T, D)
        x = x + ctx @ weights.wo[l]
        h_ff = _rmsnorm(x)
        x = x + _gelu(h_ff @ weights.w_ff1[l]) @ weights.w_ff2[l]

    logits = _rmsnorm(x) @ weights.unembed
    return logits, att_all, v_all


def _log_softmax(logits: np.ndarray) -> np.ndarray:
    m = logits.max(axis=-1, keepdims=True)
    z = logits - m
    return z - np.log(np.exp(z).sum(axis=-1, keepdims=True))


def token_logprobs(weights: TinyLMWeights, tokens: np.ndarray,
                   logits: np.ndarray | None = None) -> np.ndarray:
    """Per-position log P(x_t | x_<t); position 1 uses the uniform prior."""
    tokens = _check_tokens(weights.config, tokens)
    if logits is None:
        logits, _, _ = _forward(weights, tokens)
    lsm = _log_softmax(logits)
    lp = np.empty(tokens.size, dtype=np.float64)
    lp[0] = -np.log(weights.config.vocab_size)
    if tokens.size > 1:
        lp[1:] = lsm[np.arange(tokens.size - 1), tokens[1:]]
    return lp


def prefill(weights: TinyLMWeights, tokens, include_kv: bool = False) -> PrefillTrace:
    """Full forward pass producing a FULL-mode PrefillTrace."""
    cfg = weights.config
    tokens = _check_tokens(cfg, tokens)
    T = tokens.size
    keys = values = None
    if include_kv:
        logits, att, v, k_all = _forward_with_keys(weights, tokens)
        keys = k_all.astype(np.float32)
        values = v.astype(np.float32)
    else:
        logits, att, v = _forward(weights, tokens, collect=True)
    lp = token_logprobs(weights, tokens, logits=logits)

    return PrefillTrace(
        num_layers=cfg.num_layers, num_heads=cfg.num_heads, seq_len=T,
        head_dim=cfg.head_dim, window_size=min(T, 32), attention_mode=FULL,
        attention=att.astype(np.float32),
        value_norms=np.linalg.norm(v, axis=3).astype(np.float32),
        tokens=tokens.astype(np.uint32),
        logprobs=lp.astype(np.float32),
        keys=keys, values=values,
    )


def _forward_with_keys(weights: TinyLMWeights, tokens: np.ndarray):
    """Variant of _forward that also returns per-layer key vectors."""
    cfg = weights.config
    T = tokens.size
    H, dh, D = cfg.num_heads, cfg.head_dim, cfg.model_dim
    x = weights.embedding[tokens] + weights.pos[:T]
    causal = np.tril(np.ones((T, T), dtype=bool))
    att_all = np.zeros((cfg.num_layers, H, T, T))
    v_all = np.zeros((cfg.num_layers, H, T, dh))
    k_all = np.zeros((cfg.num_layers, H, T, dh))
    for l in range(cfg.num_layers):
        h_in = _rmsnorm(x)
        q = (h_in @ weights.wq[l]).reshape(T, H, dh).transpose(1, 0, 2)
        k = (h_in @ weights.wk[l]).reshape(T, H, dh).transpose(1, 0, 2)
        v = (h_in @ weights.wv[l]).reshape(T, H, dh).transpose(1, 0, 2)
        scores = q @ k.transpose(0, 2, 1) / np.sqrt(dh)
        scores = np.where(causal[None, :, :], scores, _NEG_INF)
        att = _softmax_rows(scores)
        att_all[l], v_all[l], k_all[l] = att, v, k
        ctx = (att @ v).transpose(1, 0, 2).reshape(T, D)
        x = x + ctx @ weights.wo[l]
        x = x + _gelu(_rmsnorm(x) @ weights.w_ff1[l]) @ weights.w_ff2[l]
    logits = _rmsnorm(x) @ weights.unembed
    return logits, att_all, v_all, k_all


def window_nll(weights: TinyLMWeights, tokens, retained, window) -> float:
    """Mean NLL of the window tokens under a restricted attention support.

    ``retained`` is one 1-based index collection per layer; ``window`` is the
    1-based observation window.  Window queries may attend only to retained
    keys and other window positions; non-window queries are unrestricted.
    With full retention this is exactly the full-model window NLL (same code
    path).
    """
    cfg = weights.config
    tokens = _check_tokens(cfg, tokens)
    T = tokens.size
    window = np.asarray(sorted(set(int(t) for t in window)), dtype=np.int64)
    if window.size == 0 or window[0] < 1 or window[-1] > T:
        raise SelectionError(f"window must be a nonempty subset of 1..{T}")

    retained_sets = []
    for l in range(cfg.num_layers):
        s = set(int(t) for t in retained[l])
        if not s:
            raise SelectionError(f"empty retained set for layer {l}")
        if min(s) < 1 or max(s) > T:
            raise SelectionError(f"layer {l}: retained indices outside 1..{T}")
        retained_sets.append(s)

    window_mask = np.zeros(T, dtype=bool)
    window_mask[window - 1] = True

    key_masks = np.ones((cfg.num_layers, T, T), dtype=bool)
    for l in range(cfg.num_layers):
        keep = window_mask.copy()
        keep[np.asarray(sorted(retained_sets[l]), dtype=np.int64) - 1] = True
        key_masks[l][window_mask, :] = keep[None, :]

    logits, _, _ = _forward(weights, tokens, key_masks=key_masks)
    lp = token_logprobs(weights, tokens, logits=logits)
    return float(-np.mean(lp[window - 1]))


def full_window_nll(weights: TinyLMWeights, tokens, window) -> float:
    """Window NLL with full retention (identical code path to window_nll)."""
    T = np.asarray(tokens).size
    full = [range(1, T + 1)] * weights.config.num_layers
    return window_nll(weights, tokens, full, window)


def sample_tokens(weights: TinyLMWeights, length: int, seed: int,
                  temperature: float = 1.0, prompt: np.ndarray | None = None) -> np.ndarray:
    """Autoregressively sample a token sequence from the model.

    Low temperatures give sequences the model itself finds predictable (low
    window perplexity); high temperatures approach uniform-random tokens.
    """
    cfg = weights.config
    rng = np.random.Generator(np.random.Philox(key=seed))
    if prompt is None:
        toks = [int(rng.integers(0, cfg.vocab_size))]
    else:
        toks = [int(t) for t in prompt]
    while len(toks) < length:
        logits, _, _ = _forward(weights, np.asarray(toks, dtype=np.int64))
        z = logits[-1] / max(temperature, 1e-6)
        p = np.exp(z - z.max())
        p /= p.sum()
        toks.append(int(rng.choice(cfg.vocab_size, p=p)))
    return np.asarray(toks[:length], dtype=np.int64)


def save_weights(weights: TinyLMWeights, path: str | Path) -> None:
    """Sectioned binary weight file (magic CKVW, little-endian float64)."""
    cfg = weights.config
    header = _W_HEADER.pack(WEIGHTS_MAGIC, WEIGHTS_VERSION, cfg.num_layers,
                            cfg.num_heads, cfg.head_dim, cfg.vocab_size,
                            cfg.max_seq_len, cfg.seed)
    with open(path, "wb") as f:
        f.write(header)
        for arr in (weights.embedding, weights.wq, weights.wk, weights.wv,
                    weights.wo, weights.w_ff1, weights.w_ff2, weights.unembed):
            f.write(np.ascontiguousarray(arr, dtype="<f8").tobytes())


def load_weights(path: str | Path) -> TinyLMWeights:
    with open(path, "rb") as f:
        raw = f.read(_W_HEADER.size)
        if len(raw) != _W_HEADER.size:
            raise TruncationError("weight header truncated")
        magic, version, L, H, dh, V, max_seq, seed = _W_HEADER.unpack(raw)
        if magic != WEIGHTS_MAGIC:
            raise FormatError(f"bad magic {magic!r}, expected {WEIGHTS_MAGIC!r}")
        if version != WEIGHTS_VERSION:
            raise FormatError(f"unsupported CKVW version {version}")
        cfg = TinyLMConfig(num_layers=L, num_heads=H, head_dim=dh,
                           vocab_size=V, max_seq_len=max_seq, seed=seed)
        D = cfg.model_dim

        def rd(shape, name):
            n = int(np.prod(shape))
            buf = f.read(8 * n)
            if len(buf) != 8 * n:
                raise TruncationError(f"weight section {name!r} truncated")
            return np.frombuffer(buf, dtype="<f8").reshape(shape).copy()

        return TinyLMWeights(
            config=cfg,
            embedding=rd((V, D), "embedding"),
            wq=rd((L, D, D), "wq"), wk=rd((L, D, D), "wk"),
            wv=rd((L, D, D), "wv"), wo=rd((L, D, D), "wo"),
            w_ff1=rd((L, D, 4 * D), "w_ff1"), w_ff2=rd((L, 4 * D, D), "w_ff2"),
            unembed=rd((D, V), "unembed"),
        )
