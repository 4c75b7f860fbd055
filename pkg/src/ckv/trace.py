"""Prefill-trace data model, CKVT binary serialization, validation, and
synthetic trace generation.

Token positions are 1-based throughout the public API: position ``t`` of a
length-``T`` prompt lives at array index ``t - 1``.  The observation window
covers the last ``w_obs`` positions, ``{T - w_obs + 1, ..., T}``.
"""

from __future__ import annotations

import json
import struct
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .errors import FormatError, ParameterError, TruncationError, ValidationError

MAGIC = b"CKVT"
VERSION = 1

WINDOW_ROWS = "WINDOW_ROWS"
FULL = "FULL"

_MODE_CODES = {WINDOW_ROWS: 0, FULL: 1}
_MODE_NAMES = {v: k for k, v in _MODE_CODES.items()}

_HEADER = struct.Struct("<4sH5IBB")

ROW_SUM_TOL = 1e-5

CONCENTRATED = "CONCENTRATED"
DIFFUSE = "DIFFUSE"
MIXED = "MIXED"
_REGIMES = (CONCENTRATED, DIFFUSE, MIXED)


@dataclass
class PrefillTrace:
    """One prompt's prefill record.

    ``attention`` has shape (L, H, R, T) with R = w_obs (WINDOW_ROWS) or
    R = T (FULL); rows are post-softmax probability distributions over causal
    key positions.  ``value_norms`` is (L, H, T); ``logprobs`` is (T,) natural
    log-probabilities of the actual tokens, or None; ``keys``/``values`` are
    optional (L, H, T, d_head) float32 arrays.
    """

    num_layers: int
    num_heads: int
    seq_len: int
    head_dim: int
    window_size: int
    attention_mode: str
    attention: np.ndarray
    value_norms: np.ndarray
    tokens: np.ndarray
    logprobs: np.ndarray | None = None
    keys: np.ndarray | None = None
    values: np.ndarray | None = None

    @property
    def window_positions(self) -> np.ndarray:
        """1-based positions of the observation window."""
        return np.arange(self.seq_len - self.window_size + 1, self.seq_len + 1)

    def window_rows(self) -> np.ndarray:
        """Attention restricted to window-query rows, shape (L, H, w_obs, T)."""
        if self.attention_mode == WINDOW_ROWS:
            return self.attention
        return self.attention[:, :, self.seq_len - self.window_size:, :]

    @property
    def has_kv(self) -> bool:
        return self.keys is not None and self.values is not None

    def row_query_position(self, row: int) -> int:
        """1-based query position of stored attention row ``row``."""
        if self.attention_mode == FULL:
            return row + 1
        return self.seq_len - self.window_size + 1 + row


@dataclass
class BudgetConfig:
    """Per-layer retention budgets; a scalar is broadcast to all layers."""

    budgets: list[int]

    @classmethod
    def uniform(cls, budget: int, num_layers: int) -> "BudgetConfig":
        if budget < 1:
            raise ParameterError(f"budget must be >= 1, got {budget}")
        return cls([int(budget)] * num_layers)

    def layer(self, l: int) -> int:
        return self.budgets[l]

    def __post_init__(self) -> None:
        if any(b < 1 for b in self.budgets):
            raise ParameterError(f"all budgets must be >= 1, got {self.budgets}")


@dataclass
class ValidationReport:
    """Accumulated invariant violations; empty iff the trace is valid."""

    entries: list[str] = field(default_factory=list)

    @property
    def ok(self) -> bool:
        return not self.entries

    def add(self, where: str, message: str) -> None:
        self.entries.append(f"{where}: {message}")

    def __str__(self) -> str:
        return "valid trace" if self.ok else "\n".join(self.entries)


def validate_trace(trace: PrefillTrace) -> ValidationReport:
    """Check every PrefillTrace invariant; violations become report entries."""
    rep = ValidationReport()
    L, H, T, w = trace.num_layers, trace.num_heads, trace.seq_len, trace.window_size

    if trace.attention_mode not in _MODE_CODES:
        rep.add("attention_mode", f"unknown mode {trace.attention_mode!r}")
        return rep
    if not (1 <= w <= T):
        rep.add("window_size", f"w_obs={w} outside [1, T={T}]")

    rows = w if trace.attention_mode == WINDOW_ROWS else T
    if trace.attention.shape != (L, H, rows, T):
        rep.add("attention", f"shape {trace.attention.shape} != {(L, H, rows, T)}")
        return rep
    if trace.value_norms.shape != (L, H, T):
        rep.add("value_norms", f"shape {trace.value_norms.shape} != {(L, H, T)}")
    if trace.tokens.shape != (T,):
        rep.add("tokens", f"shape {trace.tokens.shape} != {(T,)}")

    att = np.asarray(trace.attention, dtype=np.float64)
    if np.any(att < 0) or np.any(att > 1):
        bad = np.argwhere((att < 0) | (att > 1))[0]
        rep.add(f"attention[{bad[0]}][{bad[1]}]", f"entry at {tuple(bad[2:])} outside [0, 1]")

    row_sums = att.sum(axis=3)
    bad_sums = np.argwhere(np.abs(row_sums - 1.0) > ROW_SUM_TOL)
    for l, h, r in bad_sums[:16]:
        rep.add(f"attention[{l}][{h}]", f"row {r} sums to {row_sums[l, h, r]:.6f}")

    # Causality: key positions beyond the query position must be exactly 0.
    for r in range(rows):
        q = trace.row_query_position(r)
        if q < T:
            tail = att[:, :, r, q:]
            if np.any(tail != 0.0):
                l, h, j = np.argwhere(tail != 0.0)[0]
                rep.add(f"attention[{l}][{h}]",
                        f"non-causal entry at row {r} (query {q}), key {q + j + 1}")

    if np.any(trace.value_norms < 0):
        l, h, t = np.argwhere(trace.value_norms < 0)[0]
        rep.add(f"value_norms[{l}][{h}][{t}]", "negative value norm")

    if trace.logprobs is not None:
        if trace.logprobs.shape != (T,):
            rep.add("logprobs", f"shape {trace.logprobs.shape} != {(T,)}")
        elif np.any(trace.logprobs > 0):
            t = int(np.argwhere(trace.logprobs > 0)[0][0])
            rep.add(f"logprobs[{t}]", f"positive log-probability {trace.logprobs[t]}")

    if np.any(trace.tokens.astype(np.int64) < 0):
        rep.add("tokens", "negative token id")

    for name, arr in (("keys", trace.keys), ("values", trace.values)):
        if arr is not None and arr.shape != (L, H, T, trace.head_dim):
            rep.add(name, f"shape {arr.shape} != {(L, H, T, trace.head_dim)}")
    return rep


def save_trace(trace: PrefillTrace, path: str | Path, meta: dict | None = None) -> None:
    """Write a trace in the CKVT little-endian binary format.

    A ``<name>.meta.json`` sidecar with free-form provenance is written when
    ``meta`` is given.
    """
    path = Path(path)
    flags = (1 if trace.logprobs is not None else 0) | (2 if trace.has_kv else 0)
    header = _HEADER.pack(
        MAGIC, VERSION,
        trace.num_layers, trace.num_heads, trace.seq_len,
        trace.head_dim, trace.window_size,
        _MODE_CODES[trace.attention_mode], flags,
    )
    with open(path, "wb") as f:
        f.write(header)
        f.write(np.ascontiguousarray(trace.tokens, dtype="<u4").tobytes())
        if trace.logprobs is not None:
            f.write(np.ascontiguousarray(trace.logprobs, dtype="<f4").tobytes())
        f.write(np.ascontiguousarray(trace.attention, dtype="<f4").tobytes())
        f.write(np.ascontiguousarray(trace.value_norms, dtype="<f4").tobytes())
        if trace.has_kv:
            f.write(np.ascontiguousarray(trace.keys, dtype="<f4").tobytes())
            f.write(np.ascontiguousarray(trace.values, dtype="<f4").tobytes())
    if meta is not None:
        sidecar = path.with_name(path.name + ".meta.json")
        sidecar.write_text(json.dumps(meta, indent=2, sort_keys=True))


def _read_exact(f, nbytes: int, section: str) -> bytes:
    buf = f.read(nbytes)
    if len(buf) != nbytes:
        raise TruncationError(f"section {section!r}: expected {nbytes} bytes, got {len(buf)}")
    return buf


def load_trace(path: str | Path, validate: bool = True) -> PrefillTrace:
    """Read a CKVT file; raises on bad magic, truncation, or invalid content."""
    with open(path, "rb") as f:
        raw = _read_exact(f, _HEADER.size, "header")
        magic, version, L, H, T, d_head, w_obs, mode_code, flags = _HEADER.unpack(raw)
        if magic != MAGIC:
            raise FormatError(f"bad magic {magic!r}, expected {MAGIC!r}")
        if version != VERSION:
            raise FormatError(f"unsupported CKVT version {version}")
        if mode_code not in _MODE_NAMES:
            raise FormatError(f"unknown attention mode code {mode_code}")
        mode = _MODE_NAMES[mode_code]
        rows = w_obs if mode == WINDOW_ROWS else T

        tokens = np.frombuffer(_read_exact(f, 4 * T, "tokens"), dtype="<u4").copy()
        logprobs = None
        if flags & 1:
            logprobs = np.frombuffer(_read_exact(f, 4 * T, "logprobs"), dtype="<f4").copy()
        att = np.frombuffer(
            _read_exact(f, 4 * L * H * rows * T, "attention"), dtype="<f4"
        ).reshape(L, H, rows, T).copy()
        norms = np.frombuffer(
            _read_exact(f, 4 * L * H * T, "value_norms"), dtype="<f4"
        ).reshape(L, H, T).copy()
        keys = values = None
        if flags & 2:
            n = L * H * T * d_head
            keys = np.frombuffer(_read_exact(f, 4 * n, "keys"), dtype="<f4").reshape(
                L, H, T, d_head).copy()
            values = np.frombuffer(_read_exact(f, 4 * n, "values"), dtype="<f4").reshape(
                L, H, T, d_head).copy()

    trace = PrefillTrace(
        num_layers=L, num_heads=H, seq_len=T, head_dim=d_head, window_size=w_obs,
        attention_mode=mode, attention=att, value_norms=norms, tokens=tokens,
        logprobs=logprobs, keys=keys, values=values,
    )
    if validate:
        report = validate_trace(trace)
        if not report.ok:
            raise ValidationError(str(report))
    return trace


@dataclass(frozen=True)
class SyntheticSpec:
    """Parameters for gen_synthetic; identical specs yield bit-identical traces."""

    L: int
    H: int
    T: int
    w_obs: int
    regime: str
    seed: int
    peak: float = 0.9
    anchor: int = 1  # 1-based key receiving the peak in CONCENTRATED rows
    attention_mode: str = WINDOW_ROWS
    d_head: int = 16


def _synthetic_row(rng: np.random.Generator, q: int, T: int, regime: str,
                   peak: float, anchor: int) -> np.ndarray:
    """One causal attention row for a query at 1-based position q."""
    row = np.zeros(T, dtype=np.float64)
    if regime == DIFFUSE:
        w = 1.0 + 0.05 * rng.random(q)
        row[:q] = w / w.sum()
    else:  # CONCENTRATED
        a = min(anchor, q)
        if q == 1 or peak >= 1.0:
            row[a - 1] = 1.0
        else:
            rest = 0.02 + rng.random(q)
            rest[a - 1] = 0.0
            rest *= (1.0 - peak) / rest.sum()
            row[:q] = rest
            row[a - 1] = peak
    return row


def gen_synthetic(spec: SyntheticSpec) -> PrefillTrace:
    """Deterministically generate a valid trace with a controllable risk regime.

    CONCENTRATED rows put ``peak`` mass on a shared anchor key (low entropy);
    DIFFUSE rows are near-uniform over causal positions (high entropy); MIXED
    alternates the two regimes across heads.  Log-probabilities are drawn so
    that CONCENTRATED traces also carry lower window perplexity than DIFFUSE
    ones.
    """
    if spec.regime not in _REGIMES:
        raise ParameterError(f"unknown regime {spec.regime!r}")
    if spec.w_obs > spec.T:
        raise ParameterError(f"w_obs={spec.w_obs} exceeds T={spec.T}")
    if spec.w_obs < 1:
        raise ParameterError("w_obs must be >= 1")

    rng = np.random.Generator(np.random.Philox(key=spec.seed))
    L, H, T, w = spec.L, spec.H, spec.T, spec.w_obs
    rows = w if spec.attention_mode == WINDOW_ROWS else T
    first_q = T - w + 1 if spec.attention_mode == WINDOW_ROWS else 1

    att = np.zeros((L, H, rows, T), dtype=np.float64)
    for l in range(L):
        for h in range(H):
            regime = spec.regime
            if regime == MIXED:
                regime = CONCENTRATED if (l * H + h) % 2 == 0 else DIFFUSE
            for r in range(rows):
                att[l, h, r] = _synthetic_row(rng, first_q + r, T, regime,
                                              spec.peak, spec.anchor)

    norms = rng.uniform(0.5, 1.5, size=(L, H, T))
    if spec.regime == CONCENTRATED:
        lp = -rng.uniform(0.05, 1.0, size=T)
    elif spec.regime == DIFFUSE:
        lp = -rng.uniform(1.0, 4.0, size=T)
    else:
        lp = -rng.uniform(0.05, 4.0, size=T)
    tokens = rng.integers(0, 256, size=T, dtype=np.uint32)

    return PrefillTrace(
        num_layers=L, num_heads=H, seq_len=T, head_dim=spec.d_head,
        window_size=w, attention_mode=spec.attention_mode,
        attention=att.astype(np.float32),
        value_norms=norms.astype(np.float32),
        tokens=tokens,
        logprobs=lp.astype(np.float32),
    )
