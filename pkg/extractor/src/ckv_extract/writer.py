"""Standalone CKVT writer.

Implements the published little-endian trace format directly so this package
has no code dependency on the consumer toolkit:

    header  '<4sH5IBB': magic b'CKVT', version 1, L, H, T, d_head, w_obs,
            mode code (0 = window rows, 1 = full), flags bit0 = logprobs
            present, bit1 = raw K/V present
    body    tokens '<u4'[T], logprobs '<f4'[T] (if flagged),
            attention '<f4'[L,H,rows,T], value_norms '<f4'[L,H,T]

This extractor always emits window-row mode without raw K/V (flags = 1):
full per-token key/value tensors for real models would dominate file size
and the downstream selection path does not need them.
"""

from __future__ import annotations

import json
import struct
from dataclasses import dataclass
from pathlib import Path

import numpy as np

MAGIC = b"CKVT"
VERSION = 1
MODE_WINDOW_ROWS = 0
FLAG_LOGPROBS = 1

_HEADER = struct.Struct("<4sH5IBB")


@dataclass
class TraceRecord:
    """Arrays destined for one trace file.

    ``attention`` is (L, H, w_obs, T) post-softmax probabilities for the last
    ``w_obs`` query positions; ``value_norms`` is (L, H, T) per-head value L2
    norms; ``logprobs`` is (T,) natural log-probabilities of the actual
    tokens; ``tokens`` is (T,) non-negative ids.
    """

    tokens: np.ndarray
    logprobs: np.ndarray
    attention: np.ndarray
    value_norms: np.ndarray

    def __post_init__(self) -> None:
        L, H, w_obs, T = self.attention.shape
        if not (1 <= w_obs <= T):
            raise ValueError(f"w_obs={w_obs} outside [1, T={T}]")
        if self.tokens.shape != (T,):
            raise ValueError(f"tokens shape {self.tokens.shape} != {(T,)}")
        if self.logprobs.shape != (T,):
            raise ValueError(f"logprobs shape {self.logprobs.shape} != {(T,)}")
        if self.value_norms.shape != (L, H, T):
            raise ValueError(
                f"value_norms shape {self.value_norms.shape} != {(L, H, T)}")

    @property
    def shape(self) -> tuple[int, int, int, int]:
        return self.attention.shape


def write_trace(record: TraceRecord, path: str | Path, head_dim: int,
                meta: dict | None = None) -> Path:
    """Write one trace plus an optional ``<name>.meta.json`` sidecar."""
    path = Path(path)
    L, H, w_obs, T = record.shape
    header = _HEADER.pack(MAGIC, VERSION, L, H, T, head_dim, w_obs,
                          MODE_WINDOW_ROWS, FLAG_LOGPROBS)
    with open(path, "wb") as f:
        f.write(header)
        f.write(np.ascontiguousarray(record.tokens, dtype="<u4").tobytes())
        f.write(np.ascontiguousarray(record.logprobs, dtype="<f4").tobytes())
        f.write(np.ascontiguousarray(record.attention, dtype="<f4").tobytes())
        f.write(np.ascontiguousarray(record.value_norms, dtype="<f4").tobytes())
    if meta is not None:
        sidecar = path.with_name(path.name + ".meta.json")
        sidecar.write_text(json.dumps(meta, indent=2, sort_keys=True))
    return path
