"""Stratified trace selection over the (entropy, perplexity) risk grid."""

from __future__ import annotations

import json
import struct
from pathlib import Path

import numpy as np

from .writer import _HEADER, FLAG_LOGPROBS, MAGIC, MODE_WINDOW_ROWS


def _read_risk_inputs(path: Path) -> tuple[np.ndarray, np.ndarray, int]:
    """Window-attention rows (L, H, w_obs, T), logprobs, and w_obs from a
    trace file this package wrote (window-row mode with logprobs)."""
    raw = path.read_bytes()
    magic, version, L, H, T, _d, w_obs, mode, flags = _HEADER.unpack_from(raw)
    if magic != MAGIC or mode != MODE_WINDOW_ROWS or not flags & FLAG_LOGPROBS:
        raise ValueError(f"{path} is not an extractor-written trace")
    off = _HEADER.size + 4 * T  # skip tokens
    logprobs = np.frombuffer(raw, dtype="<f4", count=T, offset=off)
    off += 4 * T
    att = np.frombuffer(raw, dtype="<f4", count=L * H * w_obs * T,
                        offset=off).reshape(L, H, w_obs, T)
    return att, logprobs, w_obs


def trace_risks(path: Path) -> tuple[float, float]:
    """(attention-entropy, window-perplexity) risk pair for one trace."""
    att, logprobs, w_obs = _read_risk_inputs(path)
    mass = att.astype(np.float64).mean(axis=(0, 1)).sum(axis=0)
    p = mass / mass.sum()
    nz = p > 0
    entropy = float(-(p[nz] * np.log(p[nz])).sum())
    ppl = float(np.exp(-logprobs[-w_obs:].astype(np.float64).mean()))
    return entropy, ppl


def _bin_of(value: float, edges: list[float]) -> int:
    # Value equal to an edge lands in the higher bin, matching the grid
    # convention the bins file was fitted under.
    return int(np.searchsorted(np.asarray(edges), value, side="right"))


def stratify(trace_dir: str | Path, bins_path: str | Path,
             per_cell: int) -> dict:
    """Select up to ``per_cell`` traces per (entropy bin, perplexity bin).

    ``bins_path`` is a fitted bin-edges JSON with ``entropy_edges`` and
    ``ppl_edges`` lists.  Returns a manifest with the selected files, the
    occupancy of every cell, and the empty cells; callers typically persist
    it next to the traces.
    """
    if per_cell < 1:
        raise ValueError(f"per_cell must be >= 1, got {per_cell}")
    trace_dir = Path(trace_dir)
    edges = json.loads(Path(bins_path).read_text())
    e_edges = list(edges["entropy_edges"])
    p_edges = list(edges["ppl_edges"])
    n_ent, n_ppl = len(e_edges) + 1, len(p_edges) + 1

    cells: dict[str, list[str]] = {}
    for path in sorted(trace_dir.glob("*.ckvt")):
        entropy, ppl = trace_risks(path)
        key = f"{_bin_of(entropy, e_edges)},{_bin_of(ppl, p_edges)}"
        bucket = cells.setdefault(key, [])
        if len(bucket) < per_cell:
            bucket.append(path.name)

    all_keys = [f"{be},{bp}" for be in range(n_ent) for bp in range(n_ppl)]
    selected = sorted(name for names in cells.values() for name in names)
    return {
        "schema_version": 1,
        "per_cell": per_cell,
        "grid": [n_ent, n_ppl],
        "selected": selected,
        "occupancy": {key: len(cells.get(key, [])) for key in all_keys},
        "empty_cells": [key for key in all_keys if key not in cells],
    }
