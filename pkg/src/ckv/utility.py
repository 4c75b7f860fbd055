"""Stage 1: stabilized token utility estimation.

The utility of a token combines two signals computed at the end of prefill:
the attention mass it receives from the observation-window queries of the
globally averaged attention map, and its value-vector norm relative to the
per-head sequence average (a scale-invariant factor).  The per-token utility
is the elementwise product of the two.
"""

from __future__ import annotations

import warnings
from dataclasses import dataclass

import numpy as np

from .errors import DegenerateHeadError
from .trace import PrefillTrace


@dataclass
class UtilityField:
    """alpha: (T,), rho: (L, H, T), u = alpha * rho: (L, H, T)."""

    alpha: np.ndarray
    rho: np.ndarray
    u: np.ndarray


def mean_attention(trace: PrefillTrace) -> np.ndarray:
    """Elementwise mean over all L*H heads of the window-query rows.

    FULL-mode traces are first restricted to their window rows.  Rows of the
    result remain probability distributions.
    """
    rows = np.asarray(trace.window_rows(), dtype=np.float64)
    return rows.mean(axis=(0, 1))


def window_mass(mean_rows: np.ndarray) -> np.ndarray:
    """Per-token attention mass accumulated over the window queries.

    ``mean_rows`` is the (w_obs, T) output of mean_attention; the result sums
    to w_obs up to row-normalization error.
    """
    return np.asarray(mean_rows, dtype=np.float64).sum(axis=0)


def relative_norms(trace: PrefillTrace, strict: bool = False) -> np.ndarray:
    """Value norms divided by their per-head sequence mean, shape (L, H, T).

    Each head's rho averages to 1 and is invariant under rescaling that
    head's norms.  A head whose norms are all zero falls back to rho == 1
    with a warning, or raises DegenerateHeadError in strict mode.
    """
    norms = np.asarray(trace.value_norms, dtype=np.float64)
    means = norms.mean(axis=2, keepdims=True)
    dead = means[:, :, 0] == 0.0
    if np.any(dead):
        l, h = np.argwhere(dead)[0]
        if strict:
            raise DegenerateHeadError(f"all value norms zero for head ({l}, {h})")
        warnings.warn(f"head ({l}, {h}): all value norms zero, using rho == 1")
        norms = norms.copy()
        norms[dead] = 1.0
        means = norms.mean(axis=2, keepdims=True)
    return norms / means


def base_utility(alpha: np.ndarray, rho: np.ndarray) -> np.ndarray:
    """u[l, h, t] = alpha[t] * rho[l, h, t]."""
    return np.asarray(alpha, dtype=np.float64)[None, None, :] * rho


def compute_utility(trace: PrefillTrace, strict: bool = False) -> UtilityField:
    """Run the full stage-1 chain on a trace."""
    alpha = window_mass(mean_attention(trace))
    rho = relative_norms(trace, strict=strict)
    return UtilityField(alpha=alpha, rho=rho, u=base_utility(alpha, rho))
