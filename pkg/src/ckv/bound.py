"""Empirical diagnostics for the attention-truncation error of a selection.

For a renormalized truncation of a probability row, the L1 distance to the
original row is exactly twice the discarded mass: the retained mass (1 - m)
is scaled by 1/(1 - m), contributing m, and the dropped entries contribute
another m.  The module checks that identity row by row, computes per-head
Frobenius errors against the renormalized compressed attention, and reports
the deterministic and stochastic terms of the layer-level error bound
(sqrt(T) * tail mass, and a scale inversely weighted by the smallest head
weight).  The constant in front of the stochastic term is reported as a fit,
never asserted.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .errors import DegenerateRowError, ParameterError
from .headtable import HeadTable
from .pipeline import Selection
from .trace import FULL, PrefillTrace

RETAINED_MASS_FLOOR = 1e-12


@dataclass
class LayerBound:
    layer: int
    lhs: float                 # (1/H) sum_h ||A - A_tilde||_F
    eps_tail: float            # mean lost attention mass over rows
    w_min: float
    deterministic_term: float  # sqrt(T) * eps_tail
    stochastic_scale: float    # sqrt((T - B) log(1/delta) / (T * w_min^2))
    ratio: float               # lhs / deterministic_term
    degenerate_rows: int


@dataclass
class BoundReport:
    delta: float
    layers: list[LayerBound]
    excluded_layers: list[int]
    fitted_constant: float
    holds_with_fitted_constant: bool
    l1_margins: dict = field(default_factory=dict)

    def to_json(self) -> str:
        return json.dumps({
            "schema_version": 1,
            "delta": self.delta,
            "fitted_constant": self.fitted_constant,
            "holds_with_fitted_constant": self.holds_with_fitted_constant,
            "excluded_layers": self.excluded_layers,
            "l1_margins": self.l1_margins,
            "layers": [vars(lb) for lb in self.layers],
        }, indent=2, sort_keys=True)

    def save(self, path: str | Path) -> None:
        Path(path).write_text(self.to_json())


def compressed_attention(row: np.ndarray, retained: list[int]) -> np.ndarray:
    """Renormalize a probability row over the retained 1-based positions."""
    row = np.asarray(row, dtype=np.float64)
    keep = np.zeros(row.size, dtype=bool)
    keep[np.asarray(sorted(retained), dtype=np.int64) - 1] = True
    mass = row[keep].sum()
    if mass <= RETAINED_MASS_FLOOR:
        raise DegenerateRowError(f"retained mass {mass:.3e} too small to renormalize")
    out = np.zeros_like(row)
    out[keep] = row[keep] / mass
    return out


def l1_truncation_check(rows: np.ndarray, retained: list[int]) -> list[tuple[float, float]]:
    """Per-row (L1 distance, lost mass) for renormalized truncation.

    Rows whose retained mass vanishes are reported as (nan, lost_mass).
    """
    rows = np.asarray(rows, dtype=np.float64)
    out = []
    keep = np.zeros(rows.shape[1], dtype=bool)
    keep[np.asarray(sorted(retained), dtype=np.int64) - 1] = True
    for row in rows:
        lost = float(row[~keep].sum())
        mass = float(row[keep].sum())
        if mass <= RETAINED_MASS_FLOOR:
            out.append((float("nan"), lost))
            continue
        tilde = np.zeros_like(row)
        tilde[keep] = row[keep] / mass
        out.append((float(np.abs(row - tilde).sum()), lost))
    return out


def frobenius_error(full: np.ndarray, compressed: np.ndarray):
    """Per-head Frobenius norms of the difference plus their plain mean.

    ``full`` and ``compressed`` are (H, T, T) stacks.
    """
    diff = np.asarray(full, dtype=np.float64) - np.asarray(compressed, dtype=np.float64)
    per_head = np.sqrt((diff * diff).sum(axis=(1, 2)))
    return per_head, float(per_head.mean())


def bound_report(trace: PrefillTrace, selection: Selection, head_table: HeadTable,
                 delta: float = 0.05) -> BoundReport:
    """Layer-by-layer empirical check of the truncation-error decomposition.

    Layers whose minimum head weight is <= 0 are excluded from the stochastic
    term (its 1/w_min scale is undefined there) and listed separately.  Rows
    with no retained causal support keep their original attention (nothing to
    renormalize over); they are counted per layer.
    """
    if not (0.0 < delta < 1.0):
        raise ParameterError(f"delta must be in (0, 1), got {delta}")
    if trace.attention_mode != FULL:
        raise ParameterError("bound_report requires a FULL-mode trace")

    T, H = trace.seq_len, trace.num_heads
    log_term = np.log(1.0 / delta)
    layers, excluded = [], []
    worst_margin, mean_margin, n_rows_checked = 0.0, 0.0, 0

    for l in range(trace.num_layers):
        retained = selection.layers[l]
        keep = np.zeros(T, dtype=bool)
        keep[np.asarray(retained, dtype=np.int64) - 1] = True
        att = np.asarray(trace.attention[l], dtype=np.float64)  # (H, T, T)

        lost = att[:, :, ~keep].sum(axis=2)       # (H, T)
        mass = att[:, :, keep].sum(axis=2)
        degenerate = mass <= RETAINED_MASS_FLOOR  # (H, T)

        tilde = np.zeros_like(att)
        safe_mass = np.where(degenerate, 1.0, mass)
        tilde[:, :, keep] = att[:, :, keep] / safe_mass[:, :, None]
        tilde[degenerate] = att[degenerate]

        # L1 identity margin on non-degenerate rows: bound minus distance.
        l1 = np.abs(att - tilde).sum(axis=2)
        ok = ~degenerate
        margins = 2.0 * lost[ok] - l1[ok]
        if margins.size:
            worst_margin = min(worst_margin, float(margins.min()))
            mean_margin += float(margins.sum())
            n_rows_checked += margins.size

        _, lhs = frobenius_error(att, tilde)
        eps_tail = float(np.where(ok, lost, 0.0).sum() / max(ok.sum(), 1))
        w_min = head_table.w_min(l)
        det = float(np.sqrt(T) * eps_tail)
        B_l = len(retained)
        if w_min > 0:
            stoch = float(np.sqrt(max(T - B_l, 0) * log_term / (T * w_min ** 2)))
        else:
            stoch = float("nan")
            excluded.append(l)
        layers.append(LayerBound(
            layer=l, lhs=lhs, eps_tail=eps_tail, w_min=w_min,
            deterministic_term=det, stochastic_scale=stoch,
            ratio=lhs / det if det > 0 else (0.0 if lhs == 0 else float("inf")),
            degenerate_rows=int(degenerate.sum()),
        ))

    # Smallest constant c with lhs <= c * deterministic + stochastic everywhere.
    cs = []
    for lb in layers:
        if lb.layer in excluded or not np.isfinite(lb.stochastic_scale):
            continue
        if lb.deterministic_term > 0:
            cs.append(max(0.0, (lb.lhs - lb.stochastic_scale) / lb.deterministic_term))
    fitted_c = max(cs) if cs else 0.0
    holds = all(
        lb.lhs <= fitted_c * lb.deterministic_term + lb.stochastic_scale + 1e-9
        for lb in layers if lb.layer not in excluded
    )
    return BoundReport(
        delta=delta, layers=layers, excluded_layers=excluded,
        fitted_constant=fitted_c, holds_with_fitted_constant=holds,
        l1_margins={"worst": worst_margin,
                    "mean": mean_margin / max(n_rows_checked, 1),
                    "rows_checked": n_rows_checked},
    )
