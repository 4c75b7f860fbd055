"""End-to-end prefill compression: risk coordinates, stabilized utility,
weighted max-pooling, per-layer threshold lookup, gated selection, and cache
materialization.  Also houses the eviction baselines used for comparison.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .errors import CompatibilityError, DataError, ParameterError
from .headtable import HeadTable, pooled_importance, topk_by_score
from .riskgate import BinEdges, GateTable, gate_select_full, risk_coords
from .trace import BudgetConfig, PrefillTrace
from .utility import compute_utility

SINK_RECENT = "SINK_RECENT"
TOPK_ACCUM = "TOPK_ACCUM"
FULL_KEEP = "FULL"
BASELINES = (SINK_RECENT, TOPK_ACCUM, FULL_KEEP)

DEFAULT_N_SINK = 4


@dataclass
class Selection:
    """Per-layer retained 1-based index sets plus provenance."""

    layers: list[list[int]]
    provenance: list[dict]
    budgets: list[int]
    risk: dict = field(default_factory=dict)

    def layer_set(self, l: int) -> set[int]:
        return set(self.layers[l])

    def to_json(self) -> str:
        return json.dumps({
            "schema_version": 1,
            "budgets": self.budgets,
            "risk": self.risk,
            "layers": [{"indices": idx, "provenance": prov}
                       for idx, prov in zip(self.layers, self.provenance)],
        }, indent=2, sort_keys=True)

    def save(self, path: str | Path) -> None:
        Path(path).write_text(self.to_json())

    @classmethod
    def load(cls, path: str | Path) -> "Selection":
        payload = json.loads(Path(path).read_text())
        return cls(layers=[list(map(int, layer["indices"])) for layer in payload["layers"]],
                   provenance=[layer["provenance"] for layer in payload["layers"]],
                   budgets=list(payload["budgets"]),
                   risk=payload.get("risk", {}))


@dataclass
class CompressedCache:
    """Gathered K/V rows per layer; indices shared across heads in a layer."""

    keys: list[np.ndarray]    # per layer (H, |S_l|, d_head)
    values: list[np.ndarray]
    indices: list[list[int]]


def compress(trace: PrefillTrace, head_table: HeadTable, gate_table: GateTable,
             bin_edges: BinEdges, budgets: BudgetConfig) -> Selection:
    """Run the full selection chain on one trace.

    The output is identical to composing the stage functions by hand:
    risk coordinates -> utility -> weighted max-pool -> per-layer threshold
    lookup -> gated selection.  Selection happens once; nothing is mutated
    afterwards.
    """
    L, H = trace.num_layers, trace.num_heads
    if head_table.weights.shape != (L, H):
        raise CompatibilityError(
            f"head table shape {head_table.weights.shape} does not match trace ({L}, {H})")
    if gate_table.tau.shape[0] != L:
        raise CompatibilityError(
            f"gate table has {gate_table.tau.shape[0]} layers, trace has {L}")
    if gate_table.tau.shape[1:] != (bin_edges.n_ent, bin_edges.n_ppl):
        raise CompatibilityError("gate table grid does not match bin edges")
    if len(budgets.budgets) != L:
        raise CompatibilityError(f"budget list has {len(budgets.budgets)} layers, trace has {L}")

    coords = risk_coords(trace, bin_edges)
    u_hat = pooled_importance(compute_utility(trace).u, head_table)

    layers, provenance = [], []
    for l in range(L):
        tau = gate_table.lookup(l, coords.b_ent, coords.b_ppl)
        indices, prov = gate_select_full(u_hat[l], tau, budgets.layer(l))
        prov.update({"tau": tau, "b_ent": coords.b_ent, "b_ppl": coords.b_ppl})
        layers.append(indices)
        provenance.append(prov)

    return Selection(layers=layers, provenance=provenance,
                     budgets=list(budgets.budgets),
                     risk={"r_struct": coords.r_struct, "r_sem": coords.r_sem,
                           "b_ent": coords.b_ent, "b_ppl": coords.b_ppl})


def baseline_select(trace: PrefillTrace, method: str, budgets: BudgetConfig,
                    n_sink: int = DEFAULT_N_SINK) -> Selection:
    """Reference eviction policies: sink+recent, accumulated-attention top-k,
    and the identity."""
    if method not in BASELINES:
        raise ParameterError(f"unknown baseline {method!r}")
    T, L = trace.seq_len, trace.num_layers
    if len(budgets.budgets) != L:
        raise CompatibilityError(f"budget list has {len(budgets.budgets)} layers, trace has {L}")

    alpha = None
    if method == TOPK_ACCUM:
        from .utility import mean_attention, window_mass
        alpha = window_mass(mean_attention(trace))

    layers, provenance = [], []
    for l in range(L):
        B = budgets.layer(l)
        if method == FULL_KEEP or B >= T:
            idx = list(range(1, T + 1))
        elif method == SINK_RECENT:
            if B < n_sink:
                idx = list(range(1, B + 1))
            else:
                idx = sorted(set(range(1, n_sink + 1)) |
                             set(range(T - (B - n_sink) + 1, T + 1)))
        else:  # TOPK_ACCUM
            idx = topk_by_score(alpha, B)
        layers.append(idx)
        provenance.append({"method": method, "candidate_count": len(idx),
                           "clamped": False, "fallback": False})
    return Selection(layers=layers, provenance=provenance, budgets=list(budgets.budgets))


def build_cache(trace: PrefillTrace, selection: Selection) -> CompressedCache:
    """Gather K/V rows for the retained indices, shared across heads."""
    if not trace.has_kv:
        raise DataError("trace carries no key/value vectors (has_kv flag unset)")
    keys, values = [], []
    for l, idx in enumerate(selection.layers):
        gather = np.asarray(idx, dtype=np.int64) - 1
        keys.append(trace.keys[l][:, gather, :].copy())
        values.append(trace.values[l][:, gather, :].copy())
    return CompressedCache(keys=keys, values=values,
                           indices=[list(i) for i in selection.layers])
