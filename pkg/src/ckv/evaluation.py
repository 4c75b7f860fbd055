"""Fidelity metrics and run reports: window-NLL deltas against the full
cache, recovery ratios, retention statistics, and baseline comparisons over
a budget sweep.
"""

from __future__ import annotations

import csv
import json
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .errors import ParameterError
from .pipeline import BASELINES, FULL_KEEP, Selection, baseline_select, compress
from .riskgate import BinEdges, GateTable, risk_coords
from .tinylm import TinyLMWeights, window_nll
from .trace import BudgetConfig, PrefillTrace

CKV_METHOD = "CKV"


@dataclass
class EvalRow:
    trace_id: int
    method: str
    budget: int
    nll_full: float
    nll_comp: float
    delta: float
    recovery: float
    retained_per_layer: list[int]
    r_struct: float
    r_sem: float


@dataclass
class EvalReport:
    rows: list[EvalRow]
    aggregates: dict = field(default_factory=dict)

    def to_json(self) -> str:
        return json.dumps({
            "schema_version": 1,
            "aggregates": self.aggregates,
            "rows": [vars(r) for r in self.rows],
        }, indent=2, sort_keys=True)

    def save(self, path: str | Path) -> None:
        Path(path).write_text(self.to_json())

    def save_csv(self, path: str | Path) -> None:
        """Budget-vs-mean-delta curves, one row per (method, budget)."""
        with open(path, "w", newline="") as f:
            writer = csv.writer(f)
            writer.writerow(["method", "budget", "mean_delta", "median_delta",
                             "p95_delta", "num_traces"])
            for key in sorted(self.aggregates):
                agg = self.aggregates[key]
                writer.writerow([agg["method"], agg["budget"], f"{agg['mean_delta']:.6f}",
                                 f"{agg['median_delta']:.6f}", f"{agg['p95_delta']:.6f}",
                                 agg["count"]])


def nll_delta(lm: TinyLMWeights, tokens, selection: Selection, window) -> float:
    """Compressed-minus-full window NLL; exactly 0 for full retention."""
    T = np.asarray(tokens).size
    full = [list(range(1, T + 1))] * len(selection.layers)
    nll_full = window_nll(lm, tokens, full, window)
    nll_comp = window_nll(lm, tokens, selection.layers, window)
    return nll_comp - nll_full


def _select(trace, method, budgets, head_table, gate_table, bin_edges):
    if method == CKV_METHOD:
        return compress(trace, head_table, gate_table, bin_edges, budgets)
    return baseline_select(trace, method, budgets)


def evaluate_run(
    traces: list[PrefillTrace],
    lm: TinyLMWeights,
    methods: list[str],
    budgets_sweep: list[int],
    head_table=None,
    gate_table=None,
    bin_edges: BinEdges | None = None,
    jobs: int = 1,
) -> EvalReport:
    """Score every (trace, method, budget) cell of the sweep.

    Results are deterministic regardless of ``jobs``: cells are enumerated in
    a fixed order and each cell's computation is independent.
    """
    for m in methods:
        if m != CKV_METHOD and m not in BASELINES:
            raise ParameterError(f"unknown method {m!r}")
    if CKV_METHOD in methods and (head_table is None or gate_table is None or bin_edges is None):
        raise ParameterError("CKV method requires compiled tables and bin edges")

    cells = [(i, m, b) for i, _ in enumerate(traces) for m in methods for b in budgets_sweep]

    # Full-cache window NLL per trace, computed once.
    def full_nll(i):
        trace = traces[i]
        full = [list(range(1, trace.seq_len + 1))] * trace.num_layers
        return window_nll(lm, trace.tokens, full, trace.window_positions)

    fulls = [full_nll(i) for i in range(len(traces))]

    risk_edges = bin_edges if bin_edges is not None else BinEdges(
        entropy_edges=np.empty(0), ppl_edges=np.empty(0))
    risks = [risk_coords(t, risk_edges) for t in traces]

    def run_cell(cell):
        i, method, budget = cell
        trace = traces[i]
        budgets = BudgetConfig.uniform(budget, trace.num_layers)
        sel = _select(trace, method, budgets, head_table, gate_table, risk_edges)
        nll_comp = window_nll(lm, trace.tokens, sel.layers, trace.window_positions)
        delta = nll_comp - fulls[i]
        return EvalRow(
            trace_id=i, method=method, budget=budget,
            nll_full=fulls[i], nll_comp=nll_comp, delta=delta,
            recovery=float(np.exp(-delta)),
            retained_per_layer=[len(s) for s in sel.layers],
            r_struct=risks[i].r_struct, r_sem=risks[i].r_sem,
        )

    if jobs > 1:
        with ThreadPoolExecutor(max_workers=jobs) as pool:
            rows = list(pool.map(run_cell, cells))
    else:
        rows = [run_cell(c) for c in cells]

    aggregates = {}
    for method in methods:
        for budget in budgets_sweep:
            deltas = np.asarray([r.delta for r in rows
                                 if r.method == method and r.budget == budget])
            aggregates[f"{method}@{budget}"] = {
                "method": method, "budget": budget, "count": int(deltas.size),
                "mean_delta": float(deltas.mean()),
                "median_delta": float(np.median(deltas)),
                "p95_delta": float(np.quantile(deltas, 0.95, method="linear")),
            }
    return EvalReport(rows=rows, aggregates=aggregates)
