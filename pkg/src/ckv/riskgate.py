"""Stage 3: risk signals, discretization, gate-table compilation, and
threshold gating with budget correction.

Two global risk signals summarize a prompt at the end of prefill: the
Shannon entropy of the aggregated window attention distribution (structural)
and the window perplexity (semantic).  Quantile bins map the pair to a grid
cell, and a compiled lookup table turns (layer, cell) into a retention
threshold tau in [0.8, 1.0].  Thresholding is elastic below the budget and
hard-clamped above it.
"""

from __future__ import annotations

import csv
import hashlib
import json
import warnings
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .bandit import BanditDataset, CQLParams, fit_cql, greedy_policy
from .errors import (ConfigError, CoverageError, DataError, DegenerateRiskError,
                     ParameterError)
from .headtable import EXACT, SURROGATE, lost_window_mass, topk_by_score
from .tinylm import TinyLMWeights, window_nll
from .trace import BudgetConfig, PrefillTrace

DEFAULT_N_ENT = 20
DEFAULT_N_PPL = 4
DEFAULT_BETA = 1.0
DEFAULT_TAU_GRID = tuple(round(0.80 + 0.01 * i, 2) for i in range(21))


@dataclass
class RiskCoords:
    r_struct: float
    r_sem: float
    b_ent: int
    b_ppl: int


@dataclass
class BinEdges:
    """Quantile bin edges for the (entropy, perplexity) grid."""

    entropy_edges: np.ndarray
    ppl_edges: np.ndarray
    meta: dict = field(default_factory=dict)

    @property
    def n_ent(self) -> int:
        return self.entropy_edges.size + 1

    @property
    def n_ppl(self) -> int:
        return self.ppl_edges.size + 1

    def digest(self) -> str:
        payload = self.entropy_edges.tobytes() + self.ppl_edges.tobytes()
        return hashlib.sha256(payload).hexdigest()[:16]

    def save(self, path: str | Path) -> None:
        Path(path).write_text(json.dumps({
            "schema_version": 1,
            "entropy_edges": self.entropy_edges.tolist(),
            "ppl_edges": self.ppl_edges.tolist(),
            "meta": self.meta,
        }, indent=2))

    @classmethod
    def load(cls, path: str | Path) -> "BinEdges":
        payload = json.loads(Path(path).read_text())
        return cls(entropy_edges=np.asarray(payload["entropy_edges"], dtype=np.float64),
                   ppl_edges=np.asarray(payload["ppl_edges"], dtype=np.float64),
                   meta=payload.get("meta", {}))


@dataclass
class GateTable:
    """Retention threshold per (layer, entropy bin, perplexity bin)."""

    tau: np.ndarray  # (L, N_ent, N_ppl)
    meta: dict = field(default_factory=dict)

    def lookup(self, layer: int, b_ent: int, b_ppl: int) -> float:
        return float(self.tau[layer, b_ent, b_ppl])

    def save(self, path: str | Path) -> None:
        Path(path).write_text(json.dumps({
            "schema_version": 1,
            "tau": self.tau.tolist(),
            "meta": self.meta,
        }, indent=2))

    @classmethod
    def load(cls, path: str | Path) -> "GateTable":
        payload = json.loads(Path(path).read_text())
        return cls(tau=np.asarray(payload["tau"], dtype=np.float64),
                   meta=payload.get("meta", {}))

    def save_csv(self, path: str | Path) -> None:
        """One block per perplexity bin: threshold by (layer, entropy bin)."""
        L, NH, NP = self.tau.shape
        with open(path, "w", newline="") as f:
            writer = csv.writer(f)
            writer.writerow(["ppl_bin", "layer"] + [f"ent_{b}" for b in range(NH)])
            for p in range(NP):
                for l in range(L):
                    writer.writerow([p, l] + [f"{t:.4f}" for t in self.tau[l, :, p]])


def structural_risk(mean_rows: np.ndarray) -> float:
    """Entropy (nats) of the normalized window attention mass."""
    alpha = np.asarray(mean_rows, dtype=np.float64).sum(axis=0)
    total = alpha.sum()
    if total <= 0:
        raise DegenerateRiskError("aggregated attention mass is all-zero")
    p = alpha / total
    nz = p > 0
    return float(-(p[nz] * np.log(p[nz])).sum())


def semantic_risk(logprobs: np.ndarray | None, window) -> float:
    """Window perplexity: exp of the mean window NLL; always >= 1 for
    log-probabilities <= 0."""
    if logprobs is None:
        raise DataError("trace carries no log-probabilities")
    window = np.asarray(list(window), dtype=np.int64)
    lp = np.asarray(logprobs, dtype=np.float64)
    if window.size == 0 or window.max() > lp.size or window.min() < 1:
        raise DataError("window positions outside the log-probability range")
    return float(np.exp(-lp[window - 1].mean()))


def fit_bins(calib_risks, n_ent: int = DEFAULT_N_ENT, n_ppl: int = DEFAULT_N_PPL) -> BinEdges:
    """Quantile bin edges from calibration (r_struct, r_sem) pairs.

    Duplicate quantiles are collapsed by nudging with the smallest
    representable increment; degenerate distributions therefore yield fewer
    effective bins, which is flagged in the metadata.
    """
    pairs = list(calib_risks)
    if not pairs:
        raise DataError("empty calibration set")
    if len(pairs) < n_ent * n_ppl:
        warnings.warn(f"only {len(pairs)} calibration points for a "
                      f"{n_ent}x{n_ppl} grid; bins may be poorly supported")

    ent = np.asarray([p[0] for p in pairs], dtype=np.float64)
    ppl = np.asarray([p[1] for p in pairs], dtype=np.float64)

    def edges_of(vals: np.ndarray, n: int):
        if n < 1:
            raise ParameterError("bin counts must be >= 1")
        qs = [k / n for k in range(1, n)]
        raw = np.quantile(vals, qs, method="linear") if qs else np.empty(0)
        out = np.array(raw, dtype=np.float64)
        collapsed = False
        for i in range(1, out.size):
            if out[i] <= out[i - 1]:
                out[i] = np.nextafter(out[i - 1], np.inf)
                collapsed = True
        return out, collapsed

    e_edges, e_collapsed = edges_of(ent, n_ent)
    p_edges, p_collapsed = edges_of(ppl, n_ppl)
    meta = {
        "n_ent": n_ent, "n_ppl": n_ppl, "num_points": len(pairs),
        "entropy_collapsed": e_collapsed, "ppl_collapsed": p_collapsed,
        "effective_ent_bins": int(np.unique(e_edges).size + 1),
        "effective_ppl_bins": int(np.unique(p_edges).size + 1),
    }
    return BinEdges(entropy_edges=e_edges, ppl_edges=p_edges, meta=meta)


def discretize(risks: tuple[float, float], edges: BinEdges) -> tuple[int, int]:
    """Map a (r_struct, r_sem) pair to bin indices, right-open convention:
    a value equal to an edge lands in the higher bin."""
    r_struct, r_sem = risks
    b_ent = int(np.searchsorted(edges.entropy_edges, r_struct, side="right"))
    b_ppl = int(np.searchsorted(edges.ppl_edges, r_sem, side="right"))
    return b_ent, b_ppl


def risk_coords(trace: PrefillTrace, edges: BinEdges) -> RiskCoords:
    from .utility import mean_attention
    rows = mean_attention(trace)
    r_struct = structural_risk(rows)
    r_sem = semantic_risk(trace.logprobs, trace.window_positions)
    b_ent, b_ppl = discretize((r_struct, r_sem), edges)
    return RiskCoords(r_struct=r_struct, r_sem=r_sem, b_ent=b_ent, b_ppl=b_ppl)


def gate_select(u_hat: np.ndarray, tau: float, budget: int) -> list[int]:
    """Threshold gating with budget correction; 1-based sorted indices."""
    indices, _ = gate_select_full(u_hat, tau, budget)
    return indices


def gate_select_full(u_hat: np.ndarray, tau: float, budget: int):
    """As gate_select, plus provenance {candidate_count, clamped, fallback}.

    Candidates are the positions with score >= tau.  At most ``budget``
    survive; excess candidates are cut by the canonical top-k order (score
    descending, recency-favoring ties).  An empty candidate set falls back to
    the top-min(budget, T) positions, flagged in the provenance.
    """
    if budget < 1:
        raise ParameterError(f"budget must be >= 1, got {budget}")
    u_hat = np.asarray(u_hat, dtype=np.float64)
    cand = np.flatnonzero(u_hat >= tau)
    prov = {"candidate_count": int(cand.size), "clamped": False, "fallback": False}
    if cand.size == 0:
        prov["fallback"] = True
        return topk_by_score(u_hat, budget), prov
    if cand.size <= budget:
        return sorted(int(i) + 1 for i in cand), prov
    prov["clamped"] = True
    masked = np.full_like(u_hat, -np.inf)
    masked[cand] = u_hat[cand]
    return topk_by_score(masked, budget), prov


def _gate_state_labels(L: int, n_ent: int, n_ppl: int, budget_grid: list[int]):
    labels = []
    for l in range(L):
        for be in range(n_ent):
            for bp in range(n_ppl):
                for b in budget_grid:
                    labels.append(f"l{l}:e{be}:p{bp}:B{b}")
    return labels


def collect_gate_experience(
    traces: list[PrefillTrace],
    u_hats: list[np.ndarray],
    edges: BinEdges,
    tau_grid=DEFAULT_TAU_GRID,
    budgets: BudgetConfig | None = None,
    beta: float = DEFAULT_BETA,
    lm: TinyLMWeights | None = None,
    mode: str = EXACT,
    seed: int = 0,
    samples_per_layer: int = 4,
) -> BanditDataset:
    """Sample retention thresholds per (trace, layer) and score them.

    The reward is the negated NLL regression of applying the layer's gated
    selection (all other layers keep the full cache) minus the scaled budget
    deviation penalty (beta / T) * ||I_cand| - B_l|.
    """
    if not traces:
        raise DataError("no traces supplied")
    taus = [float(t) for t in tau_grid]
    if any(t < 0.8 - 1e-12 or t > 1.0 + 1e-12 for t in taus):
        raise ParameterError("tau grid must lie within [0.8, 1.0]")
    if beta < 0:
        raise ParameterError("beta must be >= 0")
    if mode == EXACT and lm is None:
        raise ConfigError("exact mode requires tiny LM weights")
    if mode == SURROGATE and lm is not None:
        raise ConfigError("surrogate mode must not be combined with LM-based NLL")

    L = traces[0].num_layers
    if budgets is None:
        budgets = BudgetConfig.uniform(max(1, traces[0].seq_len // 4), L)
    budget_grid = sorted(set(budgets.budgets))
    labels = _gate_state_labels(L, edges.n_ent, edges.n_ppl, budget_grid)
    index = {lab: i for i, lab in enumerate(labels)}

    rng = np.random.Generator(np.random.Philox(key=seed))
    rec_s, rec_a, rec_r = [], [], []

    for trace, u_hat in zip(traces, u_hats):
        coords = risk_coords(trace, edges)
        T = trace.seq_len
        window = trace.window_positions
        full = [list(range(1, T + 1))] * L
        if mode == EXACT:
            nll_full = window_nll(lm, trace.tokens, full, window)

        for l in range(L):
            B_l = budgets.layer(l)
            n = min(samples_per_layer, len(taus))
            tau_ids = rng.choice(len(taus), size=n, replace=False)
            for tau_id in tau_ids:
                tau = taus[tau_id]
                sel, prov = gate_select_full(u_hat[l], tau, B_l)
                psi = abs(prov["candidate_count"] - B_l)
                if mode == EXACT:
                    retained = list(full)
                    retained[l] = sel
                    nll_comp = window_nll(lm, trace.tokens, retained, window)
                    fid = -(nll_comp - nll_full)
                else:
                    fid = -lost_window_mass(trace, l, sel)
                r = fid - (beta / T) * psi
                rec_s.append(index[f"l{l}:e{coords.b_ent}:p{coords.b_ppl}:B{B_l}"])
                rec_a.append(int(tau_id))
                rec_r.append(r)

    return BanditDataset(state_labels=labels, action_labels=taus,
                         state_ids=np.asarray(rec_s), action_ids=np.asarray(rec_a),
                         rewards=np.asarray(rec_r))


def compile_gate_table(
    data: BanditDataset,
    edges: BinEdges,
    num_layers: int,
    budgets: BudgetConfig,
    cql_params: CQLParams = CQLParams(),
    beta: float = DEFAULT_BETA,
) -> GateTable:
    """Fit the bandit and freeze per-cell thresholds.

    Cells never observed are filled from the nearest observed (entropy,
    perplexity) cell of the same layer (Manhattan distance, deterministic tie
    toward smaller bins); filled cells are recorded in the metadata.
    """
    covered = set(data.state_ids.tolist())
    if not covered:
        raise CoverageError("no gate states observed")

    qtable = fit_cql(data, cql_params)
    taus = [float(t) for t in data.action_labels]
    # Ties break toward the smaller threshold (more conservative retention).
    policy = greedy_policy(qtable, tie_break=lambda tied: int(min(tied, key=lambda i: taus[i])))

    n_ent, n_ppl = edges.n_ent, edges.n_ppl
    budget_grid = sorted(set(budgets.budgets))
    index = {lab: i for i, lab in enumerate(data.state_labels)}

    tau_grid_arr = np.full((num_layers, n_ent, n_ppl), np.nan)
    for l in range(num_layers):
        B_l = budgets.layer(l)
        for be in range(n_ent):
            for bp in range(n_ppl):
                sid = index.get(f"l{l}:e{be}:p{bp}:B{B_l}")
                if sid is not None and sid in covered:
                    tau_grid_arr[l, be, bp] = taus[policy[sid]]

    filled = []
    out = tau_grid_arr.copy()
    for l in range(num_layers):
        observed = np.argwhere(~np.isnan(tau_grid_arr[l]))
        if observed.size == 0:
            # Fall back to the most conservative threshold for a blind layer.
            out[l] = min(taus)
            filled.append({"layer": l, "cell": "all", "source": "min_tau"})
            continue
        for be in range(n_ent):
            for bp in range(n_ppl):
                if np.isnan(out[l, be, bp]):
                    d = np.abs(observed[:, 0] - be) + np.abs(observed[:, 1] - bp)
                    nearest = observed[np.lexsort((observed[:, 1], observed[:, 0], d))[0]]
                    out[l, be, bp] = tau_grid_arr[l, nearest[0], nearest[1]]
                    filled.append({"layer": l, "cell": [int(be), int(bp)],
                                   "source": [int(nearest[0]), int(nearest[1])]})

    meta = {
        "beta": beta,
        "budgets": list(budgets.budgets),
        "cql": qtable.meta,
        "bin_edges_hash": edges.digest(),
        "filled_cells": filled,
        "tau_grid": taus,
    }
    return GateTable(tau=out, meta=meta)
