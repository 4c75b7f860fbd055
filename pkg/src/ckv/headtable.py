"""Stage 2: head-reliability experience collection, table compilation, and
weighted max-pooling.

Each attention head gets a compiled multiplicative reliability weight drawn
from a small discrete action set.  Experience records the marginal effect of
perturbing one head's weight (all others held at the neutral 1.0) on the
window NLL of the resulting budgeted selection; the shared bandit solver
turns those records into a deterministic lookup table.  At inference the
layer score of a token is the maximum over heads of utility times weight, so
a trusted head can veto eviction single-handedly.
"""

from __future__ import annotations

import csv
import json
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .bandit import BanditDataset, CQLParams, QTable, fit_cql, greedy_policy
from .errors import ConfigError, CoverageError, DataError
from .tinylm import TinyLMWeights, window_nll
from .trace import BudgetConfig, PrefillTrace
from .utility import compute_utility

DEFAULT_ACTION_SET = (0.0, 0.25, 0.5, 0.75, 1.0, 1.25, 1.5)

EXACT = "exact"
SURROGATE = "surrogate"


@dataclass
class HeadTable:
    """Compiled per-(layer, head) reliability weights."""

    weights: np.ndarray  # (L, H)
    action_set: list[float]
    meta: dict = field(default_factory=dict)

    def w_min(self, layer: int) -> float:
        return float(self.weights[layer].min())

    def save(self, path: str | Path) -> None:
        payload = {
            "schema_version": 1,
            "weights": self.weights.tolist(),
            "action_set": list(self.action_set),
            "meta": self.meta,
        }
        Path(path).write_text(json.dumps(payload, indent=2))

    @classmethod
    def load(cls, path: str | Path) -> "HeadTable":
        payload = json.loads(Path(path).read_text())
        return cls(weights=np.asarray(payload["weights"], dtype=np.float64),
                   action_set=[float(w) for w in payload["action_set"]],
                   meta=payload.get("meta", {}))

    def save_csv(self, path: str | Path) -> None:
        """Layer x head grid, one row per layer."""
        with open(path, "w", newline="") as f:
            writer = csv.writer(f)
            writer.writerow(["layer"] + [f"head_{h}" for h in range(self.weights.shape[1])])
            for l, row in enumerate(self.weights):
                writer.writerow([l] + [f"{w:g}" for w in row])


@dataclass
class HeadExperience:
    """Bandit records over states (layer, head, budget)."""

    dataset: BanditDataset
    num_layers: int
    num_heads: int
    budgets: list[int]

    @staticmethod
    def state_label(l: int, h: int, budget: int) -> str:
        return f"l{l}:h{h}:B{budget}"


def pooled_importance(u: np.ndarray, table: HeadTable) -> np.ndarray:
    """Weighted max-pool over heads: u_hat[l, t] = max_h u[l, h, t] * W[l, h]."""
    return (u * table.weights[:, :, None]).max(axis=1)


def topk_by_score(scores: np.ndarray, k: int) -> list[int]:
    """Top-k 1-based indices under the canonical order: score descending,
    ties toward the larger (more recent) position."""
    T = scores.size
    k = min(k, T)
    order = np.lexsort((-np.arange(T), -scores))
    return sorted(int(i) + 1 for i in order[:k])


def _budget_selection(u_hat: np.ndarray, budgets: BudgetConfig) -> list[list[int]]:
    return [topk_by_score(u_hat[l], budgets.layer(l)) for l in range(u_hat.shape[0])]


def lost_window_mass(trace: PrefillTrace, layer: int, retained: list[int]) -> float:
    """Mean over heads and window rows of attention mass outside the
    retained set at one layer; the surrogate fidelity signal."""
    rows = np.asarray(trace.window_rows()[layer], dtype=np.float64)  # (H, w, T)
    keep = np.zeros(trace.seq_len, dtype=bool)
    keep[np.asarray(retained, dtype=np.int64) - 1] = True
    return float(rows[:, :, ~keep].sum(axis=2).mean())


def collect_head_experience(
    traces: list[PrefillTrace],
    lm: TinyLMWeights | None,
    action_set=DEFAULT_ACTION_SET,
    budgets: BudgetConfig | None = None,
    sampler_seed: int = 0,
    mode: str = EXACT,
    samples_per_state: int = 1,
) -> HeadExperience:
    """Sample one-head weight perturbations and score them.

    In exact mode the reward is -(L_comp - L_full) from the tiny LM's window
    NLL with the perturbed selection applied at every layer; in surrogate
    mode it is the negated lost window attention mass of the perturbed
    layer's selection (no LM required).
    """
    if not traces:
        raise DataError("no traces supplied")
    if not action_set:
        raise DataError("action set is empty")
    if mode == EXACT and lm is None:
        raise ConfigError("exact mode requires tiny LM weights")
    if mode == SURROGATE and lm is not None:
        raise ConfigError("surrogate mode must not be combined with LM-based NLL")
    if mode not in (EXACT, SURROGATE):
        raise ConfigError(f"unknown reward mode {mode!r}")

    L, H = traces[0].num_layers, traces[0].num_heads
    actions = [float(a) for a in action_set]
    if budgets is None:
        budgets = BudgetConfig.uniform(max(1, traces[0].seq_len // 4), L)

    state_labels = [HeadExperience.state_label(l, h, budgets.layer(l))
                    for l in range(L) for h in range(H)]
    state_index = {lab: i for i, lab in enumerate(state_labels)}

    rng = np.random.Generator(np.random.Philox(key=sampler_seed))
    rec_s, rec_a, rec_r = [], [], []

    for trace in traces:
        field_ = compute_utility(trace)
        window = trace.window_positions
        T = trace.seq_len

        full = [list(range(1, T + 1))] * L
        if mode == EXACT:
            nll_full = window_nll(lm, trace.tokens, full, window)
        base_u = field_.u  # (L, H, T)

        for l in range(L):
            for h in range(H):
                a_ids = rng.integers(0, len(actions), size=samples_per_state)
                for a_id in a_ids:
                    w = np.ones((L, H))
                    w[l, h] = actions[a_id]
                    table = HeadTable(weights=w, action_set=actions)
                    u_hat = pooled_importance(base_u, table)
                    sel = _budget_selection(u_hat, budgets)
                    if mode == EXACT:
                        nll_comp = window_nll(lm, trace.tokens, sel, window)
                        r = -(nll_comp - nll_full)
                    else:
                        r = -lost_window_mass(trace, l, sel[l])
                    rec_s.append(state_index[HeadExperience.state_label(l, h, budgets.layer(l))])
                    rec_a.append(int(a_id))
                    rec_r.append(r)

    dataset = BanditDataset(state_labels=state_labels, action_labels=actions,
                            state_ids=np.asarray(rec_s), action_ids=np.asarray(rec_a),
                            rewards=np.asarray(rec_r))
    return HeadExperience(dataset=dataset, num_layers=L, num_heads=H,
                          budgets=list(budgets.budgets))


def _neutral_tie_break(actions: list[float]):
    def pick(tied: np.ndarray) -> int:
        # Closest to 1.0, then the smaller weight.
        return int(min(tied, key=lambda i: (abs(actions[i] - 1.0), actions[i])))
    return pick


def compile_head_table(exp: HeadExperience, cql_params: CQLParams = CQLParams()) -> HeadTable:
    """Fit the bandit and freeze the greedy policy into a weight grid."""
    data = exp.dataset
    covered = set(data.state_ids.tolist())
    missing = [lab for i, lab in enumerate(data.state_labels) if i not in covered]
    if missing:
        raise CoverageError(f"uncovered head states: {', '.join(missing)}")

    qtable = fit_cql(data, cql_params)
    actions = [float(a) for a in data.action_labels]
    policy = greedy_policy(qtable, tie_break=_neutral_tie_break(actions))

    L, H = exp.num_layers, exp.num_heads
    weights = np.empty((L, H))
    for l in range(L):
        for h in range(H):
            weights[l, h] = actions[policy[l * H + h]]
    meta = {
        "action_set": actions,
        "budgets": exp.budgets,
        "dataset_size": int(data.state_ids.size),
        "cql": qtable.meta,
        "w_min_per_layer": weights.min(axis=1).tolist(),
    }
    return HeadTable(weights=weights, action_set=actions, meta=meta)
