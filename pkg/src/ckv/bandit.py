"""Tabular offline contextual-bandit solver with a conservative penalty.

Both decision tables are compiled through this one solver.  The objective is
the regression of Q onto observed rewards plus a conservatism term that
pushes down the soft-maximum of Q relative to its value under the empirical
behavior policy:

    alpha_cql * E_s[ logsumexp_a Q(s,a) - E_{a~pi_beta} Q(s,a) ]
        + 1/2 * E_{(s,a,r)}[ (Q(s,a) - r)^2 ]

minimized by deterministic full-batch gradient descent from Q == 0.  Records
are canonically sorted before accumulation, so the fit is bit-identical
under any permutation of the dataset.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .errors import DataError, FitError

DEFAULT_ALPHA_CQL = 1.0
DEFAULT_LR = 0.1
DEFAULT_ITERS = 2000


@dataclass(frozen=True)
class CQLParams:
    alpha_cql: float = DEFAULT_ALPHA_CQL
    lr: float = DEFAULT_LR
    iters: int = DEFAULT_ITERS
    seed: int = 0

    def __post_init__(self):
        if self.alpha_cql < 0:
            raise DataError("alpha_cql must be >= 0")
        if self.lr <= 0 or self.iters < 1:
            raise DataError("lr must be > 0 and iters >= 1")


@dataclass
class BanditDataset:
    """Offline (state, action, reward) records with labeled vocabularies."""

    state_labels: list[str]
    action_labels: list
    state_ids: np.ndarray
    action_ids: np.ndarray
    rewards: np.ndarray

    def __post_init__(self):
        self.state_ids = np.asarray(self.state_ids, dtype=np.int64)
        self.action_ids = np.asarray(self.action_ids, dtype=np.int64)
        self.rewards = np.asarray(self.rewards, dtype=np.float64)
        if self.state_ids.size == 0:
            raise DataError("bandit dataset is empty")
        if not (self.state_ids.size == self.action_ids.size == self.rewards.size):
            raise DataError("record arrays have mismatched lengths")
        if np.any(self.state_ids < 0) or np.any(self.state_ids >= len(self.state_labels)):
            raise DataError("state_id outside vocabulary")
        if np.any(self.action_ids < 0) or np.any(self.action_ids >= len(self.action_labels)):
            raise DataError("action_id outside vocabulary")
        if not np.all(np.isfinite(self.rewards)):
            raise DataError("non-finite reward in dataset")

    @property
    def num_states(self) -> int:
        return len(self.state_labels)

    @property
    def num_actions(self) -> int:
        return len(self.action_labels)


@dataclass
class QTable:
    """Dense action-value table with fit metadata."""

    q: np.ndarray
    state_labels: list[str]
    action_labels: list
    meta: dict = field(default_factory=dict)

    def save(self, path: str | Path) -> None:
        payload = {
            "schema_version": 1,
            "state_labels": self.state_labels,
            "action_labels": self.action_labels,
            "q": self.q.tolist(),
            "meta": self.meta,
        }
        Path(path).write_text(json.dumps(payload, indent=2))

    @classmethod
    def load(cls, path: str | Path) -> "QTable":
        payload = json.loads(Path(path).read_text())
        return cls(q=np.asarray(payload["q"], dtype=np.float64),
                   state_labels=payload["state_labels"],
                   action_labels=payload["action_labels"],
                   meta=payload.get("meta", {}))


def _sufficient_stats(data: BanditDataset):
    """Per-(s, a) counts and reward sums, accumulated in canonical order."""
    order = np.lexsort((data.rewards, data.action_ids, data.state_ids))
    s, a, r = data.state_ids[order], data.action_ids[order], data.rewards[order]
    S, A = data.num_states, data.num_actions
    counts = np.zeros((S, A), dtype=np.float64)
    rsum = np.zeros((S, A), dtype=np.float64)
    rsq = np.zeros((S, A), dtype=np.float64)
    np.add.at(counts, (s, a), 1.0)
    np.add.at(rsum, (s, a), r)
    np.add.at(rsq, (s, a), r * r)
    return counts, rsum, rsq


def _loss(q, counts, rsum, rsq, n_state, pibeta, n_total, alpha_cql):
    observed = n_state > 0
    m = q.max(axis=1, keepdims=True)
    lse = (m[:, 0] + np.log(np.exp(q - m).sum(axis=1)))
    cql = ((n_state / n_total) * (lse - (pibeta * q).sum(axis=1)))[observed].sum()
    reg = 0.5 * (counts * q * q - 2.0 * q * rsum + rsq).sum() / n_total
    return alpha_cql * cql + reg


def fit_cql(data: BanditDataset, params: CQLParams = CQLParams()) -> QTable:
    """Full-batch gradient descent on the conservative objective.

    States absent from the dataset keep Q == 0.  Raises FitError if the loss
    becomes non-finite, reporting the iteration.
    """
    counts, rsum, rsq = _sufficient_stats(data)
    n_state = counts.sum(axis=1)
    n_total = float(data.state_ids.size)
    observed = n_state > 0

    pibeta = np.zeros_like(counts)
    pibeta[observed] = counts[observed] / n_state[observed, None]

    q = np.zeros_like(counts)
    for it in range(params.iters):
        grad = (counts * q - rsum) / n_total
        if params.alpha_cql > 0:
            m = q.max(axis=1, keepdims=True)
            e = np.exp(q - m)
            soft = e / e.sum(axis=1, keepdims=True)
            cql_grad = (n_state / n_total)[:, None] * (soft - pibeta)
            cql_grad[~observed] = 0.0
            grad = grad + params.alpha_cql * cql_grad
        with np.errstate(over="ignore", invalid="ignore"):
            q = q - params.lr * grad
        if not np.all(np.isfinite(q)):
            raise FitError(f"fit diverged at iteration {it}")

    final_loss = _loss(q, counts, rsum, rsq, n_state, pibeta, n_total, params.alpha_cql)
    meta = {
        "alpha_cql": params.alpha_cql, "lr": params.lr, "iters": params.iters,
        "seed": params.seed, "final_loss": float(final_loss),
        "num_records": int(n_total),
    }
    return QTable(q=q, state_labels=list(data.state_labels),
                  action_labels=list(data.action_labels), meta=meta)


def greedy_policy(table: QTable, tie_break=None) -> np.ndarray:
    """Per-state argmax action ids.

    ``tie_break(action_ids)`` resolves exact ties among the maximal actions;
    the default keeps the smallest action id.
    """
    out = np.empty(table.q.shape[0], dtype=np.int64)
    for s in range(table.q.shape[0]):
        row = table.q[s]
        tied = np.flatnonzero(row == row.max())
        out[s] = tied[0] if tie_break is None else tie_break(tied)
    return out
