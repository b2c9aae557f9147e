"""Permutation variable importance and mean-rank aggregation over windows."""

from __future__ import annotations

from dataclasses import dataclass
from typing import Sequence

import numpy as np

N_REPEATS = 5


@dataclass
class WindowImportance:
    names: tuple
    importance: np.ndarray
    ranks: np.ndarray  # 1 = most important


@dataclass
class ImportanceReport:
    names: tuple
    mean_rank: np.ndarray
    ranks_by_window: np.ndarray  # (windows, K)

    def ordered(self) -> list[tuple[str, float]]:
        order = np.argsort(self.mean_rank, kind="stable")
        return [(self.names[j], float(self.mean_rank[j])) for j in order]


def rank_descending(values) -> np.ndarray:
    """Ranks 1..K by descending value; ties keep column order."""
    order = np.argsort(-np.asarray(values, dtype=float), kind="stable")
    ranks = np.empty(len(order), dtype=int)
    ranks[order] = np.arange(1, len(order) + 1)
    return ranks


def permutation_importance(model, x_valid, y_valid, rng=None, names: Sequence[str] | None = None,
                           n_repeats: int = N_REPEATS, min_rows: int = 30) -> WindowImportance:
    """Validation-MSE increase after shuffling each column, averaged over repeats.

    Constant columns get importance 0.
    """
    x = np.asarray(x_valid, dtype=float)
    y = np.asarray(y_valid, dtype=float)
    if len(y) < min_rows:
        raise ValueError(f"need at least {min_rows} validation rows, got {len(y)}")
    rng = np.random.default_rng(rng)
    names = tuple(names) if names is not None else tuple(f"x{j}" for j in range(x.shape[1]))
    base = float(np.mean((y - model.predict(x)) ** 2))
    imp = np.zeros(x.shape[1])
    for j in range(x.shape[1]):
        if np.all(x[:, j] == x[0, j]):
            continue
        total = 0.0
        for _ in range(n_repeats):
            xp = x.copy()
            xp[:, j] = x[rng.permutation(len(x)), j]
            total += float(np.mean((y - model.predict(xp)) ** 2)) - base
        imp[j] = total / n_repeats
    return WindowImportance(names, imp, rank_descending(imp))


def aggregate_ranks(windows: Sequence[WindowImportance]) -> ImportanceReport:
    if not windows:
        raise ValueError("no windows to aggregate")
    names = windows[0].names
    if any(w.names != names for w in windows):
        raise ValueError("windows disagree on variable names")
    ranks = np.array([w.ranks for w in windows])
    return ImportanceReport(names, ranks.mean(axis=0), ranks)
