"""Random forests and gradient boosting over histogram regression trees."""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Optional

import numpy as np

from .tree import Binner, TreeParams, fit_regression_tree

STOPPING_TOLERANCE = 1e-4  # 0.01 %
STOPPING_ROUNDS = 5
SCORE_EVERY = 10


@dataclass
class EnsembleFit:
    kind: str
    trees: list
    rng_seed: Optional[int]
    n_trees_used: int
    init: float = 0.0
    rates: list = field(default_factory=list)
    learn_rate: Optional[float] = None
    learn_rate_annealing: Optional[float] = None
    scores: list = field(default_factory=list)

    def tree_predictions(self, x) -> np.ndarray:
        x = np.asarray(x, dtype=float)
        return np.array([t.predict(x) for t in self.trees[:self.n_trees_used]])

    def predict(self, x) -> np.ndarray:
        x = np.asarray(x, dtype=float)
        if self.kind == "RF":
            return np.mean(self.tree_predictions(x), axis=0)
        out = np.full(len(x), self.init)
        for rate, tree in zip(self.rates[:self.n_trees_used], self.trees[:self.n_trees_used]):
            out += rate * tree.predict(x)
        return out


def _tree_features(rng, k: int, rate: float) -> np.ndarray:
    m = max(1, int(round(rate * k)))
    if m >= k:
        return np.arange(k, dtype=np.intp)
    return np.sort(rng.choice(k, m, replace=False)).astype(np.intp)


def fit_rf(x, y, params: TreeParams = TreeParams(), k: int = 50, rng=None,
           bootstrap: bool = True) -> EnsembleFit:
    """Average of ``k`` trees grown on bootstrap resamples.

    A resample holds ``row_sample_rate * n`` rows drawn with replacement;
    with ``bootstrap=False`` each tree sees every row once.
    """
    if k < 1:
        raise ValueError("need at least one tree")
    x = np.asarray(x, dtype=float)
    y = np.asarray(y, dtype=float)
    if len(y) == 0:
        raise ValueError("cannot fit a forest to empty data")
    seed = rng if isinstance(rng, (int, np.integer)) else None
    streams = np.random.SeedSequence(seed if seed is not None else
                                     np.random.default_rng(rng).integers(2 ** 63)).spawn(k)
    binner = Binner(x, params.n_bins)
    codes = binner.transform(x)
    n = len(y)
    n_rows = max(1, int(round(params.row_sample_rate * n)))
    trees = []
    for ss in streams:
        r = np.random.default_rng(ss)
        if bootstrap:
            rows = r.integers(0, n, size=n_rows)
        elif n_rows < n:
            rows = np.sort(r.choice(n, n_rows, replace=False))
        else:
            rows = np.arange(n)
        feats = _tree_features(r, x.shape[1], params.col_sample_rate_per_tree)
        trees.append(fit_regression_tree(x, y, params, r, binner=binner, codes=codes,
                                         rows=rows, features=feats))
    return EnsembleFit("RF", trees, seed, len(trees))


def early_stop(scores, tolerance: float = STOPPING_TOLERANCE, rounds: int = STOPPING_ROUNDS) -> bool:
    """True when none of the last ``rounds`` scores beat the best earlier score
    by at least a relative ``tolerance``."""
    if len(scores) <= rounds:
        return False
    reference = min(scores[:-rounds])
    return min(scores[-rounds:]) > reference * (1.0 - tolerance)


def fit_gbm(x, y, params: TreeParams = TreeParams(), learn_rate: float = 0.1,
            annealing: float = 1.0, max_trees: int = 1000,
            x_valid=None, y_valid=None, early_stopping: Optional[tuple] = (STOPPING_TOLERANCE, STOPPING_ROUNDS),
            score_every: int = SCORE_EVERY, rng=None) -> EnsembleFit:
    """Stagewise squared-loss boosting.

    Stage ``m`` fits a tree to the current residuals and adds it with rate
    ``learn_rate * annealing**m``.  With early stopping, validation MSE is
    scored every ``score_every`` trees and fitting stops once it has failed to
    improve by the relative tolerance for the given number of consecutive
    scores; the ensemble is then cut back to its best-scoring size.
    """
    if not 0 < learn_rate <= 1:
        raise ValueError("learn_rate must lie in (0, 1]")
    if not 0 < annealing <= 1:
        raise ValueError("annealing must lie in (0, 1]")
    x = np.asarray(x, dtype=float)
    y = np.asarray(y, dtype=float)
    if early_stopping is not None and (x_valid is None or y_valid is None or len(y_valid) == 0):
        raise ValueError("early stopping needs a validation set")
    seed = rng if isinstance(rng, (int, np.integer)) else None
    r = np.random.default_rng(rng)
    binner = Binner(x, params.n_bins)
    codes = binner.transform(x)
    n = len(y)
    n_rows = max(1, int(round(params.row_sample_rate * n)))
    init = float(np.mean(y))
    f_train = np.full(n, init)
    if x_valid is not None:
        x_valid = np.asarray(x_valid, dtype=float)
        y_valid = np.asarray(y_valid, dtype=float)
        f_valid = np.full(len(y_valid), init)
    trees, rates, scores, score_sizes = [], [], [], []
    for m in range(max_trees):
        resid = y - f_train
        rows = np.sort(r.choice(n, n_rows, replace=False)) if n_rows < n else np.arange(n)
        feats = _tree_features(r, x.shape[1], params.col_sample_rate_per_tree)
        tree = fit_regression_tree(x, resid, params, r, binner=binner, codes=codes, rows=rows,
                                   features=feats)
        rate = learn_rate * annealing ** m
        trees.append(tree)
        rates.append(rate)
        f_train += rate * tree.predict(x)
        if x_valid is not None:
            f_valid += rate * tree.predict(x_valid)
        if early_stopping is not None and (m + 1) % score_every == 0:
            scores.append(float(np.mean((y_valid - f_valid) ** 2)))
            score_sizes.append(m + 1)
            if early_stop(scores, *early_stopping):
                break
    used = len(trees)
    if scores:
        used = score_sizes[int(np.argmin(scores))]
    return EnsembleFit("GBM", trees, seed, used, init=init, rates=rates, learn_rate=learn_rate,
                       learn_rate_annealing=annealing, scores=scores)
