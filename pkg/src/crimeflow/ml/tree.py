"""Regression trees grown on global quantile histograms."""

from __future__ import annotations

from dataclasses import dataclass, replace

import numpy as np

from .kernels import best_split


@dataclass(frozen=True)
class TreeParams:
    max_depth: int = 7
    min_rows: int = 8
    n_bins: int = 64
    min_split_improvement: float = 1e-6
    row_sample_rate: float = 1.0
    col_sample_rate: float = 1.0
    col_sample_rate_per_tree: float = 1.0

    def __post_init__(self):
        if self.max_depth < 1:
            raise ValueError("max_depth must be >= 1")
        if self.min_rows < 1:
            raise ValueError("min_rows must be >= 1")
        if not 2 <= self.n_bins <= 65535:
            raise ValueError("n_bins must lie in [2, 65535]")
        if self.min_split_improvement < 0:
            raise ValueError("min_split_improvement must be >= 0")
        for name in ("row_sample_rate", "col_sample_rate", "col_sample_rate_per_tree"):
            v = getattr(self, name)
            if not 0 < v <= 1:
                raise ValueError(f"{name} must lie in (0, 1]")

    def with_(self, **kw) -> "TreeParams":
        return replace(self, **kw)


class Binner:
    """Per-column cut points from training quantiles.

    A value goes to bin ``b`` when it exceeds exactly ``b`` cut points, so
    ``code <= b`` is equivalent to ``x <= cuts[b]``.
    """

    def __init__(self, x: np.ndarray, n_bins: int):
        x = np.asarray(x, dtype=float)
        self.cuts = []
        for j in range(x.shape[1]):
            col = x[:, j]
            uniq = np.unique(col)
            if len(uniq) <= n_bins:
                cuts = uniq[:-1]
            else:
                qs = np.quantile(col, np.arange(1, n_bins) / n_bins)
                cuts = np.unique(qs)
                cuts = cuts[cuts < uniq[-1]]
            self.cuts.append(cuts)
        self.n_bins = np.array([len(c) + 1 for c in self.cuts], dtype=np.intp)

    def transform(self, x: np.ndarray) -> np.ndarray:
        x = np.asarray(x, dtype=float)
        codes = np.empty(x.shape, dtype=np.uint16)
        for j, cuts in enumerate(self.cuts):
            codes[:, j] = np.searchsorted(cuts, x[:, j], side="left")
        return np.ascontiguousarray(codes)


@dataclass
class RegressionTree:
    feature: np.ndarray
    threshold: np.ndarray
    left: np.ndarray
    right: np.ndarray
    value: np.ndarray

    @property
    def n_leaves(self) -> int:
        return int(np.sum(self.feature < 0))

    @property
    def depth(self) -> int:
        depth = np.zeros(len(self.feature), dtype=int)
        for i in range(len(self.feature)):
            if self.feature[i] >= 0:
                depth[self.left[i]] = depth[self.right[i]] = depth[i] + 1
        return int(depth.max())

    def predict(self, x: np.ndarray) -> np.ndarray:
        x = np.asarray(x, dtype=float)
        node = np.zeros(len(x), dtype=np.intp)
        active = np.flatnonzero(self.feature[node] >= 0)
        while active.size:
            nd = node[active]
            go_left = x[active, self.feature[nd]] <= self.threshold[nd]
            node[active] = np.where(go_left, self.left[nd], self.right[nd])
            active = active[self.feature[node[active]] >= 0]
        return self.value[node]


def fit_regression_tree(x, y, params: TreeParams = TreeParams(), rng=None, *,
                        binner: Binner | None = None, codes: np.ndarray | None = None,
                        rows: np.ndarray | None = None,
                        features: np.ndarray | None = None) -> RegressionTree:
    """Grow one tree by greedy variance reduction.

    ``binner``/``codes`` let ensembles share one global histogram; ``rows``
    (possibly with repeats, as from a bootstrap) selects the training sample
    and ``features`` restricts the columns available to this tree.  Per-split
    column sampling uses ``params.col_sample_rate``.
    """
    y = np.ascontiguousarray(y, dtype=float)
    if y.size == 0:
        raise ValueError("cannot fit a tree to empty data")
    if codes is None:
        binner = binner or Binner(x, params.n_bins)
        codes = binner.transform(x)
    elif binner is None:
        raise ValueError("pre-binned codes need their binner")
    rng = np.random.default_rng(rng)
    if rows is None:
        rows = np.arange(len(y), dtype=np.intp)
    rows = np.ascontiguousarray(rows, dtype=np.intp)
    if features is None:
        features = np.arange(codes.shape[1], dtype=np.intp)
    features = np.asarray(features, dtype=np.intp)
    n_split_cols = max(1, int(round(params.col_sample_rate * len(features))))

    feat, thr, left, right, value = [], [], [], [], []

    def new_node(idx):
        feat.append(-1)
        thr.append(0.0)
        left.append(-1)
        right.append(-1)
        value.append(float(np.mean(y[idx])))
        return len(feat) - 1

    stack = [(new_node(rows), rows, 0)]
    while stack:
        node, idx, depth = stack.pop()
        if depth >= params.max_depth or len(idx) < 2 * params.min_rows:
            continue
        yi = y[idx]
        sse = float(np.sum((yi - yi.mean()) ** 2))
        if sse <= 1e-12 * max(1.0, float(yi @ yi)):
            continue
        if n_split_cols < len(features):
            cols = np.sort(rng.choice(features, n_split_cols, replace=False))
        else:
            cols = features
        f, b, gain = best_split(codes, y, idx, np.ascontiguousarray(cols, dtype=np.intp),
                                binner.n_bins, params.min_rows)
        if f < 0 or gain <= 0 or gain < params.min_split_improvement * sse:
            continue
        mask = codes[idx, f] <= b
        li, ri = idx[mask], idx[~mask]
        feat[node] = int(f)
        thr[node] = float(binner.cuts[f][b])
        left[node] = new_node(li)
        right[node] = new_node(ri)
        stack.append((right[node], ri, depth + 1))
        stack.append((left[node], li, depth + 1))

    return RegressionTree(np.array(feat, dtype=np.intp), np.array(thr), np.array(left, dtype=np.intp),
                          np.array(right, dtype=np.intp), np.array(value))
