"""Hyperparameter grids and grid search on a held-out validation block."""

from __future__ import annotations

import itertools
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Mapping, Union

import numpy as np
import yaml

from .ensemble import fit_gbm, fit_rf
from .mlp import fit_mlp
from .tree import TreeParams

ML_KINDS = ("RF", "GBM", "MLP")

_TREE_KEYS = {"max_depth", "min_rows", "n_bins", "min_split_improvement", "row_sample_rate",
              "col_sample_rate", "col_sample_rate_per_tree"}
ALLOWED_KEYS = {
    "RF": _TREE_KEYS - {"col_sample_rate_per_tree"} | {"n_trees", "histogram_type"},
    "GBM": _TREE_KEYS | {"learn_rate", "learn_rate_annealing", "n_trees", "histogram_type"},
    "MLP": {"hidden", "epochs", "rate_decay", "batch_size"},
}

# Desk-scale defaults; the full ranges are in FULL_GRIDS.
DEFAULT_GRIDS = {
    "RF": {"max_depth": [7, 13], "min_rows": [8], "n_bins": [64], "min_split_improvement": [1e-6],
           "row_sample_rate": [0.8], "col_sample_rate": [0.6], "n_trees": [30]},
    "GBM": {"learn_rate": [0.05, 0.1], "learn_rate_annealing": [0.995], "max_depth": [3, 7],
            "min_rows": [8, 64], "n_bins": [64], "min_split_improvement": [1e-6],
            "row_sample_rate": [0.8], "col_sample_rate": [0.8], "col_sample_rate_per_tree": [1.0],
            "n_trees": [200]},
    "MLP": {"hidden": [[64], [128]], "epochs": [10], "rate_decay": [0.95]},
}


def _steps(lo, hi, step, digits=3):
    return [round(v, digits) for v in np.arange(lo, hi + step / 2, step)]


FULL_GRIDS = {
    "property": {
        "GBM": {"learn_rate": _steps(0.01, 0.2, 0.01), "learn_rate_annealing": _steps(0.990, 0.998, 0.001),
                "max_depth": list(range(13, 22)), "row_sample_rate": _steps(0.2, 1.0, 0.05, 2),
                "col_sample_rate": _steps(0.2, 1.0, 0.05, 2),
                "col_sample_rate_per_tree": _steps(0.2, 1.0, 0.05, 2),
                "min_rows": [4, 8, 16, 32, 64, 128, 256, 512],
                "n_bins": [16, 32, 64, 128, 256, 512, 1024],
                "min_split_improvement": [0, 1e-8, 1e-6, 1e-4],
                "histogram_type": ["quantiles_global"], "n_trees": [10000]},
        "RF": {"max_depth": list(range(11, 20)), "row_sample_rate": _steps(0.2, 1.0, 0.05, 2),
               "col_sample_rate": _steps(0.2, 1.0, 0.05, 2),
               "min_rows": [4, 8, 16, 32, 64, 128, 256, 512],
               "n_bins": [16, 32, 64, 128, 256, 512, 1024],
               "min_split_improvement": [0, 1e-8, 1e-6, 1e-4],
               "histogram_type": ["quantiles_global"], "n_trees": [10000]},
        "MLP": {"hidden": [[64], [128], [256], [512], [64, 64], [128, 128], [256, 256], [512, 512]],
                "epochs": [1, 10, 20], "rate_decay": [0.95, 0.99]},
    },
}
FULL_GRIDS["violent"] = {
    "GBM": {**FULL_GRIDS["property"]["GBM"], "max_depth": list(range(7, 16))},
    "RF": {**FULL_GRIDS["property"]["RF"], "max_depth": list(range(7, 16))},
    "MLP": FULL_GRIDS["property"]["MLP"],
}


def normalise_kind(kind: str) -> str:
    k = str(kind).upper()
    if k not in ML_KINDS:
        raise ValueError(f"unknown ML model kind {kind!r}; expected one of {', '.join(ML_KINDS)}")
    return k


def validate_grid(kind: str, grid: Mapping) -> dict:
    kind = normalise_kind(kind)
    out = {}
    for key, values in grid.items():
        if key not in ALLOWED_KEYS[kind]:
            raise ValueError(f"unknown {kind} grid parameter {key!r}")
        if not isinstance(values, list):
            values = [values]
        if not values:
            raise ValueError(f"{kind} grid parameter {key!r} has no values")
        if key == "histogram_type" and any(v != "quantiles_global" for v in values):
            raise ValueError("only the quantiles_global histogram type is supported")
        out[key] = values
    return out


def load_grid_file(path: Union[str, Path]) -> dict:
    """Read per-kind parameter lists, e.g. ``GBM: {learn_rate: [0.05, 0.1]}``."""
    with open(path, encoding="utf-8") as fh:
        raw = yaml.safe_load(fh) or {}
    if not isinstance(raw, dict):
        raise ValueError(f"{path}: expected a mapping of model kinds to parameter lists")
    return {normalise_kind(k): validate_grid(k, v or {}) for k, v in raw.items()}


def lattice(grid: Mapping) -> list[dict]:
    """Cells in deterministic order: keys as given, last key varying fastest."""
    keys = list(grid)
    return [dict(zip(keys, combo)) for combo in itertools.product(*(grid[k] for k in keys))]


def tree_params(cell: Mapping) -> TreeParams:
    return TreeParams(**{k: v for k, v in cell.items() if k in _TREE_KEYS})


def cell_rng(seed: int, window: int, cell: int) -> np.random.Generator:
    return np.random.default_rng(np.random.SeedSequence([int(seed), int(window), int(cell)]))


def fit_cell(kind: str, cell: Mapping, x, y, x_valid, y_valid, rng):
    kind = normalise_kind(kind)
    if kind == "RF":
        return fit_rf(x, y, tree_params(cell), k=int(cell.get("n_trees", 50)), rng=rng)
    if kind == "GBM":
        return fit_gbm(x, y, tree_params(cell), learn_rate=float(cell.get("learn_rate", 0.1)),
                       annealing=float(cell.get("learn_rate_annealing", 1.0)),
                       max_trees=int(cell.get("n_trees", 200)), x_valid=x_valid, y_valid=y_valid,
                       rng=rng)
    return fit_mlp(x, y, hidden=tuple(cell.get("hidden", (64,))), epochs=int(cell.get("epochs", 10)),
                   lr_decay=float(cell.get("rate_decay", 0.95)),
                   batch_size=cell.get("batch_size", 32), rng=rng)


@dataclass
class GridResult:
    best_index: int
    best_params: dict
    best_mse: float
    cells: list
    mse: np.ndarray
    best_model: object = field(repr=False, default=None)


def grid_search(model_kind: Union[str, Callable], grid: Mapping, train, validation,
                seed: int = 0, window: int = 0) -> GridResult:
    """Fit every cell on ``train`` and score it on ``validation``.

    ``model_kind`` is an ML kind name or a callable
    ``fit(cell, x, y, x_valid, y_valid, rng)`` returning an object with
    ``predict``.  Ties go to the earliest cell.
    """
    x, y = train
    xv, yv = validation
    if len(yv) == 0:
        raise ValueError("empty validation set")
    cells = lattice(grid)
    if not cells:
        raise ValueError("empty grid")
    fit = model_kind if callable(model_kind) else (lambda c, *a: fit_cell(model_kind, c, *a))
    mse = np.empty(len(cells))
    best, best_model = 0, None
    for i, cell in enumerate(cells):
        model = fit(cell, x, y, xv, yv, cell_rng(seed, window, i))
        err = np.asarray(yv, float) - model.predict(xv)
        mse[i] = float(np.mean(err * err))
        if mse[i] < mse[best] or i == 0:
            best, best_model = i, model
    return GridResult(best, dict(cells[best]), float(mse[best]), cells, mse, best_model)
