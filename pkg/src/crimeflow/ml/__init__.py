"""Tree ensembles, a small ReLU network, grid search and permutation importance."""

from .ensemble import EnsembleFit, early_stop, fit_gbm, fit_rf
from .importance import ImportanceReport, WindowImportance, aggregate_ranks, permutation_importance
from .kernels import BACKEND
from .mlp import MlpFit, fit_mlp
from .search import DEFAULT_GRIDS, GridResult, grid_search, load_grid_file
from .tree import Binner, RegressionTree, TreeParams, fit_regression_tree

__all__ = [
    "BACKEND", "Binner", "DEFAULT_GRIDS", "EnsembleFit", "GridResult", "ImportanceReport", "MlpFit",
    "RegressionTree", "TreeParams", "WindowImportance", "aggregate_ranks", "early_stop",
    "fit_gbm", "fit_mlp", "fit_regression_tree", "fit_rf", "grid_search", "load_grid_file",
    "permutation_importance",
]
