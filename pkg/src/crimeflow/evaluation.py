"""Rolling-window one-step-ahead evaluation, feature selection and setting comparison."""

from __future__ import annotations

import itertools
import logging
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field
from typing import Callable, Mapping, Optional, Sequence

import numpy as np

from .econ import ModelKind, fit_model, predict_one_step
from .features import (DesignMatrix, FeatureModes, PanelData, PoiFeatureMode, TaxiFeatureMode,
                       TwitterFeatureMode, assemble_design, feature_block, get_setting)
from .ml import importance as ml_importance
from .ml.search import DEFAULT_GRIDS, ML_KINDS, grid_search
from .spatial import SpatialWeights

log = logging.getLogger(__name__)

ECON_KINDS = tuple(k.value for k in ModelKind)
ALL_KINDS = ECON_KINDS + ML_KINDS


class WindowFailure(RuntimeError):
    def __init__(self, window: int, cause: BaseException):
        super().__init__(f"window ending in week {window} failed: {cause}")
        self.window = window
        self.cause = cause


@dataclass(frozen=True)
class EvaluationPlan:
    """Training windows ``first..t`` with target ``t + 1`` for ``t = h .. T - 1``."""

    n_weeks: int
    h: int
    first_week: int = 1

    def __post_init__(self):
        if self.h < 2:
            raise ValueError("the minimum training length h must be at least 2")
        if self.n_weeks < self.h + 1:
            raise ValueError(f"T = {self.n_weeks} leaves no forecast window for h = {self.h}")

    @classmethod
    def for_panel(cls, panel: PanelData, h: Optional[int] = None) -> "EvaluationPlan":
        t = panel.n_weeks
        return cls(t, t // 2 if h is None else int(h), panel.first_week)

    @property
    def windows(self) -> list[tuple[int, int]]:
        """(last training week, target week) pairs in week numbers."""
        off = self.first_week - 1
        return [(off + t, off + t + 1) for t in range(self.h, self.n_weeks)]


@dataclass
class WindowData:
    """Everything a forecaster may see for one window: data up to week ``t``."""

    t: int
    target_week: int
    x_train: np.ndarray
    y_train: np.ndarray
    train_weeks: tuple
    x_next: np.ndarray
    column_names: tuple
    w: SpatialWeights
    seed: int
    window_index: int


@dataclass
class WindowResult:
    t: int
    target_week: int
    forecast: np.ndarray
    actual: np.ndarray
    raw_forecast: np.ndarray
    meta: dict = field(default_factory=dict)

    @property
    def errors(self) -> np.ndarray:
        return self.actual - self.forecast

    @property
    def mse(self) -> float:
        e = self.errors
        return float(np.mean(e * e))


@dataclass
class EvaluationReport:
    model: str
    setting: int
    crime_type: str
    units: tuple
    modes: FeatureModes
    windows: list
    seed: int = 0

    @property
    def mse(self) -> float:
        sq = sum(float(np.sum(w.errors ** 2)) for w in self.windows)
        return sq / (len(self.units) * len(self.windows))

    @property
    def per_window_mse(self) -> np.ndarray:
        return np.array([w.mse for w in self.windows])

    def forecast_rows(self) -> list[dict]:
        rows = []
        for i, wr in enumerate(self.windows):
            for u, a, f, e in zip(self.units, wr.actual, wr.forecast, wr.errors):
                rows.append(dict(crime_type=self.crime_type, model=self.model, setting=self.setting,
                                 window=i + 1, unit_id=u, week=wr.target_week, actual=float(a),
                                 forecast=float(f), error=float(e)))
        return rows


Forecaster = Callable[[WindowData], tuple]


def econ_forecaster(kind) -> Forecaster:
    kind = ModelKind(kind)

    def forecast(data: WindowData):
        train = DesignMatrix((), data.x_train, data.column_names, data.train_weeks, data.w.n)
        fit = fit_model(kind, train, data.y_train, data.w)
        raw = predict_one_step(fit, data.x_next, data.w, clamp=False)
        pred = np.maximum(raw, 0.0) if kind.gaussian else raw
        meta = {"beta": fit.beta.tolist(), "flags": list(fit.flags)}
        if fit.rho is not None:
            meta["rho"] = fit.rho
        if fit.delta is not None:
            meta["delta"] = fit.delta
        if fit.sigma2 is not None:
            meta["sigma2"] = fit.sigma2
        return pred, raw, meta

    forecast.__name__ = kind.value
    return forecast


def ml_forecaster(kind: str, grid: Optional[Mapping] = None, importance: bool = False) -> Forecaster:
    """Grid search on weeks ``..t-2`` validated on the last two training weeks."""
    kind = kind.upper()
    grid = grid if grid is not None else DEFAULT_GRIDS[kind]

    def forecast(data: WindowData):
        n = data.x_next.shape[0]
        n_valid = 2 * n
        if len(data.y_train) <= n_valid:
            raise ValueError("window too short to hold out two validation weeks")
        x_tr, y_tr = data.x_train[:-n_valid], data.y_train[:-n_valid]
        x_va, y_va = data.x_train[-n_valid:], data.y_train[-n_valid:]
        # streams keyed on the training end week so that changing h leaves other windows intact
        res = grid_search(kind, grid, (x_tr, y_tr), (x_va, y_va), seed=data.seed, window=data.t)
        pred = np.asarray(res.best_model.predict(data.x_next), dtype=float)
        meta = {"best_params": res.best_params, "best_index": res.best_index,
                "grid_mse": res.mse.tolist()}
        if importance:
            imp = ml_importance.permutation_importance(
                res.best_model, x_va, y_va, rng=np.random.default_rng([data.seed, data.t, 7]),
                names=data.column_names)
            meta["importance"] = imp
        return pred, pred, meta

    forecast.__name__ = kind
    return forecast


def make_forecaster(model, grids: Optional[Mapping] = None, importance: bool = False) -> Forecaster:
    if callable(model):
        return model
    name = str(model).upper()
    if name in ECON_KINDS:
        return econ_forecaster(name)
    if name in ML_KINDS:
        return ml_forecaster(name, (grids or {}).get(name), importance)
    raise ValueError(f"unknown model kind {model!r}; expected one of {', '.join(ALL_KINDS)}")


def run_rolling(panel: PanelData, w: SpatialWeights, setting, model, plan: Optional[EvaluationPlan] = None,
                modes: Optional[FeatureModes] = None, crime_type: str = "property", seed: int = 0,
                grids: Optional[Mapping] = None, importance: bool = False) -> EvaluationReport:
    """Refit on weeks up to ``t`` and forecast ``t + 1`` for every window of ``plan``."""
    setting = get_setting(setting)
    modes = modes or FeatureModes()
    plan = plan or EvaluationPlan.for_panel(panel)
    forecaster = make_forecaster(model, grids, importance)
    name = getattr(forecaster, "__name__", str(model))
    windows = plan.windows
    last_target = windows[-1][1]
    design, y = assemble_design(panel, setting, modes, range(panel.first_week + 1, last_target + 1),
                                crime_type)
    n = panel.n_units
    results = []
    for i, (t, target) in enumerate(windows):
        n_train = (t - panel.first_week) * n
        # rows for targets <= t only; the target week's block is built from week t inputs
        start = (target - panel.first_week - 1) * n
        data = WindowData(t, target, design.x[:n_train], y[:n_train],
                          design.target_weeks[:t - panel.first_week], design.x[start:start + n],
                          design.column_names, w, seed, i)
        try:
            pred, raw, meta = forecaster(data)
        except Exception as exc:
            raise WindowFailure(t, exc) from exc
        actual = panel.crime[crime_type][:, panel.col(target)].astype(float)
        results.append(WindowResult(t, target, np.asarray(pred, float), actual, np.asarray(raw, float), meta))
    return EvaluationReport(name, setting.id, crime_type, panel.units, modes, results, seed)


def forecast_one(panel: PanelData, w: SpatialWeights, setting, model, target_week: Optional[int] = None,
                 modes: Optional[FeatureModes] = None, crime_type: str = "property", seed: int = 0,
                 grids: Optional[Mapping] = None) -> WindowResult:
    """Fit on every target week before ``target_week`` and forecast it.

    ``target_week`` may be one past the last panel week; ``actual`` is then NaN.
    """
    setting = get_setting(setting)
    modes = modes or FeatureModes()
    target = panel.last_week + 1 if target_week is None else int(target_week)
    if not panel.first_week + 2 <= target <= panel.last_week + 1:
        raise ValueError(f"target week {target} leaves no training data or lies beyond week "
                         f"{panel.last_week + 1}")
    forecaster = make_forecaster(model, grids)
    design, y = assemble_design(panel, setting, modes, range(panel.first_week + 1, target), crime_type)
    x_next = feature_block(panel, setting, modes, target, crime_type)
    t = target - 1
    data = WindowData(t, target, design.x, y, design.target_weeks, x_next, design.column_names, w, seed, 0)
    try:
        pred, raw, meta = forecaster(data)
    except Exception as exc:
        raise WindowFailure(t, exc) from exc
    if target <= panel.last_week:
        actual = panel.crime[crime_type][:, panel.col(target)].astype(float)
    else:
        actual = np.full(panel.n_units, np.nan)
    return WindowResult(t, target, np.asarray(pred, float), actual, np.asarray(raw, float), meta)


# ---------------------------------------------------------------- feature selection

TWITTER_ORDER = (TwitterFeatureMode.ALL, TwitterFeatureMode.NIGHT, TwitterFeatureMode.LOG_ALL,
                 TwitterFeatureMode.LOG_NIGHT)
TAXI_ORDER = (TaxiFeatureMode.RAW, TaxiFeatureMode.DESTINATION_NORMALISED, TaxiFeatureMode.SOURCE_NORMALISED)
POI_ORDER = (PoiFeatureMode.COUNTS, PoiFeatureMode.SHARES)


@dataclass
class FeatureSelectionResult:
    crime_type: str
    mse: dict  # FeatureModes -> rolling MSE
    winner: FeatureModes
    model: str = "CAR"
    setting: int = 8

    def table(self, poi) -> np.ndarray:
        """4 Twitter rows x 3 taxi columns (raw, destination, source) for one POI mode."""
        poi = PoiFeatureMode(poi) if not isinstance(poi, PoiFeatureMode) else poi
        return np.array([[self.mse[FeatureModes(tw, tx, poi)] for tx in TAXI_ORDER] for tw in TWITTER_ORDER])

    def rows(self) -> list[dict]:
        out = []
        for modes, value in self.mse.items():
            out.append(dict(crime_type=self.crime_type, twitter=modes.twitter.value, taxi=modes.taxi.value,
                            poi=modes.poi.value, mse=value, winner=int(modes == self.winner)))
        return out


def select_feature_definitions(panel: PanelData, w: SpatialWeights, plan: Optional[EvaluationPlan] = None,
                               crime_type: str = "property", model="CAR", setting=8) -> FeatureSelectionResult:
    """Rolling MSE of one model for all 4 x 3 x 2 feature-definition combinations."""
    mse = {}
    for poi, tw, tx in itertools.product(POI_ORDER, TWITTER_ORDER, TAXI_ORDER):
        modes = FeatureModes(tw, tx, poi)
        mse[modes] = run_rolling(panel, w, setting, model, plan, modes, crime_type).mse
    # first minimum in table order wins ties
    winner = min(mse, key=lambda m: mse[m])
    return FeatureSelectionResult(crime_type, mse, winner, str(model).upper(), get_setting(setting).id)


# ---------------------------------------------------------------- settings comparison


@dataclass
class SettingComparison:
    crime_type: str
    models: tuple
    settings: tuple
    mse: np.ndarray  # (models, settings)
    reports: dict = field(default_factory=dict, repr=False)

    @property
    def pct_vs_baseline(self) -> np.ndarray:
        """Percentage change of MSE against the first setting (negative = improvement)."""
        base = self.mse[:, [0]]
        return 100.0 * (self.mse - base) / base

    @property
    def mean_reduction(self) -> np.ndarray:
        """Average MSE reduction in percent per setting over models."""
        return -self.pct_vs_baseline.mean(axis=0)

    def rows(self) -> list[dict]:
        pct = self.pct_vs_baseline
        return [dict(crime_type=self.crime_type, model=m, setting=s, mse=float(self.mse[i, j]),
                     pct_vs_setting1=float(pct[i, j]))
                for i, m in enumerate(self.models) for j, s in enumerate(self.settings)]


def _run_job(args):
    panel, w, setting, model, plan, modes, crime_type, seed, grids, importance = args
    return run_rolling(panel, w, setting, model, plan, modes, crime_type, seed, grids, importance)


def compare_settings(panel: PanelData, w: SpatialWeights, models: Sequence = ALL_KINDS,
                     settings: Sequence[int] = tuple(range(1, 9)), plan: Optional[EvaluationPlan] = None,
                     modes: Optional[FeatureModes] = None, crime_type: str = "property", seed: int = 0,
                     grids: Optional[Mapping] = None, importance: bool = False,
                     jobs: int = 1) -> SettingComparison:
    settings = tuple(int(s) for s in settings)
    if settings[0] != 1:
        settings = (1,) + tuple(s for s in settings if s != 1)
    models = tuple(str(m).upper() for m in models)
    plan = plan or EvaluationPlan.for_panel(panel)
    tasks = [(panel, w, s, m, plan, modes, crime_type, seed, grids, importance)
             for m in models for s in settings]
    if jobs > 1:
        with ProcessPoolExecutor(max_workers=jobs) as pool:
            reports = list(pool.map(_run_job, tasks))
    else:
        reports = [_run_job(t) for t in tasks]
    mse = np.array([r.mse for r in reports]).reshape(len(models), len(settings))
    keyed = {(r.model, r.setting): r for r in reports}
    return SettingComparison(crime_type, models, settings, mse, keyed)


# ---------------------------------------------------------------- robustness


@dataclass
class RobustnessSummary:
    per_window: np.ndarray  # (windows, 5): min, q25, median, q75, max
    global_best_index: int
    global_best_mse: float
    global_best_per_window: np.ndarray

    def rows(self) -> list[dict]:
        out = []
        for i, (mn, q1, md, q3, mx) in enumerate(self.per_window):
            out.append(dict(window=i + 1, min=mn, q25=q1, median=md, q75=q3, max=mx,
                            global_best_cell=self.global_best_index,
                            global_best_window_mse=float(self.global_best_per_window[i]),
                            global_best_mean=self.global_best_mse))
        return out


def hyperparameter_robustness(grid_tables) -> RobustnessSummary:
    """Distribution of grid-cell validation MSEs per window.

    ``grid_tables`` holds one per-cell MSE array per window (same grid in every
    window), or an EvaluationReport from an ML forecaster.
    """
    if isinstance(grid_tables, EvaluationReport):
        grid_tables = [w.meta["grid_mse"] for w in grid_tables.windows]
    table = np.asarray([np.asarray(t, float) for t in grid_tables])
    if table.ndim != 2 or table.size == 0:
        raise ValueError("need one equally sized per-cell MSE table per window")
    per_window = np.column_stack([table.min(axis=1), *np.percentile(table, [25, 50, 75], axis=1),
                                  table.max(axis=1)])
    means = table.mean(axis=0)
    best = int(np.argmin(means))
    return RobustnessSummary(per_window, best, float(means[best]), table[:, best])


def importance_report(report: EvaluationReport, drop: Sequence[str] = ("intercept",)):
    """Mean permutation-importance rank per variable over the report's windows."""
    windows = []
    for w in report.windows:
        imp = w.meta.get("importance")
        if imp is None:
            raise ValueError("report was run without importance")
        keep = [j for j, n in enumerate(imp.names) if n not in drop]
        values = imp.importance[keep]
        windows.append(ml_importance.WindowImportance(tuple(imp.names[j] for j in keep), values,
                                                      ml_importance.rank_descending(values)))
    return ml_importance.aggregate_ranks(windows)
