"""Pooled linear, spatial lag (SAR), spatial error (CAR) and Poisson models.

All fits take a week-major stacked design: rows ``t*N .. (t+1)*N - 1`` hold
the N units of the t-th week in the fitting sample.
"""

from __future__ import annotations

import enum
import logging
import warnings
from dataclasses import dataclass, field
from typing import Optional, Sequence

import numpy as np
from scipy import linalg, optimize, sparse, stats
from scipy.special import gammaln

from .features import DesignMatrix
from .spatial import DENSE_EIGEN_LIMIT, SpatialWeights, build_precision, spectral_bounds

log = logging.getLogger(__name__)

LOG2PI = np.log(2.0 * np.pi)
BOUNDARY_SHRINK = 1e-6


class ModelKind(enum.Enum):
    LR = "LR"
    SAR = "SAR"
    CAR = "CAR"
    GLM = "GLM"
    GLMM = "GLMM"

    @property
    def gaussian(self) -> bool:
        return self in (ModelKind.LR, ModelKind.SAR, ModelKind.CAR)

    @property
    def log_scale(self) -> bool:
        return self in (ModelKind.GLM, ModelKind.GLMM)


class EstimationError(ArithmeticError):
    """A fit failed numerically (rank deficiency, divergence, ...)."""


class BoundarySolution(UserWarning):
    pass


@dataclass
class ModelFit:
    kind: ModelKind
    beta: np.ndarray
    column_names: tuple
    std_errors: np.ndarray
    loglik: float
    n_units: int
    n_weeks: int
    sigma2: Optional[float] = None
    rho: Optional[float] = None
    delta: Optional[float] = None
    eta: Optional[np.ndarray] = None
    spatial_se: Optional[float] = None
    residual_state: dict = field(default_factory=dict)
    converged: bool = True
    flags: list = field(default_factory=list)
    extra: dict = field(default_factory=dict)

    def coefficient_rows(self) -> list[dict]:
        """Rows for the coefficient CSV (``variable,model,estimate,std_error,p_value,scale``)."""
        scale = "log" if self.kind.log_scale else "linear"
        out = []
        for name, b, se in zip(self.column_names, self.beta, self.std_errors):
            out.append(dict(variable=name, model=self.kind.value, estimate=float(b),
                            std_error=float(se), p_value=_p_value(b, se), scale=scale))
        for name in ("rho", "delta"):
            value = getattr(self, name)
            if value is not None:
                se = self.spatial_se if self.spatial_se is not None else float("nan")
                out.append(dict(variable=name, model=self.kind.value, estimate=float(value),
                                std_error=se, p_value=_p_value(value, se), scale="linear"))
        return out


@dataclass(frozen=True)
class SarConcentratedState:
    """OLS residuals of y and of the spatial lag Wy on the same design."""

    e0: np.ndarray
    eL: np.ndarray
    b0: np.ndarray
    bL: np.ndarray


@dataclass(frozen=True)
class CarFitState:
    """Cross-moments needed to evaluate B = I_T (x) (I_N - delta W) implicitly."""

    xx: np.ndarray
    xwx: np.ndarray
    xy: np.ndarray
    xwy: np.ndarray
    yy: float
    ywy: float


def _p_value(b, se) -> float:
    if not np.isfinite(se) or se <= 0:
        return float("nan")
    return float(2.0 * stats.norm.sf(abs(b / se)))


def _as_arrays(x, y, n_units: Optional[int]):
    if isinstance(x, DesignMatrix):
        names = x.column_names
        n_units = x.n_units if n_units is None else n_units
        x = x.x
    else:
        x = np.asarray(x, dtype=float)
        if x.ndim == 1:
            x = x[:, None]
        names = tuple(f"x{j}" for j in range(x.shape[1]))
    y = np.asarray(y, dtype=float).ravel()
    if x.shape[0] != y.shape[0]:
        raise ValueError(f"design has {x.shape[0]} rows but response has {y.shape[0]}")
    if not np.all(np.isfinite(x)) or not np.all(np.isfinite(y)):
        raise ValueError("design and response must be finite")
    if n_units is None:
        n_units = x.shape[0]
    if x.shape[0] % n_units:
        raise ValueError(f"{x.shape[0]} rows do not stack into blocks of {n_units} units")
    return x, y, tuple(names), n_units, x.shape[0] // n_units


def check_rank(x: np.ndarray, names: Sequence[str]) -> None:
    """Raise EstimationError naming collinear columns if X lacks full column rank."""
    n, k = x.shape
    if n <= k:
        raise EstimationError(f"need more rows than columns (rows={n}, columns={k})")
    _, r, piv = linalg.qr(x, mode="economic", pivoting=True)
    d = np.abs(np.diag(r))
    tol = max(n, k) * np.finfo(float).eps * (d[0] if d.size else 0.0)
    rank = int(np.sum(d > tol))
    if rank < k:
        bad = [names[j] for j in piv[rank:]]
        raise EstimationError(f"design is rank deficient; collinear columns: {', '.join(bad)}")


def _lag_stacked(w: SpatialWeights, v: np.ndarray, n_weeks: int) -> np.ndarray:
    """(I_T (x) W) v for a week-major stacked vector or matrix."""
    n = w.n
    if v.ndim == 1:
        return (w.entries @ v.reshape(n_weeks, n).T).T.ravel()
    k = v.shape[1]
    blocks = v.reshape(n_weeks, n, k)
    return np.concatenate([w.entries @ b for b in blocks]).reshape(n_weeks * n, k)


def _bracket(w: SpatialWeights) -> tuple[float, float]:
    b = spectral_bounds(w)
    return b.lower + BOUNDARY_SHRINK, b.upper - BOUNDARY_SHRINK


def _logdet_T(w: SpatialWeights, param: float, n_weeks: int) -> float:
    return n_weeks * w.logdet(param)


# ---------------------------------------------------------------- LR


def fit_lr(x, y, n_units: Optional[int] = None) -> ModelFit:
    x, y, names, n, t = _as_arrays(x, y, n_units)
    check_rank(x, names)
    beta, *_ = linalg.lstsq(x, y)
    resid = y - x @ beta
    nt = y.size
    sigma2 = float(resid @ resid / nt)
    xtx_inv = linalg.inv(x.T @ x)
    se = np.sqrt(np.maximum(np.diag(xtx_inv) * sigma2, 0.0))
    loglik = np.inf if sigma2 == 0 else -0.5 * nt * (LOG2PI + np.log(sigma2) + 1.0)
    return ModelFit(ModelKind.LR, beta, names, se, float(loglik), n, t, sigma2=sigma2,
                    residual_state={"residuals": resid})


# ---------------------------------------------------------------- SAR


def sar_state(x: np.ndarray, y: np.ndarray, w: SpatialWeights, n_weeks: int) -> SarConcentratedState:
    wy = _lag_stacked(w, y, n_weeks)
    q, _ = linalg.qr(x, mode="economic")
    e0 = y - q @ (q.T @ y)
    eL = wy - q @ (q.T @ wy)
    b0, *_ = linalg.lstsq(x, y)
    bL, *_ = linalg.lstsq(x, wy)
    return SarConcentratedState(e0, eL, b0, bL)


def sar_concentrated_nll(state: SarConcentratedState, rho: float, w: SpatialWeights,
                         n_weeks: int) -> float:
    """Negative log-likelihood with beta and sigma^2 profiled out."""
    nt = state.e0.size
    e = state.e0 - rho * state.eL
    sse = float(e @ e)
    ld = _logdet_T(w, rho, n_weeks)
    if not np.isfinite(ld) or sse <= 0:
        return np.inf
    return -ld + 0.5 * nt * LOG2PI + 0.5 * nt * np.log(sse / nt) + 0.5 * nt


def _sar_info_se(x, beta, sigma2, rho, w: SpatialWeights, n_weeks: int):
    n = w.n
    a = np.eye(n) - rho * w.dense()
    g = linalg.solve(a, w.dense(), assume_a="gen").T  # W A^-1 (symmetric W)
    mu = (x @ beta).reshape(n_weeks, n)
    gmu = (g @ mu.T).T.ravel()
    k = x.shape[1]
    info = np.zeros((k + 2, k + 2))
    info[:k, :k] = x.T @ x / sigma2
    info[:k, k] = info[k, :k] = x.T @ gmu / sigma2
    info[k, k] = n_weeks * (np.trace(g @ g) + np.sum(g * g)) + gmu @ gmu / sigma2
    info[k, k + 1] = info[k + 1, k] = n_weeks * np.trace(g) / sigma2
    info[k + 1, k + 1] = n * n_weeks / (2.0 * sigma2 ** 2)
    cov = linalg.inv(info)
    se = np.sqrt(np.maximum(np.diag(cov), 0.0))
    return se[:k], float(se[k])


def fit_sar(x, y, w: SpatialWeights, rho: Optional[float] = None) -> ModelFit:
    """Spatial lag model by concentrated maximum likelihood.

    ``rho`` fixes the spatial parameter instead of estimating it.
    """
    x, y, names, n, t = _as_arrays(x, y, w.n)
    check_rank(x, names)
    state = sar_state(x, y, w, t)
    lo, hi = _bracket(w)
    flags = []
    if rho is None:
        res = optimize.minimize_scalar(lambda r: sar_concentrated_nll(state, r, w, t),
                                       bounds=(lo, hi), method="bounded",
                                       options={"xatol": 1e-8, "maxiter": 500})
        rho = float(res.x)
        if min(rho - lo, hi - rho) < 1e-6:
            flags.append("boundary solution")
            warnings.warn(f"SAR spatial parameter {rho:.6f} is at the parameter boundary",
                          BoundarySolution, stacklevel=2)
    beta = state.b0 - rho * state.bL
    wy = _lag_stacked(w, y, t)
    resid = y - rho * wy - x @ beta
    nt = y.size
    sigma2 = float(resid @ resid / nt)
    loglik = -sar_concentrated_nll(state, rho, w, t)
    if n <= DENSE_EIGEN_LIMIT:
        se, rho_se = _sar_info_se(x, beta, sigma2, rho, w, t)
    else:
        se = np.sqrt(np.diag(linalg.inv(x.T @ x)) * sigma2)
        rho_se = float("nan")
    eps_bar = resid.reshape(t, n).mean(axis=0)
    return ModelFit(ModelKind.SAR, beta, names, se, float(loglik), n, t, sigma2=sigma2, rho=rho,
                    spatial_se=rho_se, flags=flags,
                    residual_state={"eps_bar": eps_bar, "residuals": resid, "state": state})


# ---------------------------------------------------------------- CAR


def car_state(x: np.ndarray, y: np.ndarray, w: SpatialWeights, n_weeks: int) -> CarFitState:
    wx = _lag_stacked(w, x, n_weeks)
    wy = _lag_stacked(w, y, n_weeks)
    return CarFitState(x.T @ x, x.T @ wx, x.T @ y, x.T @ wy, float(y @ y), float(y @ wy))


def _car_beta(state: CarFitState, delta: float):
    a = state.xx - delta * state.xwx
    b = state.xy - delta * state.xwy
    beta = linalg.solve(a, b, assume_a="sym")
    quad = (state.yy - delta * state.ywy) - float(beta @ b)
    return beta, quad


def car_concentrated_nll(state: CarFitState, delta: float, w: SpatialWeights, n_weeks: int) -> float:
    nt = w.n * n_weeks
    ld = _logdet_T(w, delta, n_weeks)
    if not np.isfinite(ld):
        return np.inf
    _, quad = _car_beta(state, delta)
    if quad <= 0:
        return np.inf
    return -0.5 * ld + 0.5 * nt * LOG2PI + 0.5 * nt * np.log(quad / nt) + 0.5 * nt


def car_loglik(x, y, beta, sigma2, delta, w: SpatialWeights, n_weeks: int) -> float:
    """Exact Gaussian log-likelihood with covariance sigma^2 (I_T (x) (I - delta W))^-1."""
    e = y - x @ beta
    quad = float(e @ e - delta * e @ _lag_stacked(w, e, n_weeks))
    nt = e.size
    return 0.5 * _logdet_T(w, delta, n_weeks) - 0.5 * nt * (LOG2PI + np.log(sigma2)) - quad / (2.0 * sigma2)


def fit_car(x, y, w: SpatialWeights, delta: Optional[float] = None) -> ModelFit:
    """Spatial error model by concentrated maximum likelihood.

    ``delta`` fixes the spatial parameter instead of estimating it.
    """
    x, y, names, n, t = _as_arrays(x, y, w.n)
    check_rank(x, names)
    state = car_state(x, y, w, t)
    lo, hi = _bracket(w)
    flags = []
    if delta is None:
        res = optimize.minimize_scalar(lambda d: car_concentrated_nll(state, d, w, t),
                                       bounds=(lo, hi), method="bounded",
                                       options={"xatol": 1e-8, "maxiter": 500})
        delta = float(res.x)
        if min(delta - lo, hi - delta) < 1e-6:
            flags.append("boundary solution")
            warnings.warn(f"CAR spatial parameter {delta:.6f} is at the parameter boundary",
                          BoundarySolution, stacklevel=2)
    if delta == 0.0:
        beta, *_ = linalg.lstsq(x, y)
    else:
        beta, _ = _car_beta(state, delta)
    resid = y - x @ beta
    nt = y.size
    quad = float(resid @ resid - delta * resid @ _lag_stacked(w, resid, t))
    sigma2 = quad / nt
    loglik = car_loglik(x, y, beta, sigma2, delta, w, t)
    xbx = state.xx - delta * state.xwx
    se = np.sqrt(np.maximum(np.diag(linalg.inv(xbx)) * sigma2, 0.0))
    delta_se = float("nan")
    if n <= DENSE_EIGEN_LIMIT:
        om = w.eigenvalues
        i_dd = 0.5 * t * np.sum(om ** 2 / (1 - delta * om) ** 2)
        i_ds = 0.5 * t * np.sum(om / (1 - delta * om)) / sigma2
        i_ss = nt / (2.0 * sigma2 ** 2)
        det = i_dd * i_ss - i_ds ** 2
        if det > 0:
            delta_se = float(np.sqrt(i_ss / det))
    unit_mean_resid = resid.reshape(t, n).mean(axis=0)
    return ModelFit(ModelKind.CAR, beta, names, se, float(loglik), n, t, sigma2=sigma2, delta=delta,
                    spatial_se=delta_se, flags=flags,
                    residual_state={"unit_mean_resid": unit_mean_resid, "residuals": resid})


# ---------------------------------------------------------------- Poisson


def _check_counts(y: np.ndarray) -> None:
    if np.any(y < 0) or np.any(y != np.round(y)):
        raise ValueError("Poisson models need non-negative integer counts")


def poisson_loglik(y, mu) -> float:
    return float(np.sum(y * np.log(np.where(y > 0, mu, 1.0)) - mu - gammaln(y + 1.0)))


def poisson_deviance(y, mu) -> float:
    ratio = np.where(y > 0, y / mu, 1.0)
    return float(2.0 * np.sum(y * np.log(ratio) - (y - mu)))


def fit_glm(x, y, n_units: Optional[int] = None, tol: float = 1e-8, max_iter: int = 100) -> ModelFit:
    """Poisson log-link regression by iteratively reweighted least squares."""
    x, y, names, n, t = _as_arrays(x, y, n_units)
    _check_counts(y)
    check_rank(x, names)
    mu = 0.5 * (y + y.mean()) + 1e-3
    eta = np.log(mu)
    z = eta + (y - mu) / mu
    beta = linalg.lstsq(x * np.sqrt(mu)[:, None], z * np.sqrt(mu))[0]
    dev = np.inf
    for it in range(1, max_iter + 1):
        eta = np.clip(x @ beta, -700, 700)
        mu = np.exp(eta)
        z = eta + (y - mu) / mu
        sw = np.sqrt(mu)
        new = linalg.lstsq(x * sw[:, None], z * sw)[0]
        step = new - beta
        # halve the step until the deviance does not increase
        for _ in range(30):
            cand = np.exp(np.clip(x @ (beta + step), -700, 700))
            new_dev = poisson_deviance(y, cand)
            if np.isfinite(new_dev) and new_dev <= dev * (1 + 1e-12) + 1e-12:
                break
            step *= 0.5
        beta = beta + step
        dev = new_dev
        if np.max(np.abs(step)) < tol:
            break
    else:
        raise EstimationError(f"Poisson IRLS did not converge in {max_iter} iterations "
                              "(possible separation or all-zero response)")
    mu = np.exp(x @ beta)
    info = x.T @ (x * mu[:, None])
    se = np.sqrt(np.maximum(np.diag(linalg.inv(info)), 0.0))
    return ModelFit(ModelKind.GLM, beta, names, se, poisson_loglik(y, mu), n, t,
                    extra={"deviance": dev, "iterations": it})


def glm_score(x, y, beta) -> np.ndarray:
    return x.T @ (y - np.exp(x @ beta))


def _constraint_matrix(w: SpatialWeights) -> np.ndarray:
    labels = w.components
    c = np.zeros((labels.max() + 1, w.n))
    c[labels, np.arange(w.n)] = 1.0
    return c


def fit_glmm(x, y, w: SpatialWeights, sigma2: Optional[float] = None, tol: float = 1e-6,
             max_iter: int = 200, sigma2_init: float = 0.1) -> ModelFit:
    """Poisson log-link model with a spatially structured random intercept per unit.

    The random effects have precision Q / sigma^2 with Q the graph Laplacian of
    ``w`` and sum to zero within each connected component.  (beta, eta) are
    found by penalised Newton/Fisher scoring; sigma^2 by the REML fixed-point
    update on the working model, unless ``sigma2`` is given.
    """
    x, y, names, n, t = _as_arrays(x, y, w.n)
    _check_counts(y)
    check_rank(x, names)
    k = x.shape[1]
    q = build_precision(w).dense()
    c = _constraint_matrix(w)
    m = c.shape[0]
    rank_q = n - m
    xb = x.reshape(t, n, k)
    yb = y.reshape(t, n)
    beta = fit_glm(x, y, n).beta if np.any(y > 0) else np.zeros(k)
    eta = np.zeros(n)
    fixed = sigma2 is not None
    s2 = float(sigma2) if fixed else float(sigma2_init)
    if s2 <= 0:
        raise ValueError("sigma2 must be positive")

    def objective(b, e, s):
        lin = np.clip(x @ b + np.tile(e, t), -700, 700)
        mu = np.exp(lin)
        return float(np.sum(y * lin - mu)) - float(e @ q @ e) / (2.0 * s)

    def kkt(b, e, s):
        mu = np.exp(np.clip(x @ b + np.tile(e, t), -700, 700))
        mub = mu.reshape(t, n)
        r = (y - mu)
        g = np.concatenate([x.T @ r, (yb - mub).sum(axis=0) - q @ e / s])
        h = np.zeros((k + n + m, k + n + m))
        h[:k, :k] = x.T @ (x * mu[:, None])
        xmz = np.einsum("tnk,tn->kn", xb, mub)
        h[:k, k:k + n] = xmz
        h[k:k + n, :k] = xmz.T
        h[k:k + n, k:k + n] = np.diag(mub.sum(axis=0)) + q / s
        h[k + n:, k:k + n] = c
        h[k:k + n, k + n:] = c.T
        return g, h

    converged = False
    history = []
    for outer in range(1, max_iter + 1):
        b_old, e_old, s_old = beta.copy(), eta.copy(), s2
        for _ in range(50):
            g, h = kkt(beta, eta, s2)
            rhs = np.concatenate([g, np.zeros(m)])
            try:
                step = linalg.solve(h, rhs, assume_a="sym")
            except linalg.LinAlgError as exc:
                raise EstimationError(f"GLMM scoring system is singular: {exc}") from None
            db, de = step[:k], step[k:k + n]
            f0 = objective(beta, eta, s2)
            a = 1.0
            for _ in range(30):
                if objective(beta + a * db, eta + a * de, s2) >= f0 - 1e-10 * abs(f0):
                    break
                a *= 0.5
            beta = beta + a * db
            eta = eta + a * de
            if max(np.max(np.abs(a * db)), np.max(np.abs(a * de))) < 1e-10:
                break
        g, h = kkt(beta, eta, s2)
        hinv = linalg.inv(h)
        c_ee = hinv[k:k + n, k:k + n]
        if not fixed:
            quad = float(eta @ q @ eta)
            df = rank_q - float(np.sum(q * c_ee)) / s2
            s2 = max(quad / df, 1e-10) if df > 1e-8 else 1e-10
        history.append(s2)
        theta_old = np.concatenate([b_old, e_old])
        theta = np.concatenate([beta, eta])
        rel = np.max(np.abs(theta - theta_old)) / max(np.max(np.abs(theta)), 1e-8)
        rel_s = abs(s2 - s_old) / max(s_old, 1e-12)
        if max(rel, rel_s) < tol:
            converged = True
            break
    flags = []
    if not converged:
        flags.append("not converged")
        warnings.warn(f"GLMM did not converge in {max_iter} outer iterations", RuntimeWarning,
                      stacklevel=2)
    g, h = kkt(beta, eta, s2)
    hinv = linalg.inv(h)
    se = np.sqrt(np.maximum(np.diag(hinv)[:k], 0.0))
    mu = np.exp(x @ beta + np.tile(eta, t))
    penalised = poisson_loglik(y, mu) - float(eta @ q @ eta) / (2.0 * s2)
    return ModelFit(ModelKind.GLMM, beta, names, se, poisson_loglik(y, mu), n, t, sigma2=s2,
                    eta=eta, converged=converged, flags=flags,
                    extra={"penalised_loglik": penalised, "outer_iterations": outer,
                           "sigma2_history": history, "fitted": mu})


# ---------------------------------------------------------------- prediction


def predict_one_step(fit: ModelFit, x_next, w: Optional[SpatialWeights] = None,
                     clamp: bool = True) -> np.ndarray:
    """Forecast the N units of the next week from its (N, K) covariates.

    Gaussian forecasts are clamped below at zero unless ``clamp`` is False.
    """
    if isinstance(x_next, DesignMatrix):
        x_next = x_next.x
    x_next = np.asarray(x_next, dtype=float)
    if x_next.ndim != 2 or x_next.shape != (fit.n_units, len(fit.beta)):
        raise ValueError(f"x_next must have shape ({fit.n_units}, {len(fit.beta)}), got {x_next.shape}")
    lin = x_next @ fit.beta
    kind = fit.kind
    if kind is ModelKind.LR:
        pred = lin
    elif kind is ModelKind.SAR:
        if w is None or "eps_bar" not in fit.residual_state or fit.rho is None:
            raise ValueError("SAR prediction needs the weights and a fitted SAR state")
        a = sparse.identity(w.n, format="csc") - fit.rho * w.entries.tocsc()
        pred = sparse.linalg.spsolve(a, lin + fit.residual_state["eps_bar"])
    elif kind is ModelKind.CAR:
        if w is None or "unit_mean_resid" not in fit.residual_state or fit.delta is None:
            raise ValueError("CAR prediction needs the weights and a fitted CAR state")
        pred = lin + fit.delta * (w.entries @ fit.residual_state["unit_mean_resid"])
    elif kind is ModelKind.GLM:
        pred = np.exp(lin)
    elif kind is ModelKind.GLMM:
        if fit.eta is None:
            raise ValueError("GLMM prediction needs fitted random effects")
        pred = np.exp(lin + fit.eta)
    else:  # pragma: no cover
        raise ValueError(f"unknown model kind {kind}")
    pred = np.asarray(pred, dtype=float)
    if clamp and kind.gaussian:
        pred = np.maximum(pred, 0.0)
    return pred


FITTERS = {
    ModelKind.LR: lambda x, y, w: fit_lr(x, y, w.n),
    ModelKind.SAR: fit_sar,
    ModelKind.CAR: fit_car,
    ModelKind.GLM: lambda x, y, w: fit_glm(x, y, w.n),
    ModelKind.GLMM: fit_glmm,
}


def fit_model(kind, x, y, w: SpatialWeights) -> ModelFit:
    kind = ModelKind(kind) if not isinstance(kind, ModelKind) else kind
    with warnings.catch_warnings():
        warnings.simplefilter("ignore", BoundarySolution)
        return FITTERS[kind](x, y, w)
