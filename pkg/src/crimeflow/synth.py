"""Synthetic lattice panels with known parameters.

Weeks are simulated in order so that the taxi term of week ``t + 1`` is
computed from the (rounded) counts of week ``t``, exactly as the design
matrix sees them.  A few hidden burn-in weeks precede the emitted ones.
"""

from __future__ import annotations

import json
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Mapping

import numpy as np
from scipy import linalg, sparse
from scipy.sparse.linalg import splu

from .features import (CENSUS_COLUMNS, CRIME_TYPES, POI_CATEGORIES, FeatureModes, FlowMatrix, PanelData,
                       PoiFeatureMode, column_names, poi_feature, taxi_feature, twitter_feature)
from .io import CRIME_HEADER, fmt, write_csv, write_dataset
from .spatial import (ArealPartition, SpatialError, SpatialWeights, build_precision, build_weights,
                      lattice_edges, lattice_partition, spectral_bounds)

KINDS = ("SAR", "CAR", "GLMM")
BURN_IN = 4

GAUSSIAN_BETA = {
    "intercept": 2.0, "population": 5e-4, "median_age": -0.02, "male": 1.0, "black": 1.5, "asian": -0.5,
    "hispanic": 1.0, "female_hh": 2.0, "vacancy": 4.0, "log_tweets_night": 0.3,
    **{f"poi_{c}": 0.08 for c in POI_CATEGORIES}, "taxi": 0.0,
}
POISSON_BETA = {
    "intercept": 0.2, "population": 1e-4, "median_age": -0.005, "male": 0.3, "black": 0.4, "asian": -0.2,
    "hispanic": 0.3, "female_hh": 0.5, "vacancy": 1.0, "log_tweets_night": 0.1,
    **{f"poi_{c}": 0.02 for c in POI_CATEGORIES}, "taxi": 0.0,
}


@dataclass
class SyntheticSpec:
    """Generative settings.

    ``sigma`` is the noise standard deviation for the Gaussian kinds and the
    random-effect scale for GLMM.  ``beta`` overrides default coefficients by
    setting-8 column name (under ``twitter_mode``/``poi_mode``); ``taxi_coef``
    plants a taxi effect built under ``taxi_mode``.  Violent crime reuses the
    model with coefficients multiplied by ``violent_scale``.
    """

    g: int = 10
    n_weeks: int = 26
    kind: str = "CAR"
    rho: float = 0.0629
    delta: float = 0.1357
    sigma: float = 1.0
    beta: dict = field(default_factory=dict)
    taxi_coef: float = 0.0
    taxi_mode: str = "destination"
    twitter_mode: str = "log_night"
    poi_mode: str = "counts"
    kappa: float = 1.0
    trip_scale: float = 20.0
    violent_scale: float = 0.5
    seed: int = 0

    def __post_init__(self):
        self.kind = str(self.kind).upper()
        if self.kind not in KINDS:
            raise ValueError(f"unknown synthetic kind {self.kind!r}; expected one of {', '.join(KINDS)}")
        if self.g < 2 or self.n_weeks < 2:
            raise ValueError("need g >= 2 and n_weeks >= 2")
        if self.sigma < 0 or self.kappa <= 0 or self.trip_scale <= 0:
            raise ValueError("sigma must be >= 0; kappa and trip_scale must be positive")
        self.modes  # validates the mode names

    @property
    def modes(self) -> FeatureModes:
        return FeatureModes(self.twitter_mode, self.taxi_mode, self.poi_mode)

    @property
    def columns(self) -> list[str]:
        return column_names(8, self.modes)

    def coefficients(self) -> np.ndarray:
        base = POISSON_BETA if self.kind == "GLMM" else GAUSSIAN_BETA
        names = self.columns
        unknown = set(self.beta) - set(names)
        if unknown:
            raise ValueError(f"unknown coefficient names: {', '.join(sorted(unknown))}")
        out = []
        for n in names:
            if n in self.beta:
                out.append(float(self.beta[n]))
            elif n == "taxi":
                out.append(float(self.taxi_coef))
            else:
                # twitter/poi defaults are keyed by the default mode names
                key = n if n in base else ("log_tweets_night" if "tweets" in n else "poi_" + n.split("_", 2)[-1])
                out.append(base.get(key, 0.0))
        return np.array(out)

    @classmethod
    def from_mapping(cls, raw: Mapping) -> "SyntheticSpec":
        unknown = set(raw) - set(cls.__dataclass_fields__)
        if unknown:
            raise ValueError(f"unknown synthetic spec keys: {', '.join(sorted(unknown))}")
        return cls(**raw)


@dataclass
class SyntheticPanel:
    panel: PanelData
    weights: SpatialWeights
    partition: ArealPartition
    edges: list
    raw: dict  # crime type -> (N, T) continuous response (counts for GLMM)
    truth: dict
    spec: SyntheticSpec


def _smooth_field(w: SpatialWeights, rng, strength=0.2, steps=3) -> np.ndarray:
    """Standardised spatially correlated noise: repeated neighbour averaging."""
    z = rng.standard_normal(w.n)
    deg = np.maximum(w.neighbour_counts, 1)
    for _ in range(steps):
        z = (1 - strength) * z + strength * 4 * w.lag(z) / deg
    return (z - z.mean()) / (z.std() or 1.0)


def _mixed(w, rng, share=0.5) -> np.ndarray:
    return np.sqrt(share) * _smooth_field(w, rng) + np.sqrt(1 - share) * rng.standard_normal(w.n)


def _census(w, rng) -> np.ndarray:
    def logistic(a, b):
        return 1.0 / (1.0 + np.exp(-(a + b * _mixed(w, rng))))

    cols = {
        "population": np.round(2000.0 * np.exp(0.4 * _mixed(w, rng))),
        "median_age": np.round(36.0 + 5.0 * _mixed(w, rng), 1),
        "male": logistic(-0.08, 0.15),
        "black": logistic(-1.5, 1.0),
        "asian": logistic(-2.0, 0.8),
        "hispanic": logistic(-1.2, 0.9),
        "female_hh": logistic(-1.4, 0.5),
        "vacancy": logistic(-2.5, 0.5),
    }
    return np.column_stack([np.round(cols[c], 6) for c in CENSUS_COLUMNS])


def _centres(g: int) -> np.ndarray:
    r, c = np.divmod(np.arange(g * g), g)
    return np.column_stack([c + 0.5, r + 0.5])


def gravity_rates(pop, centres, kappa, scale) -> np.ndarray:
    """Expected trips ``scale * (pop_i / m) * (pop_j / m) * exp(-d_ij / kappa)``, zero diagonal."""
    d = np.sqrt(((centres[:, None, :] - centres[None, :, :]) ** 2).sum(-1))
    p = pop / pop.mean()
    lam = scale * np.outer(p, p) * np.exp(-d / kappa)
    np.fill_diagonal(lam, 0.0)
    return lam


def simulate_panel(spec: SyntheticSpec) -> SyntheticPanel:
    """Draw a full synthetic panel in memory."""
    rng = np.random.default_rng(np.random.SeedSequence([int(spec.seed), 20]))
    partition = lattice_partition(spec.g)
    edges = lattice_edges(spec.g)
    w = build_weights(partition, edges)
    n = w.n
    bounds = spectral_bounds(w)
    param = {"SAR": spec.rho, "CAR": spec.delta}.get(spec.kind)
    if param is not None and not bounds.contains(param):
        raise SpatialError(f"{spec.kind} parameter {param} outside spectral bounds "
                           f"({bounds.lower:.6g}, {bounds.upper:.6g})")

    census = _census(w, rng)
    poi = rng.poisson(3.0 * np.exp(0.5 * np.column_stack([_mixed(w, rng) for _ in POI_CATEGORIES])))
    poi = poi.astype(float)
    total = BURN_IN + spec.n_weeks
    tweet_rate = 20.0 * np.exp(0.5 * _mixed(w, rng))
    tweets_all = rng.poisson(tweet_rate[:, None] * np.exp(0.2 * rng.standard_normal((n, total)))).astype(float)
    tweets_night = rng.binomial(tweets_all.astype(np.int64), 0.3).astype(float)
    lam = gravity_rates(census[:, 0], _centres(spec.g), spec.kappa, spec.trip_scale)
    flows = [FlowMatrix(k, sparse.csr_matrix(rng.poisson(lam).astype(float))) for k in range(total)]

    beta = spec.coefficients()
    modes = spec.modes
    poi_x = poi_feature(poi, modes.poi)
    if modes.poi is not PoiFeatureMode.COUNTS:
        poi_x = poi_x[:, :-1]
    static = np.hstack([np.ones((n, 1)), census, poi_x])
    k_tw = 1 + len(CENSUS_COLUMNS)
    b_static = np.concatenate([beta[:k_tw], beta[k_tw + 1:-1]])
    b_tw, b_taxi = beta[k_tw], beta[-1]

    sigma = spec.sigma
    if spec.kind == "SAR":
        lu = splu(sparse.csc_matrix(sparse.identity(n) - spec.rho * w.entries))
        draw_noise = lambda r: sigma * r.standard_normal(n)  # noqa: E731
        respond = lu.solve
    elif spec.kind == "CAR":
        chol = linalg.cholesky(np.eye(n) - spec.delta * w.dense(), lower=True)
        draw_noise = lambda r: sigma * linalg.solve_triangular(chol.T, r.standard_normal(n))  # noqa: E731
        respond = None
    eta = None
    if spec.kind == "GLMM":
        vals, vecs = np.linalg.eigh(build_precision(w).q.toarray())
        keep = vals > 1e-9 * vals.max()
        eta = vecs[:, keep] @ (sigma / np.sqrt(vals[keep]) * rng.standard_normal(int(keep.sum())))

    raw, counts = {}, {}
    scales = {"property": 1.0, "violent": spec.violent_scale}
    for ctype in CRIME_TYPES:
        s = scales[ctype]
        noise_rng = np.random.default_rng(np.random.SeedSequence([int(spec.seed), 21, CRIME_TYPES.index(ctype)]))
        y_raw = np.zeros((n, total))
        y_cnt = np.zeros((n, total))
        for k in range(total):
            mean = static @ (s * b_static)
            if k > 0:
                tw = twitter_feature(tweets_all[:, k - 1], tweets_night[:, k - 1], modes.twitter)
                mean = mean + s * b_tw * tw + s * b_taxi * taxi_feature(flows[k - 1], y_cnt[:, k - 1], modes.taxi)
            if spec.kind == "GLMM":
                y = noise_rng.poisson(np.exp(mean + eta)).astype(float)
                y_raw[:, k] = y
                y_cnt[:, k] = y
                continue
            y = mean + draw_noise(noise_rng)
            if respond is not None:
                y = respond(y)
            y_raw[:, k] = y
            y_cnt[:, k] = np.round(np.maximum(0.0, y))
        raw[ctype] = y_raw[:, BURN_IN:]
        counts[ctype] = y_cnt[:, BURN_IN:].astype(np.int64)

    emitted = [FlowMatrix(k - BURN_IN + 1, flows[k].entries) for k in range(BURN_IN, total)]
    panel = PanelData(partition.units, counts, census, tweets_all[:, BURN_IN:], tweets_night[:, BURN_IN:],
                      poi, tuple(emitted), first_week=1)
    truth = {
        "kind": spec.kind, "columns": spec.columns, "beta": beta.tolist(),
        "violent_scale": spec.violent_scale, "sigma2": sigma ** 2,
        "rho": spec.rho if spec.kind == "SAR" else None,
        "delta": spec.delta if spec.kind == "CAR" else None,
        "taxi_mode": modes.taxi.value, "twitter_mode": modes.twitter.value, "poi_mode": modes.poi.value,
        "eta": None if eta is None else eta.tolist(),
        "spec": asdict(spec),
    }
    return SyntheticPanel(panel, w, partition, edges, raw, truth, spec)


def generate_synthetic(spec: SyntheticSpec, out_dir) -> dict:
    """Write the input file set plus ``crime_raw.csv`` and ``truth.json``."""
    sim = simulate_panel(spec)
    out = Path(out_dir)
    written = write_dataset(out, sim.panel, sim.edges, sim.partition)
    units = sim.panel.units
    written["crime_raw"] = write_csv(
        out / "crime_raw.csv", CRIME_HEADER,
        ([u, k + 1, *(sim.raw[c][i, k] for c in CRIME_TYPES)]
         for k in range(sim.panel.n_weeks) for i, u in enumerate(units)))
    path = out / "truth.json"
    path.write_text(json.dumps(sim.truth, indent=2, default=fmt) + "\n", encoding="utf-8")
    written["truth"] = path
    return written
