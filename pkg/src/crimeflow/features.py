"""Feature construction for crime panels.

Weeks are numbered from 1.  A design row for target week ``t + 1`` uses
census and POI (static), tweets of week ``t`` and the taxi flow of week
``t`` applied to crime counts of week ``t``.
"""

from __future__ import annotations

import enum
from dataclasses import dataclass, field
from typing import Iterable, Mapping, Optional

import numpy as np
from scipy import sparse

CENSUS_COLUMNS = (
    "population", "median_age", "male", "black", "asian", "hispanic", "female_hh", "vacancy",
)
CENSUS_SHARES = ("male", "black", "asian", "hispanic", "female_hh", "vacancy")
POI_CATEGORIES = (
    "nightlife", "food", "arts_entertainment", "residence", "shops", "travel",
    "outdoors_recreation", "college_education", "professional",
)
CRIME_TYPES = ("property", "violent")


class FeatureError(ValueError):
    pass


class TaxiFeatureMode(enum.Enum):
    RAW = "raw"
    SOURCE_NORMALISED = "source"
    DESTINATION_NORMALISED = "destination"


class TwitterFeatureMode(enum.Enum):
    ALL = "all"
    NIGHT = "night"
    LOG_ALL = "log_all"
    LOG_NIGHT = "log_night"


class PoiFeatureMode(enum.Enum):
    COUNTS = "counts"
    SHARES = "shares"


def parse_mode(kind, value):
    """Accept an enum member, its value or its name (case-insensitive)."""
    if isinstance(value, kind):
        return value
    text = str(value).strip().lower()
    for member in kind:
        if text in (member.value, member.name.lower()):
            return member
    choices = ", ".join(m.value for m in kind)
    raise FeatureError(f"unknown {kind.__name__} {value!r}; expected one of {choices}")


@dataclass(frozen=True)
class FeatureModes:
    twitter: TwitterFeatureMode = TwitterFeatureMode.LOG_NIGHT
    taxi: TaxiFeatureMode = TaxiFeatureMode.DESTINATION_NORMALISED
    poi: PoiFeatureMode = PoiFeatureMode.COUNTS

    def __post_init__(self):
        object.__setattr__(self, "twitter", parse_mode(TwitterFeatureMode, self.twitter))
        object.__setattr__(self, "taxi", parse_mode(TaxiFeatureMode, self.taxi))
        object.__setattr__(self, "poi", parse_mode(PoiFeatureMode, self.poi))


@dataclass(frozen=True)
class Setting:
    id: int
    include_poi: bool
    include_taxi: bool
    include_twitter: bool


SETTINGS = {
    1: Setting(1, False, False, False),
    2: Setting(2, True, False, False),
    3: Setting(3, True, True, False),
    4: Setting(4, True, False, True),
    5: Setting(5, False, True, True),
    6: Setting(6, False, True, False),
    7: Setting(7, False, False, True),
    8: Setting(8, True, True, True),
}


def get_setting(setting) -> Setting:
    if isinstance(setting, Setting):
        if SETTINGS.get(setting.id) != setting:
            raise FeatureError(f"setting {setting.id} does not match the defined feature groups")
        return setting
    try:
        return SETTINGS[int(setting)]
    except (KeyError, ValueError):
        raise FeatureError(f"unknown setting {setting!r}; expected 1-8") from None


@dataclass(frozen=True, eq=False)
class FlowMatrix:
    """Weekly origin x destination trip counts with an empty diagonal."""

    week: int
    entries: sparse.csr_matrix = field(repr=False)

    def __post_init__(self):
        m = sparse.csr_matrix(self.entries, dtype=float)
        m.sum_duplicates()
        if m.shape[0] != m.shape[1]:
            raise FeatureError(f"flow matrix for week {self.week} is not square")
        if m.nnz and m.data.min() < 0:
            raise FeatureError(f"negative flow in week {self.week}")
        if np.any(m.diagonal() != 0):
            raise FeatureError(f"flow matrix for week {self.week} has within-unit trips (f_ii != 0)")
        m.eliminate_zeros()
        object.__setattr__(self, "entries", m)

    @property
    def n(self) -> int:
        return self.entries.shape[0]


@dataclass(frozen=True, eq=False)
class PanelData:
    """N units observed over T weeks.

    ``crime`` maps crime type to an (N, T) integer array; ``tweets_all`` and
    ``tweets_night`` are (N, T); ``census`` is (N, 8) in ``CENSUS_COLUMNS``
    order and ``poi`` (N, 9) in ``POI_CATEGORIES`` order.
    """

    units: tuple
    crime: Mapping[str, np.ndarray]
    census: np.ndarray
    tweets_all: np.ndarray
    tweets_night: np.ndarray
    poi: np.ndarray
    flows: tuple
    first_week: int = 1
    _cache: dict = field(default_factory=dict, repr=False, compare=False)

    def __post_init__(self):
        units = tuple(self.units)
        object.__setattr__(self, "units", units)
        n = len(units)
        if len(set(units)) != n:
            raise FeatureError("unit identifiers must be unique")
        crime = {}
        t = None
        for name, arr in self.crime.items():
            arr = np.asarray(arr)
            if arr.ndim != 2 or arr.shape[0] != n:
                raise FeatureError(f"crime panel {name!r} must have shape (N, T)")
            if not np.all(np.isfinite(arr)) or np.any(arr < 0) or np.any(arr != np.round(arr)):
                raise FeatureError(f"crime panel {name!r} must hold non-negative integer counts")
            if t is None:
                t = arr.shape[1]
            elif arr.shape[1] != t:
                raise FeatureError("all temporal arrays must share T")
            crime[name] = arr.astype(np.int64)
        if t is None:
            raise FeatureError("at least one crime panel is required")
        object.__setattr__(self, "crime", crime)
        census = np.asarray(self.census, dtype=float)
        if census.shape != (n, len(CENSUS_COLUMNS)):
            raise FeatureError(f"census must have shape ({n}, {len(CENSUS_COLUMNS)})")
        shares = census[:, [CENSUS_COLUMNS.index(c) for c in CENSUS_SHARES]]
        if np.any(shares < 0) or np.any(shares > 1):
            raise FeatureError("census shares must lie in [0, 1]")
        object.__setattr__(self, "census", census)
        for name in ("tweets_all", "tweets_night"):
            arr = np.asarray(getattr(self, name), dtype=float)
            if arr.shape != (n, t):
                raise FeatureError(f"{name} must have shape ({n}, {t})")
            if np.any(arr < 0):
                raise FeatureError(f"{name} must be non-negative")
            object.__setattr__(self, name, arr)
        if np.any(self.tweets_night > self.tweets_all):
            raise FeatureError("night tweets exceed all tweets")
        poi = np.asarray(self.poi, dtype=float)
        if poi.shape != (n, len(POI_CATEGORIES)):
            raise FeatureError(f"poi must have shape ({n}, {len(POI_CATEGORIES)})")
        if np.any(poi < 0):
            raise FeatureError("poi counts must be non-negative")
        object.__setattr__(self, "poi", poi)
        flows = tuple(self.flows)
        if len(flows) != t:
            raise FeatureError(f"expected {t} weekly flow matrices, got {len(flows)}")
        for f in flows:
            if f.n != n:
                raise FeatureError(f"flow matrix for week {f.week} has wrong dimension")
        object.__setattr__(self, "flows", flows)

    @property
    def n_units(self) -> int:
        return len(self.units)

    @property
    def n_weeks(self) -> int:
        return next(iter(self.crime.values())).shape[1]

    @property
    def last_week(self) -> int:
        return self.first_week + self.n_weeks - 1

    def col(self, week: int) -> int:
        """Array column of a week number."""
        k = week - self.first_week
        if not 0 <= k < self.n_weeks:
            raise FeatureError(f"week {week} outside panel weeks {self.first_week}..{self.last_week}")
        return k

    def taxi_panel(self, crime_type: str, mode: TaxiFeatureMode) -> np.ndarray:
        """(N, T) taxi features; column k applies flow week k to crime week k."""
        mode = parse_mode(TaxiFeatureMode, mode)
        key = ("taxi", crime_type, mode)
        if key not in self._cache:
            y = self.crime[crime_type]
            out = np.empty(y.shape, dtype=float)
            for k, f in enumerate(self.flows):
                out[:, k] = taxi_feature(f, y[:, k], mode)
            self._cache[key] = out
        return self._cache[key]


def taxi_feature(f: FlowMatrix, y_prev, mode) -> np.ndarray:
    """Lagged crime of other units weighted by taxi flow.

    ``RAW`` weights by outgoing trips (``F @ y``); the normalised variants
    weight incoming trips ``f_ji`` by the source's total outflow or by the
    destination's total inflow.  Empty rows or columns contribute zero.
    """
    mode = parse_mode(TaxiFeatureMode, mode)
    y = np.asarray(y_prev, dtype=float)
    m = f.entries if isinstance(f, FlowMatrix) else FlowMatrix(0, f).entries
    if y.shape != (m.shape[0],):
        raise FeatureError(f"crime vector of length {y.shape} does not match flow dimension {m.shape[0]}")
    if mode is TaxiFeatureMode.RAW:
        return np.asarray(m @ y, dtype=float)
    if mode is TaxiFeatureMode.SOURCE_NORMALISED:
        outflow = np.asarray(m.sum(axis=1)).ravel()
        scaled = np.divide(y, outflow, out=np.zeros_like(y), where=outflow > 0)
        return np.asarray(m.T @ scaled, dtype=float)
    inflow = np.asarray(m.sum(axis=0)).ravel()
    total = np.asarray(m.T @ y, dtype=float)
    return np.divide(total, inflow, out=np.zeros_like(total), where=inflow > 0)


def twitter_feature(all_counts, night_counts, mode) -> np.ndarray:
    mode = parse_mode(TwitterFeatureMode, mode)
    a = np.asarray(all_counts, dtype=float)
    n = np.asarray(night_counts, dtype=float)
    if np.any(a < 0) or np.any(n < 0):
        raise FeatureError("tweet counts must be non-negative")
    if np.any(n > a):
        raise FeatureError("night tweets exceed all tweets")
    if mode is TwitterFeatureMode.ALL:
        return a.copy()
    if mode is TwitterFeatureMode.NIGHT:
        return n.copy()
    if mode is TwitterFeatureMode.LOG_ALL:
        return np.log1p(a)
    return np.log1p(n)


def poi_feature(poi_counts, mode) -> np.ndarray:
    mode = parse_mode(PoiFeatureMode, mode)
    c = np.asarray(poi_counts, dtype=float)
    if np.any(c < 0):
        raise FeatureError("poi counts must be non-negative")
    if mode is PoiFeatureMode.COUNTS:
        return c.copy()
    total = c.sum(axis=1, keepdims=True)
    return np.divide(c, total, out=np.zeros_like(c), where=total > 0)


TWITTER_COLUMN = {
    TwitterFeatureMode.ALL: "tweets_all",
    TwitterFeatureMode.NIGHT: "tweets_night",
    TwitterFeatureMode.LOG_ALL: "log_tweets_all",
    TwitterFeatureMode.LOG_NIGHT: "log_tweets_night",
}


def column_names(setting, modes: Optional[FeatureModes] = None) -> list[str]:
    setting = get_setting(setting)
    modes = modes or FeatureModes()
    names = ["intercept", *CENSUS_COLUMNS]
    if setting.include_twitter:
        names.append(TWITTER_COLUMN[modes.twitter])
    if setting.include_poi:
        if modes.poi is PoiFeatureMode.COUNTS:
            names += ["poi_" + c for c in POI_CATEGORIES]
        else:
            names += ["poi_share_" + c for c in POI_CATEGORIES[:-1]]
    if setting.include_taxi:
        names.append("taxi")
    return names


@dataclass(frozen=True, eq=False)
class DesignMatrix:
    """Stacked design; rows are week-major ``(unit, target_week)`` pairs."""

    rows: tuple
    x: np.ndarray
    column_names: tuple
    target_weeks: tuple
    n_units: int

    @property
    def k(self) -> int:
        return self.x.shape[1]

    def week_blocks(self) -> np.ndarray:
        """View as (T', N, K)."""
        return self.x.reshape(len(self.target_weeks), self.n_units, self.k)


def feature_block(panel: PanelData, setting, modes: FeatureModes, target_week: int,
                  crime_type: str = "property") -> np.ndarray:
    """(N, K) covariates for one target week, built from weeks before it only."""
    setting = get_setting(setting)
    if target_week - 1 < panel.first_week:
        raise FeatureError(f"lag unavailable for target week {target_week}")
    if target_week > panel.last_week + 1:
        raise FeatureError(f"target week {target_week} exceeds panel weeks")
    k = panel.col(target_week - 1)
    n = panel.n_units
    parts = [np.ones((n, 1)), panel.census]
    if setting.include_twitter:
        parts.append(twitter_feature(panel.tweets_all[:, k], panel.tweets_night[:, k], modes.twitter)[:, None])
    if setting.include_poi:
        poi = poi_feature(panel.poi, modes.poi)
        # shares sum to one, so the last category is the reference level
        parts.append(poi if modes.poi is PoiFeatureMode.COUNTS else poi[:, :-1])
    if setting.include_taxi:
        if crime_type not in panel.crime:
            raise FeatureError(f"unknown crime type {crime_type!r}")
        parts.append(panel.taxi_panel(crime_type, modes.taxi)[:, k][:, None])
    return np.hstack(parts)


def assemble_design(panel: PanelData, setting, modes: Optional[FeatureModes] = None,
                    target_weeks: Optional[Iterable[int]] = None,
                    crime_type: str = "property") -> tuple[DesignMatrix, np.ndarray]:
    """Stacked design and response for the given target weeks.

    Defaults to every week with a one-week lag available.
    """
    modes = modes or FeatureModes()
    setting = get_setting(setting)
    if crime_type not in panel.crime:
        raise FeatureError(f"unknown crime type {crime_type!r}")
    if target_weeks is None:
        target_weeks = range(panel.first_week + 1, panel.last_week + 1)
    weeks = tuple(int(w) for w in target_weeks)
    if not weeks:
        raise FeatureError("no target weeks requested")
    for w in weeks:
        if w > panel.last_week:
            raise FeatureError(f"target week {w} exceeds panel weeks {panel.first_week}..{panel.last_week}")
    blocks = [feature_block(panel, setting, modes, w, crime_type) for w in weeks]
    y = np.concatenate([panel.crime[crime_type][:, panel.col(w)] for w in weeks]).astype(float)
    rows = tuple((u, w) for w in weeks for u in panel.units)
    design = DesignMatrix(rows, np.vstack(blocks), tuple(column_names(setting, modes)), weeks,
                          panel.n_units)
    return design, y
