"""CSV ingestion and writing, event aggregation and run configuration."""

from __future__ import annotations

import csv
import os
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Mapping, Optional, Sequence

import numpy as np
import yaml
from scipy import sparse

from .features import (CENSUS_COLUMNS, CRIME_TYPES, POI_CATEGORIES, FeatureModes, FlowMatrix, PanelData,
                       get_setting)
from .spatial import ArealPartition, SpatialWeights, assign_points, build_weights

CENSUS_HEADER = ("unit_id", "population", "median_age", "male", "black", "asian", "hispanic", "vacancy",
                 "female_hh")
CRIME_HEADER = ("unit_id", "week", "property", "violent")
TWEETS_HEADER = ("unit_id", "week", "tweets_all", "tweets_night")
POI_HEADER = ("unit_id", "category", "count")
FLOWS_HEADER = ("week", "origin", "dest", "trips")
EDGES_HEADER = ("src", "dst")
POLYGONS_HEADER = ("unit_id", "ring_index", "vertex_index", "x", "y")

FILES = {
    "census": "census.csv", "crime": "crime.csv", "tweets": "tweets.csv", "poi": "poi.csv",
    "flows": "flows.csv", "edges": "edges.csv", "polygons": "polygons.csv",
}
OUTPUT_DIR_ENV = "CRIMEFLOW_OUTPUT_DIR"


class IngestError(ValueError):
    """Invalid input file; the message names file, line and column."""

    def __init__(self, path, line: Optional[int], column: Optional[str], message: str):
        self.path, self.line, self.column = str(path), line, column
        where = self.path
        if line is not None:
            where += f":{line}"
        if column is not None:
            where += f": column {column!r}"
        super().__init__(f"{where}: {message}")


class ConfigError(ValueError):
    pass


# ---------------------------------------------------------------- reading


def _rows(path: Path, header: Sequence[str]):
    """Yield (line_number, row dict) after checking the header exactly."""
    if not path.exists():
        raise IngestError(path, None, None, "file not found")
    with open(path, newline="", encoding="utf-8") as fh:
        reader = csv.reader(fh)
        try:
            got = next(reader)
        except StopIteration:
            raise IngestError(path, 1, None, f"empty file; expected header {','.join(header)}") from None
        got = [h.strip() for h in got]
        if tuple(got) != tuple(header):
            raise IngestError(path, 1, None,
                              f"header mismatch: expected columns {','.join(header)}; got {','.join(got)}")
        for row in reader:
            line = reader.line_num
            if not row or all(not c.strip() for c in row):
                continue
            if len(row) != len(header):
                raise IngestError(path, line, None, f"expected {len(header)} fields, got {len(row)}")
            yield line, dict(zip(header, (c.strip() for c in row)))


def _number(path, line, column, text, integer=False, nonneg=True):
    try:
        value = float(text)
    except ValueError:
        raise IngestError(path, line, column, f"not a number: {text!r}") from None
    if not np.isfinite(value):
        raise IngestError(path, line, column, f"not finite: {text!r}")
    if integer and value != int(value):
        raise IngestError(path, line, column, f"expected an integer, got {text!r}")
    if nonneg and value < 0:
        raise IngestError(path, line, column, f"must be non-negative, got {text!r}")
    return int(value) if integer else value


def _unit(path, line, column, text, index):
    if text not in index:
        raise IngestError(path, line, column, f"unknown unit id {text!r}")
    return index[text]


def resolve_paths(data_dir=None, overrides: Optional[Mapping] = None) -> dict:
    paths = {}
    for key, name in FILES.items():
        if overrides and overrides.get(key):
            paths[key] = Path(overrides[key])
        elif data_dir is not None:
            paths[key] = Path(data_dir) / name
    return paths


@dataclass
class Dataset:
    panel: PanelData
    weights: SpatialWeights
    partition: ArealPartition
    edges: list


def read_census(path: Path):
    units, values = [], []
    index = {}
    for line, row in _rows(path, CENSUS_HEADER):
        uid = row["unit_id"]
        if not uid:
            raise IngestError(path, line, "unit_id", "empty unit id")
        if uid in index:
            raise IngestError(path, line, "unit_id", f"duplicate unit id {uid!r}")
        vals = {}
        for c in CENSUS_HEADER[1:]:
            vals[c] = _number(path, line, c, row[c])
            if c not in ("population", "median_age") and vals[c] > 1:
                raise IngestError(path, line, c, f"share must lie in [0, 1], got {row[c]}")
        index[uid] = len(units)
        units.append(uid)
        values.append([vals[c] for c in CENSUS_COLUMNS])
    if len(units) < 2:
        raise IngestError(path, None, None, "need at least 2 units")
    return units, index, np.array(values, dtype=float)


def _weeks_contiguous(path, weeks: set):
    lo, hi = min(weeks), max(weeks)
    missing = sorted(set(range(lo, hi + 1)) - weeks)
    if missing:
        raise IngestError(path, None, "week", f"weeks not contiguous; missing {missing[:10]}")
    return lo, hi


def read_cell_panel(path: Path, header: Sequence[str], index: Mapping, integer_cols: Sequence[str],
                    weeks: Optional[tuple] = None):
    """(N, T) arrays per value column from ``unit_id,week,...`` rows covering every cell."""
    cells = {}
    week_set = set()
    for line, row in _rows(path, header):
        i = _unit(path, line, "unit_id", row["unit_id"], index)
        wk = _number(path, line, "week", row["week"], integer=True, nonneg=False)
        if (i, wk) in cells:
            raise IngestError(path, line, None, f"duplicate cell (unit {row['unit_id']!r}, week {wk})")
        vals = [_number(path, line, c, row[c], integer=c in integer_cols) for c in header[2:]]
        cells[(i, wk)] = (line, vals)
        week_set.add(wk)
    if not cells:
        raise IngestError(path, None, None, "no data rows")
    lo, hi = _weeks_contiguous(path, week_set)
    if weeks is not None and (lo, hi) != weeks:
        raise IngestError(path, None, "week", f"weeks {lo}..{hi} do not match crime weeks {weeks[0]}..{weeks[1]}")
    n, t = len(index), hi - lo + 1
    out = {c: np.zeros((n, t)) for c in header[2:]}
    units = list(index)
    for i in range(n):
        for wk in range(lo, hi + 1):
            if (i, wk) not in cells:
                raise IngestError(path, None, None, f"missing cell (unit {units[i]!r}, week {wk})")
    for (i, wk), (_, vals) in cells.items():
        for c, v in zip(header[2:], vals):
            out[c][i, wk - lo] = v
    return out, (lo, hi)


def read_poi(path: Path, index: Mapping) -> np.ndarray:
    out = np.zeros((len(index), len(POI_CATEGORIES)))
    seen = set()
    for line, row in _rows(path, POI_HEADER):
        i = _unit(path, line, "unit_id", row["unit_id"], index)
        cat = row["category"]
        if cat not in POI_CATEGORIES:
            raise IngestError(path, line, "category", f"unknown category {cat!r}")
        if (i, cat) in seen:
            raise IngestError(path, line, None, f"duplicate cell (unit {row['unit_id']!r}, category {cat})")
        seen.add((i, cat))
        out[i, POI_CATEGORIES.index(cat)] = _number(path, line, "count", row["count"], integer=True)
    return out


def read_flows(path: Path, index: Mapping, weeks: tuple) -> list[FlowMatrix]:
    lo, hi = weeks
    n = len(index)
    data = {wk: ([], [], []) for wk in range(lo, hi + 1)}
    seen = set()
    for line, row in _rows(path, FLOWS_HEADER):
        wk = _number(path, line, "week", row["week"], integer=True, nonneg=False)
        if not lo <= wk <= hi:
            raise IngestError(path, line, "week", f"week {wk} outside crime weeks {lo}..{hi}")
        i = _unit(path, line, "origin", row["origin"], index)
        j = _unit(path, line, "dest", row["dest"], index)
        if i == j:
            raise IngestError(path, line, "dest", "within-unit trips are not allowed (f_ii = 0)")
        if (wk, i, j) in seen:
            raise IngestError(path, line, None, f"duplicate flow (week {wk}, {row['origin']} -> {row['dest']})")
        seen.add((wk, i, j))
        trips = _number(path, line, "trips", row["trips"])
        r, c, v = data[wk]
        r.append(i)
        c.append(j)
        v.append(trips)
    return [FlowMatrix(wk, sparse.csr_matrix((v, (r, c)), shape=(n, n)))
            for wk, (r, c, v) in sorted(data.items())]


def read_edges(path: Path, index: Mapping) -> list[tuple]:
    edges = []
    for line, row in _rows(path, EDGES_HEADER):
        a, b = row["src"], row["dst"]
        _unit(path, line, "src", a, index)
        _unit(path, line, "dst", b, index)
        if a == b:
            raise IngestError(path, line, "dst", f"self-edge on unit {a!r}")
        edges.append((a, b))
    return edges


def read_polygons(path: Path, index: Mapping) -> list:
    rings: dict = {}
    for line, row in _rows(path, POLYGONS_HEADER):
        i = _unit(path, line, "unit_id", row["unit_id"], index)
        r = _number(path, line, "ring_index", row["ring_index"], integer=True)
        v = _number(path, line, "vertex_index", row["vertex_index"], integer=True)
        x = _number(path, line, "x", row["x"], nonneg=False)
        y = _number(path, line, "y", row["y"], nonneg=False)
        key = (i, r)
        if v in rings.setdefault(key, {}):
            raise IngestError(path, line, "vertex_index", f"duplicate vertex {v} in ring {r}")
        rings[key][v] = (x, y)
    polygons = [[] for _ in index]
    units = list(index)
    for (i, r) in sorted(rings):
        verts = rings[(i, r)]
        polygons[i].append(np.array([verts[k] for k in sorted(verts)], dtype=float))
    for i, rs in enumerate(polygons):
        if not rs:
            raise IngestError(path, None, "unit_id", f"unit {units[i]!r} has no polygon")
    return polygons


def ingest(data_dir=None, paths: Optional[Mapping] = None) -> Dataset:
    """Read and cross-validate a full input file set into a panel and weights."""
    p = resolve_paths(data_dir, paths)
    for key in ("census", "crime", "tweets", "poi", "flows", "edges"):
        if key not in p:
            raise ConfigError(f"no path given for the {key} file")
    units, index, census = read_census(p["census"])
    crime, weeks = read_cell_panel(p["crime"], CRIME_HEADER, index, CRIME_TYPES)
    tweets, _ = read_cell_panel(p["tweets"], TWEETS_HEADER, index, ("tweets_all", "tweets_night"), weeks)
    bad = np.argwhere(tweets["tweets_night"] > tweets["tweets_all"])
    if bad.size:
        i, k = bad[0]
        raise IngestError(p["tweets"], None, "tweets_night",
                          f"night tweets exceed all tweets for unit {units[i]!r}, week {weeks[0] + k}")
    poi = read_poi(p["poi"], index)
    flows = read_flows(p["flows"], index, weeks)
    edges = read_edges(p["edges"], index)
    polygons = None
    if "polygons" in p and p["polygons"].exists():
        polygons = read_polygons(p["polygons"], index)
    partition = ArealPartition(tuple(units), polygons)
    w = build_weights(partition, edges)
    panel = PanelData(tuple(units), {c: crime[c].astype(np.int64) for c in CRIME_TYPES}, census,
                      tweets["tweets_all"], tweets["tweets_night"], poi, tuple(flows), first_week=weeks[0])
    return Dataset(panel, w, partition, edges)


# ---------------------------------------------------------------- writing


def fmt(v) -> str:
    """Shortest text that parses back to the same value."""
    if isinstance(v, (bool, np.bool_)):
        return str(int(v))
    if isinstance(v, (int, np.integer)):
        return str(int(v))
    if isinstance(v, (float, np.floating)):
        v = float(v)
        if v.is_integer() and abs(v) < 2 ** 53:
            return str(int(v))
        return repr(v)
    return str(v)


def write_csv(path, header: Sequence[str], rows: Iterable) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w", newline="", encoding="utf-8") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(header)
        for row in rows:
            if isinstance(row, Mapping):
                row = [row[h] for h in header]
            writer.writerow([fmt(v) for v in row])
    return path


def write_dataset(out_dir, panel: PanelData, edges: Sequence[tuple],
                  partition: Optional[ArealPartition] = None) -> dict:
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    units = panel.units
    weeks = range(panel.first_week, panel.last_week + 1)
    col = {c: j for j, c in enumerate(CENSUS_COLUMNS)}
    written = {
        "census": write_csv(out / FILES["census"], CENSUS_HEADER,
                            ([u, *(panel.census[i, col[c]] for c in CENSUS_HEADER[1:])]
                             for i, u in enumerate(units))),
        "crime": write_csv(out / FILES["crime"], CRIME_HEADER,
                           ([u, wk, *(panel.crime[c][i, k] for c in CRIME_TYPES)]
                            for k, wk in enumerate(weeks) for i, u in enumerate(units))),
        "tweets": write_csv(out / FILES["tweets"], TWEETS_HEADER,
                            ([u, wk, panel.tweets_all[i, k], panel.tweets_night[i, k]]
                             for k, wk in enumerate(weeks) for i, u in enumerate(units))),
        "poi": write_csv(out / FILES["poi"], POI_HEADER,
                         ([u, c, panel.poi[i, j]] for i, u in enumerate(units)
                          for j, c in enumerate(POI_CATEGORIES))),
        "flows": write_csv(out / FILES["flows"], FLOWS_HEADER, _flow_rows(panel)),
        "edges": write_csv(out / FILES["edges"], EDGES_HEADER, edges),
    }
    if partition is not None and partition.polygons is not None:
        written["polygons"] = write_csv(
            out / FILES["polygons"], POLYGONS_HEADER,
            ([u, r, v, x, y] for u, rings in zip(units, partition.polygons)
             for r, ring in enumerate(rings) for v, (x, y) in enumerate(ring[:-1])))
    return written


def _flow_rows(panel: PanelData):
    for f in panel.flows:
        coo = f.entries.tocoo()
        order = np.lexsort((coo.col, coo.row))
        for r, c, v in zip(coo.row[order], coo.col[order], coo.data[order]):
            yield [f.week, panel.units[r], panel.units[c], v]


# ---------------------------------------------------------------- events


@dataclass(frozen=True)
class CrimeEvent:
    x: float
    y: float
    week: int
    crime_type: str = "property"


@dataclass
class AggregationResult:
    counts: dict  # crime type -> (N, T) int array
    unassigned: dict  # crime type -> count of events outside every polygon
    first_week: int


def aggregate_events(events: Sequence[CrimeEvent], partition: ArealPartition, weeks: tuple,
                     crime_types: Sequence[str] = CRIME_TYPES) -> AggregationResult:
    """Per-unit, per-week event tallies; events outside all polygons are counted separately."""
    lo, hi = weeks
    t = hi - lo + 1
    counts = {c: np.zeros((partition.n, t), dtype=np.int64) for c in crime_types}
    unassigned = {c: 0 for c in crime_types}
    for e in events:
        if not lo <= e.week <= hi:
            raise ValueError(f"event week {e.week} outside {lo}..{hi}")
        if e.crime_type not in counts:
            raise ValueError(f"unknown crime type {e.crime_type!r}")
    if events:
        owners = assign_points(partition, [(e.x, e.y) for e in events])
        index = partition.index
        for e, uid in zip(events, owners):
            if uid is None:
                unassigned[e.crime_type] += 1
            else:
                counts[e.crime_type][index[uid], e.week - lo] += 1
    return AggregationResult(counts, unassigned, lo)


# ---------------------------------------------------------------- configuration


@dataclass
class RunConfig:
    data_dir: Optional[Path] = None
    paths: dict = field(default_factory=dict)
    crime_type: str = "property"
    settings: tuple = tuple(range(1, 9))
    models: tuple = ("LR", "SAR", "CAR", "GLM", "GLMM", "RF", "GBM", "MLP")
    modes: FeatureModes = field(default_factory=FeatureModes)
    h: Optional[int] = None
    seed: Optional[int] = 0
    grid_file: Optional[Path] = None
    output_dir: Path = Path("out")
    jobs: int = 1

    KEYS = ("data_dir", "paths", "crime_type", "settings", "models", "features", "h", "seed", "grid_file",
            "output_dir", "jobs")

    @classmethod
    def from_mapping(cls, raw: Mapping, base: Optional[Path] = None) -> "RunConfig":
        unknown = set(raw) - set(cls.KEYS)
        if unknown:
            raise ConfigError(f"unknown configuration keys: {', '.join(sorted(unknown))}")
        base = base or Path(".")

        def rel(p):
            return None if p is None else (base / p if not Path(p).is_absolute() else Path(p))

        feats = raw.get("features") or {}
        try:
            modes = FeatureModes(feats.get("twitter", "log_night"), feats.get("taxi", "destination"),
                                 feats.get("poi", "counts"))
        except ValueError as exc:
            raise ConfigError(str(exc)) from None
        cfg = cls(
            data_dir=rel(raw.get("data_dir")),
            paths={k: rel(v) for k, v in (raw.get("paths") or {}).items()},
            crime_type=raw.get("crime_type", "property"),
            settings=tuple(int(s) for s in raw.get("settings", range(1, 9))),
            models=tuple(str(m).upper() for m in raw.get("models", cls.models)),
            modes=modes,
            h=raw.get("h"),
            seed=raw.get("seed", 0),
            grid_file=rel(raw.get("grid_file")),
            output_dir=rel(raw.get("output_dir", "out")),
            jobs=int(raw.get("jobs", 1)),
        )
        env_out = os.environ.get(OUTPUT_DIR_ENV)
        if env_out:
            cfg.output_dir = Path(env_out)
        return cfg

    @classmethod
    def load(cls, path) -> "RunConfig":
        path = Path(path)
        if not path.exists():
            raise ConfigError(f"{path}: configuration file not found")
        with open(path, encoding="utf-8") as fh:
            raw = yaml.safe_load(fh) or {}
        if not isinstance(raw, Mapping):
            raise ConfigError(f"{path}: expected a mapping of configuration keys")
        return cls.from_mapping(raw, path.parent)

    def validate(self) -> "RunConfig":
        from .evaluation import ALL_KINDS

        if self.crime_type not in CRIME_TYPES:
            raise ConfigError(f"crime_type must be one of {', '.join(CRIME_TYPES)}")
        for s in self.settings:
            get_setting(s)
        for m in self.models:
            if m not in ALL_KINDS:
                raise ConfigError(f"unknown model kind {m!r}")
        if any(m in ("RF", "GBM", "MLP") for m in self.models) and self.seed is None:
            raise ConfigError("a seed is required when stochastic models are requested")
        if self.data_dir is not None and not Path(self.data_dir).is_dir():
            raise ConfigError(f"data directory {self.data_dir} does not exist")
        for key, p in self.paths.items():
            if key not in FILES:
                raise ConfigError(f"unknown input file key {key!r}")
            if not Path(p).exists():
                raise ConfigError(f"input file {p} does not exist")
        if self.grid_file is not None and not Path(self.grid_file).exists():
            raise ConfigError(f"grid file {self.grid_file} does not exist")
        if self.jobs < 1:
            raise ConfigError("jobs must be >= 1")
        return self
