import shutil
from pathlib import Path

import numpy as np
import pytest

from crimeflow.features import CENSUS_COLUMNS
from crimeflow.io import (ConfigError, CrimeEvent, IngestError, RunConfig, aggregate_events, fmt, ingest,
                          write_dataset)
from crimeflow.spatial import assign_points, lattice_partition
from crimeflow.synth import SyntheticSpec, simulate_panel

MINI = Path(__file__).parent / "fixtures" / "mini"


@pytest.fixture
def mini(tmp_path):
    d = tmp_path / "mini"
    shutil.copytree(MINI, d)
    return d


def edit(path, old, new):
    path.write_text(path.read_text().replace(old, new, 1))


def test_ingest_minimal_fixture():
    ds = ingest(MINI)
    p = ds.panel
    assert p.units == ("A", "B") and (p.first_week, p.last_week) == (1, 2)
    assert p.crime["property"].tolist() == [[5, 6], [3, 2]]
    assert p.crime["violent"].tolist() == [[1, 2], [0, 1]]
    assert p.census[1, CENSUS_COLUMNS.index("median_age")] == 41
    assert p.poi[0, :2].tolist() == [4, 7] and p.poi[1, -1] == 5 and p.poi.sum() == 18
    assert p.flows[0].entries.toarray().tolist() == [[0, 14], [9, 0]]
    assert p.flows[1].entries.toarray().tolist() == [[0, 11], [0, 0]]
    assert ds.weights.dense().tolist() == [[0, 1], [1, 0]]
    assert assign_points(ds.partition, [(0.5, 0.5), (1.5, 0.5)]) == ["A", "B"]


@pytest.mark.parametrize("fname, old, new, pattern", [
    ("crime.csv", "B,2,2,1", "C,2,2,1", r"crime\.csv:5: column 'unit_id': unknown unit id 'C'"),
    ("crime.csv", "B,2,2,1", "B,1,2,1", r"crime\.csv:5: duplicate cell \(unit 'B', week 1\)"),
    ("crime.csv", "A,2,6,2", "A,2,6.5,2", r"crime\.csv:4: column 'property': expected an integer"),
    ("crime.csv", "unit_id,week,property,violent", "unit,week,property,violent",
     r"crime\.csv:1: header mismatch: expected columns unit_id,week,property,violent"),
    ("crime.csv", "A,2,6,2\nB,2,2,1", "A,3,6,2\nB,3,2,1", r"weeks not contiguous; missing \[2\]"),
    ("crime.csv", "B,2,2,1\n", "", r"missing cell \(unit 'B', week 2\)"),
    ("tweets.csv", "A,1,40,10", "A,1,4,10", r"night tweets exceed all tweets for unit 'A', week 1"),
    ("tweets.csv", "A,2,35,9\nB,2,20,4\n", "", r"weeks 1\.\.1 do not match crime weeks 1\.\.2"),
    ("poi.csv", "B,shops,2", "B,bakery,2", r"poi\.csv:4: column 'category': unknown category 'bakery'"),
    ("flows.csv", "2,A,B,11", "2,A,A,11", r"flows\.csv:4: column 'dest': within-unit trips"),
    ("flows.csv", "2,A,B,11", "3,A,B,11", r"flows\.csv:4: column 'week': week 3 outside"),
    ("flows.csv", "1,B,A,9", "1,A,B,9", r"flows\.csv:3: duplicate flow"),
    ("flows.csv", "1,B,A,9", "1,B,A,-9", r"column 'trips': must be non-negative"),
    ("edges.csv", "A,B", "A,A", r"edges\.csv:2: column 'dst': self-edge"),
    ("census.csv", "0.49", "1.49", r"census\.csv:2: column 'male'"),
    ("census.csv", "B,800", "A,800", r"census\.csv:3"),
    ("crime.csv", "A,1,5,1", "A,1,5", r"crime\.csv:2: expected 4 fields, got 3"),
])
def test_ingest_errors_name_file_line_and_column(mini, fname, old, new, pattern):
    edit(mini / fname, old, new)
    with pytest.raises(IngestError, match=pattern):
        ingest(mini)


def test_missing_file(mini):
    (mini / "poi.csv").unlink()
    with pytest.raises(IngestError, match="file not found"):
        ingest(mini)


def test_optional_polygons_and_path_overrides(mini, tmp_path):
    (mini / "polygons.csv").unlink()
    assert ingest(mini).partition.polygons is None
    moved = tmp_path / "elsewhere.csv"
    shutil.move(mini / "edges.csv", moved)
    assert ingest(mini, {"edges": moved}).weights.n_edges == 1


def test_round_trip_is_bit_exact(tmp_path):
    sim = simulate_panel(SyntheticSpec(g=4, n_weeks=5, seed=3))
    write_dataset(tmp_path / "a", sim.panel, sim.edges, sim.partition)
    back = ingest(tmp_path / "a")
    p, q = sim.panel, back.panel
    assert q.units == p.units
    for c in p.crime:
        assert q.crime[c].tobytes() == p.crime[c].astype(np.int64).tobytes()
    assert q.census.tobytes() == p.census.tobytes()
    assert q.tweets_all.tobytes() == p.tweets_all.tobytes()
    assert q.poi.tobytes() == p.poi.tobytes()
    for fa, fb in zip(p.flows, q.flows):
        assert (fa.entries != fb.entries).nnz == 0
    write_dataset(tmp_path / "b", q, back.edges, back.partition)
    for f in (tmp_path / "a").iterdir():
        assert f.read_bytes() == (tmp_path / "b" / f.name).read_bytes()


def test_fmt():
    assert [fmt(3.0), fmt(np.int64(4)), fmt(0.1), fmt(True), fmt("x")] == ["3", "4", "0.1", "1", "x"]
    for v in np.random.default_rng(0).normal(size=100):
        assert float(fmt(v)) == v


# ---------------------------------------------------------------- events


def test_aggregate_hand_events():
    part = lattice_partition(2)
    ev = [CrimeEvent(0.5, 0.5, 1), CrimeEvent(1.5, 1.5, 2, "violent"), CrimeEvent(9, 9, 1)]
    res = aggregate_events(ev, part, (1, 2))
    assert res.counts["property"][:, 0].tolist() == [1, 0, 0, 0]
    assert res.counts["violent"][3].tolist() == [0, 1]
    assert res.unassigned == {"property": 1, "violent": 0}
    with pytest.raises(ValueError, match="outside"):
        aggregate_events([CrimeEvent(0.5, 0.5, 3)], part, (1, 2))
    with pytest.raises(ValueError, match="unknown crime type"):
        aggregate_events([CrimeEvent(0.5, 0.5, 1, "arson")], part, (1, 2))


def test_aggregate_matches_brute_force():
    g = 5
    part = lattice_partition(g)
    rng = np.random.default_rng(0)
    pts = rng.uniform(-0.5, g + 0.5, (1000, 2))
    weeks = rng.integers(3, 7, 1000)
    types = rng.choice(["property", "violent"], 1000)
    res = aggregate_events([CrimeEvent(x, y, int(w), str(c)) for (x, y), w, c in zip(pts, weeks, types)],
                           part, (3, 6))
    want = {c: np.zeros((g * g, 4), int) for c in ("property", "violent")}
    outside = {"property": 0, "violent": 0}
    for (x, y), w, c in zip(pts, weeks, types):
        if not (0 <= x <= g and 0 <= y <= g):
            outside[c] += 1
            continue
        # closed cells; ties go to the lowest index, i.e. the lower-left neighbour
        col = min(int(np.ceil(x)) - 1, g - 1) if x > 0 else 0
        row = min(int(np.ceil(y)) - 1, g - 1) if y > 0 else 0
        want[c][row * g + col, w - 3] += 1
    assert res.unassigned == outside
    for c in want:
        assert res.counts[c].tolist() == want[c].tolist()


# ---------------------------------------------------------------- configuration


def test_config_load_and_validate(monkeypatch):
    monkeypatch.delenv("CRIMEFLOW_OUTPUT_DIR", raising=False)
    cfg = RunConfig.load(MINI / "config.yaml").validate()
    assert cfg.data_dir == MINI / "." and cfg.output_dir == MINI / "out"
    assert cfg.settings == (1, 8) and cfg.models == ("LR", "RF") and cfg.seed == 7


def test_config_env_override(monkeypatch, tmp_path):
    monkeypatch.setenv("CRIMEFLOW_OUTPUT_DIR", str(tmp_path / "elsewhere"))
    assert RunConfig.load(MINI / "config.yaml").output_dir == tmp_path / "elsewhere"


@pytest.mark.parametrize("raw, pattern", [
    ({"colour": "red"}, "unknown configuration keys: colour"),
    ({"crime_type": "arson"}, "crime_type"),
    ({"settings": [9]}, "unknown setting"),
    ({"models": ["SVM"]}, "unknown model kind"),
    ({"models": ["GBM"], "seed": None}, "seed is required"),
    ({"data_dir": "/nonexistent/dir"}, "does not exist"),
    ({"paths": {"crime": "/nonexistent.csv"}}, "does not exist"),
    ({"paths": {"weather": str(MINI / "crime.csv")}}, "unknown input file key"),
    ({"jobs": 0}, "jobs"),
    ({"features": {"taxi": "teleport"}}, "teleport"),
])
def test_config_errors(raw, pattern):
    with pytest.raises(ValueError, match=pattern):
        RunConfig.from_mapping(raw).validate()


def test_config_file_errors(tmp_path):
    with pytest.raises(ConfigError, match="not found"):
        RunConfig.load(tmp_path / "nope.yaml")
    (tmp_path / "c.yaml").write_text("- just\n- a list\n")
    with pytest.raises(ConfigError, match="mapping"):
        RunConfig.load(tmp_path / "c.yaml")
