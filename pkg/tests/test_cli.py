import csv
import shutil
import subprocess
import sys
from pathlib import Path

import pytest

from crimeflow.cli import main

MINI = Path(__file__).parent / "fixtures" / "mini"


def read(path):
    with open(path, newline="") as fh:
        return list(csv.DictReader(fh))


@pytest.fixture(scope="module")
def planted(tmp_path_factory):
    d = tmp_path_factory.mktemp("planted")
    assert main(["synth", "--grid", "8", "--weeks", "12", "--taxi-coef", "0.7", "--kappa", "0.5",
                 "--seed", "1", "--out", str(d)]) == 0
    return d


def test_validate_shipped_fixture(capsys):
    assert main(["validate", "--data", str(MINI)]) == 0
    assert main(["validate", "--config", str(MINI / "config.yaml")]) == 0


def test_usage_errors_exit_64(capsys):
    assert main(["frobnicate"]) == 64
    assert main([]) == 64
    assert main(["fit", "--setting", "two"]) == 64


def test_invalid_input_exits_1(tmp_path, capsys):
    bad = tmp_path / "bad"
    shutil.copytree(MINI, bad)
    (bad / "crime.csv").write_text((bad / "crime.csv").read_text().replace("B,2,2,1", "C,2,2,1"))
    assert main(["validate", "--data", str(bad)]) == 1
    assert "crime.csv:5: column 'unit_id': unknown unit id 'C'" in capsys.readouterr().err
    assert main(["validate"]) == 1
    assert main(["validate", "--config", str(tmp_path / "missing.yaml")]) == 1


def test_numerical_failure_exits_2(tmp_path, capsys):
    # nine units cannot identify the unit-constant columns of the full design
    assert main(["synth", "--grid", "3", "--weeks", "6", "--out", str(tmp_path / "d")]) == 0
    assert main(["fit", "--data", str(tmp_path / "d"), "--model", "LR", "--setting", "8",
                 "--out", str(tmp_path / "o")]) == 2
    assert "rank deficient" in capsys.readouterr().err


def test_evaluate_rerun_is_byte_identical(planted, tmp_path):
    args = ["evaluate", "--data", str(planted), "--models", "LR", "RF", "--settings", "1", "8", "--seed", "3"]
    grid = tmp_path / "grid.yaml"
    grid.write_text("RF:\n  max_depth: [4]\n  n_trees: [5]\n")
    args += ["--grid-file", str(grid)]
    assert main(args + ["--out", str(tmp_path / "a")]) == 0
    assert main(args + ["--out", str(tmp_path / "b")]) == 0
    names = sorted(p.name for p in (tmp_path / "a").iterdir())
    assert "forecasts.csv" in names and "mse_summary.csv" in names
    for n in names:
        assert (tmp_path / "a" / n).read_bytes() == (tmp_path / "b" / n).read_bytes()


def test_planted_taxi_signal_shows_in_summary(planted, tmp_path):
    assert main(["evaluate", "--data", str(planted), "--models", "LR", "CAR", "--settings", "1", "8",
                 "--out", str(tmp_path)]) == 0
    rows = read(tmp_path / "mse_summary.csv")
    mse = {(r["model"], int(r["setting"])): float(r["mse"]) for r in rows}
    for m in ("LR", "CAR"):
        assert mse[(m, 8)] < mse[(m, 1)]
    assert all(float(r["pct_vs_setting1"]) == 0 for r in rows if r["setting"] == "1")


def test_features_fit_forecast_outputs(planted, tmp_path):
    assert main(["features", "--data", str(planted), "--setting", "8", "--out", str(tmp_path)]) == 0
    design = read(tmp_path / "design_setting8.csv")
    assert len(design) == 64 * 11 and "taxi" in design[0]
    assert main(["fit", "--data", str(planted), "--model", "CAR", "--setting", "8", "--out", str(tmp_path)]) == 0
    coefs = read(tmp_path / "coefficients_CAR_setting8.csv")
    names = [r["variable"] for r in coefs]
    assert names[0] == "intercept" and "taxi" in names and "delta" in names
    assert main(["forecast", "--data", str(planted), "--model", "LR", "--setting", "8", "--out",
                 str(tmp_path)]) == 0
    fc = read(tmp_path / "forecast_LR_week13.csv")
    assert len(fc) == 64 and all(r["actual"] == "nan" for r in fc)


def test_select_importance_diagnose(planted, tmp_path):
    assert main(["select-features", "--data", str(planted), "--model", "LR", "--out", str(tmp_path)]) == 0
    sel = read(tmp_path / "selection.csv")
    assert len(sel) == 24 and sum(int(r["winner"]) for r in sel) == 1
    grid = tmp_path / "grid.yaml"
    grid.write_text("GBM:\n  max_depth: [3]\n  n_trees: [40]\n  learn_rate: [0.2]\n")
    assert main(["importance", "--data", str(planted), "--models", "GBM", "--grid-file", str(grid),
                 "--out", str(tmp_path)]) == 0
    imp = read(tmp_path / "importance_GBM.csv")
    assert imp[0]["variable"] == "taxi" and "intercept" not in [r["variable"] for r in imp]
    assert main(["diagnose", "--data", str(planted), "--out", str(tmp_path)]) == 0
    assert len(read(tmp_path / "moran_property.csv")) == 12


def test_console_script_exit_code():
    exe = shutil.which("crimeflow")
    cmd = [exe] if exe else [sys.executable, "-m", "crimeflow.cli"]
    assert subprocess.run(cmd + ["nope"], capture_output=True).returncode == 64
    assert subprocess.run(cmd + ["validate", "--data", str(MINI)], capture_output=True).returncode == 0
