"""Command-line entry point: ``crimeflow <subcommand> [options]``.

Exit codes: 0 success, 1 invalid input or configuration, 2 numerical
failure, 64 usage error (including an unknown subcommand).
"""

from __future__ import annotations

import argparse
import logging
import sys
import warnings
from pathlib import Path
from typing import Optional, Sequence

import numpy as np
import yaml

from . import __version__
from .econ import EstimationError, ModelKind, fit_model
from .evaluation import (ML_KINDS, EvaluationPlan, WindowFailure, compare_settings, forecast_one,
                         hyperparameter_robustness, importance_report, run_rolling,
                         select_feature_definitions)
from .features import CRIME_TYPES, FeatureModes, assemble_design
from .io import ConfigError, RunConfig, ingest, write_csv
from .ml.search import DEFAULT_GRIDS, load_grid_file
from .spatial import morans_i
from .synth import SyntheticSpec, generate_synthetic

EXIT_OK, EXIT_INVALID, EXIT_NUMERICAL, EXIT_USAGE = 0, 1, 2, 64

log = logging.getLogger("crimeflow")

FORECAST_HEADER = ("crime_type", "model", "setting", "window", "unit_id", "week", "actual", "forecast", "error")
MSE_HEADER = ("crime_type", "model", "setting", "mse", "pct_vs_setting1")
SELECTION_HEADER = ("crime_type", "twitter", "taxi", "poi", "mse", "winner")
COEF_HEADER = ("variable", "model", "estimate", "std_error", "p_value", "scale")
IMPORTANCE_HEADER = ("crime_type", "setting", "variable", "mean_rank", "ranks_by_window")
MORAN_HEADER = ("week", "i_stat", "expected", "variance", "z", "p")
ROBUSTNESS_HEADER = ("window", "min", "q25", "median", "q75", "max", "global_best_cell",
                     "global_best_window_mse", "global_best_mean")


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise UsageError(f"{self.format_usage()}{self.prog}: error: {message}")


def _common(p: argparse.ArgumentParser, data=True, modes=True):
    p.add_argument("--config", type=Path, help="YAML run configuration")
    if data:
        p.add_argument("--data", type=Path, help="directory holding the input CSV files")
        p.add_argument("--crime", choices=CRIME_TYPES, help="crime type (default property)")
    if modes:
        p.add_argument("--twitter", help="all | night | log_all | log_night")
        p.add_argument("--taxi", help="raw | source | destination")
        p.add_argument("--poi", help="counts | shares")
    p.add_argument("--seed", type=int)
    p.add_argument("--out", type=Path, help="output file or directory")


def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="crimeflow", description="Spatio-temporal crime count forecasting.")
    parser.add_argument("--version", action="version", version=f"crimeflow {__version__}")
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", metavar="subcommand", parser_class=_Parser)

    p = sub.add_parser("validate", help="check an input file set")
    _common(p, modes=False)

    p = sub.add_parser("synth", help="write a synthetic input file set")
    p.add_argument("--spec", type=Path, help="YAML file of synthetic settings")
    p.add_argument("--grid", type=int, help="lattice side g (N = g * g)")
    p.add_argument("--weeks", type=int)
    p.add_argument("--kind", choices=("SAR", "CAR", "GLMM", "sar", "car", "glmm"))
    p.add_argument("--taxi-coef", type=float)
    p.add_argument("--taxi-mode")
    p.add_argument("--kappa", type=float)
    p.add_argument("--seed", type=int)
    p.add_argument("--out", type=Path, required=True)

    p = sub.add_parser("features", help="write the assembled design matrix")
    _common(p)
    p.add_argument("--setting", type=int, default=8)

    p = sub.add_parser("fit", help="fit an econometric model and write its coefficient table")
    _common(p)
    p.add_argument("--model", default="CAR", type=str.upper, choices=[k.value for k in ModelKind])
    p.add_argument("--setting", type=int, default=8)
    p.add_argument("--through-week", type=int, help="last target week used for fitting")

    p = sub.add_parser("forecast", help="fit on earlier weeks and forecast one target week")
    _common(p)
    p.add_argument("--model", default="CAR", type=str.upper)
    p.add_argument("--setting", type=int, default=8)
    p.add_argument("--week", type=int, help="target week (default: one past the last week)")
    p.add_argument("--grid-file", type=Path)

    p = sub.add_parser("evaluate", help="rolling-window comparison of models and settings")
    _common(p)
    p.add_argument("--models", nargs="+", type=str.upper)
    p.add_argument("--settings", nargs="+", type=int)
    p.add_argument("--h", type=int, help="minimum training length (default T // 2)")
    p.add_argument("--grid-file", type=Path)
    p.add_argument("--jobs", type=int)

    p = sub.add_parser("select-features", help="rolling MSE of every feature-definition combination")
    _common(p, modes=False)
    p.add_argument("--model", default="CAR", type=str.upper)
    p.add_argument("--setting", type=int, default=8)
    p.add_argument("--h", type=int)

    p = sub.add_parser("importance", help="mean permutation-importance ranks over windows")
    _common(p)
    p.add_argument("--models", nargs="+", type=str.upper, default=list(ML_KINDS))
    p.add_argument("--setting", type=int, default=8)
    p.add_argument("--h", type=int)
    p.add_argument("--grid-file", type=Path)

    p = sub.add_parser("diagnose", help="per-week Moran's I of crime counts")
    _common(p, modes=False)
    return parser


# ---------------------------------------------------------------- helpers


def _config(args) -> RunConfig:
    cfg = RunConfig.load(args.config) if getattr(args, "config", None) else RunConfig.from_mapping({})
    if getattr(args, "data", None):
        cfg.data_dir = args.data
    if getattr(args, "crime", None):
        cfg.crime_type = args.crime
    if getattr(args, "seed", None) is not None:
        cfg.seed = args.seed
    if getattr(args, "h", None) is not None:
        cfg.h = args.h
    if getattr(args, "jobs", None):
        cfg.jobs = args.jobs
    if getattr(args, "models", None):
        cfg.models = tuple(args.models)
    if getattr(args, "settings", None):
        cfg.settings = tuple(args.settings)
    if getattr(args, "grid_file", None):
        cfg.grid_file = args.grid_file
    if any(getattr(args, k, None) for k in ("twitter", "taxi", "poi")):
        m = cfg.modes
        cfg.modes = FeatureModes(args.twitter or m.twitter, args.taxi or m.taxi, args.poi or m.poi)
    if cfg.data_dir is None and not cfg.paths:
        raise ConfigError("no input data given; use --data or a configuration file")
    return cfg.validate()


def _load(cfg: RunConfig):
    return ingest(cfg.data_dir, cfg.paths)


def _grids(cfg: RunConfig) -> dict:
    grids = dict(DEFAULT_GRIDS)
    if cfg.grid_file is not None:
        grids.update(load_grid_file(cfg.grid_file))
    return grids


def _out_file(args, cfg: RunConfig, default_name: str) -> Path:
    out = args.out
    if out is None:
        return Path(cfg.output_dir) / default_name
    return out / default_name if out.suffix.lower() != ".csv" else out


def _out_dir(args, cfg: RunConfig) -> Path:
    return Path(args.out) if args.out is not None else Path(cfg.output_dir)


def _plan(panel, cfg):
    return EvaluationPlan.for_panel(panel, cfg.h)


# ---------------------------------------------------------------- subcommands


def cmd_validate(args) -> int:
    cfg = _config(args)
    ds = _load(cfg)
    p = ds.panel
    trips = sum(f.entries.nnz for f in p.flows)
    print(f"ok: {p.n_units} units, weeks {p.first_week}..{p.last_week}, {ds.weights.n_edges} adjacency edges, "
          f"{trips} flow entries")
    return EXIT_OK


def cmd_synth(args) -> int:
    raw = {}
    if args.spec:
        with open(args.spec, encoding="utf-8") as fh:
            raw = yaml.safe_load(fh) or {}
        if not isinstance(raw, dict):
            raise ConfigError(f"{args.spec}: expected a mapping of synthetic settings")
    for key, attr in (("g", "grid"), ("n_weeks", "weeks"), ("kind", "kind"), ("taxi_coef", "taxi_coef"),
                      ("taxi_mode", "taxi_mode"), ("kappa", "kappa"), ("seed", "seed")):
        value = getattr(args, attr)
        if value is not None:
            raw[key] = value
    try:
        spec = SyntheticSpec.from_mapping(raw)
    except TypeError as exc:
        raise ConfigError(str(exc)) from None
    written = generate_synthetic(spec, args.out)
    print(f"wrote {len(written)} files to {args.out}")
    return EXIT_OK


def cmd_features(args) -> int:
    cfg = _config(args)
    ds = _load(cfg)
    design, y = assemble_design(ds.panel, args.setting, cfg.modes, crime_type=cfg.crime_type)
    path = _out_file(args, cfg, f"design_setting{args.setting}.csv")
    header = ("unit_id", "week", *design.column_names, "y")
    write_csv(path, header, ([u, wk, *row, yy] for (u, wk), row, yy in zip(design.rows, design.x, y)))
    print(f"wrote {path}")
    return EXIT_OK


def cmd_fit(args) -> int:
    cfg = _config(args)
    ds = _load(cfg)
    p = ds.panel
    last = p.last_week if args.through_week is None else args.through_week
    design, y = assemble_design(p, args.setting, cfg.modes, range(p.first_week + 1, last + 1), cfg.crime_type)
    fit = fit_model(args.model, design, y, ds.weights)
    path = _out_file(args, cfg, f"coefficients_{args.model}_setting{args.setting}.csv")
    write_csv(path, COEF_HEADER, fit.coefficient_rows())
    print(f"wrote {path} (log-likelihood {fit.loglik:.6g})")
    return EXIT_OK


def cmd_forecast(args) -> int:
    cfg = _config(args)
    ds = _load(cfg)
    res = forecast_one(ds.panel, ds.weights, args.setting, args.model, args.week, cfg.modes, cfg.crime_type,
                       cfg.seed or 0, _grids(cfg))
    path = _out_file(args, cfg, f"forecast_{args.model}_week{res.target_week}.csv")
    rows = ([cfg.crime_type, args.model, args.setting, 1, u, res.target_week, a, f, a - f]
            for u, a, f in zip(ds.panel.units, res.actual, res.forecast))
    write_csv(path, FORECAST_HEADER, rows)
    print(f"wrote {path}")
    return EXIT_OK


def cmd_evaluate(args) -> int:
    cfg = _config(args)
    ds = _load(cfg)
    out = _out_dir(args, cfg)
    cmp = compare_settings(ds.panel, ds.weights, cfg.models, cfg.settings, _plan(ds.panel, cfg), cfg.modes,
                           cfg.crime_type, cfg.seed or 0, _grids(cfg), jobs=cfg.jobs)
    write_csv(out / "forecasts.csv", FORECAST_HEADER,
              (row for m in cmp.models for s in cmp.settings for row in cmp.reports[(m, s)].forecast_rows()))
    write_csv(out / "mse_summary.csv", MSE_HEADER, cmp.rows())
    for m in cmp.models:
        if m in ML_KINDS:
            for s in cmp.settings:
                summary = hyperparameter_robustness(cmp.reports[(m, s)])
                write_csv(out / f"robustness_{m}_setting{s}.csv", ROBUSTNESS_HEADER, summary.rows())
    for i, m in enumerate(cmp.models):
        cells = " ".join(f"{s}:{cmp.mse[i, j]:.4g}" for j, s in enumerate(cmp.settings))
        print(f"{m}: {cells}")
    print(f"wrote results to {out}")
    return EXIT_OK


def cmd_select_features(args) -> int:
    cfg = _config(args)
    ds = _load(cfg)
    res = select_feature_definitions(ds.panel, ds.weights, _plan(ds.panel, cfg), cfg.crime_type, args.model,
                                     args.setting)
    path = _out_file(args, cfg, "selection.csv")
    write_csv(path, SELECTION_HEADER, res.rows())
    wm = res.winner
    print(f"best: twitter={wm.twitter.value} taxi={wm.taxi.value} poi={wm.poi.value} "
          f"(mse {res.mse[wm]:.6g}); wrote {path}")
    return EXIT_OK


def cmd_importance(args) -> int:
    cfg = _config(args)
    ds = _load(cfg)
    out = _out_dir(args, cfg)
    for m in args.models:
        if m not in ML_KINDS:
            raise ConfigError(f"importance needs an ML model kind ({', '.join(ML_KINDS)}), got {m!r}")
        report = run_rolling(ds.panel, ds.weights, args.setting, m, _plan(ds.panel, cfg), cfg.modes,
                             cfg.crime_type, cfg.seed or 0, _grids(cfg), importance=True)
        imp = importance_report(report)
        rows = []
        for name, mean_rank in imp.ordered():
            j = imp.names.index(name)
            ranks = ";".join(str(int(r)) for r in imp.ranks_by_window[:, j])
            rows.append([cfg.crime_type, args.setting, name, f"{mean_rank:.2f}", ranks])
        path = out / f"importance_{m}.csv"
        write_csv(path, IMPORTANCE_HEADER, rows)
        top = imp.ordered()[0]
        print(f"{m}: top variable {top[0]} (mean rank {top[1]:.2f}); wrote {path}")
    return EXIT_OK


def cmd_diagnose(args) -> int:
    cfg = _config(args)
    ds = _load(cfg)
    p = ds.panel
    y = p.crime[cfg.crime_type]
    rows = []
    for k in range(p.n_weeks):
        r = morans_i(y[:, k], ds.weights)
        rows.append([p.first_week + k, r.i_stat, r.expected, r.variance, r.z, r.p])
    path = _out_file(args, cfg, f"moran_{cfg.crime_type}.csv")
    write_csv(path, MORAN_HEADER, rows)
    print(f"average Moran's I {np.mean([r[1] for r in rows]):.4f}; wrote {path}")
    return EXIT_OK


COMMANDS = {
    "validate": cmd_validate, "synth": cmd_synth, "features": cmd_features, "fit": cmd_fit,
    "forecast": cmd_forecast, "evaluate": cmd_evaluate, "select-features": cmd_select_features,
    "importance": cmd_importance, "diagnose": cmd_diagnose,
}


def main(argv: Optional[Sequence[str]] = None) -> int:
    parser = build_parser()
    argv = list(sys.argv[1:] if argv is None else argv)
    try:
        args = parser.parse_args(argv)
    except UsageError as exc:
        print(exc, file=sys.stderr)
        return EXIT_USAGE
    if args.command is None:
        parser.print_usage(sys.stderr)
        return EXIT_USAGE
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    if not args.verbose:
        warnings.simplefilter("ignore")
    try:
        return COMMANDS[args.command](args)
    except (WindowFailure, EstimationError, ArithmeticError, np.linalg.LinAlgError) as exc:
        print(f"numerical failure: {exc}", file=sys.stderr)
        return EXIT_NUMERICAL
    except (ValueError, OSError, yaml.YAMLError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_INVALID


if __name__ == "__main__":
    sys.exit(main())
