"""Command-line interface: ``gtdl {fit,diagnose,select,simulate,curves}``.

Settings come from a TOML file (``--config``) and/or flags; flags win.
"""

from __future__ import annotations

import argparse
import logging
import sys
from pathlib import Path
from typing import Any, Sequence

import numpy as np

from . import diagnostics, io
from .estimation import FitOptions, FitResult, fit
from .selection import SelectionConfig, select_model
from .simulation import SimStudyConfig, run_study

logger = logging.getLogger("gtdl")


def _csv_list(text: str) -> list[str]:
    return [t.strip() for t in text.split(",") if t.strip()]


def _float_list(text: str) -> list[float]:
    return [float(t) for t in _csv_list(text)]


def _int_list(text: str) -> list[int]:
    return [int(t) for t in _csv_list(text)]


def _key_value(text: str) -> tuple[str, str]:
    if "=" not in text:
        raise argparse.ArgumentTypeError(f"expected VAR=VALUE, got {text!r}")
    k, v = text.split("=", 1)
    return k.strip(), v.strip()


def _profile(text: str) -> tuple[str, dict[str, str]]:
    """``LABEL:VAR=VAL,VAR=VAL``."""
    if ":" not in text:
        raise argparse.ArgumentTypeError(f"expected LABEL:VAR=VAL,..., got {text!r}")
    label, rest = text.split(":", 1)
    return label.strip(), dict(_key_value(p) for p in _csv_list(rest))


def _time_grid(text: str) -> np.ndarray:
    """``START:STOP:NUM`` or a comma list."""
    if ":" in text:
        a, b, n = text.split(":")
        return np.linspace(float(a), float(b), int(n))
    return np.asarray(_float_list(text))


def _common(p: argparse.ArgumentParser) -> None:
    p.add_argument("--config", type=Path, help="TOML configuration file")
    p.add_argument("--input", dest="input_path", help="input CSV")
    p.add_argument("--output-dir", dest="output_dir", help="directory for reports (default: .)")
    p.add_argument("--model", dest="model_kind", choices=["gtdl", "frailty"])
    p.add_argument("--time-col", dest="time_col")
    p.add_argument("--status-col", dest="status_col")
    p.add_argument("--beta", dest="beta_covariates", type=_csv_list, help="comma-separated beta covariates")
    p.add_argument("--alpha", dest="alpha_covariates", type=_csv_list, help="comma-separated alpha covariates")
    p.add_argument(
        "--categorical", action="append", type=_key_value, metavar="VAR=REF",
        help="categorical variable and its reference level (repeatable)",
    )
    p.add_argument("--ci-level", dest="ci_level", type=float)
    p.add_argument("--jobs", dest="n_jobs", type=int)


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="gtdl", description="GTDL and GTDL gamma-frailty reliability models")
    parser.add_argument("-v", "--verbose", action="count", default=0)
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("fit", help="fit a model and write the parameter table")
    _common(p)
    p.add_argument("--seed", type=int)

    p = sub.add_parser("diagnose", help="residuals, cumulative hazards and influence measures")
    _common(p)
    p.add_argument("--seed", type=int)
    p.add_argument("--group-by", dest="group_by", help="variable defining groups for log cumulative hazard curves")
    p.add_argument("--k", dest="influence_k", type=float, help="flag cases above mean + k SD")
    p.add_argument("--randomize-censored", dest="randomize_censored", action="store_true", default=None)

    p = sub.add_parser("select", help="two-step stepwise selection and heterogeneity test")
    _common(p)
    p.add_argument("--seed", type=int)
    p.add_argument("--candidate-beta", dest="candidate_beta", type=_csv_list)
    p.add_argument("--candidate-alpha", dest="candidate_alpha", type=_csv_list)
    p.add_argument("--level", dest="selection_level", type=float)

    p = sub.add_parser("simulate", help="Monte Carlo study of the estimators")
    p.add_argument("--config", type=Path)
    p.add_argument("--output-dir", dest="output_dir")
    p.add_argument("--seed", type=int, required=True)
    p.add_argument("--jobs", dest="n_jobs", type=int)
    p.add_argument("--replicates", type=int)
    p.add_argument("--sizes", type=_int_list)
    p.add_argument("--censoring", type=_float_list)
    p.add_argument("--models", type=_csv_list)
    p.add_argument("--true-alpha", type=_float_list)
    p.add_argument("--true-beta", type=_float_list)
    p.add_argument("--true-theta", type=float)
    p.add_argument("--ci-level", dest="ci_level", type=float)

    p = sub.add_parser("curves", help="reliability, hazard, hazard-ratio or cure-fraction plot data")
    _common(p)
    p.add_argument("--seed", type=int)
    p.add_argument("--fit-report", type=Path, help="JSON fit report to use instead of refitting")
    p.add_argument("--kind", choices=io.CURVE_KINDS, default="reliability")
    p.add_argument("--profile", action="append", type=_profile, metavar="LABEL:VAR=VAL,...")
    p.add_argument("--quartiles", metavar="VAR", help="Q1 and Q3 profiles of VAR, others at the median")
    p.add_argument("--sweep", metavar="VAR", help="profiles from the minimum to the maximum of VAR")
    p.add_argument("--sweep-points", type=int, default=5)
    p.add_argument("--times", type=_time_grid, help="START:STOP:NUM or comma list")
    p.add_argument("--grid", action="append", metavar="VAR=V1,V2,...", help="cure-surface grid (repeatable)")
    return parser


_CONFIG_KEYS = {
    "input_path", "output_dir", "model_kind", "time_col", "status_col", "beta_covariates",
    "alpha_covariates", "ci_level", "selection_level", "candidate_beta", "candidate_alpha",
    "influence_k", "group_by", "randomize_censored", "seed", "n_jobs",
}


def make_config(args: argparse.Namespace) -> io.RunConfig:
    overrides: dict[str, Any] = {k: getattr(args, k) for k in _CONFIG_KEYS if getattr(args, k, None) is not None}
    overrides["command"] = args.command
    if getattr(args, "categorical", None):
        overrides["categorical"] = dict(args.categorical)
    if args.config is not None:
        return io.RunConfig.from_toml(args.config, **overrides)
    return io.RunConfig.from_mapping(overrides)


def _fit_options(cfg: io.RunConfig) -> FitOptions:
    return FitOptions(ci_level=cfg.ci_level, seed=cfg.seed or 0)


def _require_input(cfg: io.RunConfig) -> str:
    if not cfg.input_path:
        raise SystemExit("an input CSV is required (--input or input_path in the config)")
    return cfg.input_path


def _fit_from_config(cfg: io.RunConfig) -> tuple[io.LoadedTable, FitResult]:
    table = io.load_pool(_require_input(cfg), cfg)
    data = table.dataset(cfg.spec)
    logger.info("%d cases (%d failures), %d rows dropped for missing values", data.n, data.n_events, table.n_dropped)
    return table, fit(cfg.model_kind, data, _fit_options(cfg))


def cmd_fit(cfg: io.RunConfig) -> int:
    _, result = _fit_from_config(cfg)
    paths = io.emit_fit_report(result, cfg.output_dir)
    _print_fit(result)
    _print_written(paths)
    return 0 if result.converged else 2


def cmd_diagnose(cfg: io.RunConfig) -> int:
    table, result = _fit_from_config(cfg)
    data = table.dataset(cfg.spec)
    seed = cfg.seed or 0
    written = list(io.emit_fit_report(result, cfg.output_dir))
    res = diagnostics.rq_residuals(result, data, randomize_censored=cfg.randomize_censored, seed=seed)
    written.append(io.emit_residuals(res, cfg.output_dir))
    groups = None
    if cfg.group_by:
        groups = table.categories.get(cfg.group_by, table.continuous.get(cfg.group_by))
    written.append(io.emit_cumhaz(diagnostics.nonparam_cumhaz(data, groups), cfg.output_dir))
    report = diagnostics.influence_analysis(result, data, _fit_options(cfg), k=cfg.influence_k, n_jobs=cfg.n_jobs)
    written.extend(io.emit_influence_report(report, cfg.output_dir))
    _print_fit(result)
    print(f"residuals inside 95% envelope: {100 * res.fraction_inside():.1f}%")
    print(f"flagged by GD: {report.flagged.gd}  by LD: {report.flagged.ld}")
    _print_written(written)
    return 0


def cmd_select(cfg: io.RunConfig) -> int:
    table = io.load_pool(_require_input(cfg), cfg)
    sel = SelectionConfig(
        alpha_level=cfg.selection_level,
        candidate_beta=tuple(cfg.candidate_beta),
        candidate_alpha=tuple(cfg.candidate_alpha),
        fit_options=_fit_options(cfg),
    )
    trace, result = select_model(table.pool, sel)
    written = [*io.emit_selection_trace(trace, cfg.output_dir), *io.emit_fit_report(result, cfg.output_dir, trace=trace)]
    spec = trace.final_spec
    print(f"model: {spec.kind.value}  beta: {list(spec.beta_terms)}  alpha: {list(spec.alpha_terms)}")
    if trace.heterogeneity is not None:
        h = trace.heterogeneity
        print(f"heterogeneity test: LR={h.statistic:.4f} p={h.pvalue:.4f}" + (f" ({h.caveat})" if h.caveat else ""))
    _print_fit(result)
    _print_written(written)
    return 0


def cmd_simulate(cfg: io.RunConfig, args: argparse.Namespace) -> int:
    settings = dict(cfg.simulation)
    for flag, key in (
        ("replicates", "n_replicates"), ("sizes", "sample_sizes"), ("censoring", "censoring_targets"),
        ("models", "models"), ("true_alpha", "alpha"), ("true_beta", "beta"), ("true_theta", "theta"),
    ):
        value = getattr(args, flag, None)
        if value is not None:
            settings[key] = value
    for key in ("sample_sizes", "censoring_targets", "models", "alpha", "beta"):
        if key in settings:
            settings[key] = tuple(settings[key])
    settings["seed"] = args.seed
    settings["n_jobs"] = cfg.n_jobs
    if args.ci_level is not None:
        settings["ci_level"] = args.ci_level
    report = run_study(SimStudyConfig(**settings))
    paths = io.emit_simulation_report(report, cfg.output_dir)
    for row in report.rows():
        print(
            f"{row['model']:8s} n={row['n']:<5d} cens={row['censoring']:.2f} {row['parameter']:10s} "
            f"bias={row['Bias']:+.3f} rmse={row['RMSE']:.3f} cp={row['CP']:.3f}"
        )
    _print_written(paths)
    return 0


def _parse_grid(items: Sequence[str] | None) -> dict[str, list[Any]]:
    grid: dict[str, list[Any]] = {}
    for item in items or []:
        var, values = _key_value(item)
        parsed: list[Any] = []
        for v in _csv_list(values):
            try:
                parsed.append(float(v))
            except ValueError:
                parsed.append(v)
        grid[var] = parsed
    return grid


def cmd_curves(cfg: io.RunConfig, args: argparse.Namespace) -> int:
    if args.fit_report is not None:
        table = io.load_pool(_require_input(cfg), cfg)
        result = io.load_fit_report(args.fit_report)
    else:
        table, result = _fit_from_config(cfg)
    base = io.median_profile(table)
    profiles: dict[str, dict[str, Any]] = {}
    curves_cfg = dict(cfg.curves)
    for label, values in args.profile or []:
        profiles[label] = {**base, **values}
    for label, values in curves_cfg.get("profiles", {}).items():
        profiles.setdefault(label, {**base, **values})
    if args.quartiles:
        profiles.update(io.quartile_profiles(table, args.quartiles, base))
    if args.sweep:
        profiles.update(io.sweep_profiles(table, args.sweep, args.sweep_points, base))
    if not profiles:
        profiles["median"] = base
    times = args.times
    if times is None and "times" in curves_cfg:
        times = np.asarray(curves_cfg["times"], dtype=float)
    grid = _parse_grid(args.grid) or curves_cfg.get("grid", {})
    request = io.CurveRequest(args.kind, profiles, times, grid)
    try:
        path = io.emit_curves(result, request, cfg.output_dir, default_tmax=float(table.pool.times.max()))
    except io.ProfileError as exc:
        raise io.ProfileError(f"{exc}; load the covariates used by the fit (same --beta/--alpha/--categorical)") from None
    _print_written([path])
    return 0


def _print_fit(result: FitResult) -> None:
    pct = f"{100 * result.ci_level:g}%"
    print(f"{result.model_kind.value} fit: loglik={result.loglik:.4f} converged={result.converged}")
    print(f"{'Parameter':24s} {'MLE':>10s} {'SE':>10s}  {pct} CI")
    for name, est, se, lo, hi in result.summary_rows():
        print(f"{name:24s} {est:10.4f} {se:10.4f}  ({lo:.4f}, {hi:.4f})")


def _print_written(paths) -> None:
    for p in paths:
        print(f"wrote {p}")


def main(argv: Sequence[str] | None = None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(
        level=logging.WARNING - 10 * min(args.verbose, 2), format="%(levelname)s %(name)s: %(message)s"
    )
    try:
        cfg = make_config(args)
        if args.command == "simulate":
            return cmd_simulate(cfg, args)
        if args.command == "curves":
            return cmd_curves(cfg, args)
        return {"fit": cmd_fit, "diagnose": cmd_diagnose, "select": cmd_select}[args.command](cfg)
    except (io.DataError, io.ProfileError, ValueError, KeyError, OSError) as exc:
        print(f"gtdl: error: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
