"""CSV ingestion, run configuration and report / plot-data emission.

Input schema: a header row, a positive time column, a 0/1 status column and
covariate columns.  Empty cells and ``NA`` are missing.  Rows missing any
configured variable are dropped (listwise within that variable set only).
Categorical variables are dummy coded against a reference level with
columns named ``VAR[level]``.  Row ids are the input line numbers (the
header is line 1).
"""

from __future__ import annotations

import csv
import json
import logging
import math
from dataclasses import dataclass, field, fields
from pathlib import Path
from typing import Any, Iterable, Mapping, Sequence

import numpy as np
from numpy.typing import NDArray

from .diagnostics import InfluenceReport, ResidualSet, CumHazCurve
from .estimation import FitResult
from .model import (
    DomainError,
    LinearPredictors,
    ModelKind,
    ModelSpec,
    ParamVector,
    SurvivalDataset,
    TermPool,
    cure_fraction_frailty,
    cure_fraction_gtdl,
    hazard_frailty,
    hazard_gtdl,
    hazard_ratio_frailty,
    hazard_ratio_gtdl,
    reliability_frailty,
    reliability_gtdl,
)
from .selection import SelectionTrace
from .simulation import SimStudyReport

__all__ = [
    "DataError",
    "ProfileError",
    "RunConfig",
    "CurveRequest",
    "LoadedTable",
    "read_table",
    "load_csv",
    "load_pool",
    "fit_to_dict",
    "emit_fit_report",
    "load_fit_report",
    "design_row",
    "median_profile",
    "quartile_profiles",
    "sweep_profiles",
    "compute_curves",
    "emit_curves",
    "emit_residuals",
    "emit_cumhaz",
    "emit_influence_report",
    "emit_selection_trace",
    "emit_simulation_report",
]

logger = logging.getLogger(__name__)

FIT_SCHEMA = "gtdl.fit/1"
MISSING = {"", "NA"}
CSV_DECIMALS = 4
COMMANDS = ("fit", "diagnose", "select", "simulate", "curves")
CURVE_KINDS = ("reliability", "hazard", "hazard_ratio", "cure_surface")


class DataError(ValueError):
    """Invalid input rows; ``lines`` lists the offending input line numbers."""

    def __init__(self, message: str, lines: Sequence[int] = ()):
        self.lines = list(lines)
        suffix = f" (lines {', '.join(map(str, self.lines))})" if self.lines else ""
        super().__init__(message + suffix)


class ProfileError(ValueError):
    """A covariate profile does not cover the fitted design."""


@dataclass
class RunConfig:
    """Settings for one command, from a TOML file and/or command-line flags.

    ``categorical`` maps each categorical variable to its reference level
    (``None`` picks the first level in sorted order).  ``levels`` optionally
    fixes the admissible levels of a categorical; other values are errors.
    """

    command: str = "fit"
    input_path: str | None = None
    output_dir: str = "."
    model_kind: str = "gtdl"
    time_col: str = "time"
    status_col: str = "status"
    beta_covariates: list[str] = field(default_factory=list)
    alpha_covariates: list[str] = field(default_factory=list)
    categorical: dict[str, str | None] = field(default_factory=dict)
    levels: dict[str, list[str]] = field(default_factory=dict)
    ci_level: float = 0.90
    selection_level: float = 0.10
    candidate_beta: list[str] = field(default_factory=list)
    candidate_alpha: list[str] = field(default_factory=list)
    influence_k: float = 3.0
    group_by: str | None = None
    randomize_censored: bool = False
    seed: int | None = None
    n_jobs: int = 1
    simulation: dict[str, Any] = field(default_factory=dict)
    curves: dict[str, Any] = field(default_factory=dict)

    def __post_init__(self) -> None:
        if self.command not in COMMANDS:
            raise ValueError(f"unknown command {self.command!r}; expected one of {COMMANDS}")
        ModelKind.parse(self.model_kind)
        if not 0.0 < self.ci_level < 1.0:
            raise ValueError("ci_level must lie in (0, 1)")
        if not 0.0 < self.selection_level < 1.0:
            raise ValueError("selection_level must lie in (0, 1)")

    @classmethod
    def from_mapping(cls, data: Mapping[str, Any], **overrides: Any) -> "RunConfig":
        known = {f.name for f in fields(cls)}
        unknown = set(data) - known
        if unknown:
            raise ValueError(f"unknown configuration keys: {sorted(unknown)}")
        merged = {**data, **{k: v for k, v in overrides.items() if v is not None}}
        return cls(**merged)

    @classmethod
    def from_toml(cls, path: str | Path, **overrides: Any) -> "RunConfig":
        try:
            import tomllib
        except ModuleNotFoundError:
            import tomli as tomllib
        with open(path, "rb") as fh:
            return cls.from_mapping(tomllib.load(fh), **overrides)

    @property
    def variables(self) -> list[str]:
        seen = dict.fromkeys(
            [*self.beta_covariates, *self.alpha_covariates, *self.candidate_beta, *self.candidate_alpha]
        )
        if self.group_by:
            seen.setdefault(self.group_by)
        return list(seen)

    @property
    def spec(self) -> ModelSpec:
        return ModelSpec(self.model_kind, tuple(self.beta_covariates), tuple(self.alpha_covariates))


@dataclass
class CurveRequest:
    """Plot-data request.

    ``profiles`` maps a label to covariate values by variable name
    (categoricals by level string).  ``hazard_ratio`` needs exactly two
    profiles and returns first / second.  ``cure_surface`` evaluates the
    cure fraction over ``grid`` (variable -> values, at most two variables)
    with the other covariates taken from the first profile.
    """

    kind: str
    profiles: dict[str, dict[str, Any]] = field(default_factory=dict)
    times: NDArray[np.float64] | None = None
    grid: dict[str, Sequence[Any]] = field(default_factory=dict)

    def __post_init__(self) -> None:
        if self.kind not in CURVE_KINDS:
            raise ValueError(f"unknown curve kind {self.kind!r}; expected one of {CURVE_KINDS}")
        if self.kind == "hazard_ratio" and len(self.profiles) != 2:
            raise ValueError("hazard_ratio needs exactly two profiles")
        if self.kind == "cure_surface" and not 1 <= len(self.grid) <= 2:
            raise ValueError("cure_surface needs a grid over one or two variables")
        if self.kind != "cure_surface" and not self.profiles:
            raise ValueError(f"{self.kind} needs at least one profile")
        if self.times is not None:
            self.times = np.asarray(self.times, dtype=float)
            if np.any(self.times < 0):
                raise ValueError("time grid must be nonnegative")


@dataclass
class LoadedTable:
    """Parsed input after listwise deletion, plus raw variable values for profiles."""

    pool: TermPool
    continuous: dict[str, NDArray[np.float64]]
    categories: dict[str, NDArray[np.str_]]
    reference: dict[str, str]
    dropped_lines: list[int]

    @property
    def n_dropped(self) -> int:
        return len(self.dropped_lines)

    @property
    def row_ids(self) -> NDArray[np.int_]:
        return self.pool.row_ids

    def dataset(self, spec: ModelSpec) -> SurvivalDataset:
        return self.pool.dataset(spec)


def _parse_float(value: str) -> float:
    return float(value)


def read_table(
    path: str | Path,
    *,
    time_col: str = "time",
    status_col: str = "status",
    variables: Sequence[str] = (),
    categorical: Mapping[str, str | None] | None = None,
    levels: Mapping[str, Sequence[str]] | None = None,
) -> LoadedTable:
    """Read a survival CSV and build dummy-coded covariate terms.

    Raises
    ------
    DataError
        For missing columns, nonpositive times, status codes other than 0/1,
        unparseable numbers or unknown categories.  Row-level problems list
        every offending line number.
    """
    categorical = dict(categorical or {})
    levels = {k: [str(v) for v in vs] for k, vs in (levels or {}).items()}
    variables = list(dict.fromkeys(variables))
    with open(path, newline="", encoding="utf-8-sig") as fh:
        reader = csv.DictReader(fh)
        header = reader.fieldnames or []
        needed = [time_col, status_col, *variables]
        absent = [c for c in needed if c not in header]
        if absent:
            raise DataError(f"columns not found in {path}: {absent}")
        missing_ref = [c for c in categorical if c not in variables]
        if missing_ref:
            logger.debug("categorical settings for unused variables ignored: %s", missing_ref)
        rows: list[tuple[int, dict[str, str]]] = []
        for record in reader:
            rows.append((reader.line_num, {c: (record.get(c) or "").strip() for c in needed}))

    kept, dropped = [], []
    for line, rec in rows:
        (dropped if any(rec[c] in MISSING for c in needed) else kept).append((line, rec))
    if dropped:
        logger.info("dropped %d rows with missing values in %s", len(dropped), needed)

    bad: dict[str, list[int]] = {}

    def flag(kind: str, line: int) -> None:
        bad.setdefault(kind, []).append(line)

    times, status, lines = [], [], []
    continuous: dict[str, list[float]] = {v: [] for v in variables if v not in categorical}
    cats: dict[str, list[str]] = {v: [] for v in variables if v in categorical}
    for line, rec in kept:
        try:
            t = _parse_float(rec[time_col])
            if not (math.isfinite(t) and t > 0):
                flag("nonpositive or non-finite time", line)
        except ValueError:
            flag("unparseable time", line)
            t = math.nan
        if rec[status_col] not in {"0", "1", "0.0", "1.0"}:
            flag("status not in {0, 1}", line)
            s = 0
        else:
            s = int(float(rec[status_col]))
        for v in continuous:
            try:
                x = _parse_float(rec[v])
                if not math.isfinite(x):
                    raise ValueError
            except ValueError:
                flag(f"non-numeric value in {v}", line)
                x = math.nan
            continuous[v].append(x)
        for v in cats:
            value = rec[v]
            if v in levels and value not in levels[v]:
                flag(f"unknown category in {v}", line)
            cats[v].append(value)
        times.append(t)
        status.append(s)
        lines.append(line)
    if bad:
        parts = [f"{k}: lines {', '.join(map(str, ls))}" for k, ls in bad.items()]
        raise DataError("invalid rows in " + str(path) + "; " + "; ".join(parts), sorted({x for ls in bad.values() for x in ls}))

    terms: dict[str, NDArray] = {}
    names: dict[str, list[str]] = {}
    reference: dict[str, str] = {}
    categories = {v: np.array(vals, dtype=str) for v, vals in cats.items()}
    for v in variables:
        if v in continuous:
            terms[v] = np.asarray(continuous[v], dtype=float).reshape(-1, 1)
            names[v] = [v]
            continue
        observed = sorted(set(cats[v]))
        pool_levels = levels.get(v, observed)
        ref = categorical[v] if categorical[v] is not None else pool_levels[0]
        ref = str(ref)
        if ref not in pool_levels:
            raise DataError(f"reference level {ref!r} of {v} is not among its levels {pool_levels}")
        others = [lv for lv in pool_levels if lv != ref and lv in observed]
        col = categories[v]
        terms[v] = np.column_stack([(col == lv).astype(float) for lv in others]) if others else np.zeros((len(col), 0))
        names[v] = [f"{v}[{lv}]" for lv in others]
        reference[v] = ref
    pool = TermPool(np.asarray(times), np.asarray(status), terms, names, np.asarray(lines, dtype=int))
    return LoadedTable(
        pool,
        {v: np.asarray(x, dtype=float) for v, x in continuous.items()},
        categories,
        reference,
        [line for line, _ in dropped],
    )


def _table_from_config(path: str | Path, config: RunConfig) -> LoadedTable:
    return read_table(
        path,
        time_col=config.time_col,
        status_col=config.status_col,
        variables=config.variables,
        categorical=config.categorical,
        levels=config.levels,
    )


def load_pool(path: str | Path, config: RunConfig) -> LoadedTable:
    """Parsed table covering every variable the configuration mentions."""
    return _table_from_config(path, config)


def load_csv(path: str | Path, config: RunConfig) -> SurvivalDataset:
    """Dataset for the configured beta and alpha covariates.

    Listwise deletion considers only those covariates (plus time and status),
    so different covariate groups of one file can yield different ``n``.
    """
    sub = RunConfig.from_mapping(
        {
            k: getattr(config, k)
            for k in ("command", "model_kind", "time_col", "status_col", "beta_covariates", "alpha_covariates", "categorical", "levels")
        }
    )
    table = _table_from_config(path, sub)
    logger.info("%d rows used, %d dropped for missing values", table.pool.times.size, table.n_dropped)
    return table.dataset(config.spec)


def _num(x: float) -> float | None:
    x = float(x)
    return x if math.isfinite(x) else None


def _unnum(x: float | None) -> float:
    return math.nan if x is None else float(x)


def fit_to_dict(fit_result: FitResult) -> dict:
    p = fit_result.params_hat
    return {
        "schema": FIT_SCHEMA,
        "model_kind": fit_result.model_kind.value,
        "names": list(fit_result.names),
        "n_alpha": int(p.alpha.size),
        "n_beta": int(p.beta.size),
        "lam": p.lam,
        "estimates": [_num(v) for v in fit_result.estimates],
        "se": [_num(v) for v in fit_result.se],
        "ci": [[_num(lo), _num(hi)] for lo, hi in fit_result.ci],
        "ci_level": fit_result.ci_level,
        "loglik": _num(fit_result.loglik),
        "observed_info": [[_num(v) for v in row] for row in fit_result.observed_info],
        "converged": fit_result.converged,
        "n_evals": fit_result.n_evals,
        "gradient_norm": _num(fit_result.gradient_norm),
        "info_positive_definite": fit_result.info_positive_definite,
        "n_obs": fit_result.n_obs,
        "n_events": fit_result.n_events,
        "message": fit_result.message,
        "warnings": list(fit_result.warnings),
    }


def _format(x: float, decimals: int = CSV_DECIMALS) -> str:
    return "NA" if not math.isfinite(x) else f"{x:.{decimals}f}"


def _ensure_dir(path: str | Path) -> Path:
    out = Path(path)
    out.mkdir(parents=True, exist_ok=True)
    return out


def emit_fit_report(
    fit_result: FitResult,
    output_dir: str | Path,
    *,
    stem: str = "fit",
    trace: SelectionTrace | None = None,
) -> tuple[Path, Path]:
    """Write ``<stem>.json`` (full precision) and ``<stem>.csv`` (4-decimal table).

    The CSV columns are Parameter, MLE, SE and the lower and upper limits
    of the Wald interval at the fit's level.  A selection trace, if given,
    is embedded in the JSON.
    """
    out = _ensure_dir(output_dir)
    payload = fit_to_dict(fit_result)
    if trace is not None:
        payload["selection"] = trace.to_dict()
    json_path = out / f"{stem}.json"
    json_path.write_text(json.dumps(payload, indent=2, allow_nan=False))
    pct = f"{100 * fit_result.ci_level:g}%"
    csv_path = out / f"{stem}.csv"
    with open(csv_path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["Parameter", "MLE", "SE", f"{pct} CI lower", f"{pct} CI upper"])
        for name, est, se, lo, hi in fit_result.summary_rows():
            w.writerow([name, _format(est), _format(se), _format(lo), _format(hi)])
    return json_path, csv_path


def load_fit_report(path: str | Path) -> FitResult:
    """Rebuild a :class:`FitResult` from its JSON report; estimates round-trip exactly."""
    d = json.loads(Path(path).read_text())
    if d.get("schema") != FIT_SCHEMA:
        raise ValueError(f"unsupported fit report schema {d.get('schema')!r}")
    kind = ModelKind.parse(d["model_kind"])
    est = np.array([_unnum(v) for v in d["estimates"]])
    params = ParamVector.from_array(est, d["n_alpha"], d["n_beta"], kind)
    params = ParamVector(params.alpha, params.beta, params.theta, d.get("lam", 1.0))
    return FitResult(
        params_hat=params,
        se=np.array([_unnum(v) for v in d["se"]]),
        ci=np.array([[_unnum(a), _unnum(b)] for a, b in d["ci"]]).reshape(-1, 2),
        loglik=_unnum(d["loglik"]),
        observed_info=np.array([[_unnum(v) for v in row] for row in d["observed_info"]]).reshape(est.size, est.size),
        converged=bool(d["converged"]),
        n_evals=int(d["n_evals"]),
        model_kind=kind,
        names=list(d["names"]),
        ci_level=float(d["ci_level"]),
        gradient_norm=_unnum(d["gradient_norm"]),
        info_positive_definite=bool(d["info_positive_definite"]),
        n_obs=int(d["n_obs"]),
        n_events=int(d["n_events"]),
        message=d.get("message", ""),
        warnings=list(d.get("warnings", [])),
    )


def _block_names(fit_result: FitResult, prefix: str) -> list[str]:
    return [n.split(":", 1)[1] for n in fit_result.names if n.startswith(prefix + ":")]


def design_row(column_names: Sequence[str], profile: Mapping[str, Any]) -> NDArray[np.float64]:
    """Design row (intercept first) for a profile given by variable values.

    A dummy column ``VAR[level]`` is 1 when ``profile[VAR] == level``; other
    columns take ``profile[name]`` as a number.
    """
    row = [1.0]
    for name in column_names[1:]:
        if name.endswith("]") and "[" in name:
            var, level = name[:-1].split("[", 1)
            if var not in profile:
                raise ProfileError(f"profile has no value for categorical {var!r}")
            row.append(1.0 if str(profile[var]) == level else 0.0)
        else:
            if name not in profile:
                raise ProfileError(f"profile has no value for covariate {name!r}")
            row.append(float(profile[name]))
    return np.asarray(row)


def _lp(fit_result: FitResult, profile: Mapping[str, Any]) -> LinearPredictors:
    p = fit_result.params_hat
    xb = design_row(_block_names(fit_result, "beta"), profile)
    xa = design_row(_block_names(fit_result, "alpha"), profile)
    return LinearPredictors(float(xb @ p.beta), float(xa @ p.alpha))


def median_profile(table: LoadedTable, variables: Iterable[str] | None = None) -> dict[str, Any]:
    """Continuous variables at their sample median, categoricals at the reference level."""
    names = list(variables) if variables is not None else [*table.continuous, *table.categories]
    out: dict[str, Any] = {}
    for v in names:
        if v in table.continuous:
            out[v] = float(np.median(table.continuous[v]))
        elif v in table.categories:
            out[v] = table.reference[v]
        else:
            raise KeyError(f"unknown variable {v!r}")
    return out


def quartile_profiles(
    table: LoadedTable, variable: str, base: Mapping[str, Any] | None = None
) -> dict[str, dict[str, Any]]:
    """Q1 and Q3 profiles of one continuous variable, others at the base profile."""
    if variable not in table.continuous:
        raise KeyError(f"{variable!r} is not a continuous variable")
    base = median_profile(table) if base is None else dict(base)
    q1, q3 = np.quantile(table.continuous[variable], [0.25, 0.75])
    return {f"{variable}=Q1": {**base, variable: float(q1)}, f"{variable}=Q3": {**base, variable: float(q3)}}


def sweep_profiles(
    table: LoadedTable, variable: str, n_points: int = 5, base: Mapping[str, Any] | None = None
) -> dict[str, dict[str, Any]]:
    """Profiles spanning a continuous variable from its observed minimum to maximum."""
    if variable not in table.continuous:
        raise KeyError(f"{variable!r} is not a continuous variable")
    if n_points < 2:
        raise ValueError("n_points must be at least 2")
    base = median_profile(table) if base is None else dict(base)
    x = table.continuous[variable]
    return {f"{variable}={v:.4g}": {**base, variable: float(v)} for v in np.linspace(x.min(), x.max(), n_points)}


def _cure(fit_result: FitResult, lp: LinearPredictors) -> float:
    p = fit_result.params_hat
    try:
        if fit_result.model_kind is ModelKind.FRAILTY:
            return float(cure_fraction_frailty(lp, p.lam, p.theta))
        return float(cure_fraction_gtdl(lp, p.lam))
    except DomainError:
        # proper distribution: every unit eventually fails
        return 0.0


def compute_curves(fit_result: FitResult, request: CurveRequest, default_tmax: float = 1.0) -> dict[str, NDArray]:
    """Evaluate the requested curves; returns column name -> values."""
    p = fit_result.params_hat
    frailty = fit_result.model_kind is ModelKind.FRAILTY
    if request.kind == "cure_surface":
        base = next(iter(request.profiles.values()), {})
        grid_vars = list(request.grid)
        mesh = np.meshgrid(*[np.asarray(request.grid[v], dtype=object) for v in grid_vars], indexing="ij")
        flat = [m.ravel() for m in mesh]
        cure = np.array(
            [_cure(fit_result, _lp(fit_result, {**base, **dict(zip(grid_vars, vals))})) for vals in zip(*flat)]
        )
        return {**{v: f for v, f in zip(grid_vars, flat)}, "cure_fraction": cure}

    t = request.times if request.times is not None else np.linspace(0.0, default_tmax, 101)
    out: dict[str, NDArray] = {"t": t}
    lps = {label: _lp(fit_result, prof) for label, prof in request.profiles.items()}
    if request.kind == "hazard_ratio":
        (la, a), (lb, b) = lps.items()
        hr = hazard_ratio_frailty(t, a, b, p.lam, p.theta) if frailty else hazard_ratio_gtdl(t, a, b, p.lam)
        out[f"{la}/{lb}"] = np.asarray(hr, dtype=float) * np.ones_like(t)
        return out
    for label, lp in lps.items():
        if request.kind == "reliability":
            y = reliability_frailty(t, lp, p.lam, p.theta) if frailty else reliability_gtdl(t, lp, p.lam)
        else:
            y = hazard_frailty(t, lp, p.lam, p.theta) if frailty else hazard_gtdl(t, lp, p.lam)
        out[label] = np.asarray(y, dtype=float) * np.ones_like(t)
    return out


def _write_columns(path: Path, columns: Mapping[str, Sequence], decimals: int | None = None) -> Path:
    keys = list(columns)
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(keys)
        for row in zip(*(columns[k] for k in keys)):
            w.writerow([_cell(v, decimals) for v in row])
    return path


def _cell(v: Any, decimals: int | None) -> str:
    if isinstance(v, (float, np.floating)):
        if not math.isfinite(v):
            return "NA"
        return repr(float(v)) if decimals is None else f"{v:.{decimals}f}"
    if isinstance(v, (np.integer,)):
        return str(int(v))
    return str(v)


def emit_curves(
    fit_result: FitResult, request: CurveRequest, output_dir: str | Path, *, stem: str | None = None, default_tmax: float = 1.0
) -> Path:
    """Write plot data as CSV: a ``t`` column plus one column per profile (or the cure grid)."""
    out = _ensure_dir(output_dir)
    cols = compute_curves(fit_result, request, default_tmax)
    return _write_columns(out / f"{stem or request.kind}.csv", cols)


def emit_residuals(residuals: ResidualSet, output_dir: str | Path, *, stem: str = "qq") -> Path:
    """QQ plot data: theoretical quantile, sorted residual and envelope band."""
    env = residuals.envelope
    cols = {
        "theoretical": env.theoretical,
        "residual": residuals.sorted_residuals,
        "low": env.low,
        "high": env.high,
        "case_id": residuals.sorted_order + 1,
    }
    return _write_columns(_ensure_dir(output_dir) / f"{stem}.csv", cols)


def emit_cumhaz(curves: Mapping[Any, CumHazCurve], output_dir: str | Path, *, stem: str = "cumhaz") -> Path:
    """Long-format (group, t, log_cumhaz) step data; empty groups are listed in a note column."""
    rows = {"group": [], "t": [], "log_cumhaz": [], "empty": []}
    for label, c in curves.items():
        if c.empty:
            rows["group"].append(label)
            rows["t"].append(math.nan)
            rows["log_cumhaz"].append(math.nan)
            rows["empty"].append(1)
            continue
        for t, h in c.pairs():
            rows["group"].append(label)
            rows["t"].append(t)
            rows["log_cumhaz"].append(h)
            rows["empty"].append(0)
    return _write_columns(_ensure_dir(output_dir) / f"{stem}.csv", rows)


def emit_influence_report(report: InfluenceReport, output_dir: str | Path, *, stem: str = "influence") -> tuple[Path, Path]:
    """Per-case GD/LD index data and the RC table.

    The RC table has one row per deletion set, labelled ``{i}`` for single
    cases and ``All`` for the set of all flagged cases, with RC of the
    estimate (%), RC of the SE (%) and the Wald p-value for each parameter.
    """
    out = _ensure_dir(output_dir)
    flagged_gd, flagged_ld = set(report.flagged.gd), set(report.flagged.ld)
    cols: dict[str, list] = {
        "case_id": report.case_ids.tolist(),
        "GD": report.gd.tolist(),
        "LD": report.ld.tolist(),
    }
    for block, values in report.gd_blocks.items():
        cols[f"GD_{block}"] = values.tolist()
    cols["flag_GD"] = [int(c in flagged_gd) for c in report.case_ids.tolist()]
    cols["flag_LD"] = [int(c in flagged_ld) for c in report.case_ids.tolist()]
    idx_path = _write_columns(out / f"{stem}_index.csv", cols)

    rc_path = out / f"{stem}_rc.csv"
    with open(rc_path, "w", newline="") as fh:
        w = csv.writer(fh)
        header = ["Deleted"]
        for name in report.param_names:
            header += [f"{name} RC_est", f"{name} RC_se", f"{name} p"]
        w.writerow(header)
        for entry in report.rc_table:
            row = [entry.label]
            for j in range(len(report.param_names)):
                row += [_format(entry.rc_estimate[j]), _format(entry.rc_se[j]), _format(entry.pvalue[j])]
            w.writerow(row)
    return idx_path, rc_path


def emit_selection_trace(trace: SelectionTrace, output_dir: str | Path, *, stem: str = "selection") -> tuple[Path, Path]:
    out = _ensure_dir(output_dir)
    json_path = out / f"{stem}.json"
    json_path.write_text(json.dumps(trace.to_dict(), indent=2, default=_json_default))
    cols = {k: [] for k in ("block", "action", "term", "statistic", "df", "pvalue", "loglik", "note")}
    for s in trace.steps:
        for k in cols:
            cols[k].append(getattr(s, k))
    return json_path, _write_columns(out / f"{stem}_steps.csv", cols)


def _json_default(obj):
    if isinstance(obj, np.generic):
        return obj.item()
    raise TypeError(f"not JSON serializable: {type(obj).__name__}")


def emit_simulation_report(report: SimStudyReport, output_dir: str | Path, *, stem: str = "simulation") -> tuple[Path, Path]:
    out = _ensure_dir(output_dir)
    return report.to_json(out / f"{stem}.json"), report.to_csv(out / f"{stem}.csv")
