"""Random generation from the GTDL models and Monte Carlo studies.

Failure times are drawn by inverting the closed-form cumulative hazard.  In
the defective regime (negative time effect) a draw whose target cumulative
hazard exceeds the bounded H0(inf) is a cured unit and is returned as
``inf``.
"""

from __future__ import annotations

import csv
import json
import logging
import warnings
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Callable, Sequence

import numpy as np
from numpy.typing import ArrayLike, NDArray
from scipy import optimize, stats
from scipy.special import expit

from .estimation import FitOptions, fit
from .model import (
    ALPHA_SERIES_THRESHOLD,
    LinearPredictors,
    ModelKind,
    ParamVector,
    SurvivalDataset,
)

__all__ = [
    "draw_frailty",
    "sample_gtdl_time",
    "sample_frailty_time",
    "calibrate_censoring",
    "CensoredSample",
    "simulate_dataset",
    "ReplicateSummary",
    "summarize_replicates",
    "run_replicates",
    "SimStudyConfig",
    "SimStudyReport",
    "run_study",
]

logger = logging.getLogger(__name__)


def draw_frailty(theta: float, size, rng: np.random.Generator) -> NDArray[np.float64]:
    """Gamma(1/theta, 1/theta) frailties: mean 1, variance theta."""
    if not theta > 0:
        raise ValueError("theta must be positive")
    return rng.gamma(shape=1.0 / theta, scale=theta, size=size)


def _invert_cumhaz(target: NDArray, lp: LinearPredictors, lam: float) -> NDArray[np.float64]:
    """Solve H0(t) = target for t; ``inf`` where target >= H0(inf)."""
    target, a, b = np.broadcast_arrays(
        np.asarray(target, dtype=float), np.asarray(lp.eta_alpha, dtype=float), np.asarray(lp.eta_beta, dtype=float)
    )
    s = expit(b)
    d = a * target / lam
    with np.errstate(over="ignore", invalid="ignore", divide="ignore"):
        arg = np.expm1(d) / s
        t = np.log1p(arg) / a
        # log(1 + (e^d - 1)/s) = d - log s + log1p((s - 1) e^-d), overflow-free for large d
        big = d > 30.0
        if np.any(big):
            t = np.where(big, (d - np.log(s) + np.log1p((s - 1.0) * np.exp(-np.where(big, d, 0.0)))) / a, t)
    cured = arg <= -1.0
    tiny = np.abs(a) < ALPHA_SERIES_THRESHOLD
    if np.any(tiny):
        # exponential limit, first-order corrected in a
        base = target / (lam * s)
        t = np.where(tiny, base - 0.5 * a * base * base * (1.0 - s), t)
        cured &= ~tiny
    t = np.where(cured, np.inf, t)
    if np.any(~np.isfinite(t) & ~cured):
        raise AssertionError("inverse cumulative hazard failed outside the cure branch")
    return t


def sample_gtdl_time(lp: LinearPredictors, lam: float = 1.0, u: ArrayLike | None = None, rng=None):
    """Inverse-transform draw with ``R(t) = u``; cured units come back as ``inf``.

    Either pass uniforms ``u`` in (0, 1) or a ``rng`` to draw them.
    """
    if u is None:
        if rng is None:
            raise ValueError("pass either u or rng")
        shape = np.broadcast(np.asarray(lp.eta_alpha), np.asarray(lp.eta_beta)).shape
        u = rng.uniform(size=shape)
    u = np.asarray(u, dtype=float)
    if np.any((u <= 0) | (u >= 1)):
        raise ValueError("u must lie strictly inside (0, 1)")
    t = _invert_cumhaz(-np.log(u), lp, lam)
    return float(t) if t.ndim == 0 else t


def sample_frailty_time(
    lp: LinearPredictors,
    lam: float = 1.0,
    theta: float = 1.0,
    rng: np.random.Generator | None = None,
    *,
    u: ArrayLike | None = None,
    v: ArrayLike | None = None,
):
    """Draw from the gamma-frailty model.

    A frailty ``v`` is drawn (unless given), then the conditional reliability
    ``exp(-v * H0(t)) = u`` is inverted.  Units with ``v * H0(inf) < -log u``
    are cured and returned as ``inf``.
    """
    shape = np.broadcast(np.asarray(lp.eta_alpha), np.asarray(lp.eta_beta)).shape
    if rng is None and (u is None or v is None):
        raise ValueError("rng is required unless both u and v are supplied")
    if v is None:
        v = draw_frailty(theta, shape, rng)
    if u is None:
        u = rng.uniform(size=shape)
    u = np.asarray(u, dtype=float)
    v = np.asarray(v, dtype=float)
    t = _invert_cumhaz(-np.log(u) / v, lp, lam)
    return float(t) if t.ndim == 0 else t


@dataclass
class CensoredSample:
    times: NDArray[np.float64]
    status: NDArray[np.int_]
    censor_bound: float
    expected_fraction: float
    achieved_fraction: float
    reachable: bool = True


def _expected_censored(latent: NDArray, c: float) -> float:
    # P(C < T) for C ~ U(0, c), averaged over the latent sample
    return float(np.mean(np.minimum(latent, c) / c))


def calibrate_censoring(
    latent_times: ArrayLike,
    target_fraction: float,
    rng: np.random.Generator,
    scheme: str = "uniform",
) -> CensoredSample:
    """Censor latent times with ``C ~ Uniform(0, c)``, ``c`` chosen by bisection.

    ``c`` solves ``mean_i P(C < T_i) = target_fraction`` for the given latent
    sample.  Cured units (``inf``) are always censored at their censoring
    draw.  When the cured share alone exceeds the target, the target is
    unreachable: censoring is set as light as possible and a warning is
    issued.
    """
    if scheme != "uniform":
        raise ValueError(f"unknown censoring scheme {scheme!r}")
    latent = np.asarray(latent_times, dtype=float)
    if not 0 <= target_fraction < 1:
        raise ValueError("target_fraction must lie in [0, 1)")
    cured_share = float(np.mean(np.isinf(latent)))
    finite = latent[np.isfinite(latent)]

    if target_fraction == 0 and cured_share == 0:
        return CensoredSample(latent.copy(), np.ones(latent.size, dtype=int), np.inf, 0.0, 0.0)

    reachable = target_fraction > cured_share
    if not reachable:
        warnings.warn(
            f"censoring target {target_fraction:.3f} unreachable: cured share is {cured_share:.3f}",
            RuntimeWarning,
            stacklevel=2,
        )
        c = 1e6 * max(float(finite.max()) if finite.size else 1.0, 1.0)
    else:
        hi = max(float(finite.max()) if finite.size else 1.0, 1.0)
        while _expected_censored(latent, hi) > target_fraction:
            hi *= 2.0
        lo = float(finite.min()) * 1e-6 if finite.size else 1e-12
        c = optimize.brentq(lambda cc: _expected_censored(latent, cc) - target_fraction, lo, hi, xtol=1e-12)

    cens = rng.uniform(0.0, c, size=latent.size)
    status = (latent <= cens).astype(int)
    times = np.where(status == 1, latent, cens)
    return CensoredSample(
        times, status, float(c), _expected_censored(latent, c), float(1.0 - status.mean()), reachable
    )


def simulate_dataset(
    params: ParamVector,
    n: int,
    censoring: float,
    rng: np.random.Generator,
    covariate_sampler: Callable[[int, np.random.Generator], NDArray] | None = None,
) -> tuple[SurvivalDataset, CensoredSample]:
    """Simulate a censored dataset from either model.

    ``covariate_sampler(n, rng)`` returns the non-intercept covariates as an
    ``(n, m)`` array; the beta block uses its first ``len(beta) - 1`` columns
    and the alpha block its first ``len(alpha) - 1`` columns.  The default is
    one standard-normal column.
    """
    p, q = params.beta.size - 1, params.alpha.size - 1
    m = max(p, q)
    if covariate_sampler is None:
        x = rng.standard_normal((n, m))
    else:
        x = np.asarray(covariate_sampler(n, rng), dtype=float).reshape(n, -1)
        if x.shape[1] < m:
            raise ValueError(f"covariate sampler must supply at least {m} columns")
    ones = np.ones((n, 1))
    xb = np.hstack([ones, x[:, :p]])
    xa = np.hstack([ones, x[:, :q]])
    lp = LinearPredictors(xb @ params.beta, xa @ params.alpha)
    if params.theta is None or params.theta == 0:
        latent = sample_gtdl_time(lp, params.lam, rng=rng)
    else:
        latent = sample_frailty_time(lp, params.lam, params.theta, rng)
    latent = np.atleast_1d(latent)
    cs = calibrate_censoring(latent, censoring, rng)
    bn = ["(Intercept)"] + [f"x{j}" for j in range(1, p + 1)]
    an = ["(Intercept)"] + [f"x{j}" for j in range(1, q + 1)]
    return SurvivalDataset(cs.times, cs.status, xb, xa, None, bn, an), cs


@dataclass
class ReplicateSummary:
    """Bias, RMSE, SD (of estimates), CP and mean estimated SE per parameter."""

    names: list[str]
    truth: NDArray[np.float64]
    bias: NDArray[np.float64]
    rmse: NDArray[np.float64]
    sd: NDArray[np.float64]
    cp: NDArray[np.float64]
    mean_se: NDArray[np.float64]
    n_used: int
    n_total: int


def summarize_replicates(
    estimates: ArrayLike,
    ses: ArrayLike,
    truth: ArrayLike,
    level: float = 0.95,
    names: Sequence[str] | None = None,
    n_total: int | None = None,
) -> ReplicateSummary:
    """Aggregate replicate estimates against the truth.

    Bias = mean(est) - truth; SD uses ``ddof=1``; RMSE = sqrt(mean((est -
    truth)^2)), so RMSE^2 = Bias^2 + SD^2 (B-1)/B.  CP counts Wald intervals
    ``est -/+ z se`` that cover the truth; an undefined SE counts as a miss.
    """

    est = np.atleast_2d(np.asarray(estimates, dtype=float))
    se = np.atleast_2d(np.asarray(ses, dtype=float))
    truth = np.asarray(truth, dtype=float).ravel()
    B = est.shape[0]
    err = est - truth
    z = stats.norm.ppf(0.5 + level / 2.0)
    with np.errstate(invalid="ignore"):
        covered = np.abs(err) <= z * se
    names = list(names) if names is not None else [f"p{j}" for j in range(truth.size)]
    return ReplicateSummary(
        names=names,
        truth=truth,
        bias=err.mean(axis=0),
        rmse=np.sqrt(np.mean(err**2, axis=0)),
        sd=est.std(axis=0, ddof=1) if B > 1 else np.full(truth.size, np.nan),
        cp=np.mean(covered & np.isfinite(se), axis=0),
        mean_se=np.nanmean(np.where(np.isfinite(se), se, np.nan), axis=0) if np.isfinite(se).any() else np.full(truth.size, np.nan),
        n_used=B,
        n_total=B if n_total is None else n_total,
    )


def replicate_rng(seed: int, *keys: int) -> np.random.Generator:
    """Independent stream for one replicate, keyed by (seed, *keys)."""
    return np.random.default_rng(np.random.SeedSequence([int(seed), *[int(k) for k in keys]]))


def run_replicates(func: Callable, tasks: Sequence, n_jobs: int = 1) -> list:
    """Deterministic map; results come back in task order whatever ``n_jobs`` is."""
    if n_jobs == 1 or len(tasks) <= 1:
        return [func(t) for t in tasks]
    with ProcessPoolExecutor(max_workers=n_jobs) as pool:
        return list(pool.map(func, tasks, chunksize=max(1, len(tasks) // (4 * n_jobs))))


@dataclass
class SimStudyConfig:
    alpha: tuple[float, ...] = (0.5,)
    beta: tuple[float, ...] = (-1.0, 0.5)
    theta: float = 0.5
    models: tuple[str, ...] = ("gtdl", "frailty")
    sample_sizes: tuple[int, ...] = (100, 200, 300)
    censoring_targets: tuple[float, ...] = (0.70, 0.80, 0.85)
    n_replicates: int = 500
    # Level of the Wald intervals behind CP.
    ci_level: float = 0.95
    seed: int = 0
    n_jobs: int = 1
    fit_options: FitOptions = field(default_factory=lambda: FitOptions(n_restarts=1))

    def __post_init__(self) -> None:
        if any(not 0 < c < 1 for c in self.censoring_targets):
            raise ValueError("censoring targets must lie in (0, 1)")
        if self.n_replicates < 2:
            raise ValueError("need at least two replicates")
        self.models = tuple(ModelKind.parse(m).value for m in self.models)

    def true_params(self, kind: ModelKind | str) -> ParamVector:
        kind = ModelKind.parse(kind)
        return ParamVector(self.alpha, self.beta, self.theta if kind is ModelKind.FRAILTY else None)


@dataclass
class SimCell:
    model: str
    n: int
    censoring: float
    summary: ReplicateSummary
    n_converged: int
    mean_censored: float
    reliable: bool


@dataclass
class SimStudyReport:
    """Bias / RMSE / SD / CP grid over model, sample size and censoring level."""

    cells: list[SimCell]
    config: dict
    definitions: dict = field(
        default_factory=lambda: {
            "Bias": "mean(estimate) - truth over converged replicates",
            "RMSE": "sqrt(mean((estimate - truth)^2))",
            "SD": "standard deviation of estimates (ddof=1)",
            "MeanSE": "mean of estimated standard errors",
            "CP": "fraction of Wald intervals at ci_level covering the truth (undefined SE = miss)",
        }
    )

    def cell(self, model: str, n: int, censoring: float) -> SimCell:
        model = ModelKind.parse(model).value
        for c in self.cells:
            if c.model == model and c.n == n and np.isclose(c.censoring, censoring):
                return c
        raise KeyError((model, n, censoring))

    def rows(self) -> list[dict]:
        out = []
        for c in self.cells:
            s = c.summary
            for j, name in enumerate(s.names):
                out.append(
                    {
                        "model": c.model,
                        "n": c.n,
                        "censoring": c.censoring,
                        "parameter": name,
                        "truth": float(s.truth[j]),
                        "Bias": float(s.bias[j]),
                        "RMSE": float(s.rmse[j]),
                        "SD": float(s.sd[j]),
                        "CP": float(s.cp[j]),
                        "MeanSE": float(s.mean_se[j]),
                        "converged": c.n_converged,
                        "replicates": s.n_total,
                        "mean_censored": c.mean_censored,
                        "reliable": c.reliable,
                    }
                )
        return out

    def to_json(self, path: str | Path) -> Path:
        path = Path(path)
        payload = {"schema": "gtdl.simstudy/1", "definitions": self.definitions, "config": self.config, "rows": self.rows()}
        path.write_text(json.dumps(payload, indent=2))
        return path

    def to_csv(self, path: str | Path) -> Path:
        """Wide layout: one row per (model, n, parameter), column groups per censoring level."""

        path = Path(path)
        levels = sorted({c.censoring for c in self.cells})
        header = ["model", "n", "parameter"]
        for lev in levels:
            tag = f"{round(lev * 100)}%"
            header += [f"Bias@{tag}", f"RMSE@{tag}", f"SD@{tag}", f"CP@{tag}", f"MeanSE@{tag}"]
        grouped: dict[tuple, dict] = {}
        for r in self.rows():
            key = (r["model"], r["n"], r["parameter"])
            row = grouped.setdefault(key, {"model": r["model"], "n": r["n"], "parameter": r["parameter"]})
            tag = f"{round(r['censoring'] * 100)}%"
            for stat in ("Bias", "RMSE", "SD", "CP", "MeanSE"):
                row[f"{stat}@{tag}"] = f"{r[stat]:.3f}"
        with path.open("w", newline="") as fh:
            w = csv.DictWriter(fh, fieldnames=header)
            w.writeheader()
            for row in grouped.values():
                w.writerow(row)
        return path


def _param_labels(kind: ModelKind, n_alpha: int, n_beta: int) -> list[str]:
    a = ["alpha"] if n_alpha == 1 else [f"alpha{j}" for j in range(n_alpha)]
    names = a + [f"beta{j}" for j in range(n_beta)]
    return names + (["theta"] if kind is ModelKind.FRAILTY else [])


def _one_replicate(task: tuple) -> tuple[NDArray, NDArray, bool, float]:
    config, model, n, censoring, rep = task
    kind = ModelKind.parse(model)
    truth = config.true_params(kind)
    rng = replicate_rng(config.seed, config.models.index(model), n, round(censoring * 10_000), rep)
    data, cs = simulate_dataset(truth, n, censoring, rng)
    k = truth.size
    try:
        opts = replace(config.fit_options, ci_level=config.ci_level, seed=rep)
        res = fit(kind, data, opts)
    except (ValueError, ArithmeticError) as exc:
        logger.debug("replicate %s failed: %s", task[1:], exc)
        return np.full(k, np.nan), np.full(k, np.nan), False, cs.achieved_fraction
    return res.estimates, res.se, res.converged, cs.achieved_fraction


def asdict_shallow(obj) -> dict:
    return {f: getattr(obj, f) for f in obj.__dataclass_fields__}


def run_study(config: SimStudyConfig) -> SimStudyReport:
    """Run every (model, n, censoring) cell of the study.

    Each replicate draws from its own RNG stream keyed by the seed, model,
    sample size, censoring level and replicate index, so cells are
    reproducible independently and the report does not depend on
    ``n_jobs``.  A cell where fewer than half of the fits converged is
    marked unreliable.
    """
    cells = []
    for model in config.models:
        kind = ModelKind.parse(model)
        truth = config.true_params(kind)
        labels = _param_labels(kind, truth.alpha.size, truth.beta.size)
        for n in config.sample_sizes:
            for cens in config.censoring_targets:
                tasks = [(config, model, n, cens, r) for r in range(config.n_replicates)]
                results = run_replicates(_one_replicate, tasks, config.n_jobs)
                est = np.array([r[0] for r in results])
                se = np.array([r[1] for r in results])
                ok = np.array([r[2] for r in results])
                achieved = float(np.mean([r[3] for r in results]))
                summary = summarize_replicates(
                    est[ok], se[ok], truth.to_array(), config.ci_level, labels, n_total=len(results)
                )
                cells.append(
                    SimCell(model, n, cens, summary, int(ok.sum()), achieved, bool(ok.sum() >= 0.5 * len(results)))
                )
                logger.info("cell %s n=%d cens=%.2f: %d/%d converged", model, n, cens, ok.sum(), len(results))
    cfg = {k: v for k, v in asdict_shallow(config).items() if k != "fit_options"}
    cfg["fit_options"] = {k: v for k, v in asdict_shallow(config.fit_options).items() if k != "initial_params"}
    return SimStudyReport(cells, json.loads(json.dumps(cfg, default=list)))
