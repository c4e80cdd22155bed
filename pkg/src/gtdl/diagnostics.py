"""Residuals, nonparametric cumulative hazards and case-deletion influence."""

from __future__ import annotations

import logging
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field, replace
from typing import Hashable, Sequence

import numpy as np
from numpy.typing import ArrayLike, NDArray
from scipy import stats

from .estimation import FitOptions, FitResult, UnidentifiableError, fit, wald_pvalues
from .model import ModelKind, ParamVector, SurvivalDataset, loglik, reliability_frailty, reliability_gtdl

__all__ = [
    "ResidualSet",
    "Envelope",
    "qq_envelope",
    "fitted_reliability",
    "rq_residuals",
    "CumHazCurve",
    "nelson_aalen",
    "nonparam_cumhaz",
    "DeletionFits",
    "case_deletion_fits",
    "refit_without",
    "cook_quadratic_form",
    "generalized_cook",
    "likelihood_distance",
    "relative_change",
    "FlaggedCases",
    "influence_flagging",
    "RCEntry",
    "InfluenceReport",
    "rc_table",
    "influence_analysis",
]

logger = logging.getLogger(__name__)

_CLAMP = 1e-12
_THETA_BOUNDARY = 1e-4


@dataclass
class Envelope:
    """Pointwise simulated band for sorted standard-normal samples of size n."""

    theoretical: NDArray[np.float64]
    low: NDArray[np.float64]
    high: NDArray[np.float64]
    level: float
    n_sims: int

    def contains(self, sorted_values: ArrayLike) -> NDArray[np.bool_]:
        v = np.asarray(sorted_values)
        return (v >= self.low) & (v <= self.high)


@dataclass
class ResidualSet:
    residuals: NDArray[np.float64]
    sorted_order: NDArray[np.int_]
    envelope: Envelope
    clamped: NDArray[np.bool_]

    @property
    def sorted_residuals(self) -> NDArray[np.float64]:
        return self.residuals[self.sorted_order]

    def fraction_inside(self) -> float:
        return float(np.mean(self.envelope.contains(self.sorted_residuals)))


def qq_envelope(n: int, level: float = 0.95, n_sims: int = 100, seed: int = 0) -> Envelope:
    """Simulated QQ envelope.

    Per order statistic, the band is the empirical ``(1-level)/2`` and
    ``(1+level)/2`` quantiles over ``n_sims`` sorted standard-normal samples
    of size ``n``.  Deterministic for a given seed.
    """
    if n < 2:
        raise ValueError("n must be at least 2")
    if n_sims < 2:
        raise ValueError("n_sims must be at least 2")
    rng = np.random.default_rng(seed)
    sims = np.sort(rng.standard_normal((n_sims, n)), axis=1)
    low, high = np.quantile(sims, [(1 - level) / 2, (1 + level) / 2], axis=0)
    pp = (np.arange(1, n + 1) - 0.375) / (n + 0.25)
    return Envelope(stats.norm.ppf(pp), low, high, level, n_sims)


def fitted_reliability(params: ParamVector, data: SurvivalDataset) -> NDArray[np.float64]:
    lp = data.linear_predictors(params)
    if params.theta is None:
        return np.asarray(reliability_gtdl(data.times, lp, params.lam))
    return np.asarray(reliability_frailty(data.times, lp, params.lam, params.theta))


def rq_residuals(
    fit_result: FitResult,
    data: SurvivalDataset,
    *,
    randomize_censored: bool = False,
    rng: np.random.Generator | None = None,
    level: float = 0.95,
    n_sims: int = 100,
    seed: int = 0,
) -> ResidualSet:
    """Quantile residuals ``r_i = Phi^{-1}(R_hat(t_i | x_i))``.

    By default no randomization is applied.  With ``randomize_censored=True``
    a censored case uses ``Phi^{-1}(U * R_hat(t_i))`` with ``U ~ Uniform(0,
    1)``, the conditional law of ``R(T)`` given ``T > t_i``.  Reliabilities
    are clamped to ``[1e-12, 1 - 1e-12]``; clamped cases are flagged.
    """
    R = fitted_reliability(fit_result.params_hat, data)
    if randomize_censored:
        rng = np.random.default_rng(seed) if rng is None else rng
        u = rng.uniform(size=data.n)
        R = np.where(data.status == 0, u * R, R)
    clamped = (R < _CLAMP) | (R > 1 - _CLAMP)
    r = stats.norm.ppf(np.clip(R, _CLAMP, 1 - _CLAMP))
    env = qq_envelope(data.n, level, n_sims, seed)
    return ResidualSet(r, np.argsort(r, kind="stable"), env, clamped)


@dataclass
class CumHazCurve:
    """Nelson-Aalen step function at the distinct event times."""

    label: Hashable
    times: NDArray[np.float64]
    cumhaz: NDArray[np.float64]
    empty: bool = False

    @property
    def log_cumhaz(self) -> NDArray[np.float64]:
        return np.log(self.cumhaz)

    def pairs(self) -> list[tuple[float, float]]:
        return list(zip(self.times.tolist(), self.log_cumhaz.tolist()))


def nelson_aalen(times: ArrayLike, status: ArrayLike) -> tuple[NDArray, NDArray]:
    """Distinct event times and the Nelson-Aalen estimate sum d_j / Y_j."""
    t = np.asarray(times, dtype=float)
    d = np.asarray(status).astype(bool)
    event_times = np.unique(t[d])
    if event_times.size == 0:
        return event_times, event_times.copy()
    at_risk = np.array([(t >= s).sum() for s in event_times])
    deaths = np.array([(t[d] == s).sum() for s in event_times])
    return event_times, np.cumsum(deaths / at_risk)


def nonparam_cumhaz(
    data: SurvivalDataset, group_labels: ArrayLike | None = None
) -> dict[Hashable, CumHazCurve]:
    """Per-group log cumulative hazard curves for the graphical PH check.

    Roughly parallel curves of ``log H(t)`` against ``t`` support
    proportional hazards.  A group with no events yields an empty curve
    flagged ``empty=True``.
    """
    labels = np.zeros(data.n, dtype=int) if group_labels is None else np.asarray(group_labels)
    if labels.shape[0] != data.n:
        raise ValueError("group_labels must have one entry per case")
    out: dict[Hashable, CumHazCurve] = {}
    for g in dict.fromkeys(labels.tolist()):
        mask = labels == g
        et, H = nelson_aalen(data.times[mask], data.status[mask])
        if et.size == 0:
            logger.warning("group %r has no events; its cumulative hazard curve is empty", g)
        out[g] = CumHazCurve(g, et, H, empty=et.size == 0)
    return out


@dataclass
class DeletionFits:
    """Leave-one-out refits, ordered like ``case_ids``."""

    case_ids: NDArray
    params: NDArray[np.float64]
    converged: NDArray[np.bool_]
    messages: list[str] = field(default_factory=list)

    @property
    def usable(self) -> NDArray[np.bool_]:
        return self.converged & np.all(np.isfinite(self.params), axis=1)


def _warm_options(fit_result: FitResult, opts: FitOptions | None) -> FitOptions:
    base = FitOptions(ci_level=fit_result.ci_level) if opts is None else opts
    return replace(base, initial_params=fit_result.params_hat)


def refit_without(
    fit_result: FitResult,
    data: SurvivalDataset,
    case_ids: Sequence,
    opts: FitOptions | None = None,
    *,
    compute_information: bool = True,
) -> FitResult:
    """Refit the model with the listed cases removed, warm-started at the full-data MLE.

    Falls back to the default starting values when the warm start does not
    converge.  Raises :class:`UnidentifiableError` if no failures remain.
    """
    reduced = data.without(case_ids)
    warm = _warm_options(fit_result, opts)
    res = fit(fit_result.model_kind, reduced, warm, compute_information=compute_information)
    p = fit_result.params_hat
    if p.theta is not None and p.theta < _THETA_BOUNDARY:
        # a start on the boundary has zero slope in log(theta); also try the interior
        inner = replace(warm, initial_params=ParamVector(p.alpha, p.beta, 0.1, p.lam))
        alt = fit(fit_result.model_kind, reduced, inner, compute_information=compute_information)
        if alt.converged and alt.loglik > res.loglik:
            res = alt
    if not res.converged:
        cold = replace(warm, initial_params=None)
        alt = fit(fit_result.model_kind, reduced, cold, compute_information=compute_information)
        if alt.converged or alt.loglik > res.loglik:
            res = alt
    return res


def _deletion_task(args):
    fit_result, data, case_id, opts = args
    try:
        res = refit_without(fit_result, data, [case_id], opts, compute_information=False)
    except UnidentifiableError as exc:
        return np.full(fit_result.n_params, np.nan), False, f"case {case_id}: {exc}"
    return res.estimates, res.converged, "" if res.converged else f"case {case_id}: {res.message}"


def case_deletion_fits(
    fit_result: FitResult,
    data: SurvivalDataset,
    opts: FitOptions | None = None,
    *,
    cases: Sequence | None = None,
    n_jobs: int = 1,
) -> DeletionFits:
    """One refit per deleted case.

    Runs as an ordered map, in parallel when ``n_jobs > 1``.  Refits that fail
    to converge, or become unidentifiable once the case is removed, are
    flagged and excluded from GD/LD.
    """
    ids = data.row_ids if cases is None else np.asarray(list(cases))
    tasks = [(fit_result, data, cid, opts) for cid in ids.tolist()]
    if n_jobs == 1:
        results = [_deletion_task(t) for t in tasks]
    else:
        with ProcessPoolExecutor(max_workers=n_jobs) as pool:
            results = list(pool.map(_deletion_task, tasks))
    params = np.array([r[0] for r in results]).reshape(len(tasks), fit_result.n_params)
    conv = np.array([r[1] for r in results], dtype=bool)
    msgs = [r[2] for r in results if r[2]]
    for m in msgs:
        logger.warning("deletion refit flagged: %s", m)
    return DeletionFits(ids, params, conv, msgs)


def cook_quadratic_form(diffs: ArrayLike, info: ArrayLike) -> NDArray[np.float64]:
    """Row-wise ``d' I d`` for a positive-definite ``I``; NaN rows stay NaN."""
    d = np.atleast_2d(np.asarray(diffs, dtype=float))
    info = np.atleast_2d(np.asarray(info, dtype=float))
    try:
        np.linalg.cholesky(info)
    except np.linalg.LinAlgError:
        raise np.linalg.LinAlgError(
            "observed information is not positive definite; generalized Cook distance is "
            "undefined, use the likelihood distance instead"
        ) from None
    return np.einsum("ij,jk,ik->i", d, info, d)


def _block_index(fit_result: FitResult, block: str | None) -> NDArray[np.int_]:
    na = fit_result.params_hat.alpha.size
    nb = fit_result.params_hat.beta.size
    k = fit_result.n_params
    if block is None:
        return np.arange(k)
    if block == "alpha":
        return np.arange(na)
    if block == "beta":
        return np.arange(na, na + nb)
    if block == "theta":
        if fit_result.model_kind is not ModelKind.FRAILTY:
            raise ValueError("theta block requires a frailty fit")
        return np.array([k - 1])
    raise ValueError(f"unknown parameter block {block!r}")


def generalized_cook(
    fit_result: FitResult, deletion_fits: DeletionFits, block: str | None = None
) -> NDArray[np.float64]:
    """Generalized Cook distance ``(nu_(i) - nu)' I (nu_(i) - nu)``.

    ``I`` is the observed information at the full-data MLE.  ``block`` in
    {"alpha", "beta", "theta"} restricts both the difference and ``I`` to that
    parameter block.  Flagged refits give NaN.
    """
    idx = _block_index(fit_result, block)
    diffs = (deletion_fits.params - fit_result.estimates)[:, idx]
    info = fit_result.observed_info[np.ix_(idx, idx)]
    gd = cook_quadratic_form(diffs, info)
    return np.where(deletion_fits.usable, gd, np.nan)


def likelihood_distance(
    fit_result: FitResult, deletion_fits: DeletionFits, data: SurvivalDataset, slack: float = 1e-6
) -> NDArray[np.float64]:
    """``LD_i = 2 [l(nu_hat) - l(nu_(i))]`` with both terms on the full data.

    Values in ``[-slack, 0)`` are refit noise and clamp to 0; anything more
    negative means the full-data fit was not a maximum and is logged.
    """
    kind = fit_result.model_kind
    na = fit_result.params_hat.alpha.size
    nb = fit_result.params_hat.beta.size
    l_hat = loglik(fit_result.params_hat, data)
    ld = np.full(deletion_fits.params.shape[0], np.nan)
    for i, (row, ok) in enumerate(zip(deletion_fits.params, deletion_fits.usable)):
        if not ok:
            continue
        pv = ParamVector.from_array(row, na, nb, kind)
        ld[i] = 2.0 * (l_hat - loglik(pv, data))
    bad = ld < -slack
    if np.any(bad):
        logger.warning("likelihood distance below -%g for cases %s: full fit may not be a maximum", slack, deletion_fits.case_ids[bad].tolist())
    return np.where((ld < 0) & (ld >= -slack), 0.0, ld)


def relative_change(
    fit_result: FitResult, refit: FitResult, param_index: int
) -> tuple[float, float]:
    """RC (%) of estimate and SE: ``|(v - v_del) / v| * 100`` for each.

    Zero denominators give NaN.
    """
    est, est_d = fit_result.estimates[param_index], refit.estimates[param_index]
    se, se_d = fit_result.se[param_index], refit.se[param_index]
    rc_est = abs((est - est_d) / est) * 100.0 if est != 0 else np.nan
    rc_se = abs((se - se_d) / se) * 100.0 if (np.isfinite(se) and se != 0) else np.nan
    return float(rc_est), float(rc_se)


@dataclass
class FlaggedCases:
    gd: list
    ld: list
    union: list
    intersection: list
    k: float


def _exceeds(values: NDArray, k: float) -> NDArray[np.bool_]:
    v = np.asarray(values, dtype=float)
    ok = np.isfinite(v)
    if not ok.any() or not np.isfinite(k):
        return np.zeros(v.shape, dtype=bool)
    mu, sd = v[ok].mean(), v[ok].std()
    with np.errstate(invalid="ignore"):
        return ok & (v > mu + k * sd)


def influence_flagging(
    gd: ArrayLike, ld: ArrayLike, k: float = 3.0, case_ids: ArrayLike | None = None
) -> FlaggedCases:
    """Flag cases above ``mean + k * SD`` of each measure."""
    gd = np.asarray(gd, dtype=float)
    ld = np.asarray(ld, dtype=float)
    ids = np.arange(1, gd.size + 1) if case_ids is None else np.asarray(case_ids)
    fg, fl = _exceeds(gd, k), _exceeds(ld, k)
    return FlaggedCases(
        gd=ids[fg].tolist(),
        ld=ids[fl].tolist(),
        union=ids[fg | fl].tolist(),
        intersection=ids[fg & fl].tolist(),
        k=k,
    )


@dataclass
class RCEntry:
    deleted: tuple
    rc_estimate: NDArray[np.float64]
    rc_se: NDArray[np.float64]
    pvalue: NDArray[np.float64]
    converged: bool
    label: str = ""

    def __post_init__(self) -> None:
        if not self.label:
            self.label = "{" + ", ".join(map(str, self.deleted)) + "}"


@dataclass
class InfluenceReport:
    case_ids: NDArray
    gd: NDArray[np.float64]
    ld: NDArray[np.float64]
    flagged: FlaggedCases
    rc_table: list[RCEntry]
    param_names: list[str]
    gd_blocks: dict[str, NDArray[np.float64]] = field(default_factory=dict)

    @property
    def flagged_gd(self) -> list:
        return self.flagged.gd

    @property
    def flagged_ld(self) -> list:
        return self.flagged.ld

    @property
    def flagged_union(self) -> list:
        return self.flagged.union


def rc_table(
    fit_result: FitResult,
    data: SurvivalDataset,
    deletion_sets: Sequence[Sequence],
    opts: FitOptions | None = None,
    labels: Sequence[str] | None = None,
) -> list[RCEntry]:
    """RC of estimates and SEs plus Wald p-values after deleting each case set."""
    rows = []
    k = fit_result.n_params
    labels = [""] * len(deletion_sets) if labels is None else list(labels)
    for cases, label in zip(deletion_sets, labels):
        cases = tuple(cases)
        try:
            refit = refit_without(fit_result, data, cases, opts)
        except UnidentifiableError as exc:
            logger.warning("deleting %s leaves an unidentifiable model: %s", cases, exc)
            nan = np.full(k, np.nan)
            rows.append(RCEntry(cases, nan, nan.copy(), nan.copy(), False, label))
            continue
        rc = np.array([relative_change(fit_result, refit, j) for j in range(k)])
        rows.append(RCEntry(cases, rc[:, 0], rc[:, 1], wald_pvalues(refit), refit.converged, label))
    return rows


def influence_analysis(
    fit_result: FitResult,
    data: SurvivalDataset,
    opts: FitOptions | None = None,
    *,
    k: float = 3.0,
    include_all: bool = True,
    n_jobs: int = 1,
) -> InfluenceReport:
    """GD and LD for every case, flagging, and the RC table for flagged cases.

    The RC table has one row per flagged case, plus an ``All`` row deleting
    every flagged case together when ``include_all`` is set.
    """
    dfits = case_deletion_fits(fit_result, data, opts, n_jobs=n_jobs)
    try:
        gd = generalized_cook(fit_result, dfits)
        blocks = {b: generalized_cook(fit_result, dfits, b) for b in ("alpha", "beta")}
        if fit_result.model_kind is ModelKind.FRAILTY:
            blocks["theta"] = generalized_cook(fit_result, dfits, "theta")
    except np.linalg.LinAlgError as exc:
        logger.warning("%s", exc)
        gd = np.full(data.n, np.nan)
        blocks = {}
    ld = likelihood_distance(fit_result, dfits, data)
    flagged = influence_flagging(gd, ld, k, dfits.case_ids)
    sets: list[tuple] = [(c,) for c in flagged.union]
    labels = ["{" + str(c) + "}" for c in flagged.union]
    if include_all:
        sets.append(tuple(flagged.union))
        labels.append("All")
    table = rc_table(fit_result, data, sets, opts, labels)
    return InfluenceReport(dfits.case_ids, gd, ld, flagged, table, list(fit_result.names), blocks)
