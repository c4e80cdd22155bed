"""Two-step stepwise covariate selection and the frailty heterogeneity decision.

Step 1 selects the terms of the beta block under the frailty model with a
scalar time effect.  Step 2 freezes that beta set and selects the alpha
block.  Each step is forward selection by likelihood-ratio p-value, with a
backward elimination pass after every addition.  Categorical terms enter
and leave as whole dummy blocks, tested with a multi-df LR test.
"""

from __future__ import annotations

import logging
from dataclasses import asdict, dataclass, field, replace
from typing import Literal

import numpy as np

from .estimation import (
    DesignError,
    FitOptions,
    FitResult,
    UnidentifiableError,
    boundary_lr_test_theta,
    fit,
    lr_statistic,
    lr_test,
)
from .model import ModelKind, ModelSpec, ParamVector, TermPool

__all__ = [
    "SelectionConfig",
    "StepRecord",
    "HeterogeneityRecord",
    "SelectionTrace",
    "ModelFitter",
    "select_beta",
    "select_alpha",
    "decide_heterogeneity",
    "select_model",
]

logger = logging.getLogger(__name__)

Block = Literal["beta", "alpha"]

DIRECTION_NOTE = "stepwise: forward selection with a backward elimination pass after each addition"


@dataclass(frozen=True)
class SelectionConfig:
    """Settings for the stepwise protocol.

    Attributes
    ----------
    alpha_level : float
        Significance level for entering, staying and the heterogeneity test.
    candidate_beta, candidate_alpha : tuple of str
        Candidate terms per block; their order breaks p-value ties.
    max_steps : int
        Maximum number of additions per block.
    model_kind : ModelKind
        Model used during both selection steps.
    fit_options : FitOptions
        Options passed to every fit.
    """

    alpha_level: float = 0.10
    candidate_beta: tuple[str, ...] = ()
    candidate_alpha: tuple[str, ...] = ()
    max_steps: int = 20
    model_kind: ModelKind = ModelKind.FRAILTY
    fit_options: FitOptions = field(default_factory=lambda: FitOptions(n_restarts=2))

    def __post_init__(self) -> None:
        if not 0.0 < self.alpha_level < 1.0:
            raise ValueError("alpha_level must lie in (0, 1)")
        if self.max_steps < 0:
            raise ValueError("max_steps must be nonnegative")
        object.__setattr__(self, "candidate_beta", tuple(self.candidate_beta))
        object.__setattr__(self, "candidate_alpha", tuple(self.candidate_alpha))
        object.__setattr__(self, "model_kind", ModelKind.parse(self.model_kind))


@dataclass
class StepRecord:
    """One audited evaluation.

    ``action`` is "add" or "drop" for accepted moves, "test-add" or
    "test-drop" for evaluations that did not change the model, and "skip"
    for candidates whose fit failed.
    """

    block: str
    action: str
    term: str
    statistic: float
    df: int
    pvalue: float
    loglik: float
    note: str = ""


@dataclass
class HeterogeneityRecord:
    statistic: float
    pvalue: float
    chosen: ModelKind
    gtdl_loglik: float
    frailty_loglik: float
    theta_hat: float
    caveat: str | None = None


@dataclass
class SelectionTrace:
    steps: list[StepRecord] = field(default_factory=list)
    final_spec: ModelSpec = field(default_factory=ModelSpec)
    final_loglik: float = float("nan")
    heterogeneity: HeterogeneityRecord | None = None
    notes: list[str] = field(default_factory=lambda: [DIRECTION_NOTE])

    def last_pvalues(self, block: str) -> dict[str, float]:
        """Most recent p-value per term in a block, from tests and accepted moves."""
        out: dict[str, float] = {}
        for s in self.steps:
            if s.block == block and s.action != "skip":
                out[s.term] = s.pvalue
        return out

    def to_dict(self) -> dict:
        het = None
        if self.heterogeneity is not None:
            het = asdict(self.heterogeneity)
            het["chosen"] = self.heterogeneity.chosen.value
        return {
            "steps": [asdict(s) for s in self.steps],
            "final_spec": {
                "kind": self.final_spec.kind.value,
                "beta_terms": list(self.final_spec.beta_terms),
                "alpha_terms": list(self.final_spec.alpha_terms),
            },
            "final_loglik": self.final_loglik,
            "heterogeneity": het,
            "notes": list(self.notes),
        }


class ModelFitter:
    """Fits specs from a term pool, caching results and warm-starting from the closest fit."""

    def __init__(self, pool: TermPool, opts: FitOptions | None = None):
        self.pool = pool
        self.opts = FitOptions() if opts is None else opts
        self._cache: dict[tuple, FitResult] = {}

    @staticmethod
    def _key(spec: ModelSpec) -> tuple:
        return (spec.kind, tuple(spec.beta_terms), tuple(spec.alpha_terms))

    def _warm_start(self, spec: ModelSpec, near: FitResult | None, data) -> ParamVector | None:
        if near is None:
            return None
        names = dict(zip(near.names, near.estimates))

        def block(prefix, cols):
            return np.array([names.get(f"{prefix}:{c}", 0.0) for c in cols])

        alpha = block("alpha", data.alpha_names)
        beta = block("beta", data.beta_names)
        theta = None
        if spec.kind is ModelKind.FRAILTY:
            theta = max(names.get("theta", 0.5), 0.05)
        return ParamVector(alpha, beta, theta)

    def __call__(self, spec: ModelSpec, near: FitResult | None = None) -> FitResult:
        key = self._key(spec)
        if key in self._cache:
            return self._cache[key]
        data = self.pool.dataset(spec)
        init = self._warm_start(spec, near, data)
        res = fit(spec.kind, data, replace(self.opts, initial_params=init), compute_information=False)
        if init is not None and not res.converged:
            cold = fit(spec.kind, data, replace(self.opts, initial_params=None), compute_information=False)
            if cold.converged or cold.loglik > res.loglik:
                res = cold
        self._cache[key] = res
        return res


def _with_terms(spec: ModelSpec, block: Block, terms: tuple[str, ...]) -> ModelSpec:
    return spec.replace(**{f"{block}_terms": terms})


def _try_fit(fitter: ModelFitter, spec: ModelSpec, near: FitResult) -> tuple[FitResult | None, str]:
    try:
        res = fitter(spec, near)
    except DesignError as exc:
        return None, f"rank deficient: {exc}"
    except (UnidentifiableError, ArithmeticError) as exc:
        return None, f"fit failed: {exc}"
    if not res.converged:
        return None, f"not converged: {res.message}"
    return res, ""


def _stepwise(
    fitter: ModelFitter,
    start: ModelSpec,
    block: Block,
    candidates: tuple[str, ...],
    config: SelectionConfig,
    trace: SelectionTrace,
) -> tuple[ModelSpec, FitResult]:
    level = config.alpha_level
    spec = start
    current = fitter(spec)
    if not current.converged:
        trace.notes.append(f"{block} base model did not converge: {current.message}")
    order = {t: i for i, t in enumerate(candidates)}

    for _ in range(config.max_steps):
        included = getattr(spec, f"{block}_terms")
        best: tuple[float, int, str, FitResult, float] | None = None
        for term in candidates:
            if term in included:
                continue
            trial, why = _try_fit(fitter, _with_terms(spec, block, (*included, term)), current)
            if trial is None:
                logger.info("skipping %s candidate %r: %s", block, term, why)
                trace.steps.append(StepRecord(block, "skip", term, np.nan, fitter.pool.width(term), np.nan, np.nan, why))
                continue
            df = fitter.pool.width(term)
            stat = lr_statistic(trial, current)
            p = lr_test(trial, current, df)
            trace.steps.append(StepRecord(block, "test-add", term, stat, df, p, trial.loglik))
            if p < level and (best is None or (p, order[term]) < (best[0], best[1])):
                best = (p, order[term], term, trial, stat)
        if best is None:
            break
        p, _, term, trial, stat = best
        spec = _with_terms(spec, block, (*included, term))
        current = trial
        trace.steps.append(StepRecord(block, "add", term, stat, fitter.pool.width(term), p, trial.loglik))
        spec, current = _backward(fitter, spec, current, block, order, config, trace)
    else:
        trace.notes.append(f"{block} selection stopped at max_steps={config.max_steps}")
    return spec, current


def _backward(fitter, spec, current, block, order, config, trace):
    level = config.alpha_level
    while True:
        included = getattr(spec, f"{block}_terms")
        worst = None
        for term in included:
            reduced_terms = tuple(t for t in included if t != term)
            reduced, why = _try_fit(fitter, _with_terms(spec, block, reduced_terms), current)
            if reduced is None:
                trace.steps.append(StepRecord(block, "skip", term, np.nan, fitter.pool.width(term), np.nan, np.nan, why))
                continue
            df = fitter.pool.width(term)
            stat = lr_statistic(current, reduced)
            p = lr_test(current, reduced, df)
            trace.steps.append(StepRecord(block, "test-drop", term, stat, df, p, reduced.loglik))
            key = (p, -order.get(term, 0))
            if p >= level and (worst is None or key > worst[0]):
                worst = (key, term, reduced, stat, p)
        if worst is None:
            return spec, current
        _, term, reduced, stat, p = worst
        spec = _with_terms(spec, block, tuple(t for t in included if t != term))
        current = reduced
        trace.steps.append(StepRecord(block, "drop", term, stat, fitter.pool.width(term), p, reduced.loglik))


def _check_candidates(pool: TermPool, names: tuple[str, ...]) -> None:
    missing = [c for c in names if c not in pool.terms]
    if missing:
        raise KeyError(f"candidate terms not in data: {missing}")


def select_beta(
    pool: TermPool,
    config: SelectionConfig,
    *,
    fitter: ModelFitter | None = None,
    trace: SelectionTrace | None = None,
) -> SelectionTrace:
    """Step 1: stepwise selection of the beta block with a scalar alpha.

    Candidates whose fits fail (rank deficient, unidentifiable or not
    converged) are skipped and logged in the trace.
    """
    _check_candidates(pool, config.candidate_beta)
    fitter = ModelFitter(pool, config.fit_options) if fitter is None else fitter
    trace = SelectionTrace() if trace is None else trace
    start = ModelSpec(config.model_kind, (), ())
    spec, res = _stepwise(fitter, start, "beta", config.candidate_beta, config, trace)
    trace.final_spec, trace.final_loglik = spec, res.loglik
    return trace


def select_alpha(
    pool: TermPool,
    beta_terms: tuple[str, ...],
    config: SelectionConfig,
    *,
    fitter: ModelFitter | None = None,
    trace: SelectionTrace | None = None,
) -> SelectionTrace:
    """Step 2: stepwise selection of the alpha block with the beta terms frozen.

    The alpha intercept is always retained.
    """
    _check_candidates(pool, config.candidate_alpha)
    fitter = ModelFitter(pool, config.fit_options) if fitter is None else fitter
    trace = SelectionTrace() if trace is None else trace
    start = ModelSpec(config.model_kind, tuple(beta_terms), ())
    spec, res = _stepwise(fitter, start, "alpha", config.candidate_alpha, config, trace)
    if not spec.alpha_terms:
        trace.notes.append("only alpha0 is included in the model")
    trace.final_spec, trace.final_loglik = spec, res.loglik
    return trace


def decide_heterogeneity(
    pool: TermPool,
    spec: ModelSpec,
    config: SelectionConfig,
    *,
    fitter: ModelFitter | None = None,
) -> tuple[ModelKind, HeterogeneityRecord, FitResult]:
    """Boundary LR test of theta = 0 on identical covariates.

    Returns the chosen kind, the test record and the fit of the chosen
    model.  The frailty model is tried from its default start and from the
    GTDL estimates; the better converged fit is used.  If neither converges
    the GTDL model is chosen and the record carries a caveat.
    """
    fitter = ModelFitter(pool, config.fit_options) if fitter is None else fitter
    g_spec = spec.replace(kind=ModelKind.GTDL)
    f_spec = spec.replace(kind=ModelKind.FRAILTY)
    g_fit = fitter(g_spec)
    data = pool.dataset(f_spec)
    tries = []
    for init in (None, ParamVector(g_fit.params_hat.alpha, g_fit.params_hat.beta, 0.5)):
        try:
            tries.append(fit(ModelKind.FRAILTY, data, replace(config.fit_options, initial_params=init), compute_information=False))
        except (ValueError, ArithmeticError) as exc:
            logger.info("frailty fit failed: %s", exc)
    ok = [t for t in tries if t.converged]
    if not ok:
        rec = HeterogeneityRecord(
            np.nan, np.nan, ModelKind.GTDL, g_fit.loglik, np.nan, np.nan,
            caveat="frailty fit did not converge; GTDL adopted without a heterogeneity test",
        )
        return ModelKind.GTDL, rec, g_fit
    f_fit = max(ok, key=lambda t: t.loglik)
    p = boundary_lr_test_theta(f_fit, g_fit)
    chosen = ModelKind.FRAILTY if p < config.alpha_level else ModelKind.GTDL
    rec = HeterogeneityRecord(
        lr_statistic(f_fit, g_fit), p, chosen, g_fit.loglik, f_fit.loglik, float(f_fit.params_hat.theta)
    )
    return chosen, rec, (f_fit if chosen is ModelKind.FRAILTY else g_fit)


def select_model(pool: TermPool, config: SelectionConfig) -> tuple[SelectionTrace, FitResult]:
    """Run step 1, step 2 and the heterogeneity decision.

    Returns the trace and a fit of the adopted model with standard errors.
    """
    fitter = ModelFitter(pool, config.fit_options)
    trace = select_beta(pool, config, fitter=fitter)
    trace = select_alpha(pool, trace.final_spec.beta_terms, config, fitter=fitter, trace=trace)
    chosen, rec, chosen_fit = decide_heterogeneity(pool, trace.final_spec, config, fitter=fitter)
    trace.heterogeneity = rec
    final = trace.final_spec.replace(kind=chosen)
    trace.final_spec = final
    data = pool.dataset(final)
    result = fit(chosen, data, replace(config.fit_options, initial_params=chosen_fit.params_hat))
    trace.final_loglik = result.loglik
    return trace, result
