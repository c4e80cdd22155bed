"""Maximum-likelihood fitting and likelihood-based inference."""

from __future__ import annotations

import logging
import math
import warnings
from dataclasses import dataclass, field, replace
from typing import Sequence

import numpy as np
from numpy.typing import ArrayLike, NDArray
from scipy import optimize, stats

from .model import (
    LinearPredictors,
    ModelEvaluationError,
    ModelKind,
    ParamVector,
    SurvivalDataset,
    _contributions,
)

__all__ = [
    "UnidentifiableError",
    "DesignError",
    "FitOptions",
    "FitResult",
    "fit",
    "default_initial_params",
    "numerical_gradient",
    "numerical_hessian",
    "observed_information",
    "wald_ci",
    "wald_pvalues",
    "lr_statistic",
    "lr_test",
    "boundary_lr_test_theta",
]

logger = logging.getLogger(__name__)

_EPS = np.finfo(float).eps
_STEP_SCALE = _EPS ** (1.0 / 3.0)
# log(theta) is clipped here so exp() stays finite during line searches.
_LOG_THETA_BOUNDS = (-60.0, 30.0)


class UnidentifiableError(ValueError):
    """The data carry no information about the model (e.g. no failures)."""


class DesignError(ValueError):
    """A design matrix is rank deficient."""


@dataclass
class FitOptions:
    max_iterations: int = 1000
    gradient_tolerance: float = 1e-5
    initial_params: ParamVector | None = None
    n_restarts: int = 3
    ci_level: float = 0.90
    seed: int = 0
    # Search over log(theta); False searches theta itself under a >= 0 bound.
    log_theta: bool = True

    def __post_init__(self) -> None:
        if self.max_iterations <= 0:
            raise ValueError("max_iterations must be positive")
        if not self.gradient_tolerance > 0:
            raise ValueError("gradient_tolerance must be positive")
        if self.n_restarts < 0:
            raise ValueError("n_restarts must be nonnegative")
        if not 0 < self.ci_level < 1:
            raise ValueError("ci_level must lie in (0, 1)")


@dataclass
class FitResult:
    """Outcome of a maximum-likelihood fit.

    ``se`` and ``ci`` hold NaN for coordinates whose standard error is
    undefined because the observed information is not positive definite.
    ``gradient_norm`` is the sup-norm of the log-likelihood gradient in the
    search coordinates (log theta for the frailty model).
    """

    params_hat: ParamVector
    se: NDArray[np.float64]
    ci: NDArray[np.float64]
    loglik: float
    observed_info: NDArray[np.float64]
    converged: bool
    n_evals: int
    model_kind: ModelKind
    names: list[str]
    ci_level: float = 0.90
    gradient_norm: float = np.nan
    info_positive_definite: bool = True
    n_obs: int = 0
    n_events: int = 0
    message: str = ""
    warnings: list[str] = field(default_factory=list)

    @classmethod
    def from_estimates(
        cls,
        params: ParamVector,
        se: ArrayLike,
        *,
        names: Sequence[str] | None = None,
        ci_level: float = 0.90,
        loglik: float = np.nan,
    ) -> "FitResult":
        """Result built from externally reported estimates and standard errors."""
        se = np.asarray(se, dtype=float)
        k = params.size
        if se.shape != (k,):
            raise ValueError(f"expected {k} standard errors, got shape {se.shape}")
        if names is None:
            names = params.names(
                ["(Intercept)"] + [f"z{j}" for j in range(1, params.alpha.size)],
                ["(Intercept)"] + [f"x{j}" for j in range(1, params.beta.size)],
            )
        cov = np.diag(se**2)
        with np.errstate(divide="ignore"):
            info = np.linalg.inv(cov) if np.all(se > 0) else np.full((k, k), np.nan)
        return cls(
            params_hat=params,
            se=se,
            ci=_intervals(params.to_array(), se, ci_level),
            loglik=float(loglik),
            observed_info=info,
            converged=True,
            n_evals=0,
            model_kind=params.kind,
            names=list(names),
            ci_level=ci_level,
            info_positive_definite=bool(np.all(se > 0)),
            message="reported estimates",
        )

    @property
    def estimates(self) -> NDArray[np.float64]:
        return self.params_hat.to_array()

    @property
    def n_params(self) -> int:
        return self.params_hat.size

    @property
    def covariance(self) -> NDArray[np.float64] | None:
        if not self.info_positive_definite:
            return None
        return np.linalg.inv(self.observed_info)

    def summary_rows(self) -> list[tuple[str, float, float, float, float]]:
        return [
            (name, est, se, lo, hi)
            for name, est, se, (lo, hi) in zip(self.names, self.estimates, self.se, self.ci)
        ]


def _check_data(data: SurvivalDataset) -> None:
    if data.n_events == 0:
        raise UnidentifiableError("no failures in data: the model is not identifiable")
    for label, x in (("beta", data.covariates_beta), ("alpha", data.covariates_alpha)):
        if x.shape[0] < x.shape[1] or np.linalg.matrix_rank(x) < x.shape[1]:
            raise DesignError(f"{label} design matrix is rank deficient")


def default_initial_params(data: SurvivalDataset, kind: ModelKind | str) -> ParamVector:
    """Starting point: alpha_0 = 0.1, beta_0 = log(events / total time), theta = 0.5."""
    kind = ModelKind.parse(kind)
    alpha = np.zeros(data.covariates_alpha.shape[1])
    alpha[0] = 0.1
    beta = np.zeros(data.covariates_beta.shape[1])
    beta[0] = np.log(max(data.n_events, 1) / math.fsum(data.times))
    return ParamVector(alpha, beta, 0.5 if kind is ModelKind.FRAILTY else None)


class _Objective:
    """Log-likelihood over a flat vector, with evaluation counting."""

    def __init__(self, data: SurvivalDataset, kind: ModelKind, log_theta: bool):
        self.data = data
        self.kind = kind
        self.log_theta = log_theta and kind is ModelKind.FRAILTY
        self.n_alpha = data.covariates_alpha.shape[1]
        self.n_beta = data.covariates_beta.shape[1]
        self.n_evals = 0

    def natural(self, u: NDArray) -> NDArray:
        if not self.log_theta:
            return np.asarray(u, dtype=float)
        v = np.array(u, dtype=float)
        v[-1] = np.exp(np.clip(v[-1], *_LOG_THETA_BOUNDS))
        return v

    def internal(self, v: NDArray) -> NDArray:
        if not self.log_theta:
            return np.asarray(v, dtype=float)
        u = np.array(v, dtype=float)
        u[-1] = np.log(max(u[-1], np.exp(_LOG_THETA_BOUNDS[0])))
        return u

    def loglik_natural(self, v: NDArray) -> float:
        """Log-likelihood at natural parameters; theta may dip slightly below 0."""
        self.n_evals += 1
        na, nb = self.n_alpha, self.n_beta
        eta_alpha = self.data.covariates_alpha @ v[:na]
        eta_beta = self.data.covariates_beta @ v[na : na + nb]
        theta = float(v[-1]) if self.kind is ModelKind.FRAILTY else None
        lp = LinearPredictors.__new__(LinearPredictors)
        object.__setattr__(lp, "eta_beta", eta_beta)
        object.__setattr__(lp, "eta_alpha", eta_alpha)
        with np.errstate(all="ignore"):
            total = math.fsum(_contributions(self.data.times, self.data.status, lp, 1.0, theta))
        return total if np.isfinite(total) else -np.inf

    def negloglik(self, u: NDArray) -> float:
        value = self.loglik_natural(self.natural(u))
        return -value if np.isfinite(value) else 1e100


def numerical_gradient(f, x: ArrayLike, steps: ArrayLike | None = None) -> NDArray[np.float64]:
    """Central-difference gradient with steps ``eps**(1/3) * max(1, |x_j|)``."""
    x = np.asarray(x, dtype=float)
    h = _STEP_SCALE * np.maximum(1.0, np.abs(x)) if steps is None else np.broadcast_to(steps, x.shape)
    g = np.empty_like(x)
    for j in range(x.size):
        e = np.zeros_like(x)
        e[j] = h[j]
        g[j] = (f(x + e) - f(x - e)) / (2.0 * h[j])
    return g


def numerical_hessian(f, x: ArrayLike, steps: ArrayLike | None = None) -> NDArray[np.float64]:
    """Symmetrized central-difference Hessian of ``f`` at ``x``.

    Steps default to ``eps**(1/3) * max(1, |x_j|)``.  The result is exactly
    symmetric: ``(H + H.T) / 2``.
    """
    x = np.asarray(x, dtype=float)
    k = x.size
    h = _STEP_SCALE * np.maximum(1.0, np.abs(x)) if steps is None else np.broadcast_to(steps, x.shape)
    f0 = f(x)
    H = np.empty((k, k))
    basis = np.eye(k) * h
    for i in range(k):
        ei = basis[i]
        H[i, i] = (f(x + ei) - 2.0 * f0 + f(x - ei)) / (h[i] * h[i])
        for j in range(i + 1, k):
            ej = basis[j]
            val = (f(x + ei + ej) - f(x + ei - ej) - f(x - ei + ej) + f(x - ei - ej)) / (4.0 * h[i] * h[j])
            H[i, j] = H[j, i] = val
    return 0.5 * (H + H.T)


def observed_information(
    params: ParamVector, data: SurvivalDataset, model_kind: ModelKind | str | None = None
) -> NDArray[np.float64]:
    """Negative Hessian of the log-likelihood at ``params`` (natural scale)."""
    kind = params.kind if model_kind is None else ModelKind.parse(model_kind)
    if kind is not params.kind:
        raise ValueError(f"parameters are for {params.kind.value}, not {kind.value}")
    obj = _Objective(data, kind, log_theta=False)
    info = -numerical_hessian(obj.loglik_natural, params.to_array())
    if not np.all(np.isfinite(info)):
        raise ModelEvaluationError("observed information is not finite")
    return info


def _is_pd(m: NDArray) -> bool:
    try:
        np.linalg.cholesky(m)
    except np.linalg.LinAlgError:
        return False
    return True


def _standard_errors(info: NDArray) -> tuple[NDArray, bool, list[str]]:
    """SEs from the inverse information; NaN where the information is degenerate.

    When the information is not positive definite, coordinates are removed
    one at a time until the remaining block is: a single removal that
    restores definiteness is preferred, otherwise the coordinate loading most
    on the non-positive eigendirections goes first.  Remaining coordinates
    get SEs from the inverse of that block.
    """
    k = info.shape[0]
    if _is_pd(info):
        return np.sqrt(np.diag(np.linalg.inv(info))), True, []
    keep = list(range(k))
    while keep:
        sub = info[np.ix_(keep, keep)]
        if _is_pd(sub):
            break
        w, vecs = np.linalg.eigh(sub)
        scale = max(np.max(np.abs(w)), 1.0)
        load = np.sum(vecs[:, w <= 1e-10 * scale] ** 2, axis=1)
        load[np.diag(sub) <= 0] = np.inf
        order = np.argsort(-load, kind="stable")
        for j in order:
            rest = keep[:j] + keep[j + 1 :]
            if rest and _is_pd(info[np.ix_(rest, rest)]):
                keep = rest
                break
        else:
            del keep[order[0]]
    se = np.full(k, np.nan)
    if keep:
        se[keep] = np.sqrt(np.diag(np.linalg.inv(info[np.ix_(keep, keep)])))
    msg = f"observed information is not positive definite; SEs undefined for coordinates {np.flatnonzero(np.isnan(se)).tolist()}"
    return se, False, [msg]


def _z(level: float) -> float:
    return float(stats.norm.ppf(1.0 - (1.0 - level) / 2.0))


def _intervals(est: NDArray, se: NDArray, level: float, critical_value: float | None = None) -> NDArray:
    z = _z(level) if critical_value is None else float(critical_value)
    return np.column_stack([est - z * se, est + z * se])


def wald_ci(
    fit: FitResult, level: float | None = None, *, critical_value: float | None = None
) -> NDArray[np.float64]:
    """Wald intervals ``est -/+ z * se``; rows are NaN where the SE is undefined.

    ``z`` is the exact standard-normal quantile for ``level`` unless an
    explicit ``critical_value`` is given, e.g. the tabulated 1.645 for 90%.
    """
    level = fit.ci_level if level is None else level
    if not 0 < level < 1:
        raise ValueError("level must lie in (0, 1)")
    if critical_value is not None and not critical_value > 0:
        raise ValueError("critical_value must be positive")
    return _intervals(fit.estimates, fit.se, level, critical_value)


def wald_pvalues(fit: FitResult) -> NDArray[np.float64]:
    """Two-sided Wald p-values for H0: parameter = 0."""
    with np.errstate(divide="ignore", invalid="ignore"):
        return 2.0 * stats.norm.sf(np.abs(fit.estimates / fit.se))


class _Search:
    def __init__(self, obj: _Objective, opts: FitOptions):
        self.obj = obj
        self.opts = opts
        bounds = None
        if obj.kind is ModelKind.FRAILTY and not obj.log_theta:
            k = obj.n_alpha + obj.n_beta + 1
            bounds = [(None, None)] * (k - 1) + [(0.0, None)]
        self.bounds = bounds

    def grad(self, u: NDArray) -> NDArray:
        return numerical_gradient(self.obj.negloglik, u)

    def grad_norm(self, u: NDArray) -> float:
        g = self.grad(u)
        if self.bounds is not None and u[-1] <= 0.0:
            # projected gradient at the theta >= 0 bound
            g[-1] = min(g[-1], 0.0)
        return float(np.max(np.abs(g)))

    def quasi_newton(self, u0: NDArray) -> NDArray:
        method = "L-BFGS-B" if self.bounds is not None else "BFGS"
        options = {"maxiter": self.opts.max_iterations, "gtol": self.opts.gradient_tolerance * 0.1}
        with warnings.catch_warnings():
            warnings.simplefilter("ignore", RuntimeWarning)
            res = optimize.minimize(
                self.obj.negloglik, u0, jac=self.grad, method=method, bounds=self.bounds, options=options
            )
        return res.x

    def simplex(self, u0: NDArray) -> NDArray:
        res = optimize.minimize(
            self.obj.negloglik,
            u0,
            method="Nelder-Mead",
            bounds=self.bounds,
            options={"maxiter": 200 * u0.size * 10, "xatol": 1e-8, "fatol": 1e-10, "adaptive": True},
        )
        return res.x

    def newton_polish(self, u: NDArray, max_steps: int = 6) -> NDArray:
        """Damped Newton steps on the FD Hessian; tightens the gradient well below tolerance."""
        f_u = self.obj.negloglik(u)
        for _ in range(max_steps):
            g = self.grad(u)
            if np.max(np.abs(g)) < 1e-3 * self.opts.gradient_tolerance:
                break
            H = numerical_hessian(self.obj.negloglik, u)
            try:
                np.linalg.cholesky(H)
                step = -np.linalg.solve(H, g)
            except np.linalg.LinAlgError:
                break
            t = 1.0
            improved = False
            while t > 1e-4:
                cand = u + t * step
                if self.bounds is not None and cand[-1] < 0:
                    t *= 0.5
                    continue
                f_c = self.obj.negloglik(cand)
                if f_c <= f_u:
                    u, f_u, improved = cand, f_c, True
                    break
                t *= 0.5
            if not improved:
                break
        return u

    def run(self, u0: NDArray) -> tuple[NDArray, bool]:
        tol = self.opts.gradient_tolerance
        u = self.newton_polish(self.quasi_newton(u0))
        if self.grad_norm(u) <= tol:
            return u, True
        logger.debug("quasi-Newton stalled (|g|=%.3g); trying simplex fallback", self.grad_norm(u))
        u = self.newton_polish(self.quasi_newton(self.simplex(u)))
        return u, self.grad_norm(u) <= tol


def fit(
    model_kind: ModelKind | str,
    data: SurvivalDataset,
    opts: FitOptions | None = None,
    *,
    compute_information: bool = True,
) -> FitResult:
    """Maximum-likelihood fit of the GTDL or GTDL gamma-frailty model.

    The search runs BFGS with central-difference gradients, then a few damped
    Newton steps; if the gradient is still above tolerance it falls back to
    Nelder-Mead and repeats, then tries ``opts.n_restarts`` jittered starts.
    A fit that never meets the gradient tolerance, or whose information
    for the alpha and beta coefficients is not positive definite, is
    returned with ``converged=False``.

    Raises
    ------
    UnidentifiableError
        If the data contain no failures.
    DesignError
        If either design matrix is rank deficient.
    """
    kind = ModelKind.parse(model_kind)
    opts = FitOptions() if opts is None else opts
    _check_data(data)
    obj = _Objective(data, kind, opts.log_theta)
    search = _Search(obj, opts)

    init = opts.initial_params if opts.initial_params is not None else default_initial_params(data, kind)
    if init.kind is not kind:
        if kind is ModelKind.FRAILTY:
            init = ParamVector(init.alpha, init.beta, 0.5)
        else:
            init = ParamVector(init.alpha, init.beta)
    if init.alpha.size != obj.n_alpha or init.beta.size != obj.n_beta:
        raise ValueError("initial_params do not match the dataset's design matrices")
    u0 = obj.internal(init.to_array())

    rng = np.random.default_rng(opts.seed)
    candidates: list[tuple[float, NDArray, bool]] = []
    starts = [u0]
    for attempt in range(opts.n_restarts + 1):
        if attempt > 0:
            jitter = rng.normal(scale=0.5, size=u0.size)
            starts.append(u0 + jitter)
        u, ok = search.run(starts[attempt])
        candidates.append((obj.negloglik(u), u, ok))
        if ok:
            break

    converged_ones = [c for c in candidates if c[2]]
    pool = converged_ones or candidates
    f_best, u_best, ok = min(pool, key=lambda c: c[0])
    v_hat = obj.natural(u_best)
    if kind is ModelKind.FRAILTY:
        v_hat[-1] = max(v_hat[-1], 0.0)
    params = ParamVector.from_array(v_hat, obj.n_alpha, obj.n_beta, kind)
    loglik_hat = -f_best
    grad_norm = search.grad_norm(u_best)
    names = params.names(data.alpha_names, data.beta_names)
    k = params.size

    notes: list[str] = []
    message = "converged" if ok else f"gradient norm {grad_norm:.3g} above tolerance {opts.gradient_tolerance:.3g}"
    info = np.full((k, k), np.nan)
    se, pd = np.full(k, np.nan), False
    if compute_information:
        try:
            info = observed_information(params, data, kind)
            se, pd, notes = _standard_errors(info)
        except ModelEvaluationError as exc:
            notes = [str(exc)]
        # a stationary point without curvature in the regression coefficients
        # is a flat ridge or a supremum at infinity, not a finite maximum
        reg = np.arange(obj.n_alpha + obj.n_beta)
        if ok and not (np.all(np.isfinite(info)) and _is_pd(info[np.ix_(reg, reg)])):
            ok = False
            message = "no finite maximum: information for the regression coefficients is not positive definite"
    if not ok:
        logger.warning("fit did not converge: %s", message)
    return FitResult(
        params_hat=params,
        se=se,
        ci=_intervals(params.to_array(), se, opts.ci_level),
        loglik=float(loglik_hat),
        observed_info=info,
        converged=bool(ok),
        n_evals=obj.n_evals,
        model_kind=kind,
        names=names,
        ci_level=opts.ci_level,
        gradient_norm=grad_norm,
        info_positive_definite=pd,
        n_obs=data.n,
        n_events=data.n_events,
        message=message,
        warnings=notes,
    )


def refit_with_level(fit_result: FitResult, level: float) -> FitResult:
    """Same fit with intervals recomputed at another confidence level."""
    return replace(fit_result, ci=_intervals(fit_result.estimates, fit_result.se, level), ci_level=level)


def lr_statistic(full: FitResult, reduced: FitResult, slack: float = 1e-6) -> float:
    """``2 (l_full - l_reduced)`` clamped at zero.

    Statistics below ``-slack`` indicate a reduced fit that beats the full
    one, which means one of the two optimizations stopped early; a warning
    is logged before clamping.
    """
    stat = 2.0 * (full.loglik - reduced.loglik)
    if stat < -slack:
        logger.warning("negative likelihood-ratio statistic %.3g clamped to 0", stat)
    return max(stat, 0.0)


def lr_test(full: FitResult, reduced: FitResult, df: int) -> float:
    """Upper chi-square(df) tail probability of the likelihood-ratio statistic.

    Nesting of ``reduced`` within ``full`` is the caller's responsibility.
    """
    if df <= 0:
        raise ValueError("df must be a positive integer")
    return float(stats.chi2.sf(lr_statistic(full, reduced), df))


def boundary_lr_test_theta(frailty_fit: FitResult, gtdl_fit: FitResult) -> float:
    """p-value for H0: theta = 0 under the 50:50 mixture of a point mass at 0 and chi-square(1)."""
    if frailty_fit.model_kind is not ModelKind.FRAILTY or gtdl_fit.model_kind is not ModelKind.GTDL:
        raise ValueError("expected a frailty fit and a GTDL fit")
    return float(0.5 * stats.chi2.sf(lr_statistic(frailty_fit, gtdl_fit), 1))
