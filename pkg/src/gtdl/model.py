"""GTDL and GTDL gamma-frailty model functions.

The generalized time-dependent logistic (GTDL) hazard is

    h0(t | x) = lam * exp(a t + x'b) / (1 + exp(a t + x'b))

where the time effect ``a`` may itself be a linear predictor ``x*'alpha``
(identity link).  Its cumulative hazard has the closed form

    H0(t | x) = (lam / a) * log((1 + exp(a t + x'b)) / (1 + exp(x'b)))

so that R(t) = exp(-H0(t)).  A negative time effect makes H0 bounded and the
reliability defective, with a cure fraction exp(-H0(inf)).

Integrating a Gamma(1/theta, 1/theta) multiplicative frailty out of the hazard
gives the marginal reliability (1 + theta H0)^(-1/theta) and the marginal
hazard h0 / (1 + theta H0).

Every function here is pure and vectorized over cases.
"""

from __future__ import annotations

import enum
import math
from dataclasses import dataclass, field
from typing import Mapping, Sequence

import numpy as np
from numpy.typing import ArrayLike, NDArray
from scipy.special import expit, log_expit

__all__ = [
    "DimensionError",
    "DomainError",
    "ModelEvaluationError",
    "ModelKind",
    "LinearPredictors",
    "ParamVector",
    "SurvivalDataset",
    "ModelSpec",
    "TermPool",
    "linear_predictor",
    "cumulative_hazard_gtdl",
    "hazard_gtdl",
    "reliability_gtdl",
    "density_gtdl",
    "hazard_ratio_gtdl",
    "cure_fraction_gtdl",
    "reliability_frailty",
    "hazard_frailty",
    "density_frailty",
    "hazard_ratio_frailty",
    "cure_fraction_frailty",
    "loglik_contributions",
    "loglik_gtdl",
    "loglik_frailty",
    "loglik",
]

# Below this magnitude of the time effect the removable singularity in
# H0 / log R is evaluated through its Taylor expansion.
ALPHA_SERIES_THRESHOLD = 1e-8
# Below this magnitude of theta * H0, log1p(theta H0) / theta uses its series.
THETA_SERIES_THRESHOLD = 1e-10
# expm1 form of the log-ratio is used while -1 <= a*t <= this value.
_EXPM1_SWITCH = 30.0


class DimensionError(ValueError):
    """Covariate and coefficient lengths do not match."""


class DomainError(ValueError):
    """Quantity undefined for the requested parameter regime."""


class ModelEvaluationError(ArithmeticError):
    """A model function or log-likelihood evaluated to a non-finite value."""


class ModelKind(str, enum.Enum):
    GTDL = "gtdl"
    FRAILTY = "frailty"

    @classmethod
    def parse(cls, value: "ModelKind | str") -> "ModelKind":
        if isinstance(value, cls):
            return value
        key = str(value).strip().lower().replace("_", "-")
        aliases = {
            "gtdl": cls.GTDL,
            "frailty": cls.FRAILTY,
            "gtdl-frailty": cls.FRAILTY,
            "gamma-frailty": cls.FRAILTY,
        }
        try:
            return aliases[key]
        except KeyError:
            raise ValueError(f"unknown model kind {value!r}") from None


@dataclass(frozen=True)
class LinearPredictors:
    """Per-case predictors: ``eta_beta`` = x'beta and ``eta_alpha`` = x*'alpha."""

    eta_beta: NDArray[np.float64]
    eta_alpha: NDArray[np.float64]

    def __init__(self, eta_beta: ArrayLike, eta_alpha: ArrayLike):
        eb = np.asarray(eta_beta, dtype=float)
        ea = np.asarray(eta_alpha, dtype=float)
        if not (np.all(np.isfinite(eb)) and np.all(np.isfinite(ea))):
            raise ModelEvaluationError("linear predictors must be finite")
        object.__setattr__(self, "eta_beta", eb)
        object.__setattr__(self, "eta_alpha", ea)


@dataclass
class ParamVector:
    """Packed GTDL parameters ``(alpha_0..alpha_q, beta_0..beta_p, theta)``.

    ``lam`` is the hazard scale, fixed at 1 because it is not identifiable
    alongside the intercept ``beta_0``.
    """

    alpha: NDArray[np.float64]
    beta: NDArray[np.float64]
    theta: float | None = None
    lam: float = 1.0

    def __post_init__(self) -> None:
        self.alpha = np.atleast_1d(np.asarray(self.alpha, dtype=float))
        self.beta = np.atleast_1d(np.asarray(self.beta, dtype=float))
        if self.theta is not None:
            self.theta = float(self.theta)
            if not self.theta >= 0:
                raise DomainError(f"theta must be nonnegative, got {self.theta}")
        if not self.lam > 0:
            raise DomainError(f"lam must be positive, got {self.lam}")

    @property
    def kind(self) -> ModelKind:
        return ModelKind.GTDL if self.theta is None else ModelKind.FRAILTY

    @property
    def size(self) -> int:
        return self.alpha.size + self.beta.size + (self.theta is not None)

    def to_array(self) -> NDArray[np.float64]:
        parts = [self.alpha, self.beta]
        if self.theta is not None:
            parts.append(np.array([self.theta]))
        return np.concatenate(parts)

    @classmethod
    def from_array(
        cls, values: ArrayLike, n_alpha: int, n_beta: int, kind: ModelKind | str
    ) -> "ParamVector":
        kind = ModelKind.parse(kind)
        v = np.asarray(values, dtype=float).ravel()
        expected = n_alpha + n_beta + (kind is ModelKind.FRAILTY)
        if v.size != expected:
            raise DimensionError(f"expected {expected} parameters, got {v.size}")
        theta = float(v[-1]) if kind is ModelKind.FRAILTY else None
        return cls(v[:n_alpha].copy(), v[n_alpha : n_alpha + n_beta].copy(), theta)

    def names(
        self, alpha_names: Sequence[str] | None = None, beta_names: Sequence[str] | None = None
    ) -> list[str]:
        a = list(alpha_names) if alpha_names is not None else [f"alpha{j}" for j in range(self.alpha.size)]
        b = list(beta_names) if beta_names is not None else [f"beta{j}" for j in range(self.beta.size)]
        out = [f"alpha:{n}" for n in a] + [f"beta:{n}" for n in b]
        if self.theta is not None:
            out.append("theta")
        return out


def _as_matrix(x: ArrayLike, n: int, name: str) -> NDArray[np.float64]:
    m = np.asarray(x, dtype=float)
    if m.ndim == 1:
        m = m.reshape(-1, 1)
    if m.ndim != 2 or m.shape[0] != n:
        raise DimensionError(f"{name} must have {n} rows, got shape {m.shape}")
    return m


@dataclass
class SurvivalDataset:
    """Right-censored observations with separate beta and alpha design matrices.

    Both design matrices carry a leading intercept column of ones.  Column
    names follow the convention ``"VAR[level]"`` for dummy-coded categories.
    ``row_ids`` are stable identifiers used by the deletion diagnostics.
    """

    times: NDArray[np.float64]
    status: NDArray[np.int_]
    covariates_beta: NDArray[np.float64]
    covariates_alpha: NDArray[np.float64]
    row_ids: NDArray[np.int_] | None = None
    beta_names: list[str] = field(default_factory=list)
    alpha_names: list[str] = field(default_factory=list)

    def __post_init__(self) -> None:
        self.times = np.asarray(self.times, dtype=float).ravel()
        n = self.times.size
        status = np.asarray(self.status).ravel()
        if status.size != n:
            raise DimensionError(f"status has {status.size} entries for {n} times")
        if not np.all(np.isin(status, (0, 1))):
            raise ValueError("status must contain only 0 (censored) or 1 (failure)")
        self.status = status.astype(int)
        if not np.all(np.isfinite(self.times)) or np.any(self.times <= 0):
            raise ValueError("times must be finite and strictly positive")
        self.covariates_beta = _as_matrix(self.covariates_beta, n, "covariates_beta")
        self.covariates_alpha = _as_matrix(self.covariates_alpha, n, "covariates_alpha")
        for name, m in (("covariates_beta", self.covariates_beta), ("covariates_alpha", self.covariates_alpha)):
            if not np.all(np.isfinite(m)):
                raise ValueError(f"{name} contains missing or non-finite values")
            if n and not np.all(m[:, 0] == 1.0):
                raise ValueError(f"first column of {name} must be the intercept (all ones)")
        if self.row_ids is None:
            self.row_ids = np.arange(1, n + 1)
        self.row_ids = np.asarray(self.row_ids).ravel()
        if self.row_ids.size != n:
            raise DimensionError("row_ids length does not match number of cases")
        if not self.beta_names:
            self.beta_names = ["(Intercept)"] + [f"x{j}" for j in range(1, self.covariates_beta.shape[1])]
        if not self.alpha_names:
            self.alpha_names = ["(Intercept)"] + [f"z{j}" for j in range(1, self.covariates_alpha.shape[1])]
        if len(self.beta_names) != self.covariates_beta.shape[1]:
            raise DimensionError("beta_names length does not match covariates_beta")
        if len(self.alpha_names) != self.covariates_alpha.shape[1]:
            raise DimensionError("alpha_names length does not match covariates_alpha")

    @classmethod
    def from_arrays(
        cls,
        times: ArrayLike,
        status: ArrayLike,
        x_beta: ArrayLike | None = None,
        x_alpha: ArrayLike | None = None,
        *,
        beta_names: Sequence[str] | None = None,
        alpha_names: Sequence[str] | None = None,
        row_ids: ArrayLike | None = None,
    ) -> "SurvivalDataset":
        """Build a dataset from covariates *without* intercept columns."""
        t = np.asarray(times, dtype=float).ravel()
        n = t.size
        ones = np.ones((n, 1))
        xb = ones if x_beta is None else np.hstack([ones, _as_matrix(x_beta, n, "x_beta")])
        xa = ones if x_alpha is None else np.hstack([ones, _as_matrix(x_alpha, n, "x_alpha")])
        bn = ["(Intercept)", *beta_names] if beta_names is not None else []
        an = ["(Intercept)", *alpha_names] if alpha_names is not None else []
        return cls(t, np.asarray(status), xb, xa, None if row_ids is None else np.asarray(row_ids), bn, an)

    @property
    def n(self) -> int:
        return self.times.size

    @property
    def n_events(self) -> int:
        return int(self.status.sum())

    def subset(self, index: ArrayLike) -> "SurvivalDataset":
        idx = np.asarray(index)
        return SurvivalDataset(
            self.times[idx],
            self.status[idx],
            self.covariates_beta[idx],
            self.covariates_alpha[idx],
            self.row_ids[idx],
            list(self.beta_names),
            list(self.alpha_names),
        )

    def without(self, case_ids: Sequence) -> "SurvivalDataset":
        """Copy of the dataset with the cases whose ``row_ids`` are listed removed."""
        drop = np.isin(self.row_ids, np.asarray(list(case_ids)))
        missing = set(np.asarray(list(case_ids)).tolist()) - set(self.row_ids[drop].tolist())
        if missing:
            raise KeyError(f"unknown case ids: {sorted(missing)}")
        return self.subset(np.flatnonzero(~drop))

    def linear_predictors(self, params: ParamVector) -> LinearPredictors:
        return LinearPredictors(
            linear_predictor(self.covariates_beta, params.beta),
            linear_predictor(self.covariates_alpha, params.alpha),
        )


@dataclass(frozen=True)
class ModelSpec:
    """Model family plus the covariate terms entering each linear predictor."""

    kind: ModelKind = ModelKind.GTDL
    beta_terms: tuple[str, ...] = ()
    alpha_terms: tuple[str, ...] = ()

    def __post_init__(self) -> None:
        object.__setattr__(self, "kind", ModelKind.parse(self.kind))
        object.__setattr__(self, "beta_terms", tuple(self.beta_terms))
        object.__setattr__(self, "alpha_terms", tuple(self.alpha_terms))

    def replace(self, **changes) -> "ModelSpec":
        fields = {"kind": self.kind, "beta_terms": self.beta_terms, "alpha_terms": self.alpha_terms}
        fields.update(changes)
        return ModelSpec(**fields)


@dataclass
class TermPool:
    """Candidate covariate terms, each a block of one or more design columns.

    A continuous covariate is a one-column block; a categorical covariate is
    the block of its dummy columns, so it enters or leaves a model as a unit.
    """

    times: NDArray[np.float64]
    status: NDArray[np.int_]
    terms: Mapping[str, NDArray[np.float64]]
    column_names: Mapping[str, list[str]] = field(default_factory=dict)
    row_ids: NDArray[np.int_] | None = None

    def __post_init__(self) -> None:
        self.times = np.asarray(self.times, dtype=float).ravel()
        self.status = np.asarray(self.status).ravel()
        n = self.times.size
        terms = {}
        names = dict(self.column_names)
        for key, block in self.terms.items():
            block = _as_matrix(block, n, f"term {key!r}")
            terms[key] = block
            if key not in names:
                names[key] = [key] if block.shape[1] == 1 else [f"{key}[{j}]" for j in range(1, block.shape[1] + 1)]
        self.terms = terms
        self.column_names = names
        if self.row_ids is None:
            self.row_ids = np.arange(1, n + 1)

    def width(self, term: str) -> int:
        return self.terms[term].shape[1]

    def dataset(self, spec: ModelSpec) -> SurvivalDataset:
        n = self.times.size
        unknown = [t for t in (*spec.beta_terms, *spec.alpha_terms) if t not in self.terms]
        if unknown:
            raise KeyError(f"unknown covariate terms: {unknown}")

        def block(term_list):
            cols = [np.ones((n, 1))] + [self.terms[t] for t in term_list]
            names = ["(Intercept)"] + [c for t in term_list for c in self.column_names[t]]
            return np.hstack(cols), names

        xb, bn = block(spec.beta_terms)
        xa, an = block(spec.alpha_terms)
        return SurvivalDataset(self.times, self.status, xb, xa, self.row_ids, bn, an)


def linear_predictor(x: ArrayLike, coef: ArrayLike) -> NDArray[np.float64] | float:
    """Dot product of a covariate row (or design matrix) with coefficients."""
    x = np.asarray(x, dtype=float)
    coef = np.asarray(coef, dtype=float).ravel()
    if x.shape[-1] != coef.size:
        raise DimensionError(f"covariates have {x.shape[-1]} columns but {coef.size} coefficients were given")
    out = x @ coef
    return float(out) if np.ndim(out) == 0 else out


def _softplus(z):
    return np.logaddexp(0.0, z)


def _log_ratio_over_alpha(t, eta_alpha, eta_beta):
    """log((1 + e^{a t + b}) / (1 + e^b)) / a, continuous through a = 0."""
    t, a, b = np.broadcast_arrays(
        np.asarray(t, dtype=float), np.asarray(eta_alpha, dtype=float), np.asarray(eta_beta, dtype=float)
    )
    at = a * t
    s = expit(b)
    with np.errstate(over="ignore", invalid="ignore", divide="ignore"):
        small = np.log1p(s * np.expm1(np.clip(at, -1.0, _EXPM1_SWITCH)))
        large = _softplus(at + b) - _softplus(b)
        log_ratio = np.where((at >= -1.0) & (at <= _EXPM1_SWITCH), small, large)
        direct = log_ratio / a
    tiny = np.abs(a) < ALPHA_SERIES_THRESHOLD
    if np.any(tiny):
        series = t * s + 0.5 * a * t * t * s * (1.0 - s)
        direct = np.where(tiny, series, direct)
    return direct


def _log1p_over_theta(theta, cumhaz):
    """log1p(theta H) / theta with its theta -> 0 limit H."""
    x = theta * cumhaz
    with np.errstate(divide="ignore", invalid="ignore"):
        direct = np.log1p(x) / theta
    series = cumhaz * (1.0 - 0.5 * x + x * x / 3.0)
    return np.where(np.abs(x) < THETA_SERIES_THRESHOLD, series, direct)


def _check_lam(lam: float) -> None:
    if not lam > 0:
        raise DomainError(f"lam must be positive, got {lam}")


def _check_theta(theta: float) -> None:
    if not theta >= 0:
        raise DomainError(f"theta must be nonnegative, got {theta}")


def _scalar(x):
    return float(x) if np.ndim(x) == 0 else x


def cumulative_hazard_gtdl(t: ArrayLike, lp: LinearPredictors, lam: float = 1.0):
    """GTDL cumulative hazard H0(t); ``t`` may be ``inf`` in the defective regime."""
    _check_lam(lam)
    t = np.asarray(t, dtype=float)
    ea, eb = lp.eta_alpha, lp.eta_beta
    finite = lam * _log_ratio_over_alpha(np.where(np.isinf(t), 0.0, t), ea, eb)
    if np.any(np.isinf(t)):
        with np.errstate(divide="ignore"):
            limit = np.where(np.asarray(ea) < 0, -lam * _softplus(eb) / ea, np.inf)
        finite = np.where(np.isinf(t), limit, finite)
    return _scalar(finite)


def hazard_gtdl(t: ArrayLike, lp: LinearPredictors, lam: float = 1.0):
    """GTDL hazard ``lam * logistic(eta_alpha * t + eta_beta)``."""
    _check_lam(lam)
    return _scalar(lam * expit(lp.eta_alpha * np.asarray(t, dtype=float) + lp.eta_beta))


def reliability_gtdl(t: ArrayLike, lp: LinearPredictors, lam: float = 1.0):
    """GTDL reliability ``((1 + e^{a t + b}) / (1 + e^b)) ** (-lam / a)``.

    Evaluated as ``exp(-H0(t))``; the ``a -> 0`` limit is the exponential
    model with rate ``lam * logistic(b)``.
    """
    return _scalar(np.exp(-np.asarray(cumulative_hazard_gtdl(t, lp, lam))))


def density_gtdl(t: ArrayLike, lp: LinearPredictors, lam: float = 1.0):
    h = np.asarray(hazard_gtdl(t, lp, lam))
    return _scalar(h * np.asarray(reliability_gtdl(t, lp, lam)))


def hazard_ratio_gtdl(t: ArrayLike, lp_i: LinearPredictors, lp_j: LinearPredictors, lam: float = 1.0):
    """h(t | x_i) / h(t | x_j), computed on the log scale to avoid underflow."""
    _check_lam(lam)
    t = np.asarray(t, dtype=float)
    log_hi = log_expit(lp_i.eta_alpha * t + lp_i.eta_beta)
    log_hj = log_expit(lp_j.eta_alpha * t + lp_j.eta_beta)
    return _scalar(np.exp(log_hi - log_hj))


def cure_fraction_gtdl(lp: LinearPredictors, lam: float = 1.0):
    """Long-term survivor fraction ``(1 + e^{eta_beta}) ** (lam / eta_alpha)``.

    Raises
    ------
    DomainError
        If any ``eta_alpha >= 0``; the model is then proper and has no cure
        fraction.
    """
    _check_lam(lam)
    ea = np.asarray(lp.eta_alpha, dtype=float)
    if np.any(ea >= 0):
        raise DomainError("no cure fraction in proper regime (eta_alpha >= 0)")
    return _scalar(np.exp(lam * _softplus(lp.eta_beta) / ea))


def reliability_frailty(t: ArrayLike, lp: LinearPredictors, lam: float = 1.0, theta: float = 1.0):
    """Marginal reliability ``(1 + theta * H0(t)) ** (-1 / theta)`` under gamma frailty."""
    _check_theta(theta)
    h0 = np.asarray(cumulative_hazard_gtdl(t, lp, lam))
    return _scalar(np.exp(-_log1p_over_theta(theta, h0)))


def hazard_frailty(t: ArrayLike, lp: LinearPredictors, lam: float = 1.0, theta: float = 1.0):
    _check_theta(theta)
    bracket = 1.0 + theta * np.asarray(cumulative_hazard_gtdl(t, lp, lam))
    return _scalar(np.asarray(hazard_gtdl(t, lp, lam)) / bracket)


def density_frailty(t: ArrayLike, lp: LinearPredictors, lam: float = 1.0, theta: float = 1.0):
    """Marginal density ``h0(t) / (1 + theta H0(t)) ** (1 + 1/theta)``."""
    _check_theta(theta)
    cum = np.asarray(cumulative_hazard_gtdl(t, lp, lam))
    with np.errstate(divide="ignore"):
        # a hazard that underflows to 0 gives log 0 = -inf and density 0
        log_h = np.log(np.asarray(hazard_gtdl(t, lp, lam)))
    log_f = log_h - np.log1p(theta * cum) - _log1p_over_theta(theta, cum)
    return _scalar(np.exp(log_f))


def hazard_ratio_frailty(
    t: ArrayLike, lp_i: LinearPredictors, lp_j: LinearPredictors, lam: float = 1.0, theta: float = 1.0
):
    """Ratio of marginal frailty hazards; the brackets make it time-varying even for equal time effects."""
    _check_theta(theta)
    base = np.asarray(hazard_ratio_gtdl(t, lp_i, lp_j, lam))
    bi = np.log1p(theta * np.asarray(cumulative_hazard_gtdl(t, lp_i, lam)))
    bj = np.log1p(theta * np.asarray(cumulative_hazard_gtdl(t, lp_j, lam)))
    return _scalar(base * np.exp(bj - bi))


def cure_fraction_frailty(lp: LinearPredictors, lam: float = 1.0, theta: float = 1.0):
    """Frailty cure fraction ``[1 - (lam theta / a) log(1 + e^b)] ** (-1/theta)``."""
    _check_theta(theta)
    ea = np.asarray(lp.eta_alpha, dtype=float)
    if np.any(ea >= 0):
        raise DomainError("no cure fraction in proper regime (eta_alpha >= 0)")
    limit = -lam * _softplus(lp.eta_beta) / ea
    return _scalar(np.exp(-_log1p_over_theta(theta, limit)))


def _contributions(
    times: NDArray, status: NDArray, lp: LinearPredictors, lam: float, theta: float | None
) -> NDArray[np.float64]:
    # theta may be slightly negative here: the frailty log-likelihood extends
    # analytically past theta = 0 while 1 + theta * H0 > 0, which lets
    # finite-difference stencils straddle the boundary.
    z = lp.eta_alpha * times + lp.eta_beta
    log_h = np.log(lam) + log_expit(z)
    cum = lam * _log_ratio_over_alpha(times, lp.eta_alpha, lp.eta_beta)
    if theta is None:
        out = status * log_h - cum
    else:
        with np.errstate(invalid="ignore", divide="ignore"):
            out = status * (log_h - np.log1p(theta * cum)) - _log1p_over_theta(theta, cum)
    return out


def loglik_contributions(params: ParamVector, data: SurvivalDataset) -> NDArray[np.float64]:
    """Per-case log-likelihood terms ``delta_i log h(t_i) + log R(t_i)``."""
    lp = data.linear_predictors(params)
    with np.errstate(over="ignore", invalid="ignore", divide="ignore"):
        out = _contributions(data.times, data.status, lp, params.lam, params.theta)
    if not np.all(np.isfinite(out)):
        raise ModelEvaluationError("log-likelihood is not finite at these parameters")
    return out


def loglik_gtdl(params: ParamVector, data: SurvivalDataset) -> float:
    if params.theta is not None:
        raise ValueError("loglik_gtdl expects parameters without theta")
    return math.fsum(loglik_contributions(params, data))


def loglik_frailty(params: ParamVector, data: SurvivalDataset) -> float:
    """Gamma-frailty log-likelihood ``sum delta_i log h(t_i) + log R(t_i)``.

    ``h`` and ``R`` are the marginal hazard and reliability; per-case time
    effects come from ``data.covariates_alpha``.
    """
    if params.theta is None:
        raise ValueError("loglik_frailty expects a theta parameter")
    return math.fsum(loglik_contributions(params, data))


def loglik(params: ParamVector, data: SurvivalDataset) -> float:
    return math.fsum(loglik_contributions(params, data))
