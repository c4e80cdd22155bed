"""GTDL and GTDL gamma-frailty models for right-censored reliability data.

The GTDL hazard ``h(t | x) = lam * logistic(alpha t + x'beta)`` gives
non-proportional hazards; a negative time effect makes the reliability
defective (a cure fraction).  The gamma-frailty extension adds unobserved
heterogeneity with variance ``theta``.
"""

from .estimation import (
    DesignError,
    FitOptions,
    FitResult,
    UnidentifiableError,
    boundary_lr_test_theta,
    fit,
    lr_test,
    observed_information,
    wald_ci,
    wald_pvalues,
)
from .model import (
    DimensionError,
    DomainError,
    LinearPredictors,
    ModelEvaluationError,
    ModelKind,
    ModelSpec,
    ParamVector,
    SurvivalDataset,
    TermPool,
    cumulative_hazard_gtdl,
    cure_fraction_frailty,
    cure_fraction_gtdl,
    density_frailty,
    density_gtdl,
    hazard_frailty,
    hazard_gtdl,
    hazard_ratio_frailty,
    hazard_ratio_gtdl,
    linear_predictor,
    loglik,
    loglik_contributions,
    loglik_frailty,
    loglik_gtdl,
    reliability_frailty,
    reliability_gtdl,
)

__version__ = "0.1.0"

__all__ = [
    "DesignError",
    "DimensionError",
    "DomainError",
    "FitOptions",
    "FitResult",
    "LinearPredictors",
    "ModelEvaluationError",
    "ModelKind",
    "ModelSpec",
    "ParamVector",
    "SurvivalDataset",
    "TermPool",
    "UnidentifiableError",
    "boundary_lr_test_theta",
    "cumulative_hazard_gtdl",
    "cure_fraction_frailty",
    "cure_fraction_gtdl",
    "density_frailty",
    "density_gtdl",
    "fit",
    "hazard_frailty",
    "hazard_gtdl",
    "hazard_ratio_frailty",
    "hazard_ratio_gtdl",
    "linear_predictor",
    "loglik",
    "loglik_contributions",
    "loglik_frailty",
    "loglik_gtdl",
    "lr_test",
    "observed_information",
    "reliability_frailty",
    "reliability_gtdl",
    "wald_ci",
    "wald_pvalues",
]
