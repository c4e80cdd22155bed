import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from scipy import integrate, stats

from gtdl.model import (
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

# Reference values below were computed independently with mpmath at 30 digits.
R_T2_A05_B0 = 0.289317952514053
LOGLIK_CENSORED_T1 = -0.561859607240323
LOGLIK_EVENT_T1 = -1.035936591420429
FRAILTY_R_T2_THETA1 = 0.446382933971432
FRAILTY_R_GENERIC = 0.641160836399241  # t=1.5, a=-0.3, b=0.4, theta=2.5
FRAILTY_H_GENERIC = 0.160470204594211
FRAILTY_LOGLIK_EVENT = -2.274121933518998
FRAILTY_CURE_A05_THETA1 = 0.419059784196


def lp(b, a):
    return LinearPredictors(b, a)


finite = st.floats(-6, 6, allow_nan=False)
nonzero_alpha = st.floats(-4, 4).filter(lambda a: abs(a) > 1e-3)
times = st.floats(1e-3, 20)
thetas = st.floats(1e-3, 20)


class TestLinearPredictor:
    @pytest.mark.parametrize(
        "x, coef, expected",
        [
            ((1, 0, 0), (-5.33, 1.94, 0.83), -5.33),
            ((1, 1, 0), (-6.1317, 0.8631, 5.8098), -5.2686),
            ((1, 2.45), (-5.5598, 0.0362), -5.47111),
        ],
    )
    def test_examples(self, x, coef, expected):
        assert linear_predictor(x, coef) == pytest.approx(expected, abs=1e-10)

    def test_matrix_input(self):
        x = np.array([[1.0, 2.0], [1.0, -1.0]])
        np.testing.assert_allclose(linear_predictor(x, [0.5, 2.0]), [4.5, -1.5])

    def test_length_mismatch(self):
        with pytest.raises(DimensionError):
            linear_predictor((1, 2), (1, 2, 3))


class TestLinearPredictors:
    def test_rejects_nonfinite(self):
        with pytest.raises(ModelEvaluationError):
            LinearPredictors(np.nan, 0.1)

    def test_broadcasts_arrays(self):
        p = LinearPredictors([0.1, 0.2], [0.5, 0.5])
        assert p.eta_beta.shape == (2,)


class TestHazardGTDL:
    @pytest.mark.parametrize("a", [-3.0, 0.0, 0.7])
    def test_origin_is_half_lambda(self, a):
        assert hazard_gtdl(0.0, lp(0.0, a)) == 0.5

    def test_saturates_at_lambda(self):
        assert hazard_gtdl(1e4, lp(0.0, 0.5), lam=2.0) == pytest.approx(2.0)

    def test_reference_value(self):
        assert hazard_gtdl(1.0, lp(-0.3, 0.2)) == pytest.approx(0.475020812521, abs=1e-11)

    def test_no_overflow_for_huge_arguments(self):
        with np.errstate(all="raise"):
            assert hazard_gtdl(1e6, lp(800.0, 5.0)) == 1.0
            assert hazard_gtdl(1e6, lp(-800.0, -5.0)) == 0.0

    @given(t=times, b=finite, a=finite, lam=st.floats(0.1, 5))
    def test_bounded_by_lambda(self, t, b, a, lam):
        h = hazard_gtdl(t, lp(b, a), lam)
        assert 0.0 <= h <= lam


class TestReliabilityGTDL:
    def test_origin(self):
        assert reliability_gtdl(0.0, lp(1.3, -2.0)) == 1.0

    def test_reference_value(self):
        # ((1 + e) / 2) ** -2
        assert reliability_gtdl(2.0, lp(0.0, 0.5)) == pytest.approx(R_T2_A05_B0, rel=1e-13)

    def test_defective_limit_matches_cure_fraction(self):
        p = lp(0.0, -0.5)
        assert reliability_gtdl(np.inf, p) == pytest.approx(0.25, rel=1e-14)
        assert reliability_gtdl(200.0, p) == pytest.approx(cure_fraction_gtdl(p), rel=1e-12)

    def test_alpha_zero_is_exponential(self):
        b = 0.7
        rate = 1.0 / (1.0 + math.exp(-b))
        for a in (0.0, 1e-10, -1e-10):
            # first-order term of the expansion in alpha
            expected = 3.0 * rate + 0.5 * a * 9.0 * rate * (1.0 - rate)
            assert cumulative_hazard_gtdl(3.0, lp(b, a)) == pytest.approx(expected, rel=1e-14)

    def test_continuous_through_series_switch(self):
        # values just inside and outside the series branch agree to first order in alpha
        b, t = -0.4, 2.0
        inside = cumulative_hazard_gtdl(t, lp(b, 0.9e-8))
        outside = cumulative_hazard_gtdl(t, lp(b, 1.1e-8))
        assert inside == pytest.approx(outside, rel=1e-8)

    def test_precision_when_logistic_saturated(self):
        # sigma(b) ~ 1 and a t very negative: naive forms cancel catastrophically
        b, a, t = 30.0, -1.0, 5.0
        exact = (1.0 / a) * (np.logaddexp(0, a * t + b) - np.logaddexp(0, b))
        assert cumulative_hazard_gtdl(t, lp(b, a)) == pytest.approx(exact, rel=1e-12)

    @given(b=finite, a=nonzero_alpha, t1=times, t2=times)
    def test_nonincreasing(self, b, a, t1, t2):
        lo, hi = sorted((t1, t2))
        assert reliability_gtdl(hi, lp(b, a)) <= reliability_gtdl(lo, lp(b, a)) + 1e-15

    def test_vectorized_over_cases(self):
        p = LinearPredictors([0.0, 1.0], [0.5, -0.5])
        out = reliability_gtdl(np.array([2.0, 2.0]), p)
        assert out.shape == (2,)
        assert out[0] == pytest.approx(R_T2_A05_B0)


class TestDensityGTDL:
    def test_origin(self):
        assert density_gtdl(0.0, lp(0.0, 0.3)) == 0.5

    @pytest.mark.parametrize("a, mass", [(0.5, 1.0), (-0.5, 0.75)])
    def test_quadrature_mass(self, a, mass):
        total, _ = integrate.quad(lambda t: density_gtdl(t, lp(0.0, a)), 0, np.inf, limit=200)
        assert total == pytest.approx(mass, abs=1e-6)

    @settings(max_examples=50)
    @given(b=finite, a=nonzero_alpha, t=times)
    def test_equals_hazard_times_reliability(self, b, a, t):
        p = lp(b, a)
        assert density_gtdl(t, p) == pytest.approx(hazard_gtdl(t, p) * reliability_gtdl(t, p), rel=1e-14)


class TestHazardRatioGTDL:
    def test_identical_profiles(self):
        p = lp(0.3, -0.7)
        np.testing.assert_allclose(hazard_ratio_gtdl(np.linspace(0, 10, 11), p, p), 1.0)

    def test_reference_value(self):
        # (1 + 1) / (1 + e) * e
        assert hazard_ratio_gtdl(0.0, lp(1.0, 0.0), lp(0.0, 0.0)) == pytest.approx(1.462117157, abs=1e-9)

    def test_converges_to_one(self):
        assert hazard_ratio_gtdl(100.0, lp(1.0, 0.5), lp(-1.0, 0.5)) == pytest.approx(1.0, abs=1e-12)

    def test_time_effect_does_not_vanish(self):
        hi, hj = lp(1.0, 0.5), lp(-1.0, 0.5)
        assert abs(hazard_ratio_gtdl(0.0, hi, hj) - hazard_ratio_gtdl(50.0, hi, hj)) > 0.5

    @given(c=finite, b1=finite, b2=finite, a=nonzero_alpha, t=times)
    def test_shift_of_both_predictors_by_common_time_scale(self, c, b1, b2, a, t):
        # shifting time and intercept together leaves the ratio unchanged: a(t + s) + b = a t + (b + a s)
        s = c / a
        if t + s < 0:
            return
        lhs = hazard_ratio_gtdl(t + s, lp(b1, a), lp(b2, a))
        rhs = hazard_ratio_gtdl(t, lp(b1 + a * s, a), lp(b2 + a * s, a))
        assert lhs == pytest.approx(rhs, rel=1e-9)


class TestCureFractionGTDL:
    def test_reference(self):
        assert cure_fraction_gtdl(lp(0.0, -0.5)) == pytest.approx(0.25, rel=1e-15)

    def test_vanishing_baseline(self):
        assert cure_fraction_gtdl(lp(-60.0, -0.5)) == pytest.approx(1.0)

    def test_strongly_defective_profile(self):
        assert cure_fraction_gtdl(lp(-5.2686, -5.3280)) == pytest.approx(0.999036201, abs=1e-9)

    @pytest.mark.parametrize("a", [0.0, 0.5])
    def test_proper_regime_rejected(self, a):
        with pytest.raises(DomainError, match="no cure fraction"):
            cure_fraction_gtdl(lp(0.0, a))


class TestFrailtyFunctions:
    def test_origin(self):
        p = lp(0.2, 0.4)
        assert reliability_frailty(0.0, p, theta=3.0) == 1.0
        assert hazard_frailty(0.0, p, theta=3.0) == hazard_gtdl(0.0, p)
        assert density_frailty(0.0, lp(0.0, 0.4), theta=3.0) == pytest.approx(0.5)

    def test_reference_values(self):
        assert reliability_frailty(2.0, lp(0.0, 0.5), theta=1.0) == pytest.approx(FRAILTY_R_T2_THETA1, rel=1e-13)
        p = lp(0.4, -0.3)
        assert reliability_frailty(1.5, p, theta=2.5) == pytest.approx(FRAILTY_R_GENERIC, rel=1e-13)
        assert hazard_frailty(1.5, p, theta=2.5) == pytest.approx(FRAILTY_H_GENERIC, rel=1e-13)

    def test_theta_limit(self):
        p = lp(0.0, 0.5)
        assert abs(reliability_frailty(2.0, p, theta=1e-8) - reliability_gtdl(2.0, p)) < 1e-6
        assert abs(hazard_frailty(2.0, p, theta=1e-8) - hazard_gtdl(2.0, p)) < 1e-6

    def test_theta_zero_exact(self):
        p = lp(0.3, -0.2)
        assert reliability_frailty(1.7, p, theta=0.0) == pytest.approx(reliability_gtdl(1.7, p), rel=1e-15)

    def test_negative_theta_rejected(self):
        with pytest.raises(DomainError):
            reliability_frailty(1.0, lp(0.0, 0.5), theta=-0.1)

    def test_density_mass(self):
        total, _ = integrate.quad(lambda t: density_frailty(t, lp(0.0, 0.5), theta=1.0), 0, np.inf, limit=200)
        assert total == pytest.approx(1.0, abs=1e-6)

    @pytest.mark.parametrize("t", [0.5, 1.0, 2.0])
    def test_density_is_gamma_mixture(self, t):
        p, theta = lp(-0.2, 0.4), 0.8
        h0, H0 = hazard_gtdl(t, p), cumulative_hazard_gtdl(t, p)
        shape = 1.0 / theta

        def integrand(v):
            return v * h0 * math.exp(-v * H0) * stats.gamma.pdf(v, shape, scale=theta)

        mixed, _ = integrate.quad(integrand, 0, np.inf)
        assert density_frailty(t, p, theta=theta) == pytest.approx(mixed, rel=1e-8)

    @settings(max_examples=50)
    @given(b=finite, a=nonzero_alpha, t=times, theta=thetas)
    def test_density_identity(self, b, a, t, theta):
        p = lp(b, a)
        f = density_frailty(t, p, theta=theta)
        assert f == pytest.approx(hazard_frailty(t, p, theta=theta) * reliability_frailty(t, p, theta=theta), rel=1e-12)

    @given(b=finite, a=nonzero_alpha, t1=times, t2=times, theta=thetas)
    def test_nonincreasing(self, b, a, t1, t2, theta):
        lo, hi = sorted((t1, t2))
        p = lp(b, a)
        assert reliability_frailty(hi, p, theta=theta) <= reliability_frailty(lo, p, theta=theta) + 1e-15

    def test_cure_fraction(self):
        p = lp(0.0, -0.5)
        assert cure_fraction_frailty(p, theta=1.0) == pytest.approx(FRAILTY_CURE_A05_THETA1, abs=1e-12)
        assert reliability_frailty(np.inf, p, theta=1.0) == pytest.approx(FRAILTY_CURE_A05_THETA1, abs=1e-12)
        assert abs(cure_fraction_frailty(p, theta=1e-8) - cure_fraction_gtdl(p)) < 1e-5

    def test_cure_fraction_proper_rejected(self):
        with pytest.raises(DomainError):
            cure_fraction_frailty(lp(0.0, 0.1), theta=1.0)

    def test_hazard_ratio_frailty_identical(self):
        p = lp(0.5, 0.5)
        np.testing.assert_allclose(hazard_ratio_frailty(np.linspace(0, 5, 6), p, p, theta=2.0), 1.0)

    def test_hazard_ratio_frailty_matches_direct(self):
        pi, pj = lp(0.5, 0.3), lp(-0.5, 0.3)
        t = 2.0
        direct = hazard_frailty(t, pi, theta=1.5) / hazard_frailty(t, pj, theta=1.5)
        assert hazard_ratio_frailty(t, pi, pj, theta=1.5) == pytest.approx(direct, rel=1e-13)


def single_case(t, delta, a=0.5, b=0.0):
    return SurvivalDataset.from_arrays([t], [delta]), ParamVector([a], [b])


class TestLoglik:
    def test_censored_single_case(self):
        data, p = single_case(1.0, 0)
        assert loglik_gtdl(p, data) == pytest.approx(LOGLIK_CENSORED_T1, rel=1e-13)

    def test_event_single_case(self):
        data, p = single_case(1.0, 1)
        assert loglik_gtdl(p, data) == pytest.approx(LOGLIK_EVENT_T1, rel=1e-13)

    def test_frailty_event_single_case(self):
        data = SurvivalDataset.from_arrays([1.5], [1])
        p = ParamVector([-0.3], [0.4], theta=2.5)
        assert loglik_frailty(p, data) == pytest.approx(FRAILTY_LOGLIK_EVENT, rel=1e-13)

    def test_frailty_censored_is_log_reliability(self):
        data = SurvivalDataset.from_arrays([1.5], [0])
        p = ParamVector([-0.3], [0.4], theta=2.5)
        assert loglik_frailty(p, data) == pytest.approx(math.log(FRAILTY_R_GENERIC), rel=1e-13)

    @pytest.mark.parametrize("k", [2, 5])
    def test_duplication_scales(self, k, rng_data):
        data, p = rng_data
        dup = SurvivalDataset(
            np.tile(data.times, k), np.tile(data.status, k),
            np.tile(data.covariates_beta, (k, 1)), np.tile(data.covariates_alpha, (k, 1)),
        )
        assert loglik(p, dup) == pytest.approx(k * loglik(p, data), rel=1e-12)

    def test_additive_under_concatenation(self, rng_data):
        data, p = rng_data
        pf = ParamVector(p.alpha, p.beta, 0.7)
        first, second = data.subset(np.arange(10)), data.subset(np.arange(10, data.n))
        assert loglik(pf, data) == pytest.approx(loglik(pf, first) + loglik(pf, second), rel=1e-12)

    def test_theta_limit(self, rng_data):
        data, p = rng_data
        assert abs(loglik(ParamVector(p.alpha, p.beta, 1e-8), data) - loglik(p, data)) < 1e-5

    def test_kind_checks(self, rng_data):
        data, p = rng_data
        with pytest.raises(ValueError):
            loglik_frailty(p, data)
        with pytest.raises(ValueError):
            loglik_gtdl(ParamVector(p.alpha, p.beta, 1.0), data)

    def test_contributions_sum(self, rng_data):
        data, p = rng_data
        assert np.sum(loglik_contributions(p, data)) == pytest.approx(loglik(p, data))

    def test_nonfinite_raises(self):
        # the cumulative hazard overflows to inf
        data = SurvivalDataset.from_arrays([1e308], [1])
        p = ParamVector([10.0], [0.0])
        with pytest.raises(ModelEvaluationError):
            loglik(p, data)


@pytest.fixture
def rng_data():
    rng = np.random.default_rng(7)
    n = 25
    x = rng.normal(size=n)
    data = SurvivalDataset.from_arrays(rng.exponential(2.0, n), rng.integers(0, 2, n), x, x)
    return data, ParamVector([0.3, -0.2], [-0.5, 0.4])


class TestParamVector:
    def test_round_trip(self):
        p = ParamVector([0.1, 0.2], [1.0], theta=0.3)
        q = ParamVector.from_array(p.to_array(), 2, 1, ModelKind.FRAILTY)
        np.testing.assert_array_equal(q.to_array(), p.to_array())
        assert q.kind is ModelKind.FRAILTY

    def test_names(self):
        p = ParamVector([0.1], [1.0, 2.0], theta=0.3)
        assert p.names(["(Intercept)"], ["(Intercept)", "x"]) == [
            "alpha:(Intercept)", "beta:(Intercept)", "beta:x", "theta",
        ]

    def test_negative_theta(self):
        with pytest.raises(ValueError):
            ParamVector([0.1], [1.0], theta=-1.0)

    def test_kind_parse_aliases(self):
        assert ModelKind.parse("GTDL") is ModelKind.GTDL
        assert ModelKind.parse("frailty") is ModelKind.FRAILTY


class TestSurvivalDataset:
    @pytest.mark.parametrize(
        "times, status, match",
        [([1.0, 0.0], [1, 0], "positive"), ([1.0, 2.0], [1, 2], "status"), ([1.0, np.nan], [1, 0], "positive")],
    )
    def test_validation(self, times, status, match):
        with pytest.raises(ValueError, match=match):
            SurvivalDataset.from_arrays(times, status)

    def test_intercept_required(self):
        with pytest.raises(ValueError, match="intercept"):
            SurvivalDataset([1.0], [1], [[2.0]], [[1.0]])

    def test_row_mismatch(self):
        with pytest.raises(DimensionError):
            SurvivalDataset.from_arrays([1.0, 2.0], [1, 0], x_beta=[[1.0]])

    def test_without_by_row_id(self):
        d = SurvivalDataset.from_arrays([1.0, 2.0, 3.0], [1, 0, 1], row_ids=[10, 20, 30])
        r = d.without([20])
        np.testing.assert_array_equal(r.row_ids, [10, 30])
        with pytest.raises(KeyError):
            d.without([99])


class TestTermPool:
    def test_dataset_blocks(self):
        pool = TermPool([1.0, 2.0, 3.0], [1, 1, 0], {"x": [0.1, 0.2, 0.3], "g": [[1, 0], [0, 1], [0, 0]]},
                        {"g": ["g[b]", "g[c]"]})
        data = pool.dataset(ModelSpec(ModelKind.GTDL, ("x", "g"), ("x",)))
        assert data.beta_names == ["(Intercept)", "x", "g[b]", "g[c]"]
        assert data.covariates_alpha.shape == (3, 2)
        assert pool.width("g") == 2

    def test_unknown_term(self):
        pool = TermPool([1.0], [1], {"x": [0.1]})
        with pytest.raises(KeyError):
            pool.dataset(ModelSpec(ModelKind.GTDL, ("y",), ()))
