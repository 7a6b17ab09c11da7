from __future__ import annotations

import math
import warnings

import mpmath
import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from scipy import integrate

from stpot.trend import (
    ExtrapolationWarning,
    TrendFitError,
    TrendModel,
    evaluate_trend,
    fit_skedasis_mle,
    loglinear_score,
    ols,
    regress_theta_spatial,
    skedasis_cdf,
    skedasis_eval,
    skedasis_inverse_cdf,
    time_fraction,
    to_latent,
    to_observed,
)


def test_closed_form_values():
    e = math.e
    assert skedasis_eval("log_linear", 1.0, 0.0) == pytest.approx(1 / (e - 1), rel=1e-14)
    assert skedasis_eval("log_linear", 1.0, 1.0) == pytest.approx(e / (e - 1), rel=1e-14)
    assert skedasis_eval("log_linear", 0.0, 0.37) == 1.0
    for theta in (-0.9, 0.0, 0.5):
        assert skedasis_eval("linear", theta, 0.5) == 1.0


@pytest.mark.parametrize("theta", [0.99e-6, 1.01e-6, -3e-7, 2e-3])
@pytest.mark.parametrize("u", [0.0, 0.3, 1.0])
def test_small_theta_matches_high_precision(theta, u):
    mpmath.mp.dps = 50
    t = mpmath.mpf(theta)
    exact = t / mpmath.expm1(t) * mpmath.exp(t * u)
    assert skedasis_eval("log_linear", theta, u) == pytest.approx(float(exact), rel=1e-14)


def test_linear_domain_error():
    with pytest.raises(ValueError, match="theta"):
        skedasis_eval("linear", 1.0, 0.5)
    with pytest.raises(ValueError, match="unknown"):
        skedasis_eval("cubic", 0.1, 0.5)
    assert skedasis_eval("log-linear", 0.2, 0.5) == skedasis_eval("log_linear", 0.2, 0.5)


@settings(max_examples=200, deadline=None)
@given(family=st.sampled_from(["log_linear", "linear"]), theta=st.floats(-0.999, 0.999), u=st.floats(0, 1))
def test_positive_and_monotone(family, theta, u):
    c = skedasis_eval(family, theta, u)
    assert c > 0
    v = min(u + 0.01, 1.0)
    if v > u and abs(theta) > 1e-3:
        later = skedasis_eval(family, theta, v)
        assert (later > c) == (theta > 0)


@settings(max_examples=200, deadline=None)
@given(family=st.sampled_from(["log_linear", "linear"]), theta=st.floats(-0.999, 0.999), p=st.floats(0, 1))
def test_cdf_inverse_and_density(family, theta, p):
    u = skedasis_inverse_cdf(family, theta, p)
    assert float(skedasis_cdf(family, theta, u)) == pytest.approx(p, abs=1e-12)
    assert float(skedasis_cdf(family, theta, 1.0)) == pytest.approx(1.0, abs=1e-14)


def test_mle_score_vanishes(rng):
    u = skedasis_inverse_cdf("log_linear", 0.8, rng.uniform(size=800))
    fit = fit_skedasis_mle(u)
    assert abs(loglinear_score(fit.theta, u)) <= 1e-8


def test_linear_mle_recovers(rng):
    u = skedasis_inverse_cdf("linear", -0.5, rng.uniform(size=3000))
    fit = fit_skedasis_mle(u, "linear")
    assert abs(fit.theta + 0.5) <= 3 * fit.se


def test_linear_mle_at_bound_warns():
    u = np.linspace(0.9, 1.0, 40)
    with pytest.warns(RuntimeWarning, match="boundary"):
        fit = fit_skedasis_mle(u, "linear")
    assert fit.at_bound and fit.theta > 0.99


def test_mle_needs_data():
    with pytest.raises(TrendFitError, match="at least 10"):
        fit_skedasis_mle(np.linspace(0.1, 0.9, 5))
    with pytest.raises(TrendFitError, match="identical"):
        fit_skedasis_mle(np.full(20, 0.5))


def test_time_fraction_midpoints():
    np.testing.assert_allclose(time_fraction(4), [0.125, 0.375, 0.625, 0.875])


def test_extrapolation_warns():
    with pytest.warns(ExtrapolationWarning):
        evaluate_trend("log_linear", 0.3, 1.5)
    with pytest.warns(ExtrapolationWarning) as record:
        c = evaluate_trend("linear", -0.9, 1.5)
    messages = [str(w.message) for w in record]
    assert any("beyond the observed record" in m for m in messages)
    assert any("clamped" in m for m in messages)
    assert c == 0.0
    with warnings.catch_warnings():
        warnings.simplefilter("error")
        evaluate_trend("log_linear", 0.3, 0.5)


def test_transform_stationary_identity():
    x = np.array([1.0, 25.0, 80.0])
    np.testing.assert_allclose(to_latent(x, 1.0, 0.2, 9.0, 40.0), x, rtol=1e-15)
    np.testing.assert_allclose(to_observed(x, 1.0, 0.0, 9.0, 40.0), x, rtol=1e-15)


def test_transform_is_the_proportional_tail_map():
    # z above b~ maps to x with P(X > x) = c P(Z > z) for a GPD latent tail
    gamma, a_t, b_t, c = 0.15, 10.0, 50.0, 1.7
    z = 80.0
    x = float(to_observed(z, c, gamma, a_t, b_t))
    surv_z = (1 + gamma * (z - b_t) / a_t) ** (-1 / gamma)
    surv_x = (1 + gamma * (x - b_t) / a_t) ** (-1 / gamma)
    # the level reached with probability S(z) by Z is reached by X_t at x with P(X_t > x) = c S(x)
    assert c * surv_x == pytest.approx(surv_z, rel=1e-12)


def test_spatial_regression_exact_plane():
    coords = np.array([[0.0, 10.0], [1.0, 11.0], [2.0, 10.5], [-1.0, 12.0], [0.5, 13.0]])
    theta = 0.3 - 0.2 * coords[:, 0] + 0.1 * coords[:, 1]
    reg = regress_theta_spatial(theta, coords)
    np.testing.assert_allclose(reg.coeffs, [0.3, -0.2, 0.1], atol=1e-10)
    assert reg.r2 == pytest.approx(1.0)


def test_ols_rank_deficiency():
    with pytest.raises(ValueError, match="rank"):
        ols(np.ones((5, 2)), np.arange(5.0))


def test_model_round_trip_and_theta_at():
    tm = TrendModel("log_linear", [0.5, -0.5], [0.1, 0.2, 0.0], 1000, [0.1, 0.1], 0.9)
    back = TrendModel.from_dict(tm.to_dict())
    np.testing.assert_array_equal(back.theta_site, tm.theta_site)
    assert back.n == 1000
    assert tm.theta_at([[1.0, 5.0]])[0] == pytest.approx(0.3)
    with pytest.raises(ValueError):
        TrendModel("linear", [1.2], [0, 0, 0], 10)


def test_fixture_trend_recovery(fixture_fit, fixture_truth):
    trend = fixture_fit[0].trend
    assert np.max(np.abs(trend.theta_site - fixture_truth.theta)) <= 0.25
    for fam in ("log_linear", "linear"):
        val, _ = integrate.quad(lambda u: float(skedasis_eval(fam, 0.4, u)), 0, 1, epsabs=1e-13)
        assert val == pytest.approx(1.0, abs=1e-10)
