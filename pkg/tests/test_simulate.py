from __future__ import annotations

import numpy as np
import pytest
from scipy import stats

from stpot.data import RiskFunctional, project_km
from stpot.dependence import DependenceModel, model_extremogram, semivariogram_matrix
from stpot.marginal import MarginalModel
from stpot.simulate import (
    SimulationConfig,
    SimulationError,
    anchored_cholesky,
    back_transform,
    block_rng,
    default_truth,
    frechet_to_pareto,
    sahel_stations,
    simulate_gaussian_increments,
    simulate_l_pareto,
    simulate_max_stable,
    synthetic_dataset,
)
from stpot.trend import TrendModel, latent_transform, time_fraction

DEP = DependenceModel(200.0, 1.0)


@pytest.fixture(scope="module")
def xy():
    return project_km(np.array([[s.lon, s.lat] for s in sahel_stations()]))


def test_increments_two_sites_variance():
    sites = np.array([[0.0, 0.0], [200.0, 0.0]])
    g = simulate_gaussian_increments(sites, DEP, seed=1, size=100_000)
    assert np.all(g[:, 0] == 0.0)
    # Var(G2) = 2 nu = 2; the sample variance has SE 2 sqrt(2 / N)
    assert g[:, 1].var() == pytest.approx(2.0, abs=3 * 2 * np.sqrt(2 / 1e5))


def test_increments_semivariogram_matches_model(xy):
    g = simulate_gaussian_increments(xy[:5], DEP, seed=2, size=100_000)
    nu = semivariogram_matrix(xy[:5], DEP.tau, DEP.kappa)
    for i in range(5):
        for j in range(i + 1, 5):
            half_sq = 0.5 * (g[:, i] - g[:, j]) ** 2
            se = half_sq.std() / np.sqrt(half_sq.size)
            assert abs(half_sq.mean() - nu[i, j]) <= 3 * se


def test_single_draw_shape(xy):
    assert simulate_gaussian_increments(xy, DEP, seed=0).shape == (10,)


def test_cholesky_jitter_and_failure():
    # covariance [[2, 2 + d], [2 + d, 2]] has eigenvalue -d, which the jitter absorbs
    d = 1e-12
    dup = np.array([[0.0, 1.0, 1.0], [1.0, 0.0, -d], [1.0, -d, 0.0]])
    with pytest.warns(RuntimeWarning, match="jitter"):
        _, jitter = anchored_cholesky(dup)
    assert jitter == 1e-10
    bad = np.array([[0.0, 1.0, 5.0], [1.0, 0.0, 1.0], [5.0, 1.0, 0.0]])
    with pytest.raises(SimulationError, match="positive definite"):
        anchored_cholesky(bad)


@pytest.mark.parametrize("kind", ["max", "min", "mean", "site"])
def test_fields_lie_in_exceedance_region_with_pareto_radius(xy, kind):
    ell = RiskFunctional(kind, 3 if kind == "site" else None)
    cfg = SimulationConfig(xy[:5], DEP, 4000, 7, ell, u=2.5)
    s = simulate_l_pareto(cfg)
    assert s.fields.shape == (4000, 5)
    assert np.all(ell(s.fields / 2.5, axis=1) >= 1 - 1e-12)
    np.testing.assert_allclose(s.angles.sum(axis=1), 1.0, rtol=1e-12)
    assert stats.kstest(1 - 1 / s.radius, "uniform").pvalue > 0.01
    assert 0 < s.acceptance_rate <= 1


def test_threshold_stability(xy):
    ell = RiskFunctional("max")
    y = simulate_l_pareto(SimulationConfig(xy[:4], DEP, 40_000, 8, ell)).fields
    high = y[ell(y, axis=1) > 2] / 2
    base = y[:10_000]
    # compare the angular law through a non-trivial functional as well as the radius
    assert stats.ks_2samp(ell(high, axis=1), ell(base, axis=1)).pvalue > 0.05
    assert stats.ks_2samp(high[:, 0] / high.sum(1), base[:, 0] / base.sum(1)).pvalue > 0.05


def test_threshold_scaling_leaves_acceptance_unchanged(xy):
    ell = RiskFunctional("mean")
    a = simulate_l_pareto(SimulationConfig(xy, DEP, 500, 9, ell, u=1.0))
    b = simulate_l_pareto(SimulationConfig(xy, DEP, 500, 9, ell, u=3.0))
    assert a.acceptance_rate == b.acceptance_rate
    np.testing.assert_allclose(b.fields / 3.0, a.fields, rtol=1e-15)


def test_determinism_and_seed_sensitivity(xy):
    cfg = SimulationConfig(xy, DEP, 1500, 21, RiskFunctional("max"))
    a, b = simulate_l_pareto(cfg), simulate_l_pareto(cfg)
    assert a.fields.tobytes() == b.fields.tobytes()
    c = simulate_l_pareto(SimulationConfig(xy, DEP, 1500, 22, RiskFunctional("max")))
    assert not np.array_equal(a.fields, c.fields)
    # a longer run extends a shorter one field for field
    d = simulate_l_pareto(SimulationConfig(xy, DEP, 3000, 21, RiskFunctional("max")))
    np.testing.assert_array_equal(d.fields[:1500], a.fields)


def test_block_streams_are_independent():
    x = block_rng(5, 0, 0).random(4)
    y = block_rng(5, 0, 1).random(4)
    assert not np.array_equal(x, y)
    np.testing.assert_array_equal(x, block_rng(5, 0, 0).random(4))


def test_low_acceptance_aborts(xy):
    cfg = SimulationConfig(xy, DependenceModel(0.01, 1.0), 10, 3, RiskFunctional("min"))
    with pytest.raises(SimulationError, match="acceptance rate"):
        simulate_l_pareto(cfg)


def test_config_validation(xy):
    with pytest.raises(ValueError, match="distinct"):
        SimulationConfig(np.array([[0.0, 0.0], [0.0, 0.0]]), DEP, 5, 0)
    with pytest.raises(ValueError):
        SimulationConfig(xy, DEP, 0, 0)
    with pytest.raises(ValueError):
        SimulationConfig(xy, DEP, 5, 0, u=0.0)


def test_site_anchored_pairs_reproduce_chi():
    sites = np.array([[0.0, 0.0], [150.0, 0.0]])
    y = simulate_l_pareto(SimulationConfig(sites, DEP, 20_000, 12, RiskFunctional("site", 0))).fields
    p = np.mean(y[:, 1] > 1)
    chi = float(model_extremogram(150.0, DEP))
    assert abs(p - chi) <= 3 * np.sqrt(chi * (1 - chi) / y.shape[0])


def test_max_stable_margins_are_unit_frechet(xy):
    z = simulate_max_stable(xy[:4], DEP, 3000, 13)
    for j in range(4):
        assert stats.kstest(np.exp(-1 / z[:, j]), "uniform").pvalue > 0.01
    y = frechet_to_pareto(z[:, 0])
    assert stats.kstest(1 - 1 / y, "uniform").pvalue > 0.01


def test_max_stable_bivariate_extremal_coefficient():
    sites = np.array([[0.0, 0.0], [200.0, 0.0]])
    z = simulate_max_stable(sites, DEP, 20_000, 14)
    # P(max(Z) <= 1) = exp(-theta) with theta = 2 - chi
    theta = 2 - float(model_extremogram(200.0, DEP))
    p = np.mean(z.max(axis=1) <= 1)
    assert p == pytest.approx(np.exp(-theta), abs=4 * np.sqrt(p * (1 - p) / 20_000))


def test_back_transform_log_branch():
    marg = MarginalModel(0.0, np.ones(2), np.zeros(2), 1.0, RiskFunctional("mean"))
    y = np.array([[1.0, 2.0], [5.0, 0.5]])
    np.testing.assert_allclose(back_transform(y, marg), np.log(y))
    with pytest.raises(ValueError, match="times"):
        back_transform(y, marg, TrendModel("log_linear", [0.1, 0.2], [0, 0, 0], 10))


def test_back_transform_inverts_latent_transform(fixture_dataset):
    marg = MarginalModel(0.1, np.full(10, 9.0), np.linspace(15, 25, 10), 20.0, RiskFunctional("mean"))
    trend = TrendModel("log_linear", np.linspace(-1, 1, 10), [0, 0, 0], fixture_dataset.n_times)
    latent = latent_transform(fixture_dataset, trend, marg)
    g = marg.gamma
    y = (1 + g * (latent.values - marg.b_n) / marg.a_n) ** (1 / g)
    back = back_transform(y, marg, trend, time_fraction(fixture_dataset.n_times))
    np.testing.assert_allclose(back, fixture_dataset.values, rtol=1e-9, atol=1e-9)


def test_synthetic_dataset_layout():
    truth = default_truth(n_years=3)
    ds = synthetic_dataset(truth, 1)
    assert ds.n_times == 3 * 184 and ds.n_sites == 10
    assert ds.doys[0] == 121 and ds.doys[183] == 304
    assert not ds.mask.any() and np.all(ds.values >= truth.floor)
    assert truth.theta.min() == pytest.approx(-1) and truth.theta.max() == pytest.approx(1)
    np.testing.assert_array_equal(synthetic_dataset(truth, 1).values, ds.values)
