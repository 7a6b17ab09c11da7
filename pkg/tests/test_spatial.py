import json
import warnings

import numpy as np
import pytest

from stpot.data import GridDomain, RiskFunctional, build_grid, grid_to_geojson, write_geojson
from stpot.dependence import DependenceModel
from stpot.marginal import GpdTail, MarginalModel
from stpot.returns import ReturnSpec, latent_return_level, nonstationary_from_latent
from stpot.spatial import (
    SpatialModelError,
    design_a,
    design_b,
    design_theta,
    fit_cluster_models,
    fit_spatial_margin_model,
    kmeans_regions,
    neighborhood,
    point_return_level,
    predict_at_grid,
    return_level_map,
    smooth_map,
)
from stpot.trend import TrendModel

STATIONS = np.array([[-4.0, 10.0], [0.0, 10.5], [-2.0, 13.0], [1.5, 14.0], [-5.0, 14.5], [2.0, 11.0]])
IDS = ["A", "B", "C", "D", "E", "F"]


def _marg(n_sites=6, gamma=0.1):
    return MarginalModel(gamma, np.full(n_sites, 10.0), np.full(n_sites, 40.0), 30.0, RiskFunctional("mean"))


def _trend(theta=0.0):
    return TrendModel("log_linear", np.full(6, theta), np.array([theta, 0.0, 0.0]), 5520)


def _params(points, a, b, theta, gamma, labels=None):
    n = len(points)
    full = lambda v: np.broadcast_to(np.asarray(v, dtype=float), (n,)).copy()  # noqa: E731
    from stpot.spatial import GridParameters

    return GridParameters(np.asarray(points, float), full(a), full(b), full(theta), full(gamma),
                          tuple(labels or ["A"] * n), np.ones(n, bool))


# ----------------------------------------------------------------------------
# k-means

def test_grid_point_at_station_gets_that_station():
    cl = kmeans_regions(STATIONS, STATIONS, IDS)
    assert cl.labels == tuple(IDS)
    assert cl.k == 6


def test_bisector_tie_goes_to_lower_index():
    seeds = np.array([[0.0, 0.0], [2.0, 0.0]])
    pts = np.array([[1.0, 5.0], [1.0, -5.0], [0.0, 0.0], [2.0, 0.0]])
    from stpot.spatial import _nearest

    assert _nearest(pts, seeds).tolist() == [0, 0, 0, 1]


def test_symmetric_layout_matches_voronoi():
    grid = build_grid([-1.0, 1.0, -1.0, 1.0], 0.25)
    seeds = np.array([[-0.5, 0.0], [0.5, 0.0]])
    cl = kmeans_regions(grid, seeds, ["W", "E"])
    lon = grid.points[:, 0]
    assert all(lab == "W" for lab in np.array(cl.labels)[lon < 0])
    assert all(lab == "E" for lab in np.array(cl.labels)[lon > 0])
    # the bisector itself goes to the lower index
    assert all(lab == "W" for lab in np.array(cl.labels)[lon == 0])


def test_kmeans_is_deterministic():
    grid = build_grid([-5.6, 2.5, 9.3, 15.1], 0.25)
    a = kmeans_regions(grid, STATIONS, IDS)
    b = kmeans_regions(grid, STATIONS, IDS)
    assert np.array_equal(a.index, b.index)
    assert a.labels == b.labels and a.n_iter == b.n_iter
    assert set(a.labels) <= set(IDS)


def test_empty_cluster_falls_back_to_nearest_station():
    pts = np.array([[0.0, 0.0], [0.1, 0.0], [0.2, 0.0]])
    seeds = np.array([[0.0, 0.0], [0.05, 0.0], [10.0, 10.0]])
    with pytest.warns(RuntimeWarning, match="empty cluster"):
        cl = kmeans_regions(pts, seeds)
    assert cl.voronoi_fallback
    assert cl.index.tolist() == [0, 1, 1]


def test_duplicate_stations_rejected():
    with pytest.raises(SpatialModelError, match="distinct"):
        kmeans_regions(STATIONS, np.vstack([STATIONS, STATIONS[:1]]))


# ----------------------------------------------------------------------------
# regression surfaces

def test_exact_surfaces_recovered():
    a_true, b_true, t_true = np.array([9.0, 0.05]), np.array([20.0, 0.1, -0.2]), np.array([0.3, 0.02, -0.01])
    model = fit_spatial_margin_model(design_a(STATIONS) @ a_true, design_b(STATIONS) @ b_true,
                                     design_theta(STATIONS) @ t_true, 0.1, STATIONS, IDS)
    np.testing.assert_allclose(model.a_coeffs, a_true, rtol=1e-10)
    np.testing.assert_allclose(model.b_coeffs, b_true, rtol=1e-10)
    np.testing.assert_allclose(model.theta_coeffs, t_true, rtol=1e-9, atol=1e-12)
    pred = model.predict(STATIONS)
    np.testing.assert_allclose(pred["a_n"], design_a(STATIONS) @ a_true, rtol=1e-10)
    assert np.all(pred["gamma"] == 0.1)


def test_constant_parameters_give_zero_slopes():
    model = fit_spatial_margin_model(np.full(6, 7.0), np.full(6, 33.0), np.full(6, 0.4), 0.0, STATIONS)
    np.testing.assert_allclose(model.a_coeffs, [7.0, 0.0], atol=1e-10)
    np.testing.assert_allclose(model.b_coeffs, [33.0, 0.0, 0.0], atol=1e-9)
    np.testing.assert_allclose(model.theta_coeffs, [0.4, 0.0, 0.0], atol=1e-10)


def test_residuals_sum_to_zero(rng):
    a = rng.uniform(5, 15, 6)
    b = rng.uniform(20, 40, 6)
    t = rng.normal(0, 0.5, 6)
    model = fit_spatial_margin_model(a, b, t, 0.1, STATIONS)
    for fit in model.fits.values():
        assert abs(np.sum(fit.residuals)) < 1e-10


def test_too_few_stations():
    with pytest.raises(SpatialModelError, match="at least 4"):
        fit_spatial_margin_model(np.ones(3), np.ones(3), np.zeros(3), 0.1, STATIONS[:3])


def test_rank_deficient_layout():
    # collinear stations on a parallel: lat^2 is collinear with the intercept
    coords = np.column_stack([np.linspace(-3, 1, 5), np.full(5, 12.0)])
    with pytest.raises(SpatialModelError):
        fit_spatial_margin_model(np.ones(5), np.ones(5), np.zeros(5), 0.1, coords)


def test_neighborhood_starts_with_station():
    nb = neighborhood(2, STATIONS, 4)
    assert nb[0] == 2 and len(nb) == 4
    assert len(neighborhood(0, STATIONS, None)) == 6


def test_cluster_models_one_per_station():
    models = fit_cluster_models(np.full(6, 8.0), np.full(6, 30.0), np.zeros(6), 0.1, STATIONS, IDS, d0=5)
    assert sorted(models) == IDS
    assert models["C"].neighborhood[0] == "C"


def test_predict_at_grid_flags_negative_scale():
    model = fit_spatial_margin_model(design_a(STATIONS) @ [1.0, 0.05], np.full(6, 30.0), np.zeros(6), 0.1,
                                     STATIONS)
    grid = build_grid([-5.6, 2.5, 9.3, 15.1], 0.5)
    params = predict_at_grid(model, grid, kmeans_regions(grid, STATIONS, IDS))
    # a = 1 + 0.05 lon lat is negative west of roughly lon = -1.3
    assert params.n_invalid == int(np.sum(1 + 0.05 * grid.points[:, 0] * grid.points[:, 1] <= 0)) > 0


# ----------------------------------------------------------------------------
# maps

def test_uniform_parameters_give_constant_map():
    grid = build_grid([-2.0, 2.0, 10.0, 12.0], 0.5)
    params = _params(grid.points, 10.0, 40.0, 0.2, 0.1)
    specs = [ReturnSpec(50.0), ReturnSpec(100.0)]
    rmap = return_level_map(params, 0.05, specs, _trend(0.2), _marg())
    for m in (50.0, 100.0):
        assert np.ptp(rmap.levels[m]) == 0.0
    assert np.all(rmap.levels[100.0] >= rmap.levels[50.0])


def test_map_monotone_in_m_for_nonnegative_theta(rng):
    pts = rng.uniform([-5, 9], [2, 15], size=(50, 2))
    params = _params(pts, rng.uniform(5, 15, 50), rng.uniform(20, 40, 50), rng.uniform(0, 1.5, 50), 0.1)
    rmap = return_level_map(params, rng.uniform(0.01, 0.1, 50), [ReturnSpec(50.0), ReturnSpec(100.0)],
                            _trend(), _marg())
    assert np.all(rmap.levels[100.0] >= rmap.levels[50.0])


def test_map_can_decrease_in_m_under_a_steep_downward_trend():
    # the trend factor at the later horizon outweighs the larger latent level
    params = _params([[0.0, 12.0]], 10.0, 40.0, -2.0, 0.1)
    rmap = return_level_map(params, 0.05, [ReturnSpec(50.0), ReturnSpec(100.0)], _trend(), _marg())
    assert rmap.levels[100.0][0] < rmap.levels[50.0][0]
    assert rmap.latent[100.0][0] > rmap.latent[50.0][0]


def test_map_at_stations_matches_pointwise_levels(fixture_fit):
    bundle, _, _ = fixture_fit
    marg, trend = bundle.marg, bundle.trend
    model = fit_spatial_margin_model(marg.a_n, marg.b_n, trend.theta_site, marg.gamma, bundle.coords)
    pred = model.predict(bundle.coords)
    params = _params(bundle.coords, pred["a_n"], pred["b_n"], pred["theta"], pred["gamma"])
    spec = ReturnSpec(50.0)
    with warnings.catch_warnings():
        warnings.simplefilter("ignore")
        rmap = return_level_map(params, bundle.phi_u, [spec], trend, marg)
        for j in range(len(bundle.coords)):
            tail = GpdTail(pred["a_n"][j], marg.gamma, pred["b_n"][j])
            z = latent_return_level(spec, tail, bundle.phi_u[j])
            x = nonstationary_from_latent(z, trend, marg, spec, theta=pred["theta"][j])
            assert rmap.levels[50.0][j] == pytest.approx(float(x), rel=1e-9)
            zz, xx = point_return_level(pred["a_n"][j], pred["b_n"][j], pred["theta"][j], marg.gamma,
                                        bundle.phi_u[j], spec, trend, marg)
            assert xx == pytest.approx(float(x), rel=1e-12) and zz == z


def test_fixture_map_has_no_invalid_points(fixture_fit):
    bundle, _, cfg = fixture_fit
    marg, trend = bundle.marg, bundle.trend
    grid = build_grid(cfg.grid.bbox, cfg.grid.resolution)
    clusters = kmeans_regions(grid, bundle.coords, bundle.station_ids)
    model = fit_spatial_margin_model(marg.a_n, marg.b_n, trend.theta_site, marg.gamma, bundle.coords)
    params = predict_at_grid(model, grid, clusters)
    assert params.n_invalid == 0


def test_geojson_is_bit_identical(tmp_path):
    grid = build_grid([-2.0, 2.0, 10.0, 12.0], 0.5)
    params = _params(grid.points, 10.0, 40.0, 0.2, 0.1)
    docs = []
    for name in ("a.geojson", "b.geojson"):
        rmap = return_level_map(params, 0.05, [ReturnSpec(50.0)], _trend(0.2), _marg())
        g = GridDomain(grid.points, grid.resolution, grid.bbox, params.cluster)
        write_geojson(grid_to_geojson(g, rmap.properties()), tmp_path / name)
        docs.append((tmp_path / name).read_bytes())
    assert docs[0] == docs[1]
    feats = json.loads(docs[0])["features"]
    assert len(feats) == len(grid.points)
    assert "x_m_50" in feats[0]["properties"]


def test_smooth_map_preserves_constants_and_nans():
    dep = DependenceModel(150.0, 0.8)
    pts = np.array([[0.0, 12.0], [0.3, 12.0], [0.0, 12.4], [1.0, 13.0]])
    out = smooth_map(np.full(4, 5.0), pts, dep, seed=3, n_sim=500)
    np.testing.assert_allclose(out, 5.0, rtol=1e-12)
    vals = np.array([1.0, 2.0, np.nan, 4.0])
    sm = smooth_map(vals, pts, dep, seed=3, n_sim=500)
    assert np.isnan(sm[2])
    assert np.all((sm[[0, 1, 3]] >= 1.0) & (sm[[0, 1, 3]] <= 4.0))
    np.testing.assert_array_equal(sm, smooth_map(vals, pts, dep, seed=3, n_sim=500))
