"""
Regionalization, spatial regression of the marginal parameters and
return-level maps.
"""

from __future__ import annotations

import csv
import logging
import warnings
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .data import GridDomain, RiskFunctional, project_km
from .dependence import DependenceModel
from .marginal import GpdTail, MarginalModel
from .returns import ReturnLevelError, ReturnSpec, latent_return_level, nonstationary_from_latent
from .trend import TrendModel, ols

logger = logging.getLogger(__name__)

TIE_RTOL = 1e-12


class SpatialModelError(ValueError):
    pass


# ----------------------------------------------------------------------------
# k-means neighborhoods

@dataclass(frozen=True)
class ClusterAssignment:
    """Grid-point labels; ``index[i]`` is the reference-station position."""

    index: np.ndarray
    labels: tuple
    k: int
    n_iter: int
    voronoi_fallback: bool = False

    def members(self, station: int) -> np.ndarray:
        return np.flatnonzero(self.index == station)


def _nearest(points: np.ndarray, centers: np.ndarray) -> np.ndarray:
    """Nearest center per point; near-ties go to the lowest center index."""
    d2 = ((points[:, None, :] - centers[None, :, :]) ** 2).sum(-1)
    dmin = d2.min(axis=1, keepdims=True)
    return np.argmax(d2 <= dmin + TIE_RTOL * (1.0 + dmin), axis=1)


def kmeans_regions(grid: GridDomain | np.ndarray, station_coords, station_ids=None,
                   max_iter: int = 100) -> ClusterAssignment:
    """
    Lloyd's k-means in (lon, lat) degrees with centroids seeded at stations.

    Cluster ``j`` keeps the label of the station that seeded it.  If a
    cluster ends empty the assignment falls back to nearest station.
    """
    pts = grid.points if isinstance(grid, GridDomain) else np.asarray(grid, dtype=float).reshape(-1, 2)
    seeds = np.asarray(station_coords, dtype=float)
    k = seeds.shape[0]
    if len(np.unique(seeds, axis=0)) != k:
        raise SpatialModelError("station coordinates must be distinct")
    ids = list(station_ids) if station_ids is not None else [str(j) for j in range(k)]
    centers = seeds.copy()
    assign = _nearest(pts, centers)
    it = 0
    for it in range(1, max_iter + 1):
        for j in range(k):
            sel = assign == j
            if sel.any():
                centers[j] = pts[sel].mean(axis=0)
        new = _nearest(pts, centers)
        if np.array_equal(new, assign):
            break
        assign = new
    fallback = False
    if np.bincount(assign, minlength=k).min() == 0:
        warnings.warn("k-means left an empty cluster; using nearest-station assignment", RuntimeWarning,
                      stacklevel=2)
        assign = _nearest(pts, seeds)
        fallback = True
    return ClusterAssignment(assign, tuple(ids[j] for j in assign), k, it, fallback)


# ----------------------------------------------------------------------------
# Spatial regression of marginal parameters

def design_a(lonlat):
    lonlat = np.atleast_2d(lonlat)
    return np.column_stack([np.ones(len(lonlat)), lonlat[:, 0] * lonlat[:, 1]])


def design_b(lonlat):
    lonlat = np.atleast_2d(lonlat)
    return np.column_stack([np.ones(len(lonlat)), lonlat[:, 1] ** 2, lonlat[:, 0] * lonlat[:, 1]])


def design_theta(lonlat):
    lonlat = np.atleast_2d(lonlat)
    return np.column_stack([np.ones(len(lonlat)), lonlat[:, 0], lonlat[:, 1]])


@dataclass(frozen=True)
class SpatialMarginModel:
    """
    ``a = a0 + a1 lon lat``, ``b = b0 + b1 lat^2 + b2 lon lat``,
    ``theta = t0 + t1 lon + t2 lat`` and a constant shape.
    """

    a_coeffs: np.ndarray
    b_coeffs: np.ndarray
    theta_coeffs: np.ndarray
    gamma0: float
    neighborhood: tuple = ()
    fits: dict = field(default_factory=dict, compare=False)

    def predict(self, lonlat) -> dict:
        lonlat = np.atleast_2d(np.asarray(lonlat, dtype=float))
        n = len(lonlat)
        return {
            "a_n": design_a(lonlat) @ self.a_coeffs,
            "b_n": design_b(lonlat) @ self.b_coeffs,
            "theta": design_theta(lonlat) @ self.theta_coeffs,
            "gamma": np.full(n, self.gamma0),
        }

    def to_dict(self) -> dict:
        return {
            "a_coeffs": self.a_coeffs.tolist(),
            "b_coeffs": self.b_coeffs.tolist(),
            "theta_coeffs": self.theta_coeffs.tolist(),
            "gamma0": self.gamma0,
            "neighborhood": list(self.neighborhood),
            "r2": {k: v.r2 for k, v in self.fits.items()},
        }


def fit_spatial_margin_model(a_n, b_n, theta, gamma: float, station_coords, station_ids=None) -> SpatialMarginModel:
    """OLS fits of the three regression surfaces; needs at least 4 stations."""
    coords = np.asarray(station_coords, dtype=float)
    if coords.shape[0] < 4:
        raise SpatialModelError("need at least 4 stations for the spatial margin model")
    try:
        fits = {
            "a_n": ols(design_a(coords), a_n),
            "b_n": ols(design_b(coords), b_n),
            "theta": ols(design_theta(coords), theta),
        }
    except ValueError as exc:
        raise SpatialModelError(str(exc)) from None
    ids = tuple(station_ids) if station_ids is not None else tuple(str(j) for j in range(len(coords)))
    return SpatialMarginModel(fits["a_n"].coeffs, fits["b_n"].coeffs, fits["theta"].coeffs, float(gamma), ids, fits)


def neighborhood(station: int, station_coords, d0: int | None) -> np.ndarray:
    """Positions of the ``d0`` stations nearest to ``station`` (itself first)."""
    coords = np.asarray(station_coords, dtype=float)
    d = np.sqrt(((coords - coords[station]) ** 2).sum(axis=1))
    order = np.lexsort((np.arange(len(d)), d))
    return order if d0 is None else order[:d0]


def fit_cluster_models(a_n, b_n, theta, gamma: float, station_coords, station_ids, d0: int | None = None) -> dict:
    """One margin model per reference station, fitted on its ``d0`` nearest stations."""
    a_n, b_n, theta = (np.asarray(v, dtype=float) for v in (a_n, b_n, theta))
    coords = np.asarray(station_coords, dtype=float)
    out = {}
    for j, sid in enumerate(station_ids):
        nb = neighborhood(j, coords, d0)
        out[sid] = fit_spatial_margin_model(a_n[nb], b_n[nb], theta[nb], gamma, coords[nb],
                                            [station_ids[i] for i in nb])
    return out


@dataclass(frozen=True)
class GridParameters:
    points: np.ndarray
    a_n: np.ndarray
    b_n: np.ndarray
    theta: np.ndarray
    gamma: np.ndarray
    cluster: tuple
    valid: np.ndarray

    @property
    def n_invalid(self) -> int:
        return int((~self.valid).sum())


def predict_at_grid(model: SpatialMarginModel, grid: GridDomain, clusters: ClusterAssignment,
                    local_models: dict | None = None) -> GridParameters:
    """
    Regression surfaces at grid points, per cluster when ``local_models`` is
    given.  Points with a non-positive scale are flagged invalid.
    """
    pts = grid.points
    pred = {k: np.empty(len(pts)) for k in ("a_n", "b_n", "theta", "gamma")}
    for label in sorted(set(clusters.labels)):
        sel = np.array([lab == label for lab in clusters.labels])
        mdl = local_models[label] if local_models is not None else model
        vals = mdl.predict(pts[sel])
        for k in pred:
            pred[k][sel] = vals[k]
    valid = pred["a_n"] > 0
    if not valid.all():
        logger.warning("%d grid points have a non-positive predicted scale and are excluded", (~valid).sum())
    return GridParameters(pts, pred["a_n"], pred["b_n"], pred["theta"], pred["gamma"], clusters.labels, valid)


# ----------------------------------------------------------------------------
# Return-level maps

@dataclass(frozen=True)
class ReturnMap:
    params: GridParameters
    levels: dict
    latent: dict
    method: str
    warnings: tuple

    def properties(self) -> dict:
        props = {
            "a_n": self.params.a_n,
            "b_n": self.params.b_n,
            "theta": self.params.theta,
            "gamma": self.params.gamma,
            "cluster": self.params.cluster,
            "valid": self.params.valid,
        }
        for m, vals in sorted(self.levels.items()):
            props[f"x_m_{_mkey(m)}"] = vals
        props["warnings"] = [";".join(self.warnings)] * len(self.params.a_n)
        return props


def _mkey(m) -> str:
    return str(int(m)) if float(m).is_integer() else str(m)


def point_return_level(a_n: float, b_n: float, theta: float, gamma: float, phi_u: float,
                       spec: ReturnSpec, trend: TrendModel, marg: MarginalModel) -> tuple[float, float]:
    """Latent ``z_m`` from the stationary closed form, then the trend transform."""
    tail = GpdTail(a_n, gamma, b_n)
    z_m = latent_return_level(spec, tail, phi_u)
    marg_g = marg if gamma == marg.gamma else _with_gamma(marg, gamma)
    x_m = float(nonstationary_from_latent(z_m, trend, marg_g, spec, theta=theta))
    return z_m, x_m


def _with_gamma(marg: MarginalModel, gamma: float) -> MarginalModel:
    return MarginalModel(gamma, marg.a_n, marg.b_n, marg.b_tilde, marg.risk, marg.q_ell, marg.q_prime)


def return_level_map(params: GridParameters, phi_u, specs, trend: TrendModel, marg: MarginalModel,
                     dep: DependenceModel | None = None) -> ReturnMap:
    """
    Pointwise return levels for every spec (one ``m`` each).

    ``phi_u`` is per point (typically the cluster's reference-station value).
    ``dep`` is not used by the pointwise levels; see :func:`smooth_map`.
    """
    phi_u = np.broadcast_to(np.asarray(phi_u, dtype=float), params.a_n.shape)
    levels, latent = {}, {}
    notes = {"trend extrapolated beyond the observed record"}
    method = specs[0].method if specs else "ene"
    for spec in specs:
        x = np.full(params.a_n.shape, np.nan)
        z = np.full(params.a_n.shape, np.nan)
        failed = 0
        for i in np.flatnonzero(params.valid):
            try:
                z[i], x[i] = point_return_level(params.a_n[i], params.b_n[i], params.theta[i], params.gamma[i],
                                                phi_u[i], spec, trend, marg)
            except (ReturnLevelError, ValueError):
                failed += 1
        if failed:
            notes.add(f"m={_mkey(spec.m)}: {failed} points without a return level")
        levels[spec.m] = x
        latent[spec.m] = z
    if params.n_invalid:
        notes.add(f"{params.n_invalid} points excluded (non-positive scale)")
    return ReturnMap(params, levels, latent, method, tuple(sorted(notes)))


def smooth_map(values, points_lonlat, dep: DependenceModel, seed: int, n_sim: int = 2000) -> np.ndarray:
    """
    Dependence-weighted smoothing of a pointwise map.

    Simulates max-Pareto fields on the points, estimates the pairwise
    conditional exceedance frequencies ``chi(p, q)`` and returns
    ``sum_q chi(p, q) v(q) / sum_q chi(p, q)``.  One interpretation of how
    the dependence model can enter a map; pointwise levels are unaffected.
    """
    from .simulate import SimulationConfig, simulate_l_pareto

    values = np.asarray(values, dtype=float)
    xy = project_km(np.asarray(points_lonlat, dtype=float))
    sample = simulate_l_pareto(SimulationConfig(xy, dep, n_sim, seed, RiskFunctional("max")))
    exc = (sample.fields > 1).astype(float)
    joint = exc.T @ exc
    count = np.diag(joint).copy()
    with np.errstate(invalid="ignore", divide="ignore"):
        chi = np.where(count[:, None] > 0, joint / count[:, None], 0.0)
    ok = np.isfinite(values)
    w = chi[:, ok]
    with np.errstate(invalid="ignore", divide="ignore"):
        out = w @ values[ok] / w.sum(axis=1)
    return np.where(ok, out, np.nan)


def write_map_csv(rmap: ReturnMap, path: str | Path) -> None:
    props = rmap.properties()
    keys = list(props)
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["lon", "lat"] + keys)
        for i, (lon, lat) in enumerate(rmap.params.points):
            row = [repr(float(lon)), repr(float(lat))]
            for k in keys:
                v = props[k][i]
                row.append(repr(float(v)) if isinstance(v, (float, np.floating)) else str(v))
            w.writerow(row)
