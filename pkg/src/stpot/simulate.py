"""
Simulation of Gaussian increments, Brown-Resnick l-Pareto processes and
synthetic non-stationary datasets.

Random streams are counter-based (Philox) and split per block of
``BLOCK`` proposals, so draws depend only on ``seed`` and the block index.
"""

from __future__ import annotations

import logging
import warnings
from dataclasses import dataclass, field

import numpy as np
from scipy import linalg

from .data import RiskFunctional, SpaceTimeDataset, Station, days_from_year_doy, project_km
from .dependence import DependenceModel, anchored_covariance, semivariogram_matrix
from .marginal import MarginalModel
from .trend import TrendModel, skedasis_eval, time_fraction, to_observed

logger = logging.getLogger(__name__)

BLOCK = 1024
JITTER = 1e-10
MIN_ACCEPTANCE = 1e-4

# spawn-key tags keep the different simulators on disjoint streams
_TAG_PARETO = 0
_TAG_MAXSTABLE = 1
_TAG_GAUSS = 2


class SimulationError(RuntimeError):
    pass


def block_rng(seed: int, *key: int) -> np.random.Generator:
    return np.random.Generator(np.random.Philox(np.random.SeedSequence(seed, spawn_key=tuple(key))))


def anchored_cholesky(nu: np.ndarray) -> tuple[np.ndarray, float]:
    """
    Lower Cholesky factor of the covariance of ``G(s_i) - G(s_1)``.

    One diagonal jitter of 1e-10 is tried if the plain factorization fails;
    the jitter used is returned.
    """
    sigma = anchored_covariance(nu)
    if sigma.size == 0:
        return sigma, 0.0
    try:
        return linalg.cholesky(sigma, lower=True), 0.0
    except linalg.LinAlgError:
        pass
    try:
        chol = linalg.cholesky(sigma + JITTER * np.eye(sigma.shape[0]), lower=True)
    except linalg.LinAlgError:
        raise SimulationError("increment covariance is not positive definite, even after jitter") from None
    warnings.warn(f"increment covariance needed a diagonal jitter of {JITTER:g}", RuntimeWarning, stacklevel=3)
    return chol, JITTER


def _increments(chol: np.ndarray, size: int, rng: np.random.Generator) -> np.ndarray:
    m = chol.shape[0] + 1
    g = np.zeros((size, m))
    if m > 1:
        g[:, 1:] = rng.standard_normal((size, m - 1)) @ chol.T
    return g


def simulate_gaussian_increments(sites_km: np.ndarray, dep: DependenceModel, seed: int,
                                 size: int | None = None) -> np.ndarray:
    """
    Centered Gaussian vector with ``G(s_1) = 0`` and semi-variogram ``nu``.

    Returns shape ``(m,)`` or ``(size, m)``.
    """
    nu = semivariogram_matrix(np.asarray(sites_km, dtype=float), dep.tau, dep.kappa)
    chol, _ = anchored_cholesky(nu)
    n = 1 if size is None else int(size)
    out = np.concatenate([
        _increments(chol, min(BLOCK, n - k), block_rng(seed, _TAG_GAUSS, b))
        for b, k in enumerate(range(0, n, BLOCK))
    ])
    return out[0] if size is None else out


def _spectral(chol, nu, anchors, rng):
    """Spectral functions ``exp(G - G(s_J) - nu(. - s_J))`` for anchor sites J."""
    g = _increments(chol, anchors.size, rng)
    rows = np.arange(anchors.size)
    return np.exp(g - g[rows, anchors][:, None] - nu[anchors])


@dataclass(frozen=True)
class SimulationConfig:
    sites_km: np.ndarray
    dep: DependenceModel
    n_fields: int
    seed: int
    risk: RiskFunctional | None = None
    u: float = 1.0
    marg: MarginalModel | None = None
    trend: TrendModel | None = None

    def __post_init__(self):
        xy = np.atleast_2d(np.asarray(self.sites_km, dtype=float))
        object.__setattr__(self, "sites_km", xy)
        if self.n_fields < 1:
            raise ValueError("n_fields must be >= 1")
        if not self.u > 0:
            raise ValueError("threshold u must be positive")
        if len(np.unique(xy, axis=0)) != len(xy):
            raise ValueError("simulation coordinates must be distinct")
        if self.risk is None:
            object.__setattr__(self, "risk", self.dep.risk)

    @classmethod
    def from_lonlat(cls, lonlat, dep, n_fields, seed, **kw) -> "SimulationConfig":
        return cls(project_km(np.asarray(lonlat, dtype=float)), dep, n_fields, seed, **kw)


@dataclass(frozen=True)
class ParetoSample:
    """
    Simulated fields ``Y`` with ``ell(Y / u) >= 1``.

    ``radius = ell(Y / u)`` is unit Pareto; ``angles = Y / sum(Y)`` has unit
    l1-norm.
    """

    fields: np.ndarray
    radius: np.ndarray
    angles: np.ndarray
    acceptance_rate: float
    n_proposed: int
    jitter: float = 0.0


def simulate_l_pareto(cfg: SimulationConfig) -> ParetoSample:
    """
    Draw ``cfg.n_fields`` Brown-Resnick l-Pareto fields above ``cfg.u``.

    ``max``: mixture over anchor sites of ``R W^(J)`` with R unit Pareto,
    thinned with probability ``1 / #{i : Y_i > 1}``.  ``site``: exact draw
    anchored at the reference site.  ``min`` and ``mean``: rejection from the
    ``max`` process, valid because ``ell <= max`` for both.
    """
    ell = cfg.risk
    m = cfg.sites_km.shape[0]
    nu = semivariogram_matrix(cfg.sites_km, cfg.dep.tau, cfg.dep.kappa)
    chol, jitter = anchored_cholesky(nu)
    if ell.kind == "site" and ell.site >= m:
        raise ValueError("reference site index out of range")
    accepted = []
    n_acc = 0
    n_prop = 0
    block = 0
    while n_acc < cfg.n_fields:
        rng = block_rng(cfg.seed, _TAG_PARETO, block)
        block += 1
        if ell.kind == "site":
            anchors = np.full(BLOCK, ell.site)
        else:
            anchors = rng.integers(0, m, BLOCK)
        w = _spectral(chol, nu, anchors, rng)
        r = 1.0 / (1.0 - rng.random(BLOCK))
        y = r[:, None] * w
        if ell.kind == "site":
            keep = np.ones(BLOCK, dtype=bool)
        else:
            count = np.sum(y > 1, axis=1)
            keep = rng.random(BLOCK) * count < 1
            if ell.kind != "max":
                keep &= ell(y, axis=1) >= 1
        n_prop += BLOCK
        accepted.append(y[keep])
        n_acc += int(keep.sum())
        if n_prop >= 100_000 and n_acc / n_prop < MIN_ACCEPTANCE:
            raise SimulationError(
                f"acceptance rate {n_acc / n_prop:.2e} below {MIN_ACCEPTANCE:g} after {n_prop} proposals"
            )
    y = np.concatenate(accepted)[: cfg.n_fields]
    radius = np.asarray(ell(y, axis=1), dtype=float)
    fields = cfg.u * y
    rate = n_acc / n_prop
    logger.info("l-Pareto simulation (%s): %d fields, acceptance %.4f", ell.kind, cfg.n_fields, rate)
    return ParetoSample(fields, radius, y / y.sum(axis=1, keepdims=True), rate, n_prop, jitter)


def simulate_max_stable(sites_km: np.ndarray, dep: DependenceModel, n: int, seed: int) -> np.ndarray:
    """
    Exact Brown-Resnick max-stable fields with unit Frechet margins, by the
    extremal-functions algorithm.  Returns shape ``(n, m)``.
    """
    xy = np.atleast_2d(np.asarray(sites_km, dtype=float))
    m = xy.shape[0]
    nu = semivariogram_matrix(xy, dep.tau, dep.kappa)
    chol, _ = anchored_cholesky(nu)
    out = []
    for b, k in enumerate(range(0, n, BLOCK)):
        rng = block_rng(seed, _TAG_MAXSTABLE, b)
        size = min(BLOCK, n - k)
        z = np.zeros((size, m))
        for j in range(m):
            gamma = rng.standard_exponential(size)
            active = 1.0 / gamma > z[:, j]
            while active.any():
                idx = np.flatnonzero(active)
                y = (1.0 / gamma[idx])[:, None] * _spectral(chol, nu, np.full(idx.size, j), rng)
                ok = np.all(y[:, :j] < z[idx, :j], axis=1)
                z[idx[ok]] = np.maximum(z[idx[ok]], y[ok])
                gamma[idx] += rng.standard_exponential(idx.size)
                active[idx] = 1.0 / gamma[idx] > z[idx, j]
        out.append(z)
    return np.concatenate(out)


def frechet_to_pareto(z):
    """Map unit Frechet to exact unit Pareto: ``1 / (1 - exp(-1/z))``."""
    return 1.0 / -np.expm1(-1.0 / np.asarray(z, dtype=float))


def back_transform(fields, marg: MarginalModel, trend: TrendModel | None = None, times=None):
    """
    Standardized fields to the observation scale.

    ``W = a (Y^g - 1) / g + b`` per site (``a log Y + b`` when g = 0), then the
    trend is re-introduced at rescaled times ``times`` (one per field row).
    """
    y = np.atleast_2d(np.asarray(fields, dtype=float))
    g = marg.gamma
    if abs(g) < 1e-8:
        w = marg.a_n * np.log(y) + marg.b_n
    else:
        w = marg.a_n * np.expm1(g * np.log(y)) / g + marg.b_n
    if trend is None:
        return w
    if times is None:
        raise ValueError("times are required when a trend is given")
    c = trend.site_matrix(np.asarray(times, dtype=float))
    return to_observed(w, c, g, marg.a_tilde, marg.b_tilde)


# ----------------------------------------------------------------------------
# Synthetic datasets

SEASON_DAYS = 184

# ten synoptic towns of a West-African Sahel domain: (id, lon, lat, name)
SAHEL_STATIONS = (
    ("OUA", -1.52, 12.35, "Ouagadougou"),
    ("BOB", -4.33, 11.17, "Bobo-Dioulasso"),
    ("OHG", -2.42, 13.57, "Ouahigouya"),
    ("DOR", -0.03, 14.03, "Dori"),
    ("FAD", 0.35, 12.03, "Fada N'Gourma"),
    ("DED", -3.48, 12.47, "Dedougou"),
    ("GAO", -3.18, 10.33, "Gaoua"),
    ("POO", -1.15, 11.17, "Po"),
    ("BOR", -2.93, 11.75, "Boromo"),
    ("BOG", -0.13, 12.98, "Bogande"),
)


def sahel_stations() -> list[Station]:
    return [Station(i, lon, lat, name) for i, lon, lat, name in SAHEL_STATIONS]


@dataclass(frozen=True)
class SyntheticTruth:
    """
    Generating parameters of a synthetic station dataset.

    Sites share ``a - gamma * b = K``, which makes the trend act as an exact
    proportional tail on every day where ``c * Y >= 1``.
    """

    stations: tuple
    gamma: float
    a: np.ndarray
    b: np.ndarray
    theta: np.ndarray
    tau: float
    kappa: float
    family: str = "log_linear"
    n_years: int = 60
    first_year: int = 1961
    start_doy: int = 121
    floor: float = 1.0
    daily: str = "pareto"
    meta: dict = field(default_factory=dict, compare=False)

    @property
    def n_times(self) -> int:
        return self.n_years * SEASON_DAYS


def default_truth(gamma: float = 0.1, tau: float = 200.0, kappa: float = 1.0, n_years: int = 60,
                  k_const: float = 8.0) -> SyntheticTruth:
    """Ten-station truth with theta linear in (lon, lat) spanning [-1, 1]."""
    st = sahel_stations()
    lonlat = np.array([[s.lon, s.lat] for s in st])
    v = 0.5 * lonlat[:, 0] + lonlat[:, 1]
    theta = 2 * (v - v.min()) / (v.max() - v.min()) - 1
    w = lonlat[:, 1] - lonlat[:, 0] * 0.3
    b = 15 + 10 * (w - w.min()) / (w.max() - w.min())
    a = k_const + gamma * b
    return SyntheticTruth(tuple(st), gamma, a, b, theta, tau, kappa, n_years=n_years)


def synthetic_dataset(truth: SyntheticTruth, seed: int) -> SpaceTimeDataset:
    """
    Daily seasonal series driven by Brown-Resnick fields ``Y``.

    ``daily = "pareto"``: every day is an independent max-Pareto field, so
    all exceedance fields follow the Pareto process exactly and each site
    has ``P(Y > y) = k / y`` for ``y >= 1`` with a common ``k``.
    ``daily = "max_stable"``: max-stable fields with margins mapped exactly to
    unit Pareto; margins are exact everywhere but exceedances are only
    approximately Pareto.

    The trend scales ``Y`` to ``c Y`` and sites map ``y >= 1`` to
    ``b + a (y^g - 1) / g``, ``y < 1`` linearly from ``floor`` up to ``b``.
    """
    st = list(truth.stations)
    xy = project_km(np.array([[s.lon, s.lat] for s in st]))
    dep = DependenceModel(truth.tau, truth.kappa)
    n = truth.n_times
    if truth.daily == "pareto":
        y = simulate_l_pareto(SimulationConfig(xy, dep, n, seed, RiskFunctional("max"))).fields
    elif truth.daily == "max_stable":
        y = frechet_to_pareto(simulate_max_stable(xy, dep, n, seed))
    else:
        raise ValueError(f"unknown daily generator {truth.daily!r}")
    c = skedasis_eval(truth.family, truth.theta[None, :], time_fraction(n)[:, None])
    cy = c * y
    g = truth.gamma
    with np.errstate(divide="ignore", invalid="ignore"):
        tail = truth.b + truth.a * (np.expm1(g * np.log(cy)) / g if abs(g) > 1e-8 else np.log(cy))
    bulk = truth.floor + (truth.b - truth.floor) * cy
    x = np.where(cy >= 1, tail, bulk)
    years = np.repeat(np.arange(truth.first_year, truth.first_year + truth.n_years), SEASON_DAYS)
    doys = np.tile(np.arange(truth.start_doy, truth.start_doy + SEASON_DAYS), truth.n_years)
    days = days_from_year_doy(years, doys)
    return SpaceTimeDataset(tuple(st), days, x, np.zeros_like(x, dtype=bool))
