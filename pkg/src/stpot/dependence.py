"""
Spatial extremal dependence of the latent field.

Brown-Resnick model with a power semi-variogram ``nu(h) = (|h| / tau)^kappa``
fitted by minimizing the mean gradient score over threshold exceedances on
unit-Pareto margins.  Semi-variogram convention: the underlying Gaussian
process ``W`` satisfies ``Var(W(s) - W(s')) = 2 nu(s - s')``.
"""

from __future__ import annotations

import logging
import math
import warnings
from dataclasses import dataclass, field

import numpy as np
from scipy import linalg, optimize, stats

from .data import RiskFunctional, SpaceTimeDataset, distance_matrix, project_km
from .marginal import GpdTail, MarginalModel

logger = logging.getLogger(__name__)

KAPPA_MAX_FIT = 1.99


class DependenceError(ValueError):
    pass


class DependenceFitError(RuntimeError):
    pass


def _check_params(tau: float, kappa: float) -> None:
    if not tau > 0:
        raise DependenceError(f"range tau must be positive, got {tau}")
    if not 0 < kappa <= 2:
        raise DependenceError(f"smoothness kappa must lie in (0, 2], got {kappa}")


def semivariogram_distance(d, tau: float, kappa: float):
    _check_params(tau, kappa)
    return (np.asarray(d, dtype=float) / tau) ** kappa


def power_semivariogram(h, tau: float, kappa: float):
    """``(|h| / tau)^kappa`` for lag vector(s) ``h`` with a trailing axis of 2."""
    h = np.asarray(h, dtype=float)
    return semivariogram_distance(np.sqrt(np.sum(h**2, axis=-1)), tau, kappa)


def semivariogram_matrix(xy_km: np.ndarray, tau: float, kappa: float) -> np.ndarray:
    return semivariogram_distance(distance_matrix(xy_km), tau, kappa)


def anchored_covariance(nu: np.ndarray, anchor: int = 0) -> np.ndarray:
    """Covariance of ``W(s_i) - W(s_anchor)`` over the non-anchor sites."""
    keep = [i for i in range(nu.shape[0]) if i != anchor]
    v = nu[keep, anchor]
    return v[:, None] + v[None, :] - nu[np.ix_(keep, keep)]


@dataclass(frozen=True)
class DependenceModel:
    tau: float
    kappa: float
    risk: RiskFunctional = field(default_factory=RiskFunctional)
    u_fit: float = float("nan")
    diagnostics: dict = field(default_factory=dict, compare=False)

    def __post_init__(self):
        _check_params(self.tau, self.kappa)

    def semivariogram(self, d):
        return semivariogram_distance(d, self.tau, self.kappa)

    def to_dict(self) -> dict:
        return {
            "tau": self.tau,
            "kappa": self.kappa,
            "risk": self.risk.to_dict(),
            "u_fit": self.u_fit,
            "diagnostics": self.diagnostics,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "DependenceModel":
        return cls(d["tau"], d["kappa"], RiskFunctional.from_dict(d["risk"]), d.get("u_fit", float("nan")),
                   d.get("diagnostics", {}))


# ----------------------------------------------------------------------------
# Margins and exceedance fields

@dataclass(frozen=True)
class StandardizedMargins:
    values: np.ndarray
    tails: list
    tail_quantile: float


def pareto_margins(latent: SpaceTimeDataset, marg: MarginalModel, tail_quantile: float = 0.95) -> StandardizedMargins:
    """
    Semiparametric probability-integral transform to unit-Pareto scale.

    Below the site's ``tail_quantile`` the empirical distribution
    ``rank / (N + 1)`` is used; above it the GPD implied by the marginal
    model, so that ``z* = 1 / ((1 - q) * survival(z - u_q))``.
    """
    if not 0 < tail_quantile < 1:
        raise ValueError("tail_quantile must lie in (0, 1)")
    z = latent.values
    out = np.full(z.shape, np.nan)
    tails = []
    for j in range(latent.n_sites):
        ok = ~latent.mask[:, j]
        v = z[ok, j]
        u_q = float(np.quantile(v, tail_quantile))
        sigma = marg.a_n[j] + marg.gamma * (u_q - marg.b_n[j])
        if sigma <= 0:
            raise DependenceError(f"site {j}: implied GPD scale {sigma:.3g} is not positive")
        tail = GpdTail(sigma, marg.gamma, u_q)
        tails.append(tail)
        ecdf = stats.rankdata(v, method="average") / (v.size + 1)
        zs = 1.0 / (1.0 - ecdf)
        above = v >= u_q
        zs[above] = 1.0 / ((1.0 - tail_quantile) * tail.survival(v[above] - u_q))
        out[ok, j] = zs
    return StandardizedMargins(out, tails, tail_quantile)


@dataclass(frozen=True)
class ExceedanceFields:
    """Fields ``z`` (unit-Pareto margins) with ``ell(z / u) >= 1``."""

    times: np.ndarray
    values: np.ndarray
    u: float
    risk: RiskFunctional

    def __len__(self):
        return self.values.shape[0]


def select_exceedances(values: np.ndarray, ell: RiskFunctional, u: float | None = None,
                       u_quantile: float = 0.95) -> ExceedanceFields:
    """
    Complete days whose risk exceeds ``u`` (default: its ``u_quantile``).
    Days with any masked site are dropped.
    """
    values = np.asarray(values, dtype=float)
    complete = np.all(np.isfinite(values), axis=1) & np.all(values > 0, axis=1)
    r = np.asarray(ell(values, axis=1), dtype=float)
    if u is None:
        u = float(np.quantile(r[complete], u_quantile))
    keep = np.flatnonzero(complete & (r >= u))
    return ExceedanceFields(keep, values[keep], float(u), ell)


def standardize_margins(latent: SpaceTimeDataset, marg: MarginalModel, ell: RiskFunctional | None = None,
                        u_quantile: float = 0.95, tail_quantile: float = 0.95) -> ExceedanceFields:
    ell = ell or marg.risk
    std = pareto_margins(latent, marg, tail_quantile)
    return select_exceedances(std.values, ell, u_quantile=u_quantile)


# ----------------------------------------------------------------------------
# Brown-Resnick intensity

def _precision(nu: np.ndarray) -> tuple[np.ndarray, float]:
    sigma = anchored_covariance(nu)
    try:
        c, low = linalg.cho_factor(sigma, lower=True)
    except linalg.LinAlgError:
        raise DependenceError("anchored covariance is singular (duplicate sites or degenerate variogram)") from None
    logdet = 2.0 * np.sum(np.log(np.diag(c)))
    if not np.isfinite(logdet):
        raise DependenceError("anchored covariance is singular")
    prec = linalg.cho_solve((c, low), np.eye(sigma.shape[0]))
    return 0.5 * (prec + prec.T), logdet


def br_log_intensity(z, nu: np.ndarray, derivatives: bool = False):
    """
    Log of the Brown-Resnick exponent-measure density at rows of ``z``.

    With ``derivatives=True`` also returns the gradient and the diagonal of
    the Hessian of ``log lambda`` with respect to ``z``.
    """
    z = np.atleast_2d(np.asarray(z, dtype=float))
    d = z.shape[1]
    if d < 2:
        raise DependenceError("need at least two sites")
    if np.any(z <= 0):
        raise DependenceError("intensity defined for positive fields only")
    prec, logdet = _precision(nu)
    x = np.log(z)
    zbar = x[:, 1:] - x[:, :1] + nu[1:, 0]
    A = zbar @ prec
    quad = np.sum(A * zbar, axis=1)
    loglam = (-0.5 * logdet - 0.5 * (d - 1) * math.log(2 * math.pi)
              - 2 * x[:, 0] - x[:, 1:].sum(axis=1) - 0.5 * quad)
    if not derivatives:
        return loglam
    grad = np.empty_like(z)
    hess = np.empty_like(z)
    grad[:, 1:] = -(1 + A) / z[:, 1:]
    hess[:, 1:] = (1 + A - np.diag(prec)) / z[:, 1:] ** 2
    sA = A.sum(axis=1)
    grad[:, 0] = (sA - 2) / z[:, 0]
    hess[:, 0] = (2 - sA - prec.sum()) / z[:, 0] ** 2
    return loglam, grad, hess


def brown_resnick_intensity(z, xy_km: np.ndarray, tau: float, kappa: float):
    """Brown-Resnick intensity at site coordinates ``xy_km`` (km)."""
    nu = semivariogram_matrix(xy_km, tau, kappa)
    out = np.exp(br_log_intensity(z, nu))
    return out[0] if np.ndim(z) == 1 else out


# ----------------------------------------------------------------------------
# Gradient score

def score_weights(z: np.ndarray, ell: RiskFunctional, u: float):
    """
    ``w_j(z) = z_j (1 - exp(1 - ell(z/u)))`` and ``dw_j / dz_j``.

    The weight vanishes on the boundary ``ell(z/u) = 1`` and as ``z_j -> 0``.
    """
    z = np.atleast_2d(z)
    r = np.asarray(ell(z / u, axis=1), dtype=float)
    e = np.exp(1.0 - r)
    base = (1.0 - e)[:, None]
    w = z * base
    dr = ell.gradient(z) / u
    dw = base + z * e[:, None] * dr
    return w, dw


def gradient_score(z, nu: np.ndarray, ell: RiskFunctional, u: float) -> np.ndarray:
    """Per-field gradient score for fields ``z`` (rows) in the exceedance region."""
    z = np.atleast_2d(np.asarray(z, dtype=float))
    _, g, h = br_log_intensity(z, nu, derivatives=True)
    w, dw = score_weights(z, ell, u)
    return np.sum(2 * w * dw * g + w**2 * (h + 0.5 * g**2), axis=1)


def mean_gradient_score(fields: ExceedanceFields, xy_km: np.ndarray, tau: float, kappa: float) -> float:
    nu = semivariogram_matrix(xy_km, tau, kappa)
    return float(np.mean(gradient_score(fields.values, nu, fields.risk, fields.u)))


def fit_dependence(fields: ExceedanceFields, xy_km: np.ndarray, init: tuple[float, float] = (100.0, 1.0)) -> DependenceModel:
    """
    Minimize the mean gradient score over ``(log tau, kappa)`` with L-BFGS-B.

    A solution at the upper smoothness bound is returned with a warning.
    """
    if len(fields) < 50:
        raise DependenceFitError(f"only {len(fields)} exceedance fields; need at least 50")
    tau0, kappa0 = init
    _check_params(tau0, kappa0)
    dist = distance_matrix(xy_km)
    off = dist[np.triu_indices_from(dist, 1)]
    if np.any(off <= 0):
        raise DependenceError("duplicate site coordinates")
    bounds = [(math.log(off.min() / 100), math.log(off.max() * 100)), (0.05, KAPPA_MAX_FIT)]

    def objective(p):
        try:
            return mean_gradient_score(fields, xy_km, math.exp(p[0]), p[1])
        except DependenceError:
            return 1e10

    starts = [np.clip([math.log(tau0), min(kappa0, KAPPA_MAX_FIT)], [b[0] for b in bounds], [b[1] for b in bounds])]
    starts.append(np.array([math.log(np.median(off)), 1.0]))
    best = None
    for s in starts:
        res = optimize.minimize(objective, s, method="L-BFGS-B", jac="3-point", bounds=bounds,
                                options={"maxiter": 500, "ftol": 1e-13, "gtol": 1e-9})
        if best is None or res.fun < best.fun:
            best = res
    grad = optimize.approx_fprime(best.x, objective, 1e-7)
    interior = [(lo + 1e-8 < v < hi - 1e-8) for v, (lo, hi) in zip(best.x, bounds)]
    gnorm = float(np.linalg.norm(np.where(interior, grad, 0.0)))
    converged = bool(best.success) or gnorm < 1e-4 * (1 + abs(best.fun))
    if not converged:
        raise DependenceFitError(f"gradient-score optimization failed: {best.message}")
    tau, kappa = math.exp(best.x[0]), float(best.x[1])
    notes = []
    if kappa >= KAPPA_MAX_FIT - 1e-6:
        msg = "smoothness at the upper bound (kappa = 2 boundary)"
        warnings.warn(msg, RuntimeWarning, stacklevel=2)
        notes.append(msg)
    diag = {
        "score": float(best.fun),
        "n_iter": int(best.nit),
        "converged": converged,
        "grad_norm": gnorm,
        "n_fields": len(fields),
        "warnings": notes,
    }
    logger.info("dependence fit: tau=%.2f km kappa=%.3f score=%.5f (%d fields)", tau, kappa, best.fun, len(fields))
    return DependenceModel(tau, kappa, fields.risk, fields.u, diag)


# ----------------------------------------------------------------------------
# Diagnostics

@dataclass(frozen=True)
class BinnedCurve:
    edges: np.ndarray
    values: np.ndarray
    counts: np.ndarray
    extra: np.ndarray | None = None

    @property
    def centers(self) -> np.ndarray:
        return 0.5 * (self.edges[:-1] + self.edges[1:])

    def standard_errors(self) -> np.ndarray:
        """Binomial standard errors (meaningful for extremogram curves)."""
        with np.errstate(invalid="ignore", divide="ignore"):
            return np.sqrt(self.values * (1 - self.values) / self.counts)


def _check_bins(bins) -> np.ndarray:
    edges = np.asarray(bins, dtype=float)
    if edges.ndim != 1 or edges.size < 2 or np.any(np.diff(edges) <= 0):
        raise ValueError("bin edges must be a strictly increasing sequence of length >= 2")
    return edges


def _pair_bins(xy_km, edges, include_self):
    dist = distance_matrix(xy_km)
    m = dist.shape[0]
    pairs = []
    for i in range(m):
        for j in range(m):
            if i == j and not include_self:
                continue
            k = np.searchsorted(edges, dist[i, j], side="right") - 1
            if 0 <= k < edges.size - 1:
                pairs.append((i, j, k))
    return pairs


def extremogram_from_matrix(values, xy_km, q: float, bins, ell: RiskFunctional | None = None,
                            u: float | None = None, include_self: bool = False) -> BinnedCurve:
    """
    Pooled conditional exceedance frequency per distance bin.

    For each ordered site pair ``(i, j)`` in a bin, counts days with
    ``Z_i > u_q(i)`` (and ``ell(Z) > u`` when given) and, among those,
    days with ``Z_j > u_q(j)``; ``u_q`` is the site's empirical
    ``q``-quantile.  Empty bins are NaN.
    """
    if not 0 < q < 1:
        raise ValueError("q must lie in (0, 1)")
    edges = _check_bins(bins)
    z = np.asarray(values, dtype=float)
    uq = np.nanquantile(z, q, axis=0)
    with np.errstate(invalid="ignore"):
        exc = z > uq[None, :]
    valid = np.isfinite(z)
    if ell is not None and u is not None:
        r = np.asarray(ell(z, axis=1), dtype=float)
        with np.errstate(invalid="ignore"):
            day_ok = r > u
    else:
        day_ok = np.ones(z.shape[0], dtype=bool)
    nb = edges.size - 1
    cond = np.zeros(nb)
    joint = np.zeros(nb)
    for i, j, k in _pair_bins(xy_km, edges, include_self):
        base = exc[:, i] & valid[:, j] & day_ok
        cond[k] += base.sum()
        joint[k] += (base & exc[:, j]).sum()
    with np.errstate(invalid="ignore", divide="ignore"):
        vals = np.where(cond > 0, joint / cond, np.nan)
    return BinnedCurve(edges, vals, cond, joint)


def empirical_extremogram(latent: SpaceTimeDataset, q: float, bins, ell: RiskFunctional | None = None,
                          u: float | None = None, include_self: bool = False) -> BinnedCurve:
    xy = project_km(latent.coords)
    return extremogram_from_matrix(latent.values, xy, q, bins, ell, u, include_self)


def model_extremogram(h, dep: DependenceModel):
    """Bivariate tail-dependence ``chi(h) = 2 (1 - Phi(sqrt(2 nu(h)) / 2))``."""
    nu = dep.semivariogram(np.abs(np.asarray(h, dtype=float)))
    return 2.0 * stats.norm.sf(np.sqrt(2.0 * nu) / 2.0)


def variogram_from_matrix(values, xy_km, bins, ell: RiskFunctional | None = None,
                          u: float | None = None) -> BinnedCurve:
    """
    Matheron estimator ``1/2 mean[(g_i - g_j)^2]`` of ``g = log z`` pooled
    per distance bin, restricted to days with ``ell(z) > u`` when given.
    """
    edges = _check_bins(bins)
    z = np.asarray(values, dtype=float)
    with np.errstate(divide="ignore", invalid="ignore"):
        g = np.log(z)
    if ell is not None and u is not None:
        r = np.asarray(ell(z, axis=1), dtype=float)
        with np.errstate(invalid="ignore"):
            g = g[r > u]
    nb = edges.size - 1
    sums = np.zeros(nb)
    counts = np.zeros(nb)
    for i, j, k in _pair_bins(xy_km, edges, include_self=False):
        if j <= i:
            continue
        d = g[:, i] - g[:, j]
        d = d[np.isfinite(d)]
        sums[k] += 0.5 * np.sum(d**2)
        counts[k] += d.size
    with np.errstate(invalid="ignore", divide="ignore"):
        vals = np.where(counts > 0, sums / counts, np.nan)
    return BinnedCurve(edges, vals, counts)


def empirical_variogram(std_values: np.ndarray, coords_lonlat: np.ndarray, bins,
                        ell: RiskFunctional | None = None, u: float | None = None) -> BinnedCurve:
    """Variogram of the log unit-Pareto field; ``coords_lonlat`` in degrees."""
    return variogram_from_matrix(std_values, project_km(coords_lonlat), bins, ell, u)
