"""
Space-time tail trend (skedasis) functions.

Two parametric families on rescaled time ``u = t / n``:

* ``log_linear``: ``c(u) = theta / (exp(theta) - 1) * exp(theta * u)``
* ``linear``: ``c(u) = theta * (2u - 1) + 1`` with ``|theta| < 1``

Both integrate to one over ``[0, 1]`` for every admissible ``theta``.
The per-site ``theta`` is estimated from exceedance times only and then
regressed on (1, lon, lat).
"""

from __future__ import annotations

import logging
import warnings
from dataclasses import dataclass, field

import numpy as np
from scipy import optimize

from .data import SpaceTimeDataset
from .preprocess import runs_peaks

logger = logging.getLogger(__name__)

FAMILIES = ("log_linear", "linear")
SMALL_THETA = 1e-6
CDF_SMALL_THETA = 1e-12
LINEAR_EPS = 1e-9


class TrendFitError(RuntimeError):
    pass


class ExtrapolationWarning(UserWarning):
    pass


def _check_family(family: str) -> str:
    family = family.replace("-", "_")
    if family not in FAMILIES:
        raise ValueError(f"unknown trend family {family!r}")
    return family


def skedasis_eval(family: str, theta, u):
    """
    Evaluate ``c_theta(u)``.  ``theta`` and ``u`` broadcast against each other.

    The log-linear family uses its series expansion when ``|theta| < 1e-6``.
    """
    family = _check_family(family)
    theta = np.asarray(theta, dtype=float)
    u = np.asarray(u, dtype=float)
    if family == "linear":
        if np.any(np.abs(theta) >= 1):
            raise ValueError("linear trend needs |theta| < 1")
        return theta * (2 * u - 1) + 1
    small = np.abs(theta) < SMALL_THETA
    safe = np.where(small, 1.0, theta)
    with np.errstate(over="ignore"):
        # theta / (e^theta - 1) * e^(theta u) == theta / (1 - e^-theta) * e^(theta (u - 1))
        direct = np.where(
            safe > 0,
            safe / -np.expm1(-safe) * np.exp(safe * (u - 1)),
            safe / np.expm1(safe) * np.exp(safe * u),
        )
    series = 1 + theta * (u - 0.5) + theta**2 * (u**2 / 2 - u / 2 + 1 / 12)
    return np.where(small, series, direct)


def skedasis_cdf(family: str, theta: float, u):
    """Distribution function of exceedance times under ``c_theta``."""
    family = _check_family(family)
    u = np.asarray(u, dtype=float)
    if family == "linear":
        return theta * (u**2 - u) + u
    # expm1 keeps full precision down to tiny theta; the series covers theta ~ 0
    if abs(theta) < CDF_SMALL_THETA:
        return u + theta * (u**2 - u) / 2
    return np.expm1(theta * u) / np.expm1(theta)


def skedasis_inverse_cdf(family: str, theta: float, p):
    family = _check_family(family)
    p = np.asarray(p, dtype=float)
    if family == "linear":
        # root of theta u^2 + (1 - theta) u - p in the form free of cancellation
        b = 1 - theta
        return 2 * p / (b + np.sqrt(b * b + 4 * theta * p))
    if abs(theta) < CDF_SMALL_THETA:
        return p - theta * (p**2 - p) / 2
    return np.log1p(p * np.expm1(theta)) / theta


# ----------------------------------------------------------------------------
# Log-linear score helpers: the MLE solves mean(u) = E_theta[U]

def _loglinear_mean(theta: float) -> float:
    if abs(theta) < 1e-3:
        return 0.5 + theta / 12 - theta**3 / 720
    return -1.0 / np.expm1(-theta) - 1.0 / theta


def _loglinear_var(theta: float) -> float:
    if abs(theta) < 1e-2:
        return 1 / 12 - theta**2 / 240 + theta**4 / 6048
    e = np.expm1(-theta)
    return 1.0 / theta**2 - np.exp(-theta) / e**2


def loglinear_score(theta: float, times) -> float:
    times = np.asarray(times, dtype=float)
    return float(np.sum(times) - times.size * _loglinear_mean(theta))


def linear_score(theta: float, times) -> float:
    d = 2 * np.asarray(times, dtype=float) - 1
    return float(np.sum(d / (theta * d + 1)))


@dataclass(frozen=True)
class SkedasisFit:
    theta: float
    se: float
    n: int
    n_iter: int
    at_bound: bool = False


def fit_skedasis_mle(times, family: str = "log_linear", tol: float = 1e-12) -> SkedasisFit:
    """
    Maximum-likelihood ``theta`` from exceedance times in ``[0, 1]``.

    Log-linear: safeguarded Newton iteration on the score.  Linear: root of
    the (monotone) score on ``(-1 + eps, 1 - eps)``, else the bound that
    maximizes the concave log-likelihood.
    """
    family = _check_family(family)
    times = np.asarray(times, dtype=float)
    n = times.size
    if n < 10:
        raise TrendFitError(f"only {n} exceedance times; need at least 10")
    if np.ptp(times) == 0:
        raise TrendFitError("all exceedance times are identical; trend is not identifiable")
    if family == "log_linear":
        target = times.mean()
        # E_theta[U] is increasing from 0 to 1, so bracket then Newton
        lo, hi = -1.0, 1.0
        while _loglinear_mean(lo) > target:
            lo *= 2
            if lo < -1e3:
                raise TrendFitError("log-linear MLE diverges to -inf")
        while _loglinear_mean(hi) < target:
            hi *= 2
            if hi > 1e3:
                raise TrendFitError("log-linear MLE diverges to +inf")
        theta = 0.0 if lo < 0 < hi else 0.5 * (lo + hi)
        for it in range(100):
            f = _loglinear_mean(theta) - target
            if f > 0:
                hi = theta
            else:
                lo = theta
            step = f / _loglinear_var(theta)
            new = theta - step
            if not lo < new < hi:
                new = 0.5 * (lo + hi)
            if abs(new - theta) < tol * max(1.0, abs(theta)):
                theta = new
                break
            theta = new
        else:
            raise TrendFitError("Newton iteration for the log-linear trend did not converge")
        se = 1.0 / np.sqrt(n * _loglinear_var(theta))
        return SkedasisFit(float(theta), float(se), n, it + 1)

    lo, hi = -1 + LINEAR_EPS, 1 - LINEAR_EPS
    s_lo, s_hi = linear_score(lo, times), linear_score(hi, times)
    at_bound = False
    if s_lo <= 0:
        theta, at_bound = lo, True
    elif s_hi >= 0:
        theta, at_bound = hi, True
    else:
        theta, info = optimize.brentq(linear_score, lo, hi, args=(times,), xtol=tol, full_output=True)
        it = info.iterations
    if at_bound:
        warnings.warn("linear trend MLE on the boundary of (-1, 1)", RuntimeWarning, stacklevel=2)
        it = 0
    d = 2 * times - 1
    info_obs = np.sum(d**2 / (theta * d + 1) ** 2)
    return SkedasisFit(float(theta), float(1 / np.sqrt(info_obs)), n, it, at_bound)


# ----------------------------------------------------------------------------
# Spatial regression of theta

@dataclass(frozen=True)
class SpatialRegression:
    coeffs: np.ndarray
    se: np.ndarray
    r2: float
    residuals: np.ndarray


def ols(design: np.ndarray, y: np.ndarray) -> SpatialRegression:
    """Ordinary least squares with an explicit rank check."""
    design = np.asarray(design, dtype=float)
    y = np.asarray(y, dtype=float)
    n, p = design.shape
    if n < p or np.linalg.matrix_rank(design) < p:
        raise ValueError("rank-deficient regression design")
    coef, *_ = np.linalg.lstsq(design, y, rcond=None)
    resid = y - design @ coef
    ss_tot = float(np.sum((y - y.mean()) ** 2))
    ss_res = float(np.sum(resid**2))
    r2 = 1.0 - ss_res / ss_tot if ss_tot > 0 else 1.0
    dof = n - p
    if dof > 0:
        s2 = ss_res / dof
        se = np.sqrt(np.diag(s2 * np.linalg.inv(design.T @ design)))
    else:
        se = np.full(p, np.nan)
    return SpatialRegression(coef, se, r2, resid)


def regress_theta_spatial(theta_site, coords) -> SpatialRegression:
    """OLS of per-site ``theta`` on ``(1, lon, lat)``."""
    coords = np.asarray(coords, dtype=float)
    if coords.shape[0] < 4:
        raise ValueError("need at least 4 sites for the spatial trend regression")
    design = np.column_stack([np.ones(len(coords)), coords[:, 0], coords[:, 1]])
    return ols(design, theta_site)


# ----------------------------------------------------------------------------
# Trend model and latent transform

def time_fraction(n: int) -> np.ndarray:
    """Rescaled day positions ``(i - 1/2) / n`` for ``i = 1..n``."""
    return (np.arange(1, n + 1) - 0.5) / n


@dataclass(frozen=True)
class TrendModel:
    family: str
    theta_site: np.ndarray
    coeffs: np.ndarray
    n: int
    theta_se: np.ndarray = field(default_factory=lambda: np.array([]))
    r2: float = float("nan")

    def __post_init__(self):
        object.__setattr__(self, "family", _check_family(self.family))
        object.__setattr__(self, "theta_site", np.asarray(self.theta_site, dtype=float))
        object.__setattr__(self, "coeffs", np.asarray(self.coeffs, dtype=float))
        object.__setattr__(self, "theta_se", np.asarray(self.theta_se, dtype=float))
        if self.family == "linear" and np.any(np.abs(self.theta_site) >= 1):
            raise ValueError("linear trend needs |theta| < 1 at every site")

    def theta_at(self, lonlat) -> np.ndarray:
        lonlat = np.atleast_2d(np.asarray(lonlat, dtype=float))
        return self.coeffs[0] + self.coeffs[1] * lonlat[:, 0] + self.coeffs[2] * lonlat[:, 1]

    def site_curve(self, site: int):
        """``u -> c_theta(u, s_site)`` using the site's own estimate."""
        theta = float(self.theta_site[site])
        return lambda u: evaluate_trend(self.family, theta, u)

    def site_matrix(self, u) -> np.ndarray:
        """(len(u), m) matrix of ``c_theta(u_t, s_j)``."""
        u = np.asarray(u, dtype=float)[:, None]
        return skedasis_eval(self.family, self.theta_site[None, :], u)

    def to_dict(self) -> dict:
        return {
            "family": self.family,
            "theta_site": self.theta_site.tolist(),
            "theta_se": self.theta_se.tolist(),
            "coeffs": self.coeffs.tolist(),
            "n": self.n,
            "r2": self.r2,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "TrendModel":
        return cls(d["family"], d["theta_site"], d["coeffs"], d["n"], d.get("theta_se", []), d.get("r2", float("nan")))


def evaluate_trend(family: str, theta: float, u):
    """
    ``c_theta(u)`` allowing ``u > 1``.

    Extrapolated values carry an :class:`ExtrapolationWarning`; a linear
    trend that would turn non-positive is clamped at zero.
    """
    u = np.asarray(u, dtype=float)
    if np.any(u > 1):
        warnings.warn("trend evaluated beyond the observed record (t/n > 1)", ExtrapolationWarning, stacklevel=2)
    c = skedasis_eval(family, theta, u)
    if np.any(c <= 0):
        warnings.warn("linear trend is non-positive at the requested time; clamped to 0",
                      ExtrapolationWarning, stacklevel=2)
        c = np.maximum(c, 0.0)
    return c


def _shift(c, gamma):
    """(c**gamma - 1) / gamma with the log(c) limit at gamma = 0."""
    logc = np.log(c)
    if abs(gamma) < 1e-8:
        return logc
    return np.expm1(gamma * logc) / gamma


def to_latent(x, c, gamma: float, a_tilde: float, b_tilde: float):
    """Remove the trend: ``c^-g [x - (c^g - 1)/g (a~ - g b~)]``."""
    x = np.asarray(x, dtype=float)
    c = np.asarray(c, dtype=float)
    if abs(gamma) < 1e-8:
        return x - np.log(c) * a_tilde
    return c ** (-gamma) * (x - _shift(c, gamma) * (a_tilde - gamma * b_tilde))


def to_observed(z, c, gamma: float, a_tilde: float, b_tilde: float):
    """Inverse of :func:`to_latent`: ``z c^g + (c^g - 1)/g (a~ - g b~)``."""
    z = np.asarray(z, dtype=float)
    c = np.asarray(c, dtype=float)
    if abs(gamma) < 1e-8:
        return z + np.log(c) * a_tilde
    return z * c**gamma + _shift(c, gamma) * (a_tilde - gamma * b_tilde)


def latent_transform(ds: SpaceTimeDataset, trend: TrendModel, marg) -> SpaceTimeDataset:
    """Latent stationary sample from observations using per-site trends."""
    c = trend.site_matrix(time_fraction(ds.n_times))
    z = to_latent(ds.values, c, marg.gamma, marg.a_tilde, marg.b_tilde)
    return ds.with_values(z)


def site_peak_times(ds: SpaceTimeDataset, thresholds, run_length: int = 1) -> list[np.ndarray]:
    """Rescaled times of declustered peaks above per-site thresholds."""
    u = time_fraction(ds.n_times)
    thresholds = np.broadcast_to(np.asarray(thresholds, dtype=float), (ds.n_sites,))
    return [u[runs_peaks(ds.values[:, j], float(thresholds[j]), run_length)] for j in range(ds.n_sites)]


def fit_trend(ds: SpaceTimeDataset, thresholds, family: str = "log_linear", run_length: int = 1) -> TrendModel:
    """Per-site skedasis MLE followed by the regression on coordinates."""
    fits = [fit_skedasis_mle(t, family) for t in site_peak_times(ds, thresholds, run_length)]
    theta = np.array([f.theta for f in fits])
    se = np.array([f.se for f in fits])
    reg = regress_theta_spatial(theta, ds.coords)
    logger.info("trend fit (%s): theta range %.3f .. %.3f, R2 %.3f", family, theta.min(), theta.max(), reg.r2)
    return TrendModel(family, theta, reg.coeffs, ds.n_times, se, reg.r2)
