"""
Return levels under trends.

Two definitions on a horizon of ``n_x * m`` days starting at day ``t0``:

* ENE: the expected number of exceedances of ``x_m`` over the horizon is one.
* EWT: the expected waiting time to the first exceedance is ``n_x * m`` days.

Daily exceedance probabilities are ``p_t = c(t/n) * phi_u * S(x - u)`` with
``S`` the GPD survival of the latent tail above ``u``.
"""

from __future__ import annotations

import logging
import math
import warnings
from dataclasses import dataclass, field
from typing import Callable

import numpy as np
from scipy import optimize

from .marginal import GpdTail, MarginalModel
from .trend import ExtrapolationWarning, TrendModel, evaluate_trend, skedasis_eval, to_observed

logger = logging.getLogger(__name__)

METHODS = ("ene", "ewt")
LEVEL_CAP = 1e4
PRODUCT_FLOOR = 1e-12
CHUNK = 8192


class ReturnLevelError(RuntimeError):
    pass


class EwtDivergenceError(ReturnLevelError):
    pass


@dataclass(frozen=True)
class ReturnSpec:
    """
    Return-period specification.

    ``t0`` is the first day of the horizon (1-based); ``None`` means the day
    after the record, ``n + 1``.
    """

    m: float
    n_x: int = 184
    t0: int | None = None
    method: str = "ene"
    site: int | None = None

    def __post_init__(self):
        if not self.m >= 1:
            raise ValueError("return period m must be >= 1")
        if self.n_x < 1:
            raise ValueError("n_x must be >= 1")
        if self.method.lower() not in METHODS:
            raise ValueError(f"unknown return-level method {self.method!r}")
        object.__setattr__(self, "method", self.method.lower())

    @property
    def horizon(self) -> int:
        return int(round(self.n_x * self.m))

    def start(self, n: int) -> int:
        return n + 1 if self.t0 is None else int(self.t0)


@dataclass(frozen=True)
class ReturnLevel:
    x_m: float
    method: str
    m: float
    criterion: float
    n_iter: int
    clamped: bool = False
    warnings: tuple = field(default_factory=tuple)


TrendCurve = Callable[[np.ndarray], np.ndarray]


def site_trend(trend: TrendModel, site: int) -> TrendCurve:
    """Skedasis curve of one site, evaluated without extrapolation warnings."""
    theta = float(trend.theta_site[site])
    family = trend.family

    def curve(u):
        return np.maximum(skedasis_eval(family, theta, u), 0.0)

    return curve


def _factors(curve: TrendCurve | None, t: np.ndarray, n: int | None) -> np.ndarray:
    if curve is None:
        return np.ones(t.size)
    if n is None:
        raise ValueError("record length n is required with a trend")
    return np.asarray(curve(t / n), dtype=float)


def _notes(spec: ReturnSpec, curve, n) -> list[str]:
    notes = []
    if curve is not None and spec.start(n) + spec.horizon - 1 > n:
        notes.append("trend extrapolated beyond the observed record")
        warnings.warn("return level uses the trend beyond the observed record (t/n > 1)",
                      ExtrapolationWarning, stacklevel=3)
    return notes


def _bracket(f, lo: float, cap: float) -> float:
    """Smallest doubling step above ``lo`` where ``f`` changes sign, up to ``cap``."""
    step = 1.0
    hi = lo + step
    while f(hi) > 0:
        if hi >= cap:
            raise ReturnLevelError(f"no return level below the cap of {cap:g}")
        step *= 2
        hi = min(lo + step, cap)
    return hi


def _upper_cap(tail: GpdTail) -> float:
    if tail.gamma < 0:
        return min(LEVEL_CAP, tail.threshold - tail.sigma / tail.gamma)
    return LEVEL_CAP


def expected_exceedances(x: float, spec: ReturnSpec, tail: GpdTail, phi_u: float,
                         curve: TrendCurve | None = None, n: int | None = None) -> tuple[float, bool]:
    """Sum of clamped daily probabilities over the horizon, and a clamp flag."""
    t0 = spec.start(n or 0)
    t = np.arange(t0, t0 + spec.horizon, dtype=float)
    p = _factors(curve, t, n) * phi_u * float(tail.survival(max(x - tail.threshold, 0.0)))
    return float(np.sum(np.minimum(p, 1.0))), bool(np.any(p > 1))


def return_level_ene(spec: ReturnSpec, tail: GpdTail, phi_u: float, curve: TrendCurve | None = None,
                     n: int | None = None) -> ReturnLevel:
    """Level with one expected exceedance over the horizon (Brent on the sum)."""
    if not 0 < phi_u <= 1:
        raise ValueError("phi_u must lie in (0, 1]")
    notes = _notes(spec, curve, n)
    u = tail.threshold

    def f(x):
        return expected_exceedances(x, spec, tail, phi_u, curve, n)[0] - 1.0

    f_u = f(u)
    # rounding in the sum must not turn the boundary case n_x m phi = 1 into an error
    if abs(f_u) <= 1e-10:
        return ReturnLevel(u, "ene", spec.m, f_u + 1.0, 0, False, tuple(notes))
    if f_u < 0:
        raise ReturnLevelError("expected exceedances at the threshold are below one; level lies below u")
    hi = _bracket(f, u, _upper_cap(tail))
    x, info = optimize.brentq(f, u, hi, xtol=1e-12, rtol=1e-15, full_output=True, maxiter=500)
    total, clamped = expected_exceedances(x, spec, tail, phi_u, curve, n)
    if abs(total - 1) > 1e-8:
        raise ReturnLevelError(f"ENE solver stopped with expected count {total:.10f}")
    if clamped:
        notes.append("daily probability clamped to 1")
    return ReturnLevel(float(x), "ene", spec.m, total, info.iterations, clamped, tuple(notes))


def expected_waiting_time(x: float, spec: ReturnSpec, tail: GpdTail, phi_u: float,
                          curve: TrendCurve | None = None, n: int | None = None) -> tuple[float, bool]:
    """
    ``1 + sum_i prod_{t<=i} (1 - p_t)`` from day ``t0``, summed in chunks in
    log space.

    Returns ``(value, truncated)``; ``truncated`` means the running product
    was still above 1e-12 after ``100 n_x m`` days and ``value`` is only a
    lower bound.
    """
    t0 = spec.start(n or 0)
    limit = 100 * spec.horizon
    s = float(tail.survival(max(x - tail.threshold, 0.0)))
    total = 1.0
    log_prod = 0.0
    i = 0
    while i < limit:
        size = min(CHUNK, limit - i)
        t = np.arange(t0 + i, t0 + i + size, dtype=float)
        p = np.minimum(_factors(curve, t, n) * phi_u * s, 1.0)
        with np.errstate(divide="ignore"):
            logs = log_prod + np.cumsum(np.log1p(-p))
        total += float(np.sum(np.exp(logs)))
        log_prod = float(logs[-1])
        i += size
        if log_prod < math.log(PRODUCT_FLOOR):
            return total, False
    return total, True


def _ewt_bracket(spec, tail, phi_u, curve, n, target) -> tuple[float, float]:
    """
    Doubling bracket for the EWT root that backs off from levels where the
    series is truncated.

    Truncation sets in above some level, so bisection finds the highest
    level still summable; the root is bracketed there if the waiting time
    already reaches the target.
    """
    u = tail.threshold
    cap = _upper_cap(tail)

    def state(x):
        return expected_waiting_time(x, spec, tail, phi_u, curve, n)

    lo, step = u, 1.0
    hi = u + step
    while True:
        value, undecided = state(hi)
        if undecided:
            a, b = lo, hi
            for _ in range(100):
                mid = 0.5 * (a + b)
                if state(mid)[1]:
                    b = mid
                else:
                    a = mid
                if b - a <= 1e-12 * max(1.0, abs(a)):
                    break
            if a == lo or state(a)[0] < target:
                raise EwtDivergenceError(
                    f"waiting-time series does not converge above x = {a:.6g} before reaching the horizon; "
                    "the expected waiting time may be infinite (exceedance probabilities decay too fast)"
                )
            return lo, a
        if value >= target:
            return lo, hi
        if hi >= cap:
            raise ReturnLevelError(f"no return level below the cap of {cap:g}")
        lo = hi
        step *= 2
        hi = min(u + step, cap)


def return_level_ewt(spec: ReturnSpec, tail: GpdTail, phi_u: float, curve: TrendCurve | None = None,
                     n: int | None = None) -> ReturnLevel:
    """Level whose expected first-passage time is ``n_x m`` days (Brent)."""
    if not 0 < phi_u <= 1:
        raise ValueError("phi_u must lie in (0, 1]")
    notes = _notes(spec, curve, n)
    u = tail.threshold
    target = float(spec.horizon)

    def f(x):
        value, truncated = expected_waiting_time(x, spec, tail, phi_u, curve, n)
        # a truncated sum is a lower bound, which still decides the sign once it passes the target
        if truncated and value < target:
            raise EwtDivergenceError(
                f"waiting-time series did not converge at x = {x:.6g}; the expected waiting time may be "
                "infinite (exceedance probabilities decay too fast)"
            )
        return target - value

    if f(u) < 0:
        raise ReturnLevelError("expected waiting time at the threshold already exceeds the horizon")
    lo, hi = _ewt_bracket(spec, tail, phi_u, curve, n, target)
    x, info = optimize.brentq(f, lo, hi, xtol=1e-12, rtol=1e-15, full_output=True, maxiter=500)
    value, _ = expected_waiting_time(x, spec, tail, phi_u, curve, n)
    s = float(tail.survival(max(x - u, 0.0)))
    t0 = spec.start(n or 0)
    p0 = _factors(curve, np.arange(t0, t0 + spec.horizon, dtype=float), n) * phi_u * s
    clamped = bool(np.any(p0 > 1))
    if clamped:
        notes.append("daily probability clamped to 1")
    return ReturnLevel(float(x), "ewt", spec.m, value, info.iterations, clamped, tuple(notes))


def return_level(spec: ReturnSpec, tail: GpdTail, phi_u: float, curve: TrendCurve | None = None,
                 n: int | None = None) -> ReturnLevel:
    solver = return_level_ene if spec.method == "ene" else return_level_ewt
    return solver(spec, tail, phi_u, curve, n)


def stationary_level(m: float, n_x: int, tail: GpdTail, phi_u: float, scale: float = 1.0) -> float:
    """Closed form ``u + sigma ((n_x m phi scale)^g - 1) / g`` (log form at g = 0)."""
    big_n = n_x * m * phi_u * scale
    if big_n < 1:
        raise ReturnLevelError("n_x m phi_u < 1: the return level lies below the threshold")
    g = tail.gamma
    if abs(g) < 1e-8:
        return tail.threshold + tail.sigma * math.log(big_n)
    return tail.threshold + tail.sigma * math.expm1(g * math.log(big_n)) / g


def latent_return_level(spec: ReturnSpec, tail: GpdTail, phi_u: float) -> float:
    """Stationary latent return level ``z_m`` over ``n_x m`` days."""
    return stationary_level(spec.horizon / spec.n_x, spec.n_x, tail, phi_u)


def nonstationary_from_latent(z_m, trend: TrendModel, marg: MarginalModel, spec: ReturnSpec,
                              theta=None, n: int | None = None):
    """
    Observation-scale level at time ``t_m = 1 + n_x m / n``:
    ``z c^g + (c^g - 1) / g (a~ - g b~)`` with ``c = c_theta(t_m)``.

    ``theta`` defaults to the site's own estimate when ``spec.site`` is set.
    """
    n = trend.n if n is None else n
    if theta is None:
        if spec.site is None:
            raise ValueError("either theta or spec.site is required")
        theta = trend.theta_site[spec.site]
    t_m = 1.0 + spec.horizon / n
    with warnings.catch_warnings():
        # t_m > 1 by construction; only the linear family can leave its domain
        if trend.family == "log_linear":
            warnings.simplefilter("ignore", ExtrapolationWarning)
        c = evaluate_trend(trend.family, np.asarray(theta, dtype=float), t_m)
    return to_observed(z_m, c, marg.gamma, marg.a_tilde, marg.b_tilde)
