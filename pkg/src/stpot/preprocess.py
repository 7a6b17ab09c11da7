"""Seasonal subsetting and runs declustering."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .data import SpaceTimeDataset

MAY_1 = 121
OCT_31 = 304


@dataclass(frozen=True)
class DeclusterResult:
    """
    Cluster peaks as ``(time index, station index, value)`` triples.

    Time indices are 0-based positions in the input series.
    """

    cluster_peaks: list[tuple[int, int, float]]
    run_length: int
    threshold_used: np.ndarray

    def peaks_of(self, station: int) -> tuple[np.ndarray, np.ndarray]:
        idx = [t for t, s, _ in self.cluster_peaks if s == station]
        val = [v for _, s, v in self.cluster_peaks if s == station]
        return np.asarray(idx, dtype=np.int64), np.asarray(val, dtype=float)

    def counts(self) -> np.ndarray:
        m = len(self.threshold_used)
        out = np.zeros(m, dtype=np.int64)
        for _, s, _ in self.cluster_peaks:
            out[s] += 1
        return out


def seasonal_subset(ds: SpaceTimeDataset, start_doy: int = MAY_1, end_doy: int = OCT_31) -> SpaceTimeDataset:
    """Keep days whose day-of-year lies in ``[start_doy, end_doy]``."""
    if not 1 <= start_doy <= end_doy <= 366:
        raise ValueError(f"invalid season window {start_doy}:{end_doy}")
    keep = np.flatnonzero((ds.doys >= start_doy) & (ds.doys <= end_doy))
    if keep.size == 0:
        raise ValueError(f"season window {start_doy}:{end_doy} selects no day")
    return ds.take_times(keep)


def runs_peaks(x, threshold: float, r: int = 1) -> np.ndarray:
    """
    Indices of cluster maxima in a single series.

    Exceedances are values strictly above ``threshold``; NaN never exceeds.
    A cluster ends once more than ``r`` consecutive non-exceedances occur,
    so with ``r = 1`` a single dry day does not split a cluster.  Ties inside
    a cluster keep the earliest index.  ``r = 0`` disables declustering:
    every exceedance is returned.
    """
    if r < 0:
        raise ValueError("run length must be >= 0")
    if not np.isfinite(threshold):
        raise ValueError("threshold must be finite")
    x = np.asarray(x, dtype=float)
    with np.errstate(invalid="ignore"):
        exc = np.flatnonzero(x > threshold)
    if exc.size == 0 or r == 0:
        return exc.astype(np.int64)
    # a gap of g positions between exceedances holds g - 1 non-exceedances
    breaks = np.flatnonzero(np.diff(exc) - 1 > r) + 1
    peaks = []
    for cluster in np.split(exc, breaks):
        peaks.append(cluster[np.argmax(x[cluster])])
    return np.asarray(peaks, dtype=np.int64)


def decluster_runs(series, threshold, r: int = 1) -> DeclusterResult:
    """
    Per-station runs declustering.

    Parameters
    ----------
    series : array-like, shape (n,) or (n, m)
        Daily values; NaN marks missing days.
    threshold : float or array-like of length m
    r : int
        Run length.
    """
    x = np.asarray(series, dtype=float)
    if x.ndim == 1:
        x = x[:, None]
    m = x.shape[1]
    u = np.broadcast_to(np.asarray(threshold, dtype=float), (m,)).copy()
    peaks: list[tuple[int, int, float]] = []
    for j in range(m):
        for t in runs_peaks(x[:, j], float(u[j]), r):
            peaks.append((int(t), j, float(x[t, j])))
    return DeclusterResult(peaks, r, u)
