"""
Domain types shared by every stage: stations, daily space-time series,
risk functionals and prediction grids, plus CSV / GeoJSON plumbing.
"""

from __future__ import annotations

import csv
import datetime as dt
import json
import logging
import math
import warnings
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Mapping, Sequence

import numpy as np

logger = logging.getLogger(__name__)

DEFAULT_SCHEMA = {"station": "station", "date": "date", "value": "value"}


class DataError(ValueError):
    """Base class for ingestion and validation failures."""


class ParseError(DataError):
    def __init__(self, message: str, line: int | None = None):
        self.line = line
        if line is not None:
            message = f"line {line}: {message}"
        super().__init__(message)


class ConflictError(DataError):
    def __init__(self, message: str, line: int | None = None):
        self.line = line
        if line is not None:
            message = f"line {line}: {message}"
        super().__init__(message)


class EmptyStationError(DataError):
    pass


@dataclass(frozen=True)
class Station:
    id: str
    lon: float
    lat: float
    name: str | None = None

    def __post_init__(self):
        if not -180.0 <= self.lon <= 180.0:
            raise DataError(f"station {self.id!r}: longitude {self.lon} outside [-180, 180]")
        if not -90.0 <= self.lat <= 90.0:
            raise DataError(f"station {self.id!r}: latitude {self.lat} outside [-90, 90]")


def _frozen(a: np.ndarray) -> np.ndarray:
    a = np.array(a, copy=True)
    a.setflags(write=False)
    return a


@dataclass(frozen=True)
class SpaceTimeDataset:
    """
    Rectangular (time x station) matrix of daily values with a missing mask.

    ``days`` holds proleptic Gregorian ordinals (``date.toordinal()``) so the
    time axis is a plain strictly increasing integer index; ``years`` and
    ``doys`` are derived tags.  Masked cells hold NaN in ``values``.
    """

    stations: tuple[Station, ...]
    days: np.ndarray
    values: np.ndarray
    mask: np.ndarray
    years: np.ndarray = field(init=False, repr=False)
    doys: np.ndarray = field(init=False, repr=False)

    def __post_init__(self):
        stations = tuple(self.stations)
        days = np.asarray(self.days, dtype=np.int64)
        values = np.asarray(self.values, dtype=float)
        mask = np.asarray(self.mask, dtype=bool)
        if values.ndim != 2:
            raise DataError("values must be a 2-d (time x station) matrix")
        if values.shape != (days.size, len(stations)) or mask.shape != values.shape:
            raise DataError(
                f"shape mismatch: values {values.shape}, mask {mask.shape}, "
                f"{days.size} days, {len(stations)} stations"
            )
        ids = [s.id for s in stations]
        if len(set(ids)) != len(ids):
            raise DataError("station ids must be unique")
        if days.size > 1 and np.any(np.diff(days) <= 0):
            raise DataError("days must be strictly increasing")
        if np.any(np.isnan(values) & ~mask):
            raise DataError("NaN found outside the missing-value mask")
        values = np.where(mask, np.nan, values)
        dates = [dt.date.fromordinal(int(d)) for d in days]
        object.__setattr__(self, "stations", stations)
        object.__setattr__(self, "days", _frozen(days))
        object.__setattr__(self, "values", _frozen(values))
        object.__setattr__(self, "mask", _frozen(mask))
        object.__setattr__(self, "years", _frozen(np.array([d.year for d in dates], dtype=np.int64)))
        object.__setattr__(self, "doys", _frozen(np.array([d.timetuple().tm_yday for d in dates], dtype=np.int64)))

    @property
    def n_times(self) -> int:
        return int(self.days.size)

    @property
    def n_sites(self) -> int:
        return len(self.stations)

    @property
    def station_ids(self) -> list[str]:
        return [s.id for s in self.stations]

    @property
    def coords(self) -> np.ndarray:
        """(m, 2) array of (lon, lat)."""
        return np.array([[s.lon, s.lat] for s in self.stations], dtype=float)

    def masked_fraction(self) -> dict[str, float]:
        return {s.id: float(self.mask[:, j].mean()) for j, s in enumerate(self.stations)}

    def take_times(self, index) -> "SpaceTimeDataset":
        index = np.asarray(index)
        return SpaceTimeDataset(self.stations, self.days[index], self.values[index], self.mask[index])

    def with_values(self, values: np.ndarray) -> "SpaceTimeDataset":
        values = np.where(self.mask, np.nan, np.asarray(values, dtype=float))
        return SpaceTimeDataset(self.stations, self.days, values, self.mask)

    def dates(self) -> list[dt.date]:
        return [dt.date.fromordinal(int(d)) for d in self.days]


def days_from_year_doy(years: Iterable[int], doys: Iterable[int]) -> np.ndarray:
    return np.array(
        [dt.date(int(y), 1, 1).toordinal() + int(d) - 1 for y, d in zip(years, doys)], dtype=np.int64
    )


# ----------------------------------------------------------------------------
# CSV ingestion

def load_stations(path: str | Path) -> list[Station]:
    """Read a ``station,lon,lat[,name]`` CSV."""
    out = []
    with open(path, newline="") as fh:
        reader = csv.DictReader(fh)
        missing = {"station", "lon", "lat"} - set(reader.fieldnames or [])
        if missing:
            raise ParseError(f"stations file lacks columns {sorted(missing)}", line=1)
        for row in reader:
            try:
                out.append(Station(row["station"], float(row["lon"]), float(row["lat"]), row.get("name") or None))
            except ValueError as exc:
                if isinstance(exc, DataError):
                    raise
                raise ParseError(str(exc), line=reader.line_num) from None
    return out


def write_stations(stations: Sequence[Station], path: str | Path) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["station", "lon", "lat", "name"])
        for s in stations:
            w.writerow([s.id, repr(s.lon), repr(s.lat), s.name or ""])


def load_station_series(
    path: str | Path,
    stations: Sequence[Station] | str | Path,
    schema: Mapping[str, str] | None = None,
) -> SpaceTimeDataset:
    """
    Load a long-format ``station,date,value`` CSV into a dataset.

    The time axis is the sorted union of all dates in the file; any
    (station, date) pair absent from the file, or present with an empty
    value, becomes a masked cell.  Column order of the result follows
    ``stations``.

    Raises
    ------
    ParseError
        Malformed row (bad date, non-numeric or negative value), with its line.
    ConflictError
        A (station, date) pair appears twice.
    EmptyStationError
        A station has no unmasked value at all.
    """
    schema = {**DEFAULT_SCHEMA, **(schema or {})}
    if not isinstance(stations, (list, tuple)):
        stations = load_stations(stations)
    index = {s.id: j for j, s in enumerate(stations)}
    cells: dict[tuple[int, int], float] = {}
    seen: dict[tuple[int, int], int] = {}
    with open(path, newline="") as fh:
        reader = csv.DictReader(fh)
        cols = set(reader.fieldnames or [])
        missing = {schema[k] for k in ("station", "date", "value")} - cols
        if missing:
            raise ParseError(f"missing columns {sorted(missing)}", line=1)
        for row in reader:
            line = reader.line_num
            sid = row[schema["station"]]
            if sid is None or row[schema["value"]] is None:
                raise ParseError("truncated row", line=line)
            if sid not in index:
                raise ParseError(f"unknown station {sid!r}", line=line)
            try:
                day = dt.date.fromisoformat(row[schema["date"]].strip()).toordinal()
            except (ValueError, AttributeError):
                raise ParseError(f"bad date {row[schema['date']]!r}", line=line) from None
            raw = row[schema["value"]].strip()
            if raw == "":
                value = math.nan
            else:
                try:
                    value = float(raw)
                except ValueError:
                    raise ParseError(f"bad value {raw!r}", line=line) from None
                if not math.isfinite(value) or value < 0:
                    raise ParseError(f"value {raw!r} is not a finite non-negative number", line=line)
            key = (day, index[sid])
            if key in seen:
                raise ConflictError(
                    f"duplicate entry for station {sid!r} on {row[schema['date']]} (first seen on line {seen[key]})",
                    line=line,
                )
            seen[key] = line
            cells[key] = value
    if not cells:
        raise ParseError("no data rows")
    days = np.array(sorted({d for d, _ in cells}), dtype=np.int64)
    pos = {d: i for i, d in enumerate(days)}
    values = np.full((days.size, len(stations)), np.nan)
    for (d, j), v in cells.items():
        values[pos[d], j] = v
    mask = np.isnan(values)
    for j, s in enumerate(stations):
        if mask[:, j].all():
            raise EmptyStationError(f"station {s.id!r} has no usable values")
    ds = SpaceTimeDataset(tuple(stations), days, values, mask)
    for sid, frac in ds.masked_fraction().items():
        logger.info("station %s: %.2f%% masked", sid, 100 * frac)
    return ds


def write_station_series(ds: SpaceTimeDataset, path: str | Path) -> None:
    """Write every cell of ``ds``; masked cells get an empty value."""
    dates = [d.isoformat() for d in ds.dates()]
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["station", "date", "value"])
        for j, s in enumerate(ds.stations):
            col = ds.values[:, j]
            for i, d in enumerate(dates):
                w.writerow([s.id, d, "" if ds.mask[i, j] else repr(float(col[i]))])


# ----------------------------------------------------------------------------
# Risk functionals

RISK_KINDS = ("max", "min", "mean", "site")


@dataclass(frozen=True)
class RiskFunctional:
    """
    Homogeneous risk functional applied to a field over the station axis.

    ``site`` is the column index used when ``kind == "site"``.
    """

    kind: str = "max"
    site: int | None = None
    alpha: float = 1.0

    def __post_init__(self):
        if self.kind not in RISK_KINDS:
            raise ValueError(f"unknown risk functional {self.kind!r}")
        if self.kind == "site" and (self.site is None or self.site < 0):
            raise ValueError("site functional needs a non-negative site index")
        if self.alpha <= 0:
            raise ValueError("homogeneity order must be positive")

    def __call__(self, field, axis: int = -1):
        z = np.asarray(field, dtype=float)
        if self.kind == "site":
            return np.take(z, self.site, axis=axis)
        # all-NaN slices yield NaN; callers decide whether that is an error
        with warnings.catch_warnings():
            warnings.simplefilter("ignore", RuntimeWarning)
            if self.kind == "max":
                return np.nanmax(z, axis=axis)
            if self.kind == "min":
                return np.nanmin(z, axis=axis)
            return np.nanmean(z, axis=axis)

    def gradient(self, z: np.ndarray) -> np.ndarray:
        """Partial derivatives of ``self`` at each row of ``z`` (shape (n, d))."""
        z = np.atleast_2d(np.asarray(z, dtype=float))
        g = np.zeros_like(z)
        rows = np.arange(z.shape[0])
        if self.kind == "max":
            g[rows, np.argmax(z, axis=1)] = 1.0
        elif self.kind == "min":
            g[rows, np.argmin(z, axis=1)] = 1.0
        elif self.kind == "mean":
            g[:] = 1.0 / z.shape[1]
        else:
            g[:, self.site] = 1.0
        return g

    def to_dict(self) -> dict:
        return {"kind": self.kind, "site": self.site, "alpha": self.alpha}

    @classmethod
    def from_dict(cls, d: Mapping) -> "RiskFunctional":
        return cls(d["kind"], d.get("site"), d.get("alpha", 1.0))


def apply_risk_functional(field, ell: RiskFunctional, mask=None) -> float:
    """Evaluate ``ell`` on one length-m field, skipping masked entries."""
    z = np.asarray(field, dtype=float).copy()
    if z.ndim != 1 or z.size == 0:
        raise ValueError("field must be a non-empty vector")
    if mask is not None:
        z[np.asarray(mask, dtype=bool)] = np.nan
    if ell.kind == "site":
        if np.isnan(z[ell.site]):
            raise ValueError("risk functional undefined: reference site is masked")
    elif np.all(np.isnan(z)):
        raise ValueError("risk functional undefined: all entries masked")
    return float(ell(z))


# ----------------------------------------------------------------------------
# Geometry

EARTH_RADIUS_KM = 6371.0088


def project_km(lonlat: np.ndarray, center: tuple[float, float] | None = None) -> np.ndarray:
    """Equirectangular projection of (lon, lat) degrees to km about ``center``."""
    lonlat = np.atleast_2d(np.asarray(lonlat, dtype=float))
    if center is None:
        center = tuple(lonlat.mean(axis=0))
    k = math.pi / 180.0 * EARTH_RADIUS_KM
    x = (lonlat[:, 0] - center[0]) * k * math.cos(math.radians(center[1]))
    y = (lonlat[:, 1] - center[1]) * k
    return np.column_stack([x, y])


def distance_matrix(xy: np.ndarray) -> np.ndarray:
    xy = np.asarray(xy, dtype=float)
    return np.sqrt(((xy[:, None, :] - xy[None, :, :]) ** 2).sum(-1))


# ----------------------------------------------------------------------------
# Grids

@dataclass(frozen=True)
class GridDomain:
    points: np.ndarray
    resolution: float
    bbox: tuple[float, float, float, float]
    cluster_of: tuple[str, ...] | None = None

    def __post_init__(self):
        object.__setattr__(self, "points", _frozen(np.asarray(self.points, dtype=float).reshape(-1, 2)))

    def __len__(self):
        return self.points.shape[0]

    def with_clusters(self, labels: Sequence[str]) -> "GridDomain":
        if len(labels) != len(self):
            raise ValueError("one cluster label per grid point required")
        return GridDomain(self.points, self.resolution, self.bbox, tuple(labels))


def lattice_counts(bbox, resolution: float) -> tuple[int, int]:
    lon_min, lon_max, lat_min, lat_max = bbox
    # small slack so that e.g. 0.3 / 0.1 counts as 3 steps
    nx = int(math.floor((lon_max - lon_min) / resolution + 1e-9)) + 1
    ny = int(math.floor((lat_max - lat_min) / resolution + 1e-9)) + 1
    return nx, ny


def build_grid(bbox, resolution: float) -> GridDomain:
    """Regular lon/lat lattice anchored at the lower-left bbox corner."""
    if not resolution > 0:
        raise ValueError("resolution must be positive")
    lon_min, lon_max, lat_min, lat_max = map(float, bbox)
    if not (lon_max > lon_min and lat_max > lat_min):
        raise ValueError("bbox must satisfy lon_min < lon_max and lat_min < lat_max")
    nx, ny = lattice_counts((lon_min, lon_max, lat_min, lat_max), resolution)
    lons = lon_min + resolution * np.arange(nx)
    lats = lat_min + resolution * np.arange(ny)
    glon, glat = np.meshgrid(lons, lats, indexing="xy")
    pts = np.column_stack([glon.ravel(), glat.ravel()])
    return GridDomain(pts, float(resolution), (lon_min, lon_max, lat_min, lat_max))


def _json_value(v):
    if isinstance(v, (np.floating, float)):
        v = float(v)
        return v if math.isfinite(v) else None
    if isinstance(v, np.integer):
        return int(v)
    if isinstance(v, np.bool_):
        return bool(v)
    if isinstance(v, (list, tuple)):
        return [_json_value(x) for x in v]
    return v


def grid_to_geojson(grid: GridDomain, properties: Mapping[str, Sequence] | None = None) -> dict:
    """FeatureCollection of grid points; ``properties`` maps name -> per-point values."""
    properties = dict(properties or {})
    if grid.cluster_of is not None:
        properties.setdefault("cluster", grid.cluster_of)
    features = []
    for i, (lon, lat) in enumerate(grid.points):
        props = {k: _json_value(v[i]) for k, v in properties.items()}
        features.append(
            {
                "type": "Feature",
                "geometry": {"type": "Point", "coordinates": [float(lon), float(lat)]},
                "properties": props,
            }
        )
    return {"type": "FeatureCollection", "features": features}


def write_geojson(doc: dict, path: str | Path) -> None:
    Path(path).write_text(json.dumps(doc, sort_keys=True, separators=(",", ":")) + "\n")
