"""
Pipeline stages behind the command-line interface.

Every stage reads its inputs from the run configuration and writes only
inside the configured output directory.
"""

from __future__ import annotations

import csv
import hashlib
import json
import logging
import math
import warnings
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .config import ConfigError, RunConfig
from .data import (GridDomain, SpaceTimeDataset, build_grid, grid_to_geojson, load_station_series,
                   load_stations, project_km, write_geojson)
from .dependence import (DependenceModel, empirical_extremogram, fit_dependence, model_extremogram,
                         pareto_margins, select_exceedances, variogram_from_matrix)
from .marginal import GpdTail, MarginalModel, exceedance_probability, fit_marginal
from .preprocess import runs_peaks, seasonal_subset
from .returns import (ReturnLevelError, ReturnSpec, latent_return_level, nonstationary_from_latent, return_level,
                      site_trend)
from .simulate import SimulationConfig, block_rng, simulate_l_pareto
from .spatial import (fit_cluster_models, fit_spatial_margin_model, kmeans_regions, predict_at_grid,
                      return_level_map, smooth_map, write_map_csv)
from .trend import ExtrapolationWarning, TrendModel, fit_trend, latent_transform

logger = logging.getLogger(__name__)

SCHEMA_VERSION = 1


class BundleError(ValueError):
    pass


# ----------------------------------------------------------------------------
# Output helpers

def _inside(cfg: RunConfig, path: Path) -> Path:
    out = cfg.output_dir.resolve()
    p = (path if path.is_absolute() else out / path).resolve()
    if p != out and out not in p.parents:
        raise ConfigError(f"refusing to write outside the output directory: {p}")
    p.parent.mkdir(parents=True, exist_ok=True)
    return p


def _fmt(v) -> str:
    if isinstance(v, (float, np.floating)):
        v = float(v)
        return repr(v) if math.isfinite(v) else ""
    return str(v)


def write_csv(path: Path, header, rows) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(header)
        for row in rows:
            w.writerow([_fmt(v) for v in row])


def _json_safe(obj):
    if isinstance(obj, dict):
        return {str(k): _json_safe(v) for k, v in obj.items()}
    if isinstance(obj, (list, tuple)):
        return [_json_safe(v) for v in obj]
    if isinstance(obj, np.ndarray):
        return _json_safe(obj.tolist())
    if isinstance(obj, (np.floating, float)):
        f = float(obj)
        return f if math.isfinite(f) else None
    if isinstance(obj, (np.integer,)):
        return int(obj)
    if isinstance(obj, np.bool_):
        return bool(obj)
    return obj


def dumps_json(doc) -> str:
    return json.dumps(_json_safe(doc), sort_keys=True, indent=1) + "\n"


def sha256_file(path: Path) -> str:
    return hashlib.sha256(Path(path).read_bytes()).hexdigest()


# ----------------------------------------------------------------------------
# Data and bundle

def load_dataset(cfg: RunConfig) -> SpaceTimeDataset:
    stations = load_stations(cfg.resolve(cfg.paths.stations))
    ds = load_station_series(cfg.resolve(cfg.paths.series), stations)
    return seasonal_subset(ds, cfg.season.start_doy, cfg.season.end_doy)


@dataclass(frozen=True)
class Bundle:
    marg: MarginalModel
    trend: TrendModel
    dep: DependenceModel
    station_ids: tuple
    coords: np.ndarray
    phi_u: np.ndarray
    diagnostics: dict

    def to_dict(self) -> dict:
        return {
            "schema_version": SCHEMA_VERSION,
            "stations": [{"id": s, "lon": float(c[0]), "lat": float(c[1])}
                         for s, c in zip(self.station_ids, self.coords)],
            "marginal": self.marg.to_dict(),
            "trend": self.trend.to_dict(),
            "dependence": self.dep.to_dict(),
            "phi_u": np.asarray(self.phi_u).tolist(),
            "diagnostics": self.diagnostics,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "Bundle":
        version = d.get("schema_version")
        if version != SCHEMA_VERSION:
            raise BundleError(f"unsupported bundle schema_version {version!r} (expected {SCHEMA_VERSION})")
        st = d["stations"]
        return cls(
            MarginalModel.from_dict(d["marginal"]),
            TrendModel.from_dict(d["trend"]),
            DependenceModel.from_dict(d["dependence"]),
            tuple(s["id"] for s in st),
            np.array([[s["lon"], s["lat"]] for s in st], dtype=float),
            np.asarray(d["phi_u"], dtype=float),
            d.get("diagnostics", {}),
        )


def bundle_path(cfg: RunConfig) -> Path:
    return cfg.output_dir / "bundle.json"


def load_bundle(path: Path) -> Bundle:
    try:
        doc = json.loads(Path(path).read_text())
    except FileNotFoundError:
        raise BundleError(f"model bundle not found: {path} (run `fit` first)") from None
    except json.JSONDecodeError as exc:
        raise BundleError(f"model bundle is not valid JSON: {exc}") from None
    return Bundle.from_dict(doc)


def trend_thresholds(ds: SpaceTimeDataset, q: float) -> np.ndarray:
    return np.array([np.quantile(ds.values[~ds.mask[:, j], j], q) for j in range(ds.n_sites)])


def fit_models(cfg: RunConfig, ds: SpaceTimeDataset) -> tuple[Bundle, SpaceTimeDataset]:
    """Marginal, trend and dependence fits; returns the bundle and the latent sample."""
    ell = cfg.risk()
    marg = fit_marginal(ds, ell, cfg.marginal.q_ell, cfg.marginal.run_length)
    trend = fit_trend(ds, trend_thresholds(ds, cfg.trend.quantile), cfg.trend.family, cfg.trend.run_length)
    latent = latent_transform(ds, trend, marg)
    std = pareto_margins(latent, marg, cfg.dependence.tail_quantile)
    fields = select_exceedances(std.values, ell, u_quantile=cfg.dependence.u_quantile)
    xy = project_km(ds.coords)
    with warnings.catch_warnings(record=True) as caught:
        warnings.simplefilter("always")
        dep = fit_dependence(fields, xy, (cfg.dependence.init_tau, cfg.dependence.init_kappa))
    for w in caught:
        logger.warning("%s", w.message)
    phi = exceedance_probability(latent, marg.b_n)
    diag = {
        "n_times": ds.n_times,
        "n_sites": ds.n_sites,
        "masked_fraction": ds.masked_fraction(),
        "n_dependence_fields": len(fields),
        "trend_thresholds": trend_thresholds(ds, cfg.trend.quantile).tolist(),
        "identifiability_residuals": list(marg.identifiability_residuals()),
    }
    bundle = Bundle(marg, trend, dep, tuple(ds.station_ids), ds.coords, phi, diag)
    return bundle, latent


# ----------------------------------------------------------------------------
# Stages

def stage_fit(cfg: RunConfig) -> list[Path]:
    ds = load_dataset(cfg)
    bundle, _ = fit_models(cfg, ds)
    path = _inside(cfg, bundle_path(cfg))
    path.write_text(dumps_json(bundle.to_dict()))
    logger.info("wrote %s", path)
    return [path]


def qq_rows(ds_latent: SpaceTimeDataset, bundle: Bundle, cfg: RunConfig) -> list[tuple]:
    """QQ pairs with a parametric-bootstrap 95% envelope per site."""
    marg = bundle.marg
    r = np.asarray(marg.risk(ds_latent.values, axis=1), dtype=float)
    with np.errstate(invalid="ignore"):
        days = np.isfinite(r) & (r >= marg.b_tilde)
    rows = []
    for j, sid in enumerate(bundle.station_ids):
        col = ds_latent.values[:, j]
        vals = col[days & np.isfinite(col)]
        if vals.size == 0:
            warnings.warn(f"site {sid}: no value on risk-exceedance days; skipped", RuntimeWarning, stacklevel=2)
            continue
        u = float(np.quantile(vals, cfg.diagnose.qq_quantile))
        peaks = col[runs_peaks(col, u, cfg.marginal.run_length)] - u
        if peaks.size == 0:
            warnings.warn(f"site {sid}: no peak above the QQ threshold; skipped", RuntimeWarning, stacklevel=2)
            continue
        try:
            tail = GpdTail.from_marginal(marg.a_n[j], marg.b_n[j], marg.gamma, u)
        except ValueError:
            warnings.warn(f"site {sid}: non-positive tail scale at the QQ threshold; skipped",
                          RuntimeWarning, stacklevel=2)
            continue
        k = peaks.size
        probs = np.arange(1, k + 1) / (k + 1)
        model = tail.quantile(probs)
        rng = block_rng(cfg.seed, 7, j)
        boot = np.sort(tail.quantile(rng.random((cfg.diagnose.n_boot, k))), axis=1)
        lo, hi = np.quantile(boot, [0.025, 0.975], axis=0)
        emp = np.sort(peaks)
        for i in range(k):
            rows.append((sid, i + 1, u + emp[i], u + model[i], u + lo[i], u + hi[i]))
    return rows


def stage_diagnose(cfg: RunConfig, bundle: Bundle | None = None) -> list[Path]:
    bundle = bundle or load_bundle(bundle_path(cfg))
    ds = load_dataset(cfg)
    latent = latent_transform(ds, bundle.trend, bundle.marg)
    out = []
    qq = _inside(cfg, Path("qq.csv"))
    write_csv(qq, ["station", "rank", "empirical", "model", "lower", "upper"], qq_rows(latent, bundle, cfg))
    out.append(qq)

    g = cfg.diagnose
    edges = np.arange(0.0, g.max_distance + g.bin_width / 2, g.bin_width)
    centers = 0.5 * (edges[:-1] + edges[1:])
    ell = bundle.marg.risk
    ext = empirical_extremogram(latent, g.extremogram_q, edges, ell, bundle.marg.b_tilde)
    path = _inside(cfg, Path("extremogram.csv"))
    write_csv(path, ["distance", "empirical", "model", "n_conditioning"],
              zip(centers, ext.values, model_extremogram(centers, bundle.dep), ext.counts))
    out.append(path)

    std = pareto_margins(latent, bundle.marg, cfg.dependence.tail_quantile)
    vario = variogram_from_matrix(std.values, project_km(ds.coords), edges, ell, bundle.dep.u_fit)
    path = _inside(cfg, Path("variogram.csv"))
    write_csv(path, ["distance", "empirical", "model", "n_pairs"],
              zip(centers, vario.values, bundle.dep.semivariogram(centers), vario.counts))
    out.append(path)
    return out


def stage_simulate(cfg: RunConfig, out: Path | str = "simulated.csv", bundle: Bundle | None = None) -> list[Path]:
    bundle = bundle or load_bundle(bundle_path(cfg))
    sim = SimulationConfig.from_lonlat(bundle.coords, bundle.dep, cfg.simulate.n_fields, cfg.seed,
                                       risk=bundle.dep.risk, u=cfg.simulate.u)
    sample = simulate_l_pareto(sim)
    path = _inside(cfg, Path(out))
    write_csv(path, ["field", *bundle.station_ids, "radius"],
              ([i + 1, *row, r] for i, (row, r) in enumerate(zip(sample.fields, sample.radius))))
    meta = _inside(cfg, path.with_suffix(".json"))
    meta.write_text(dumps_json({"acceptance_rate": sample.acceptance_rate, "n_proposed": sample.n_proposed,
                                "n_fields": cfg.simulate.n_fields, "u": cfg.simulate.u, "seed": cfg.seed}))
    return [path, meta]


def site_return_rows(cfg: RunConfig, bundle: Bundle, periods, method: str, sites=None) -> list[tuple]:
    marg, trend = bundle.marg, bundle.trend
    ids = list(bundle.station_ids)
    chosen = range(len(ids)) if sites is None else [ids.index(s) for s in sites]
    rows = []
    for j in chosen:
        tail = marg.tail(j)
        for m in periods:
            spec = ReturnSpec(float(m), cfg.returns.n_x, method=method, site=j)
            with warnings.catch_warnings():
                warnings.simplefilter("ignore", ExtrapolationWarning)
                z_m = latent_return_level(spec, tail, float(bundle.phi_u[j]))
                x_latent = float(nonstationary_from_latent(z_m, trend, marg, spec))
                try:
                    res = return_level(spec, tail, float(bundle.phi_u[j]), site_trend(trend, j), trend.n)
                    x_m, notes = res.x_m, list(res.warnings)
                except ReturnLevelError as exc:
                    # one site without a finite level should not hide the others
                    logger.warning("site %s, m = %s: %s", ids[j], m, exc)
                    x_m, notes = float("nan"), [f"{method} level unavailable: {exc}"]
            rows.append((ids[j], m, method, x_m, z_m, x_latent, ";".join(notes)))
    return rows


def stage_returns(cfg: RunConfig, periods=None, method: str | None = None, sites=None,
                  bundle: Bundle | None = None) -> list[Path]:
    bundle = bundle or load_bundle(bundle_path(cfg))
    periods = periods or cfg.returns.periods
    method = method or cfg.returns.method
    unknown = [s for s in (sites or []) if s not in bundle.station_ids]
    if unknown:
        raise ConfigError(f"unknown station id(s): {', '.join(unknown)}")
    rows = site_return_rows(cfg, bundle, periods, method, sites)
    path = _inside(cfg, Path("returns.csv"))
    write_csv(path, ["site", "m", "method", "x_m", "z_m", "x_m_latent", "warnings"], rows)
    return [path]


def stage_map(cfg: RunConfig, periods=None, method: str | None = None, bundle: Bundle | None = None) -> list[Path]:
    bundle = bundle or load_bundle(bundle_path(cfg))
    periods = periods or cfg.returns.periods
    method = method or cfg.returns.method
    grid = build_grid(cfg.grid.bbox, cfg.grid.resolution)
    ids = list(bundle.station_ids)
    clusters = kmeans_regions(grid, bundle.coords, ids)
    grid = GridDomain(grid.points, grid.resolution, grid.bbox, clusters.labels)
    marg, trend = bundle.marg, bundle.trend
    model = fit_spatial_margin_model(marg.a_n, marg.b_n, trend.theta_site, marg.gamma, bundle.coords, ids)
    local = None
    if cfg.grid.d0:
        local = fit_cluster_models(marg.a_n, marg.b_n, trend.theta_site, marg.gamma, bundle.coords, ids,
                                   cfg.grid.d0)
    params = predict_at_grid(model, grid, clusters, local)
    phi = bundle.phi_u[clusters.index]
    specs = [ReturnSpec(float(m), cfg.returns.n_x, method=method) for m in periods]
    rmap = return_level_map(params, phi, specs, trend, marg, bundle.dep)
    props = rmap.properties()
    if cfg.grid.smoothing:
        for m in periods:
            key = f"x_m_{int(m) if float(m).is_integer() else m}"
            props[f"{key}_smoothed"] = smooth_map(props[key], grid.points, bundle.dep, cfg.seed, cfg.grid.n_smooth)
    gj = _inside(cfg, Path("map.geojson"))
    write_geojson(grid_to_geojson(grid, props), gj)
    cs = _inside(cfg, Path("map.csv"))
    write_map_csv(rmap, cs)
    coef = _inside(cfg, Path("spatial_model.json"))
    coef.write_text(dumps_json({"global": model.to_dict(),
                                "local": {k: v.to_dict() for k, v in (local or {}).items()},
                                "n_invalid": params.n_invalid, "kmeans_iterations": clusters.n_iter,
                                "voronoi_fallback": clusters.voronoi_fallback}))
    return [gj, cs, coef]


def stage_pipeline(cfg: RunConfig) -> Path:
    """fit, diagnose, simulate, returns and map, then a manifest with sha256 hashes."""
    produced = []
    stages = [
        ("fit", lambda: stage_fit(cfg)),
        ("diagnose", lambda: stage_diagnose(cfg)),
        ("simulate", lambda: stage_simulate(cfg)),
        ("returns", lambda: stage_returns(cfg)),
        ("map", lambda: stage_map(cfg)),
    ]
    for name, run in stages:
        try:
            produced += run()
        except Exception as exc:
            exc.stage = name
            raise
    out = cfg.output_dir.resolve()
    manifest = {
        "schema_version": SCHEMA_VERSION,
        "seed": cfg.seed,
        "files": {str(p.resolve().relative_to(out)): sha256_file(p) for p in produced},
    }
    path = _inside(cfg, Path("manifest.json"))
    path.write_text(dumps_json(manifest))
    return path
