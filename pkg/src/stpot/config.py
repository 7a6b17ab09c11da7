"""
Run configuration: one TOML document shared by every subcommand.

Relative paths are resolved against the directory of the config file.
"""

from __future__ import annotations

import dataclasses
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any

import tomli
import tomli_w

from .data import RISK_KINDS, RiskFunctional
from .trend import FAMILIES


class ConfigError(ValueError):
    pass


@dataclass
class PathsConfig:
    series: str
    stations: str
    output: str


@dataclass
class SeasonConfig:
    start_doy: int = 121
    end_doy: int = 304


@dataclass
class MarginalConfig:
    risk: str = "mean"
    risk_site: int = -1
    q_ell: float = 0.95
    run_length: int = 1


@dataclass
class TrendConfig:
    family: str = "log_linear"
    quantile: float = 0.9
    run_length: int = 1


@dataclass
class DependenceConfig:
    init_tau: float = 150.0
    init_kappa: float = 0.8
    u_quantile: float = 0.95
    tail_quantile: float = 0.95


@dataclass
class DiagnoseConfig:
    qq_quantile: float = 0.865
    extremogram_q: float = 0.95
    bin_width: float = 25.0
    max_distance: float = 600.0
    n_boot: int = 200


@dataclass
class SimulateConfig:
    n_fields: int = 1000
    u: float = 1.0


@dataclass
class ReturnsConfig:
    periods: list = field(default_factory=lambda: [50, 100])
    method: str = "ene"
    n_x: int = 184


@dataclass
class GridConfig:
    bbox: list = field(default_factory=lambda: [-5.6, 2.5, 9.3, 15.1])
    resolution: float = 0.25
    d0: int = 0
    smoothing: bool = False
    n_smooth: int = 2000


@dataclass
class RunConfig:
    seed: int
    paths: PathsConfig
    threads: int = 1
    season: SeasonConfig = field(default_factory=SeasonConfig)
    marginal: MarginalConfig = field(default_factory=MarginalConfig)
    trend: TrendConfig = field(default_factory=TrendConfig)
    dependence: DependenceConfig = field(default_factory=DependenceConfig)
    diagnose: DiagnoseConfig = field(default_factory=DiagnoseConfig)
    simulate: SimulateConfig = field(default_factory=SimulateConfig)
    returns: ReturnsConfig = field(default_factory=ReturnsConfig)
    grid: GridConfig = field(default_factory=GridConfig)
    base_dir: Path = field(default=Path("."), compare=False, repr=False)

    # ------------------------------------------------------------------
    def resolve(self, p: str) -> Path:
        path = Path(p)
        return path if path.is_absolute() else (self.base_dir / path)

    @property
    def output_dir(self) -> Path:
        return self.resolve(self.paths.output).resolve()

    def risk(self) -> RiskFunctional:
        site = self.marginal.risk_site if self.marginal.risk == "site" else None
        return RiskFunctional(self.marginal.risk, site)

    def to_dict(self) -> dict:
        d = dataclasses.asdict(self)
        d.pop("base_dir")
        return d


SECTIONS = {
    "paths": PathsConfig,
    "season": SeasonConfig,
    "marginal": MarginalConfig,
    "trend": TrendConfig,
    "dependence": DependenceConfig,
    "diagnose": DiagnoseConfig,
    "simulate": SimulateConfig,
    "returns": ReturnsConfig,
    "grid": GridConfig,
}


def _coerce(name: str, value: Any, default: Any, kind) -> Any:
    if kind in (float, "float") or isinstance(default, float):
        if isinstance(value, bool) or not isinstance(value, (int, float)):
            raise ConfigError(f"{name} must be a number")
        return float(value)
    if kind in (bool, "bool") or isinstance(default, bool):
        if not isinstance(value, bool):
            raise ConfigError(f"{name} must be true or false")
        return value
    if kind in (int, "int") or isinstance(default, int):
        if isinstance(value, bool) or not isinstance(value, int):
            raise ConfigError(f"{name} must be an integer")
        return value
    if kind in (str, "str"):
        if not isinstance(value, str):
            raise ConfigError(f"{name} must be a string")
        return value
    if kind in (list, "list"):
        if not isinstance(value, list):
            raise ConfigError(f"{name} must be a list")
        return list(value)
    return value


def _section(name: str, cls, raw: Any):
    if not isinstance(raw, dict):
        raise ConfigError(f"[{name}] must be a table")
    known = {f.name: f for f in dataclasses.fields(cls)}
    unknown = set(raw) - set(known)
    if unknown:
        raise ConfigError(f"unknown key(s) in [{name}]: {', '.join(sorted(unknown))}")
    kwargs = {}
    for fname, f in known.items():
        if fname in raw:
            if f.default is not dataclasses.MISSING:
                default = f.default
            elif f.default_factory is not dataclasses.MISSING:
                default = f.default_factory()
            else:
                default = None
            kind = f.type if f.type in ("str", "list", "int", "float", "bool") else type(default)
            kwargs[fname] = _coerce(f"{name}.{fname}", raw[fname], default, kind)
        elif f.default is dataclasses.MISSING and f.default_factory is dataclasses.MISSING:
            raise ConfigError(f"missing required key {name}.{fname}")
    return cls(**kwargs)


def config_from_dict(raw: dict, base_dir: Path | str = ".") -> RunConfig:
    if "seed" not in raw:
        raise ConfigError("missing required key seed")
    if "paths" not in raw:
        raise ConfigError("missing required key paths (table with series, stations, output)")
    unknown = set(raw) - set(SECTIONS) - {"seed", "threads"}
    if unknown:
        raise ConfigError(f"unknown top-level key(s): {', '.join(sorted(unknown))}")
    seed = raw["seed"]
    if isinstance(seed, bool) or not isinstance(seed, int) or not 0 <= seed < 2**64:
        raise ConfigError("seed must be an integer in [0, 2^64)")
    threads = raw.get("threads", 1)
    if isinstance(threads, bool) or not isinstance(threads, int) or threads < 1:
        raise ConfigError("threads must be a positive integer")
    sections = {name: _section(name, cls, raw.get(name, {})) for name, cls in SECTIONS.items()}
    cfg = RunConfig(seed=seed, threads=threads, base_dir=Path(base_dir), **sections)
    validate(cfg)
    return cfg


def _prob(name: str, v: float) -> None:
    if not 0 < v < 1:
        raise ConfigError(f"{name} must lie in (0, 1), got {v}")


def validate(cfg: RunConfig) -> None:
    """Domain checks run before any computation."""
    s = cfg.season
    if not 1 <= s.start_doy <= s.end_doy <= 366:
        raise ConfigError("season must satisfy 1 <= start_doy <= end_doy <= 366")
    m = cfg.marginal
    if m.risk not in RISK_KINDS:
        raise ConfigError(f"marginal.risk must be one of {', '.join(RISK_KINDS)}")
    if m.risk == "site" and m.risk_site < 0:
        raise ConfigError("marginal.risk_site must be set (>= 0) for the site functional")
    _prob("marginal.q_ell", m.q_ell)
    if m.run_length < 0 or cfg.trend.run_length < 0:
        raise ConfigError("run lengths must be >= 0")
    if cfg.trend.family.replace("-", "_") not in FAMILIES:
        raise ConfigError(f"trend.family must be one of {', '.join(FAMILIES)}")
    _prob("trend.quantile", cfg.trend.quantile)
    d = cfg.dependence
    if not d.init_tau > 0 or not 0 < d.init_kappa <= 2:
        raise ConfigError("dependence init must satisfy tau > 0 and 0 < kappa <= 2")
    _prob("dependence.u_quantile", d.u_quantile)
    _prob("dependence.tail_quantile", d.tail_quantile)
    g = cfg.diagnose
    _prob("diagnose.qq_quantile", g.qq_quantile)
    _prob("diagnose.extremogram_q", g.extremogram_q)
    if not (g.bin_width > 0 and g.max_distance > g.bin_width):
        raise ConfigError("diagnose bins need bin_width > 0 and max_distance > bin_width")
    if g.n_boot < 10:
        raise ConfigError("diagnose.n_boot must be >= 10")
    if cfg.simulate.n_fields < 1 or not cfg.simulate.u > 0:
        raise ConfigError("simulate needs n_fields >= 1 and u > 0")
    r = cfg.returns
    if not r.periods or any(isinstance(p, bool) or not isinstance(p, (int, float)) or p < 1 for p in r.periods):
        raise ConfigError("returns.periods must be a non-empty list of numbers >= 1")
    if r.method not in ("ene", "ewt"):
        raise ConfigError("returns.method must be ene or ewt")
    if r.n_x < 1:
        raise ConfigError("returns.n_x must be >= 1")
    gr = cfg.grid
    if len(gr.bbox) != 4 or not (gr.bbox[0] < gr.bbox[1] and gr.bbox[2] < gr.bbox[3]):
        raise ConfigError("grid.bbox must be [lon_min, lon_max, lat_min, lat_max]")
    if not gr.resolution > 0:
        raise ConfigError("grid.resolution must be positive")
    if gr.d0 != 0 and gr.d0 < 4:
        raise ConfigError("grid.d0 must be 0 (all stations) or >= 4")


def load_config(path: str | Path, check_files: bool = True) -> RunConfig:
    path = Path(path)
    try:
        raw = tomli.loads(path.read_text())
    except FileNotFoundError:
        raise ConfigError(f"config file not found: {path}") from None
    except tomli.TOMLDecodeError as exc:
        raise ConfigError(f"invalid TOML in {path}: {exc}") from None
    cfg = config_from_dict(raw, path.parent.resolve())
    if check_files:
        for key in ("series", "stations"):
            p = cfg.resolve(getattr(cfg.paths, key))
            if not p.is_file():
                raise ConfigError(f"paths.{key} does not exist: {p}")
    return cfg


def dumps_config(cfg: RunConfig) -> str:
    return tomli_w.dumps(cfg.to_dict())


def write_config(cfg: RunConfig, path: str | Path) -> None:
    Path(path).write_text(dumps_config(cfg))
