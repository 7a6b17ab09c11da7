"""
Space-time peaks-over-threshold modelling of extremes.

Non-stationary marginal tails with a shared shape, tail-trend (skedasis)
functions, a latent stationary Brown-Resnick l-Pareto dependence model,
simulation, return levels under trends and gridded maps.
"""

from .data import RiskFunctional, SpaceTimeDataset, Station, load_station_series, load_stations
from .dependence import DependenceModel, fit_dependence, model_extremogram, power_semivariogram
from .marginal import GpdTail, MarginalModel, fit_marginal
from .returns import ReturnSpec, return_level_ene, return_level_ewt
from .simulate import SimulationConfig, simulate_l_pareto
from .trend import TrendModel, fit_trend, latent_transform

__version__ = "0.1.0"

__all__ = [
    "DependenceModel",
    "GpdTail",
    "MarginalModel",
    "ReturnSpec",
    "RiskFunctional",
    "SimulationConfig",
    "SpaceTimeDataset",
    "Station",
    "TrendModel",
    "fit_dependence",
    "fit_marginal",
    "fit_trend",
    "latent_transform",
    "load_station_series",
    "load_stations",
    "model_extremogram",
    "power_semivariogram",
    "return_level_ene",
    "return_level_ewt",
    "simulate_l_pareto",
]
