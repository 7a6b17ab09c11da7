from __future__ import annotations

import datetime as dt

import numpy as np
import pytest

from stpot.data import SpaceTimeDataset, Station


def make_dataset(values, start=dt.date(2001, 5, 1), ids=None, mask=None) -> SpaceTimeDataset:
    """Dataset on consecutive days from ``start`` with stations on a diagonal."""
    values = np.asarray(values, dtype=float)
    n, m = values.shape
    ids = ids or [f"S{j}" for j in range(m)]
    stations = tuple(Station(ids[j], -1.0 + 0.5 * j, 12.0 + 0.3 * j) for j in range(m))
    days = start.toordinal() + np.arange(n)
    if mask is None:
        mask = np.isnan(values)
    return SpaceTimeDataset(stations, days, values, mask)


@pytest.fixture
def rng() -> np.random.Generator:
    return np.random.default_rng(20240607)


FIXTURE_SEED = 11

# settings under which the synthetic fixture is in its exact proportional-tail regime
FIXTURE_CONFIG = {
    "seed": FIXTURE_SEED,
    "paths": {"series": "series.csv", "stations": "stations.csv", "output": "out"},
    "marginal": {"risk": "mean", "q_ell": 0.9, "run_length": 0},
    "trend": {"family": "log_linear", "quantile": 0.85, "run_length": 0},
    "dependence": {"init_tau": 150.0, "init_kappa": 0.8, "u_quantile": 0.95, "tail_quantile": 0.95},
    "grid": {"resolution": 0.5},
    "simulate": {"n_fields": 200},
    "diagnose": {"n_boot": 20},
}


@pytest.fixture(scope="session")
def fixture_truth():
    from stpot.simulate import default_truth

    return default_truth()


@pytest.fixture(scope="session")
def fixture_dataset(fixture_truth):
    from stpot.simulate import synthetic_dataset

    return synthetic_dataset(fixture_truth, FIXTURE_SEED)


@pytest.fixture(scope="session")
def fixture_fit(fixture_dataset):
    """(bundle, latent dataset, config) for the synthetic fixture."""
    from stpot.config import config_from_dict
    from stpot.pipeline import fit_models

    cfg = config_from_dict(FIXTURE_CONFIG)
    bundle, latent = fit_models(cfg, fixture_dataset)
    return bundle, latent, cfg


@pytest.fixture
def fixture_run_dir(tmp_path, fixture_dataset):
    """Directory holding the fixture CSVs and a run.toml pointing at them."""
    from stpot.config import config_from_dict, write_config
    from stpot.data import write_station_series, write_stations

    write_stations(list(fixture_dataset.stations), tmp_path / "stations.csv")
    write_station_series(fixture_dataset, tmp_path / "series.csv")
    write_config(config_from_dict(FIXTURE_CONFIG), tmp_path / "run.toml")
    return tmp_path
