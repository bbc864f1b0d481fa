from __future__ import annotations

import numpy as np
import pytest
from hypothesis import HealthCheck, settings

from hvac_nmpc.config import PlantConfig
from hvac_nmpc.dataio import LagSpec, Normalizer
from hvac_nmpc.surrogate import LinearModel
from hvac_nmpc.trajectory import Trajectory

np.seterr(all="warn")

settings.register_profile("default", max_examples=50, deadline=None, suppress_health_check=[HealthCheck.too_slow])
settings.register_profile("fast", max_examples=5, deadline=None)
settings.load_profile("default")


@pytest.fixture
def single_config() -> PlantConfig:
    return PlantConfig.single_zone()


@pytest.fixture
def five_config() -> PlantConfig:
    return PlantConfig.five_zone()


@pytest.fixture
def rng() -> np.random.Generator:
    return np.random.default_rng(1234)


def make_trajectory(steps: int, n_x: int = 2, n_u: int = 1, n_d: int = 1, *, seed: int = 0, traj_id: int = 0) -> Trajectory:
    r = np.random.default_rng(seed)
    return Trajectory(
        x=r.normal(size=(steps, n_x)),
        u=r.uniform(size=(steps, n_u)),
        d=r.normal(size=(steps, n_d)),
        t=np.arange(steps) * 900.0,
        traj_id=traj_id,
    )


def linear_model(lags: LagSpec, n_x: int, n_u: int, n_d: int, **params: np.ndarray) -> LinearModel:
    """Identity-normalized linear model; unspecified matrices are zero."""
    shapes = LinearModel(
        lags=lags,
        normalizer=Normalizer.identity(n_x, n_u, n_d),
        n_x=n_x,
        n_u=n_u,
        n_d=n_d,
        params=LinearModel.init_params(lags, n_x, n_u, n_d, np.random.default_rng(0)),
    ).param_shapes()
    full = {name: np.zeros(shape) for name, shape in shapes.items()}
    full.update(params)
    return LinearModel(
        lags=lags, normalizer=Normalizer.identity(n_x, n_u, n_d), n_x=n_x, n_u=n_u, n_d=n_d, params=full
    )
