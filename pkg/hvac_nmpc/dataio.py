from __future__ import annotations

import logging
import math
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path
from typing import Literal

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view
from pydantic import BaseModel, model_validator

from hvac_nmpc.config import PlantConfig
from hvac_nmpc.errors import ConfigError, ContractError, InvalidArgumentError, ShapeError
from hvac_nmpc.plant import initial_state, plant_weather, simulate_episode, uniform_random_policy
from hvac_nmpc.trajectory import Trajectory

logger = logging.getLogger(__name__)

Group = Literal["x", "u", "d"]

# Initial zone temperatures for excitation runs are drawn from this range.
EXCITE_TEMPERATURE_RANGE = (18.0, 26.0)


@dataclass(frozen=True)
class LagSpec:
    """Lag orders; M means M+1 entries (t-M .. t) in the input window."""
    m_x: int
    m_u: int
    m_d: int

    def __post_init__(self) -> None:
        if min(self.m_x, self.m_u, self.m_d) < 0:
            raise InvalidArgumentError(f"LagSpec orders must be >= 0, got {self.as_tuple()}")

    @property
    def max_lag(self) -> int:
        return max(self.m_x, self.m_u, self.m_d)

    def as_tuple(self) -> tuple[int, int, int]:
        return (self.m_x, self.m_u, self.m_d)

    def width(self, n_x: int, n_u: int, n_d: int) -> int:
        return (self.m_x + 1) * n_x + (self.m_u + 1) * n_u + (self.m_d + 1) * n_d

    @classmethod
    def parse(cls, text: str) -> "LagSpec":
        parts = [p.strip() for p in text.split(",")]
        if len(parts) != 3:
            raise InvalidArgumentError(f"Lags must be 'M_x,M_u,M_d', got '{text}'")
        try:
            orders = [int(p) for p in parts]
        except ValueError as e:
            raise InvalidArgumentError(f"Lags must be integers, got '{text}'") from e
        return cls(*orders)

    def __str__(self) -> str:
        return f"{self.m_x},{self.m_u},{self.m_d}"


@dataclass(frozen=True)
class Normalizer:
    """
    Per-channel z-score for x, u and d. Channels with zero variance keep std = 1 and are flagged.
    """
    x_mean: np.ndarray
    x_std: np.ndarray
    u_mean: np.ndarray
    u_std: np.ndarray
    d_mean: np.ndarray
    d_std: np.ndarray
    x_flat: np.ndarray = field(default_factory=lambda: np.zeros(0, dtype=bool))
    u_flat: np.ndarray = field(default_factory=lambda: np.zeros(0, dtype=bool))
    d_flat: np.ndarray = field(default_factory=lambda: np.zeros(0, dtype=bool))

    def _pair(self, group: Group) -> tuple[np.ndarray, np.ndarray]:
        if group not in ("x", "u", "d"):
            raise InvalidArgumentError(f"Normalizer group must be x, u or d, got {group!r}")
        return getattr(self, f"{group}_mean"), getattr(self, f"{group}_std")

    def apply(self, group: Group, values: np.ndarray) -> np.ndarray:
        mean, std = self._pair(group)
        values = np.asarray(values, dtype=np.float64)
        if values.shape[-1] != mean.shape[0]:
            raise ShapeError(f"Normalizer.apply[{group}]", values.shape, mean.shape)
        return (values - mean) / std

    def invert(self, group: Group, values: np.ndarray) -> np.ndarray:
        mean, std = self._pair(group)
        values = np.asarray(values, dtype=np.float64)
        if values.shape[-1] != mean.shape[0]:
            raise ShapeError(f"Normalizer.invert[{group}]", values.shape, mean.shape)
        return values * std + mean

    def window_stats(self, lags: LagSpec) -> tuple[np.ndarray, np.ndarray]:
        """Mean and std vectors matching a flattened x|u|d input window."""
        mean = np.concatenate(
            [np.tile(self.x_mean, lags.m_x + 1), np.tile(self.u_mean, lags.m_u + 1), np.tile(self.d_mean, lags.m_d + 1)]
        )
        std = np.concatenate(
            [np.tile(self.x_std, lags.m_x + 1), np.tile(self.u_std, lags.m_u + 1), np.tile(self.d_std, lags.m_d + 1)]
        )
        return mean, std

    @property
    def flagged(self) -> dict[str, list[int]]:
        return {g: [int(i) for i in np.flatnonzero(getattr(self, f"{g}_flat"))] for g in ("x", "u", "d")}

    def to_dict(self) -> dict[str, list]:
        return {
            name: getattr(self, name).tolist()
            for name in ("x_mean", "x_std", "u_mean", "u_std", "d_mean", "d_std", "x_flat", "u_flat", "d_flat")
        }

    @classmethod
    def from_dict(cls, payload: dict[str, list]) -> "Normalizer":
        out = {}
        for name in ("x_mean", "x_std", "u_mean", "u_std", "d_mean", "d_std"):
            out[name] = np.asarray(payload[name], dtype=np.float64)
        for name in ("x_flat", "u_flat", "d_flat"):
            out[name] = np.asarray(payload.get(name, []), dtype=bool)
        if any(np.any(out[f"{g}_std"] <= 0) for g in ("x", "u", "d")):
            raise ContractError("Normalizer std must be > 0 for every channel")
        return cls(**out)

    @classmethod
    def identity(cls, n_x: int, n_u: int, n_d: int) -> "Normalizer":
        return cls(
            np.zeros(n_x), np.ones(n_x), np.zeros(n_u), np.ones(n_u), np.zeros(n_d), np.ones(n_d),
            np.zeros(n_x, dtype=bool), np.zeros(n_u, dtype=bool), np.zeros(n_d, dtype=bool),
        )


def _stats(values: np.ndarray) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    mean = values.mean(axis=0)
    std = values.std(axis=0)
    flat = ~(std > 0)
    return mean, np.where(flat, 1.0, std), flat


def fit_normalizer(trajectories: list[Trajectory]) -> Normalizer:
    """Fit on training trajectories only."""
    rows = sum(len(tr) for tr in trajectories)
    if rows < 2:
        raise ContractError(f"fit_normalizer needs at least 2 samples, got {rows}")
    x = np.concatenate([tr.x for tr in trajectories])
    u = np.concatenate([tr.u for tr in trajectories])
    d = np.concatenate([tr.d for tr in trajectories])
    xm, xs, xf = _stats(x)
    um, us, uf = _stats(u)
    dm, ds, df = _stats(d)
    norm = Normalizer(xm, xs, um, us, dm, ds, xf, uf, df)
    if xf.any() or uf.any() or df.any():
        logger.warning("NORMALIZER: zero-variance channels forced to std=1: %s", norm.flagged)
    return norm


@dataclass(frozen=True)
class Dataset:
    """
    Windowed (input, target) pairs. inputs[i] = x[t-M_x..t] | u[t-M_u..t] | d[t-M_d..t]
    (oldest first, raw units), targets[i] = x[t+1]; traj_ids[i], times[i] = t give provenance.
    """
    inputs: np.ndarray
    targets: np.ndarray
    traj_ids: np.ndarray
    times: np.ndarray
    lags: LagSpec
    n_x: int
    n_u: int
    n_d: int
    trajectories: tuple[Trajectory, ...] = ()

    def __len__(self) -> int:
        return len(self.targets)

    @property
    def width(self) -> int:
        return self.lags.width(self.n_x, self.n_u, self.n_d)


def _blocks(values: np.ndarray, lag: int, rows: np.ndarray) -> np.ndarray:
    # (L - lag, channels, lag + 1) -> (L - lag, lag + 1, channels), oldest first
    windows = sliding_window_view(values, lag + 1, axis=0).transpose(0, 2, 1)
    picked = windows[rows - lag]
    return picked.reshape(len(rows), -1)


def window(traj: Trajectory, lags: LagSpec) -> Dataset:
    n = len(traj)
    m = lags.max_lag
    if n < m + 2:
        logger.warning("WINDOW: trajectory %d has %d steps, need %d for lags %s", traj.traj_id, n, m + 2, lags)
        width = lags.width(traj.n_x, traj.n_u, traj.n_d)
        return Dataset(
            inputs=np.zeros((0, width)),
            targets=np.zeros((0, traj.n_x)),
            traj_ids=np.zeros(0, dtype=np.int64),
            times=np.zeros(0, dtype=np.int64),
            lags=lags,
            n_x=traj.n_x,
            n_u=traj.n_u,
            n_d=traj.n_d,
            trajectories=(traj,),
        )

    rows = np.arange(m, n - 1)
    inputs = np.concatenate(
        [_blocks(traj.x, lags.m_x, rows), _blocks(traj.u, lags.m_u, rows), _blocks(traj.d, lags.m_d, rows)],
        axis=1,
    )
    return Dataset(
        inputs=inputs,
        targets=traj.x[rows + 1].copy(),
        traj_ids=np.full(len(rows), traj.traj_id, dtype=np.int64),
        times=rows.astype(np.int64),
        lags=lags,
        n_x=traj.n_x,
        n_u=traj.n_u,
        n_d=traj.n_d,
        trajectories=(traj,),
    )


def window_all(trajectories: list[Trajectory], lags: LagSpec) -> Dataset:
    if not trajectories:
        raise ContractError("window_all needs at least one trajectory")
    parts = [window(tr, lags) for tr in trajectories]
    first = parts[0]
    for p in parts[1:]:
        if (p.n_x, p.n_u, p.n_d) != (first.n_x, first.n_u, first.n_d):
            raise ShapeError("window_all channels", (first.n_x, first.n_u, first.n_d), (p.n_x, p.n_u, p.n_d))
    return Dataset(
        inputs=np.concatenate([p.inputs for p in parts]),
        targets=np.concatenate([p.targets for p in parts]),
        traj_ids=np.concatenate([p.traj_ids for p in parts]),
        times=np.concatenate([p.times for p in parts]),
        lags=lags,
        n_x=first.n_x,
        n_u=first.n_u,
        n_d=first.n_d,
        trajectories=tuple(trajectories),
    )


# ---- excitation ----

def excite(config: PlantConfig, seed: int, steps: int, traj_id: int = 0) -> Trajectory:
    """
    Uniform-random excitation over the control box from a seeded random day of year
    and random initial zone temperatures.
    """
    if steps < 1:
        raise InvalidArgumentError("excite: steps must be >= 1")
    rng = np.random.default_rng(seed)
    start_day = float(rng.integers(0, 365))
    temps = rng.uniform(*EXCITE_TEMPERATURE_RANGE, size=config.zone_count)
    days = math.ceil(steps * config.sample_period / 86400.0)
    weather = plant_weather(config, int(rng.integers(2**31)), days, start_day=start_day)
    return simulate_episode(
        config,
        uniform_random_policy(config, rng),
        steps,
        weather,
        initial=initial_state(config, temps),
        traj_id=traj_id,
    )


def trajectory_seeds(seed: int, count: int) -> list[int]:
    return [int(s.generate_state(1)[0]) for s in np.random.SeedSequence(seed).spawn(count)]


def _excite_job(args: tuple[PlantConfig, int, int, int]) -> Trajectory:
    config, seed, steps, traj_id = args
    return excite(config, seed, steps, traj_id=traj_id)


def generate_dataset(config: PlantConfig, count: int, steps: int, seed: int, *, workers: int = 1) -> list[Trajectory]:
    """K independent excitation runs; trajectory i uses the i-th spawned seed, so output is worker-count independent."""
    if count < 1:
        raise InvalidArgumentError("generate_dataset: count must be >= 1")
    jobs = [(config, s, steps, i) for i, s in enumerate(trajectory_seeds(seed, count))]
    logger.info("EXCITE: %d trajectories x %d steps (workers=%d)", count, steps, workers)
    if workers <= 1:
        return [_excite_job(j) for j in jobs]
    with ProcessPoolExecutor(max_workers=workers) as pool:
        return list(pool.map(_excite_job, jobs))


# ---- splits ----

class SplitManifest(BaseModel):
    train: list[int]
    val: list[int]
    test: list[int]

    @model_validator(mode="after")
    def _disjoint(self) -> "SplitManifest":
        sets = [set(self.train), set(self.val), set(self.test)]
        if sum(len(s) for s in sets) != len(set().union(*sets)):
            raise ValueError("train/val/test trajectory ids must be pairwise disjoint")
        return self

    @property
    def total(self) -> int:
        return len(self.train) + len(self.val) + len(self.test)

    def select(self, trajectories: list[Trajectory], split: Literal["train", "val", "test"]) -> list[Trajectory]:
        wanted = set(getattr(self, split))
        return [tr for tr in trajectories if tr.traj_id in wanted]

    def save(self, path: str | Path) -> None:
        Path(path).write_text(self.model_dump_json(indent=2), encoding="utf-8")

    @classmethod
    def load(cls, path: str | Path) -> "SplitManifest":
        return cls.model_validate_json(Path(path).read_text(encoding="utf-8"))


def split_sizes(count: int) -> tuple[int, int, int]:
    v = max(1, round(count / 12))
    if count - 2 * v < 1:
        raise ConfigError(f"Need at least 3 trajectories to split, got {count}")
    return count - 2 * v, v, v


def split_ids(ids: list[int], seed: int | None = None) -> SplitManifest:
    """Whole-trajectory train/val/test split; a seed shuffles the ids first."""
    ids = list(ids)
    if seed is not None:
        ids = [ids[i] for i in np.random.default_rng(seed).permutation(len(ids))]
    n_train, n_val, _ = split_sizes(len(ids))
    return SplitManifest(
        train=sorted(ids[:n_train]),
        val=sorted(ids[n_train : n_train + n_val]),
        test=sorted(ids[n_train + n_val :]),
    )
