from __future__ import annotations

import logging
from pathlib import Path
from typing import Sequence

import numpy as np
import pandas as pd
from pydantic import BaseModel, Field

from hvac_nmpc.config import PlantConfig
from hvac_nmpc.errors import ConfigError, ContractError, InvalidArgumentError, ShapeError
from hvac_nmpc.plant import StateLayout, comfort_schedule, is_occupied
from hvac_nmpc.trajectory import FLOAT_FORMAT, Trajectory

logger = logging.getLogger(__name__)

RESULT_COLUMNS = ["model", "solver", "power_kwh_m2", "discomfort_kh", "mean_s", "max_s"]


class KpiReport(BaseModel):
    total_power: float = Field(ge=0.0, description="kWh per m2 of floor area")
    discomfort: float = Field(ge=0.0, description="Kh, averaged over zones")
    occupied_discomfort: float = Field(default=0.0, ge=0.0, description="Kh over occupied steps only")
    mean_solve_time: float = Field(default=0.0, ge=0.0)
    max_solve_time: float = Field(default=0.0, ge=0.0)
    violation_steps: int = Field(default=0, ge=0)
    steps: int = Field(default=0, ge=0)

    def save(self, path: str | Path) -> None:
        Path(path).write_text(self.model_dump_json(indent=2), encoding="utf-8")


def discomfort(
    traj: Trajectory,
    lower: np.ndarray,
    upper: np.ndarray,
    *,
    zones: slice | Sequence[int] = slice(0, 1),
    mask: np.ndarray | None = None,
    sample_period: float | None = None,
) -> float:
    """
    Kelvin-hours outside [lower, upper] per zone, averaged over zones. Step durations come
    from the timestamps; the last step reuses the previous spacing.
    """
    temps = traj.x[:, zones]
    lower = np.asarray(lower, dtype=np.float64)
    upper = np.asarray(upper, dtype=np.float64)
    if lower.shape != temps.shape or upper.shape != temps.shape:
        raise ShapeError("discomfort schedule", lower.shape, temps.shape)
    if len(traj) == 0:
        return 0.0
    excess = np.maximum(0.0, np.maximum(temps - upper, lower - temps))
    hours = traj.step_hours(sample_period)
    if mask is not None:
        hours = np.where(np.asarray(mask, dtype=bool), hours, 0.0)
    return float(np.mean((excess * hours[:, None]).sum(axis=0)))


def energy(
    traj: Trajectory,
    floor_area: float,
    power_indices: Sequence[int],
    *,
    sample_period: float | None = None,
) -> float:
    """Sum of the power channels (kW) times step hours, per m2."""
    if floor_area <= 0:
        raise InvalidArgumentError("energy: floor_area must be > 0")
    if len(traj) == 0:
        return 0.0
    power = traj.x[:, list(power_indices)].sum(axis=1)
    return float(np.sum(power * traj.step_hours(sample_period)) / floor_area)


def timing(wall_times: Sequence[float]) -> tuple[float, float]:
    if len(wall_times) == 0:
        raise ContractError("timing: no solve results")
    arr = np.asarray(wall_times, dtype=np.float64)
    return float(arr.mean()), float(arr.max())


def kpi_report(
    outcome: Trajectory,
    config: PlantConfig,
    *,
    wall_times: Sequence[float] = (),
    violation_steps: int = 0,
    power_channels: Sequence[str] = ("heating", "cooling", "fan"),
) -> KpiReport:
    """
    KPIs of an episode. `outcome.x[k]` is the measured state after step k, stamped with its own time,
    so comfort bounds are looked up at the time the state was reached.
    """
    layout = StateLayout.for_config(config)
    if outcome.n_x != layout.n_x:
        raise ConfigError(f"Episode has {outcome.n_x} state channels, plant config declares {layout.n_x}")
    lower, upper = comfort_schedule(outcome.t, config)
    occupied = np.array([is_occupied(float(t), config) for t in outcome.t], dtype=bool)
    mean_s, max_s = timing(wall_times) if len(wall_times) else (0.0, 0.0)
    return KpiReport(
        total_power=energy(outcome, config.floor_area, layout.power_indices(list(power_channels)), sample_period=config.sample_period),
        discomfort=discomfort(outcome, lower, upper, zones=layout.zones, sample_period=config.sample_period),
        occupied_discomfort=discomfort(
            outcome, lower, upper, zones=layout.zones, mask=occupied, sample_period=config.sample_period
        ),
        mean_solve_time=mean_s,
        max_solve_time=max_s,
        violation_steps=violation_steps,
        steps=len(outcome),
    )


def append_result(path: str | Path, model: str, solver: str, report: KpiReport) -> None:
    row = pd.DataFrame(
        [[model, solver, report.total_power, report.discomfort, report.mean_solve_time, report.max_solve_time]],
        columns=RESULT_COLUMNS,
    )
    path = Path(path)
    row.to_csv(path, mode="a", header=not path.exists(), index=False, float_format=FLOAT_FORMAT)


def load_results(path: str | Path) -> pd.DataFrame:
    frame = pd.read_csv(path, float_precision="round_trip")
    if list(frame.columns) != RESULT_COLUMNS:
        raise ConfigError(f"{path}: results header must be {','.join(RESULT_COLUMNS)}")
    return frame
