from __future__ import annotations

import json
from dataclasses import dataclass
from pathlib import Path
from typing import Literal

from pydantic import BaseModel, ConfigDict, Field, model_validator
from pydantic_settings import BaseSettings, SettingsConfigDict

from hvac_nmpc.errors import ConfigError

AIR_CP = 1005.0  # J/(kg K)


class Settings(BaseSettings):
    """
    Environment variables are loaded from .env and from the process environment.
    """
    model_config = SettingsConfigDict(env_file=".env", env_prefix="HVAC_NMPC_", extra="ignore")

    scale: Literal["desk", "paper"] = Field(default="desk")
    seed: int = Field(default=0)
    output_dir: str = Field(default="runs")
    log_level: str = Field(default="INFO")
    workers: int = Field(default=1, ge=1)


settings = Settings()


class WeatherConfig(BaseModel):
    model_config = ConfigDict(extra="forbid", frozen=True)

    mean_ambient_c: float = 10.0
    seasonal_amplitude_c: float = 12.0
    diurnal_amplitude_c: float = 6.0
    noise_std_c: float = Field(default=1.0, ge=0.0)
    solar_peak_wm2: float = Field(default=600.0, ge=0.0)
    # Day of year at clock 0 and day of year of the seasonal maximum.
    start_day: float = 20.0
    warmest_day: float = 200.0


class PiGains(BaseModel):
    model_config = ConfigDict(extra="forbid", frozen=True)

    kp: float = Field(default=0.3, ge=0.0)
    ki: float = Field(default=0.05, ge=0.0)


class PlantConfig(BaseModel):
    """
    Synthetic RC building emulator. Per-zone lists have exactly zone_count entries.

    Single zone: a fan coil unit (heating_capacity / cooling_capacity are the coil
    capacities). Five zones: zone 0 is the core, zones 1-4 are perimeter zones
    served by VAV boxes; heating_capacity is the per-zone reheat capacity and the
    central coil capacities are ahu_heating_capacity / ahu_cooling_capacity.
    """
    model_config = ConfigDict(extra="forbid", frozen=True)

    zone_count: Literal[1, 5]
    capacitance: list[float]
    ua: list[float]
    coupling: list[list[float]]
    heating_capacity: list[float]
    cooling_capacity: list[float]
    max_airflow: list[float]
    solar_aperture: list[float]

    ahu_heating_capacity: float = Field(default=0.0, ge=0.0)
    ahu_cooling_capacity: float = Field(default=0.0, ge=0.0)
    min_airflow_fraction: float = Field(default=0.3, ge=0.0, le=1.0)
    outdoor_air_fraction: float = Field(default=0.3, ge=0.0, le=1.0)
    supply_setpoint_span: float = Field(default=20.0, gt=0.0)
    coil_delta_t_max: float = Field(default=30.0, gt=0.0)
    fan_power_coefficient: float = Field(default=500.0, ge=0.0)
    floor_area: float = 48.0
    occupants: int = Field(default=2, ge=0)
    occupant_gain: float = Field(default=120.0, ge=0.0)
    pi_gains: PiGains = Field(default_factory=PiGains)
    sample_period: float = 900.0
    occupied_hours: tuple[float, float] = (8.0, 18.0)
    comfort_occupied: tuple[float, float] = (21.0, 24.0)
    comfort_unoccupied: tuple[float, float] = (15.0, 30.0)
    supply_air_bounds: tuple[float, float] = (5.0, 20.0)
    supply_temperature_range: tuple[float, float] = (12.0, 40.0)
    initial_temperature: float = 21.0
    weather: WeatherConfig = Field(default_factory=WeatherConfig)

    @model_validator(mode="after")
    def _check(self) -> "PlantConfig":
        n = self.zone_count
        problems: list[str] = []

        for name in ("capacitance", "ua", "heating_capacity", "cooling_capacity", "max_airflow", "solar_aperture"):
            if len(getattr(self, name)) != n:
                problems.append(f"{name} must have {n} entries")
        if len(self.coupling) != n or any(len(row) != n for row in self.coupling):
            problems.append(f"coupling must be {n}x{n}")
        if problems:
            raise ValueError("; ".join(problems))

        if any(c <= 0 for c in self.capacitance):
            problems.append("capacitance must be > 0")
        for name in ("ua", "heating_capacity", "cooling_capacity", "max_airflow", "solar_aperture"):
            if any(v < 0 for v in getattr(self, name)):
                problems.append(f"{name} must be >= 0")
        for i in range(n):
            if self.coupling[i][i] != 0:
                problems.append("coupling diagonal must be zero")
                break
        for i in range(n):
            for j in range(n):
                if self.coupling[i][j] < 0 or self.coupling[i][j] != self.coupling[j][i]:
                    problems.append("coupling must be symmetric and nonnegative")
                    break
            else:
                continue
            break
        if self.sample_period <= 0:
            problems.append("sample_period must be > 0")
        if self.floor_area <= 0:
            problems.append("floor_area must be > 0")
        start, end = self.occupied_hours
        if not (0 <= start < end <= 24):
            problems.append("occupied_hours must satisfy 0 <= start < end <= 24")
        if problems:
            raise ValueError("; ".join(problems))

        # Forward-Euler contraction guard, airflow conductance included.
        for i in range(n):
            conductance = self.ua[i] + sum(self.coupling[i]) + self.max_airflow[i] * AIR_CP
            if self.sample_period * conductance / self.capacitance[i] >= 1.0:
                raise ValueError(f"zone {i}: sample_period * conductance / capacitance must be < 1")
        return self

    @property
    def total_heating_capacity(self) -> float:
        return float(sum(self.heating_capacity)) + self.ahu_heating_capacity

    @property
    def total_cooling_capacity(self) -> float:
        return float(sum(self.cooling_capacity)) + self.ahu_cooling_capacity

    @classmethod
    def single_zone(cls, **overrides) -> "PlantConfig":
        # 6 m x 8 m single room, two occupants 8:00-18:00.
        base = dict(
            zone_count=1,
            capacitance=[6.0e6],
            ua=[60.0],
            coupling=[[0.0]],
            heating_capacity=[4000.0],
            cooling_capacity=[4000.0],
            max_airflow=[0.35],
            solar_aperture=[3.0],
            fan_power_coefficient=500.0,
            floor_area=48.0,
            occupants=2,
            occupied_hours=(8.0, 18.0),
        )
        base.update(overrides)
        return cls(**base)

    @classmethod
    def five_zone(cls, **overrides) -> "PlantConfig":
        # Core zone coupled to four perimeter zones, occupied 6:00-19:00.
        g = 400.0
        coupling = [[0.0] * 5 for _ in range(5)]
        for j in range(1, 5):
            coupling[0][j] = g
            coupling[j][0] = g
        base = dict(
            zone_count=5,
            capacitance=[4.0e7, 2.5e7, 2.5e7, 2.5e7, 2.5e7],
            ua=[50.0, 250.0, 250.0, 250.0, 250.0],
            coupling=coupling,
            heating_capacity=[15000.0, 8000.0, 8000.0, 8000.0, 8000.0],
            cooling_capacity=[0.0] * 5,
            max_airflow=[1.5, 0.8, 0.8, 0.8, 0.8],
            solar_aperture=[0.0, 8.0, 8.0, 8.0, 8.0],
            ahu_heating_capacity=60000.0,
            ahu_cooling_capacity=80000.0,
            fan_power_coefficient=15000.0,
            floor_area=1600.0,
            occupants=60,
            occupied_hours=(6.0, 19.0),
        )
        base.update(overrides)
        return cls(**base)

    @classmethod
    def load(cls, path: str | Path) -> "PlantConfig":
        return cls.model_validate_json(Path(path).read_text(encoding="utf-8"))

    def save(self, path: str | Path) -> None:
        Path(path).write_text(self.model_dump_json(indent=2), encoding="utf-8")


class TrainConfig(BaseModel):
    model_config = ConfigDict(extra="forbid")

    learning_rate: float = Field(default=0.001, gt=0.0)
    epochs: int = Field(default=200, ge=1)
    batch_size: int = Field(default=64, ge=1)
    seed: int = 0
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    width: int = Field(default=64, ge=1)
    depth: int = Field(default=4, ge=1)


class MpcConfig(BaseModel):
    model_config = ConfigDict(extra="forbid")

    horizon: int = Field(default=10, ge=1)
    gamma: float = Field(default=50.0, ge=0.0)
    # Diagonal of R; None means 0.1 for every control channel.
    r_diag: list[float] | None = None
    solver: Literal["gdm", "sqp", "slsqp"] = "sqp"
    gdm_lr: float = Field(default=0.01, gt=0.0)
    gdm_iterations: int = Field(default=100, ge=1)
    sqp_max_iter: int = Field(default=100, ge=1)
    sqp_gtol: float = Field(default=1e-6, ge=0.0)
    sqp_ftol: float = Field(default=1e-9, ge=0.0)
    armijo_c: float = Field(default=1e-4, gt=0.0, lt=1.0)
    min_step: float = Field(default=1e-12, gt=0.0)
    forecast_noise_std: float = Field(default=0.0, ge=0.0)
    power_channels: list[Literal["heating", "cooling", "fan"]] = Field(
        default_factory=lambda: ["heating", "cooling", "fan"]
    )
    seed: int = 0

    @model_validator(mode="after")
    def _check(self) -> "MpcConfig":
        if self.r_diag is not None and any(r < 0 for r in self.r_diag):
            raise ValueError("r_diag must be nonnegative")
        if not self.power_channels:
            raise ValueError("power_channels must not be empty")
        return self

    @classmethod
    def load(cls, path: str | Path) -> "MpcConfig":
        return cls.model_validate_json(Path(path).read_text(encoding="utf-8"))


@dataclass(frozen=True)
class ScalePreset:
    name: str
    trajectories: int
    steps: int
    width: int
    epochs: int


def scale_preset(scale: str, zone_count: int) -> ScalePreset:
    if scale == "desk":
        return ScalePreset("desk", trajectories=20, steps=200, width=64, epochs=200)
    if scale == "paper":
        if zone_count == 1:
            return ScalePreset("paper", trajectories=120, steps=500, width=256, epochs=1000)
        return ScalePreset("paper", trajectories=600, steps=1000, width=256, epochs=1000)
    raise ConfigError(f"Unknown scale preset '{scale}'. Use desk or paper.")


class RunConfig(BaseModel):
    model_config = ConfigDict(extra="forbid")

    plant_config_path: Path | None = None
    data_dir: Path | None = None
    checkpoint_paths: list[Path] = Field(default_factory=list)
    results_dir: Path | None = None
    lags: str | None = None
    model_kind: Literal["linear", "mlp", "lstm"] | None = None
    train: TrainConfig = Field(default_factory=TrainConfig)
    mpc: MpcConfig = Field(default_factory=MpcConfig)
    output_dir: Path = Path(settings.output_dir)
    seed: int = settings.seed
    scale: Literal["desk", "paper"] = settings.scale

    def validate_required(self) -> None:
        missing: list[str] = []

        if self.plant_config_path is not None and not self.plant_config_path.is_file():
            missing.append(f"plant config {self.plant_config_path}")
        if self.data_dir is not None and not self.data_dir.is_dir():
            missing.append(f"data directory {self.data_dir}")
        for p in self.checkpoint_paths:
            if not p.is_file():
                missing.append(f"checkpoint {p}")
        if self.results_dir is not None and not self.results_dir.is_dir():
            missing.append(f"results directory {self.results_dir}")

        if missing:
            raise ConfigError("Missing required inputs: " + ", ".join(missing) + ".")


def dump_json(path: str | Path, payload: object) -> None:
    Path(path).write_text(json.dumps(payload, indent=2, sort_keys=True) + "\n", encoding="utf-8")
