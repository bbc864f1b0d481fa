from __future__ import annotations

import logging
from dataclasses import dataclass
from pathlib import Path
from typing import Callable

import numpy as np
import pandas as pd

from hvac_nmpc.config import AIR_CP, PlantConfig, WeatherConfig
from hvac_nmpc.errors import CsvFormatError, InvalidArgumentError, NumericDomainError, ShapeError
from hvac_nmpc.trajectory import FLOAT_FORMAT, Trajectory

logger = logging.getLogger(__name__)

SECONDS_PER_DAY = 86400.0
DISTURBANCE_NAMES = ("ambient_c", "solar_wm2", "occupancy")
N_D = len(DISTURBANCE_NAMES)


@dataclass(frozen=True)
class PlantState:
    zone_temperatures: np.ndarray
    pi_integrators: np.ndarray
    supply_air_temperature: float
    clock: float


@dataclass(frozen=True)
class Measurement:
    """What the controller sees after a step. Powers are in kW."""
    zone_temperatures: np.ndarray
    heating_power: float
    cooling_power: float
    fan_power: float
    supply_air_temperature: float | None
    timestamp: float

    def as_state(self) -> np.ndarray:
        parts = [self.zone_temperatures, [self.heating_power, self.cooling_power, self.fan_power]]
        if self.supply_air_temperature is not None:
            parts.append([self.supply_air_temperature])
        return np.concatenate(parts).astype(np.float64)


@dataclass(frozen=True)
class StateLayout:
    """
    Column layout of the measured state vector x:
    zone temperatures, heating kW, cooling kW, fan kW, then supply air temperature (multi-zone only).
    """
    zone_count: int
    has_supply: bool

    @property
    def zones(self) -> slice:
        return slice(0, self.zone_count)

    @property
    def heating(self) -> int:
        return self.zone_count

    @property
    def cooling(self) -> int:
        return self.zone_count + 1

    @property
    def fan(self) -> int:
        return self.zone_count + 2

    @property
    def supply(self) -> int | None:
        return self.zone_count + 3 if self.has_supply else None

    @property
    def n_x(self) -> int:
        return self.zone_count + 3 + int(self.has_supply)

    @property
    def names(self) -> list[str]:
        out = [f"zone_{i}_c" for i in range(self.zone_count)] + ["heating_kw", "cooling_kw", "fan_kw"]
        if self.has_supply:
            out.append("supply_air_c")
        return out

    def power_indices(self, channels: list[str] | tuple[str, ...]) -> list[int]:
        lookup = {"heating": self.heating, "cooling": self.cooling, "fan": self.fan}
        try:
            return [lookup[c] for c in channels]
        except KeyError as e:
            raise InvalidArgumentError(f"Unknown power channel {e.args[0]!r}") from e

    @classmethod
    def for_config(cls, config: PlantConfig) -> "StateLayout":
        return cls(zone_count=config.zone_count, has_supply=config.zone_count > 1)


def control_names(config: PlantConfig) -> list[str]:
    if config.zone_count == 1:
        return ["fan", "supply_setpoint_c"]
    n = config.zone_count
    return [f"damper_{i}" for i in range(n)] + [f"reheat_{i}" for i in range(n)] + ["y_heat", "y_cool"]


def control_box(config: PlantConfig) -> tuple[np.ndarray, np.ndarray]:
    if config.zone_count == 1:
        lo, hi = config.supply_temperature_range
        return np.array([0.0, lo]), np.array([1.0, hi])
    n_u = 2 * config.zone_count + 2
    return np.zeros(n_u), np.ones(n_u)


def midpoint_control(config: PlantConfig) -> np.ndarray:
    lower, upper = control_box(config)
    return 0.5 * (lower + upper)


# ---- weather ----

def make_weather(
    seed: int,
    days: float,
    sample_period: float = 900.0,
    *,
    weather: WeatherConfig | None = None,
    occupied_hours: tuple[float, float] = (8.0, 18.0),
    occupants: int = 2,
    start_day: float | None = None,
) -> np.ndarray:
    """
    Deterministic (seeded) disturbance series, shape (N, 3): ambient C, solar W/m2, occupant count.
    Clock 0 is midnight of `start_day`.
    """
    if days <= 0 or sample_period <= 0:
        raise InvalidArgumentError("make_weather: days and sample_period must be > 0")
    w = weather or WeatherConfig()
    n = int(round(days * SECONDS_PER_DAY / sample_period))
    t = np.arange(n, dtype=np.float64) * sample_period
    day = (w.start_day if start_day is None else start_day) + t / SECONDS_PER_DAY
    hour = (t % SECONDS_PER_DAY) / 3600.0

    rng = np.random.default_rng(seed)
    ambient = (
        w.mean_ambient_c
        + w.seasonal_amplitude_c * np.cos(2.0 * np.pi * (day - w.warmest_day) / 365.0)
        + w.diurnal_amplitude_c * np.sin(2.0 * np.pi * (hour - 9.0) / 24.0)
        + rng.normal(0.0, w.noise_std_c, n)
    )
    solar = w.solar_peak_wm2 * np.maximum(0.0, np.sin(np.pi * (hour - 6.0) / 12.0))
    start, end = occupied_hours
    occupancy = np.where((hour >= start) & (hour < end), float(occupants), 0.0)
    return np.column_stack([ambient, solar, occupancy])


def plant_weather(config: PlantConfig, seed: int, days: float, *, start_day: float | None = None) -> np.ndarray:
    return make_weather(
        seed,
        days,
        config.sample_period,
        weather=config.weather,
        occupied_hours=config.occupied_hours,
        occupants=config.occupants,
        start_day=start_day,
    )


def save_weather(path: str | Path, weather: np.ndarray, sample_period: float) -> None:
    frame = pd.DataFrame(np.asarray(weather, dtype=np.float64), columns=list(DISTURBANCE_NAMES))
    frame.insert(0, "t_sec", np.arange(len(frame), dtype=np.float64) * sample_period)
    frame.to_csv(path, index=False, float_format=FLOAT_FORMAT)


def load_weather(path: str | Path) -> np.ndarray:
    frame = pd.read_csv(path, float_precision="round_trip")
    expected = ["t_sec", *DISTURBANCE_NAMES]
    if list(frame.columns) != expected:
        raise CsvFormatError(f"weather header must be {','.join(expected)}", line=1)
    values = frame[list(DISTURBANCE_NAMES)].to_numpy(dtype=np.float64)
    bad = ~np.isfinite(values).all(axis=1)
    if bad.any():
        raise CsvFormatError("missing or non-finite weather value", line=int(np.argmax(bad)) + 2)
    return values


# ---- comfort ----

def is_occupied(clock: float, config: PlantConfig) -> bool:
    hour = (clock % SECONDS_PER_DAY) / 3600.0
    start, end = config.occupied_hours
    return start <= hour < end


def comfort_bounds(clock: float, config: PlantConfig) -> tuple[np.ndarray, np.ndarray]:
    lo, hi = config.comfort_occupied if is_occupied(clock, config) else config.comfort_unoccupied
    n = config.zone_count
    return np.full(n, lo), np.full(n, hi)


def comfort_schedule(clocks: np.ndarray, config: PlantConfig) -> tuple[np.ndarray, np.ndarray]:
    """Bounds for a sequence of timestamps, each of shape (len(clocks), zone_count)."""
    pairs = [comfort_bounds(float(c), config) for c in np.asarray(clocks).reshape(-1)]
    n = config.zone_count
    if not pairs:
        return np.zeros((0, n)), np.zeros((0, n))
    return np.array([p[0] for p in pairs]), np.array([p[1] for p in pairs])


# ---- dynamics ----

def initial_state(config: PlantConfig, temperatures: np.ndarray | list[float] | None = None) -> PlantState:
    if temperatures is None:
        temps = np.full(config.zone_count, config.initial_temperature)
    else:
        temps = np.array(temperatures, dtype=np.float64).reshape(-1)
        if temps.shape != (config.zone_count,):
            raise ShapeError("initial_state", temps.shape, (config.zone_count,))
    return PlantState(
        zone_temperatures=temps,
        pi_integrators=np.zeros(1),
        supply_air_temperature=float(np.mean(temps)),
        clock=0.0,
    )


def initial_measurement(state: PlantState, config: PlantConfig) -> Measurement:
    return Measurement(
        zone_temperatures=state.zone_temperatures.copy(),
        heating_power=0.0,
        cooling_power=0.0,
        fan_power=0.0,
        supply_air_temperature=state.supply_air_temperature if config.zone_count > 1 else None,
        timestamp=state.clock,
    )


@dataclass(frozen=True)
class _HvacOutput:
    zone_heat: np.ndarray
    heating: float
    cooling: float
    fan: float
    supply: float
    integrators: np.ndarray


def _pi_signal(state: PlantState, setpoint: float, config: PlantConfig) -> tuple[float, float]:
    # Discrete PI on supply air temperature, integrator and output clamped to [-1, 1].
    error = setpoint - state.supply_air_temperature
    integ = float(np.clip(state.pi_integrators[0] + config.pi_gains.ki * error, -1.0, 1.0))
    signal = float(np.clip(config.pi_gains.kp * error + integ, -1.0, 1.0))
    return signal, integ


def _fan_coil(state: PlantState, u: np.ndarray, config: PlantConfig) -> _HvacOutput:
    fan, setpoint = float(u[0]), float(u[1])
    temp = float(state.zone_temperatures[0])
    flow = fan * config.max_airflow[0]
    signal, integ = _pi_signal(state, setpoint, config)

    limit = flow * AIR_CP * config.coil_delta_t_max
    q_heat = min(max(signal, 0.0) * config.heating_capacity[0], limit)
    q_cool = min(max(-signal, 0.0) * config.cooling_capacity[0], limit)
    supply = temp + (q_heat - q_cool) / (flow * AIR_CP) if flow > 0 else temp

    return _HvacOutput(
        zone_heat=np.array([q_heat - q_cool]),
        heating=q_heat,
        cooling=q_cool,
        fan=config.fan_power_coefficient * fan**3,
        supply=supply,
        integrators=np.array([integ]),
    )


def _vav(state: PlantState, u: np.ndarray, ambient: float, config: PlantConfig) -> _HvacOutput:
    n = config.zone_count
    dampers, reheat = u[:n], u[n : 2 * n]
    y_heat, y_cool = float(u[2 * n]), float(u[2 * n + 1])
    temps = state.zone_temperatures

    max_flow = np.asarray(config.max_airflow)
    frac = config.min_airflow_fraction
    flows = max_flow * (frac + (1.0 - frac) * dampers)
    total_flow = float(flows.sum())
    design_flow = float(max_flow.sum())

    # No airflow: the return air is the mean zone temperature and the coils carry nothing.
    returned = float((flows * temps).sum() / total_flow) if total_flow > 0 else float(temps.mean())
    mixed = (1.0 - config.outdoor_air_fraction) * returned + config.outdoor_air_fraction * ambient
    setpoint = mixed + config.supply_setpoint_span * (y_heat - y_cool)
    signal, integ = _pi_signal(state, setpoint, config)

    limit = total_flow * AIR_CP * config.coil_delta_t_max
    q_heat = min(max(signal, 0.0) * config.ahu_heating_capacity, limit)
    q_cool = min(max(-signal, 0.0) * config.ahu_cooling_capacity, limit)
    supply = mixed + (q_heat - q_cool) / (total_flow * AIR_CP) if total_flow > 0 else mixed

    q_reheat = reheat * np.asarray(config.heating_capacity)
    zone_heat = flows * AIR_CP * (supply - temps) + q_reheat

    return _HvacOutput(
        zone_heat=zone_heat,
        heating=q_heat + float(q_reheat.sum()),
        cooling=q_cool,
        fan=config.fan_power_coefficient * (total_flow / design_flow) ** 3 if design_flow > 0 else 0.0,
        supply=supply,
        integrators=np.array([integ]),
    )


def step(
    state: PlantState,
    control: np.ndarray,
    disturbance: np.ndarray,
    config: PlantConfig,
) -> tuple[PlantState, Measurement]:
    """
    Advance the emulator one sample period (forward Euler on the zone RC network).
    Controls outside the box are clipped; callers that need to know use simulate_episode.
    """
    u = np.asarray(control, dtype=np.float64).reshape(-1)
    d = np.asarray(disturbance, dtype=np.float64).reshape(-1)
    lower, upper = control_box(config)
    if u.shape != lower.shape:
        raise ShapeError("plant.step control", u.shape, lower.shape)
    if d.shape != (N_D,):
        raise ShapeError("plant.step disturbance", d.shape, (N_D,))
    if not (np.all(np.isfinite(u)) and np.all(np.isfinite(d)) and np.all(np.isfinite(state.zone_temperatures))):
        raise NumericDomainError(f"plant.step: non-finite input at clock {state.clock}")

    ambient, solar, occupancy = (float(v) for v in d)
    if solar < 0 or occupancy < 0:
        raise InvalidArgumentError("plant.step: solar gain and occupancy must be >= 0")

    u = np.clip(u, lower, upper)
    hvac = _fan_coil(state, u, config) if config.zone_count == 1 else _vav(state, u, ambient, config)

    temps = state.zone_temperatures
    g = np.asarray(config.coupling, dtype=np.float64)
    exchange = (g * (temps[None, :] - temps[:, None])).sum(axis=1)
    gains = (
        np.asarray(config.ua) * (ambient - temps)
        + exchange
        + hvac.zone_heat
        + np.asarray(config.solar_aperture) * solar
        + occupancy * config.occupant_gain / config.zone_count
    )
    new_temps = temps + config.sample_period / np.asarray(config.capacitance) * gains
    if not np.all(np.isfinite(new_temps)) or not np.isfinite(hvac.supply):
        raise NumericDomainError(f"plant.step: non-finite zone temperature at clock {state.clock}")

    clock = state.clock + config.sample_period
    new_state = PlantState(
        zone_temperatures=new_temps,
        pi_integrators=hvac.integrators,
        supply_air_temperature=hvac.supply,
        clock=clock,
    )
    measurement = Measurement(
        zone_temperatures=new_temps.copy(),
        heating_power=hvac.heating / 1000.0,
        cooling_power=hvac.cooling / 1000.0,
        fan_power=hvac.fan / 1000.0,
        supply_air_temperature=hvac.supply if config.zone_count > 1 else None,
        timestamp=clock,
    )
    return new_state, measurement


Policy = Callable[[Measurement, float], np.ndarray]


def simulate_episode(
    config: PlantConfig,
    policy: Policy,
    steps: int,
    weather: np.ndarray,
    *,
    initial: PlantState | None = None,
    traj_id: int = 0,
) -> Trajectory:
    """
    Roll the plant forward under `policy(measurement, clock) -> control`.
    Row t holds the measurement before step t, the (clamped) control applied at t and weather row t.
    """
    weather = np.asarray(weather, dtype=np.float64)
    if steps < 0:
        raise InvalidArgumentError("simulate_episode: steps must be >= 0")
    if weather.ndim != 2 or weather.shape[1] != N_D:
        raise ShapeError("simulate_episode weather", weather.shape, (steps, N_D))
    if len(weather) < steps:
        raise InvalidArgumentError(f"simulate_episode: weather has {len(weather)} rows, need {steps}")

    state = initial or initial_state(config)
    meas = initial_measurement(state, config)
    lower, upper = control_box(config)

    xs, us, ts = [], [], []
    clamped = 0
    for k in range(steps):
        u = np.asarray(policy(meas, state.clock), dtype=np.float64).reshape(-1)
        if u.shape != lower.shape:
            raise ShapeError("policy output", u.shape, lower.shape)
        u_applied = np.clip(u, lower, upper)
        if not np.array_equal(u_applied, u, equal_nan=True):
            clamped += 1
        xs.append(meas.as_state())
        us.append(u_applied)
        ts.append(state.clock)
        state, meas = step(state, u_applied, weather[k], config)

    if clamped:
        logger.warning("PLANT CLAMP: %d of %d controls were outside the box (traj %d)", clamped, steps, traj_id)

    n_x = StateLayout.for_config(config).n_x
    return Trajectory(
        x=np.array(xs).reshape(steps, n_x),
        u=np.array(us).reshape(steps, len(lower)),
        d=weather[:steps],
        t=np.array(ts),
        traj_id=traj_id,
        clamped_steps=clamped,
    )


class Plant:
    """
    Stateful emulator: owns the building state and the weather it is driven by.
    """

    def __init__(self, config: PlantConfig, weather: np.ndarray, state: PlantState | None = None) -> None:
        self.config = config
        self.layout = StateLayout.for_config(config)
        self.weather = np.asarray(weather, dtype=np.float64)
        if self.weather.ndim != 2 or self.weather.shape[1] != N_D:
            raise ShapeError("Plant weather", self.weather.shape, (len(self.weather), N_D))
        self.state = state or initial_state(config)
        self.measurement = initial_measurement(self.state, config)
        self.index = 0

    @property
    def clock(self) -> float:
        return self.state.clock

    @property
    def remaining(self) -> int:
        return len(self.weather) - self.index

    def disturbance(self) -> np.ndarray:
        if self.index >= len(self.weather):
            raise InvalidArgumentError("Plant weather exhausted")
        return self.weather[self.index]

    def forecast(self, horizon: int) -> np.ndarray:
        """Disturbances for the next `horizon` steps, starting with the one applied at the next advance()."""
        if self.index + horizon > len(self.weather):
            raise InvalidArgumentError(
                f"Plant forecast needs {horizon} rows from index {self.index}, weather has {len(self.weather)}"
            )
        return self.weather[self.index : self.index + horizon].copy()

    def advance(self, control: np.ndarray) -> Measurement:
        self.state, self.measurement = step(self.state, control, self.disturbance(), self.config)
        self.index += 1
        return self.measurement


# ---- baseline and excitation policies ----

def constant_policy(control: np.ndarray | list[float]) -> Policy:
    fixed = np.array(control, dtype=np.float64)
    return lambda meas, clock: fixed


def midpoint_policy(config: PlantConfig) -> Policy:
    return constant_policy(midpoint_control(config))


def uniform_random_policy(config: PlantConfig, rng: np.random.Generator) -> Policy:
    lower, upper = control_box(config)
    return lambda meas, clock: rng.uniform(lower, upper)


def full_conditioning_policy(config: PlantConfig) -> Policy:
    """
    Always-on conditioning toward the middle of the occupied comfort band:
    full airflow, setpoint at the band centre, no reheat.
    """
    target = 0.5 * sum(config.comfort_occupied)
    if config.zone_count == 1:
        return constant_policy([1.0, target])

    n = config.zone_count
    span = config.supply_setpoint_span

    def policy(meas: Measurement, clock: float) -> np.ndarray:
        # Heat or cool the supply air by the mean zone error, mapped to the setpoint offset.
        offset = float(np.clip((target - float(np.mean(meas.zone_temperatures))) / span * 4.0, -1.0, 1.0))
        return np.concatenate([np.ones(n), np.zeros(n), [max(offset, 0.0), max(-offset, 0.0)]])

    return policy
