from __future__ import annotations

import logging
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
import pandas as pd

from hvac_nmpc import diff
from hvac_nmpc.config import MpcConfig, PlantConfig
from hvac_nmpc.diff import Tape, Tensor
from hvac_nmpc.errors import ConfigError, ContractError, InvalidArgumentError, SolverError
from hvac_nmpc.kpi import KpiReport, kpi_report
from hvac_nmpc.plant import Plant, StateLayout, comfort_schedule, control_box, midpoint_control
from hvac_nmpc.solvers import SolveResult, get_solver
from hvac_nmpc.surrogate import History, SurrogateModel, rollout_on_tape
from hvac_nmpc.trajectory import FLOAT_FORMAT, Trajectory

logger = logging.getLogger(__name__)

DEFAULT_R = 0.1


@dataclass(frozen=True, eq=False)
class MpcProblem:
    """
    One planning instance. The dynamics are eliminated by rolling the surrogate forward inside the
    cost (single shooting), so only the per-step control box remains as a constraint.

    cost = step_hours * sum(power channels) + sum((du~)^T R du~) + gamma * sum(relu bound violations)
    where du~ are successive differences of normalized controls within the plan.
    """
    model: SurrogateModel
    history: History
    u_lower: np.ndarray
    u_upper: np.ndarray
    x_lower: np.ndarray
    x_upper: np.ndarray
    forecast: np.ndarray
    zone_indices: tuple[int, ...]
    power_indices: tuple[int, ...]
    gamma: float = 50.0
    r_diag: np.ndarray | None = None
    step_hours: float = 0.25
    supply_index: int | None = None
    supply_bounds: tuple[float, float] | None = None

    def __post_init__(self) -> None:
        h = len(self.forecast)
        if h < 1:
            raise ContractError("MpcProblem horizon must be >= 1")
        n_u, nz = self.model.n_u, len(self.zone_indices)
        for name, arr, shape in (
            ("u_lower", self.u_lower, (h, n_u)),
            ("u_upper", self.u_upper, (h, n_u)),
            ("x_lower", self.x_lower, (h, nz)),
            ("x_upper", self.x_upper, (h, nz)),
            ("forecast", self.forecast, (h, self.model.n_d)),
        ):
            if np.shape(arr) != shape:
                raise ContractError(f"MpcProblem.{name} has shape {np.shape(arr)}, expected {shape}")
        if np.any(np.asarray(self.u_lower) > np.asarray(self.u_upper)):
            raise ContractError("MpcProblem control box must satisfy lower <= upper")
        if self.gamma < 0:
            raise ContractError("MpcProblem gamma must be >= 0")
        r = np.full(n_u, DEFAULT_R) if self.r_diag is None else np.asarray(self.r_diag, dtype=np.float64)
        if r.shape != (n_u,) or np.any(r < 0):
            raise ContractError(f"MpcProblem r_diag must be {n_u} nonnegative entries")
        object.__setattr__(self, "r_diag", r)

    @property
    def horizon(self) -> int:
        return len(self.forecast)

    @property
    def shape(self) -> tuple[int, int]:
        return (self.horizon, self.model.n_u)

    def cost_on_tape(self, tape: Tape, p: dict[str, Tensor], plan_rows: list[Tensor]) -> Tensor:
        """Per-plan cost, shape (B,), for H control rows of shape (B, n_u)."""
        batch = plan_rows[0].shape[0]
        forecast = [tape.constant(np.broadcast_to(row, (batch, len(row)))) for row in self.forecast]
        states = rollout_on_tape(self.model, tape, p, self.history, plan_rows, forecast)

        norm = self.model.normalizer
        zones = list(self.zone_indices)
        power = list(self.power_indices)
        terms: list[Tensor] = []
        for k, x in enumerate(states):
            terms.append(diff.scalar_mul(diff.sum(diff.take(x, power), axis=1), self.step_hours))

            temps = diff.take(x, zones)
            violation = diff.relu(diff.sub(tape.constant(self.x_lower[k]), temps)) + diff.relu(
                diff.sub(temps, tape.constant(self.x_upper[k]))
            )
            if self.supply_index is not None and self.supply_bounds is not None:
                supply = diff.take(x, [self.supply_index])
                lo, hi = self.supply_bounds
                violation = diff.concat(
                    [
                        violation,
                        diff.relu(diff.sub(tape.constant(np.array([lo])), supply)),
                        diff.relu(diff.sub(supply, tape.constant(np.array([hi])))),
                    ],
                    axis=1,
                )
            terms.append(diff.scalar_mul(diff.sum(violation, axis=1), self.gamma))

        scale = tape.constant(1.0 / norm.u_std)
        weights = tape.constant(self.r_diag)
        for k in range(1, self.horizon):
            step = diff.hadamard(diff.sub(plan_rows[k], plan_rows[k - 1]), scale)
            terms.append(diff.sum(diff.hadamard(diff.square(step), weights), axis=1))

        total = terms[0]
        for term in terms[1:]:
            total = total + term
        return total

    def _check_plan(self, plan: np.ndarray) -> np.ndarray:
        plan = np.asarray(plan, dtype=np.float64)
        if plan.shape != self.shape:
            raise ContractError(f"plan has shape {plan.shape}, expected {self.shape} (horizon x controls)")
        return plan

    def value_and_grad(self, plan: np.ndarray) -> tuple[float, np.ndarray]:
        plan = self._check_plan(plan)
        tape = Tape()
        p = self.model.bind(tape)
        u = tape.variable(plan)
        rows = [diff.slice(u, k, k + 1, axis=0) for k in range(self.horizon)]
        total = diff.sum(self.cost_on_tape(tape, p, rows))
        grads = diff.backward(tape, total)
        return float(total.value), grads.get(u.id, np.zeros_like(plan))

    def evaluate(self, plan: np.ndarray) -> float:
        return float(self.evaluate_batch(self._check_plan(plan)[None])[0])

    def evaluate_batch(self, plans: np.ndarray, chunk: int = 4096) -> np.ndarray:
        plans = np.asarray(plans, dtype=np.float64)
        if plans.ndim != 3 or plans.shape[1:] != self.shape:
            raise ContractError(f"plans have shape {plans.shape}, expected (B, {self.horizon}, {self.model.n_u})")
        out = np.empty(len(plans))
        for lo in range(0, len(plans), chunk):
            block = plans[lo : lo + chunk]
            tape = Tape()
            p = self.model.bind(tape)
            rows = [tape.constant(block[:, k]) for k in range(self.horizon)]
            out[lo : lo + chunk] = self.cost_on_tape(tape, p, rows).value
        return out


def cost(plan: np.ndarray, problem: MpcProblem) -> float:
    return problem.evaluate(plan)


def clamp_plan(plan: np.ndarray, problem: MpcProblem) -> np.ndarray:
    return np.clip(np.asarray(plan, dtype=np.float64), problem.u_lower, problem.u_upper)


def warm_start(previous: SolveResult | None, problem: MpcProblem) -> np.ndarray:
    """Previous plan shifted one step with its last row repeated; the box midpoint without one."""
    if previous is None or previous.plan.shape != problem.shape:
        return 0.5 * (problem.u_lower + problem.u_upper)
    shifted = np.vstack([previous.plan[1:], previous.plan[-1:]])
    return clamp_plan(shifted, problem)


def check_channels(model: SurrogateModel, config: PlantConfig) -> None:
    layout = StateLayout.for_config(config)
    n_u = len(control_box(config)[0])
    if (model.n_x, model.n_u, model.n_d) != (layout.n_x, n_u, 3):
        raise ConfigError(
            f"{model.kind} model channels (x={model.n_x}, u={model.n_u}, d={model.n_d}) do not match the "
            f"{config.zone_count}-zone plant (x={layout.n_x}, u={n_u}, d=3)"
        )


def build_problem(
    model: SurrogateModel,
    history: History,
    plant_config: PlantConfig,
    clock: float,
    forecast: np.ndarray,
    config: MpcConfig,
) -> MpcProblem:
    """Comfort bounds are those at the times the predicted states are reached (clock + j*dt, j = 1..H)."""
    layout = StateLayout.for_config(plant_config)
    h = config.horizon
    lower, upper = control_box(plant_config)
    x_lower, x_upper = comfort_schedule(clock + plant_config.sample_period * np.arange(1, h + 1), plant_config)
    return MpcProblem(
        model=model,
        history=history,
        u_lower=np.tile(lower, (h, 1)),
        u_upper=np.tile(upper, (h, 1)),
        x_lower=x_lower,
        x_upper=x_upper,
        forecast=forecast,
        zone_indices=tuple(range(plant_config.zone_count)),
        power_indices=tuple(layout.power_indices(config.power_channels)),
        gamma=config.gamma,
        r_diag=None if config.r_diag is None else np.asarray(config.r_diag),
        step_hours=plant_config.sample_period / 3600.0,
        supply_index=layout.supply,
        supply_bounds=plant_config.supply_air_bounds if layout.supply is not None else None,
    )


@dataclass(frozen=True, eq=False)
class EpisodeResult:
    """
    trajectory: (x before step k, applied u_k, d_k, t_k) per control step.
    outcome: measured state after each step, stamped with its own time; KPIs are computed on it.
    """
    trajectory: Trajectory
    outcome: Trajectory
    solves: list[SolveResult | None]
    costs: np.ndarray
    iterations: np.ndarray
    solve_ms: np.ndarray
    flagged_steps: list[int] = field(default_factory=list)
    kpi: KpiReport | None = None


def receding_horizon(plant: Plant, model: SurrogateModel, solver: str, steps: int, config: MpcConfig) -> EpisodeResult:
    """
    Closed loop: after a run-in of max-lag midpoint steps, replan every step from the warm-started
    previous solution and apply only the first control. A solver failure holds the previous control.
    """
    if steps < 0:
        raise InvalidArgumentError("receding_horizon: steps must be >= 0")
    check_channels(model, plant.config)
    solve = get_solver(solver)
    lags = model.lags
    h = config.horizon
    needed = lags.max_lag + steps + h
    if plant.remaining < needed:
        raise InvalidArgumentError(f"receding_horizon: plant weather has {plant.remaining} steps left, need {needed}")

    lower, upper = control_box(plant.config)
    rng = np.random.default_rng(config.seed)
    x_rows: list[np.ndarray] = []
    u_rows: list[np.ndarray] = []
    d_rows: list[np.ndarray] = []

    held = midpoint_control(plant.config)
    for _ in range(lags.max_lag):
        x_rows.append(plant.measurement.as_state())
        u_rows.append(held)
        d_rows.append(plant.disturbance())
        plant.advance(held)

    xs, us, ds, ts = [], [], [], []
    after_x, after_t = [], []
    solves: list[SolveResult | None] = []
    costs, iterations, solve_ms = [], [], []
    flagged: list[int] = []
    previous: SolveResult | None = None

    for k in range(steps):
        x_rows.append(plant.measurement.as_state())
        history = History.from_rows(
            x_rows,
            np.asarray(u_rows).reshape(-1, model.n_u),
            np.asarray(d_rows).reshape(-1, model.n_d),
            lags,
        )
        forecast = plant.forecast(h)
        if config.forecast_noise_std > 0:
            forecast[:, 0] += rng.normal(0.0, config.forecast_noise_std, h)
        problem = build_problem(model, history, plant.config, plant.clock, forecast, config)
        init = warm_start(previous, problem)

        try:
            result = solve(problem, init, config)
            control = np.clip(result.plan[0], lower, upper)
            previous = result
            costs.append(result.cost)
            iterations.append(result.iterations)
            solve_ms.append(result.wall_time * 1000.0)
        except SolverError as e:
            logger.warning("MPC: step %d solver failure (%s), holding previous control", k, e)
            result = None
            control = np.clip(held, lower, upper)
            previous = None
            flagged.append(k)
            costs.append(float("nan"))
            iterations.append(e.iteration)
            solve_ms.append(0.0)
        solves.append(result)

        xs.append(x_rows[-1])
        us.append(control)
        ds.append(plant.disturbance())
        ts.append(plant.clock)
        u_rows.append(control)
        d_rows.append(plant.disturbance())
        held = control

        meas = plant.advance(control)
        after_x.append(meas.as_state())
        after_t.append(meas.timestamp)
        logger.debug("MPC: step %d t=%.0f cost=%.6g", k, ts[-1], costs[-1])

    n_x, n_u, n_d = model.n_x, model.n_u, model.n_d
    trajectory = Trajectory(
        x=np.asarray(xs).reshape(steps, n_x),
        u=np.asarray(us).reshape(steps, n_u),
        d=np.asarray(ds).reshape(steps, n_d),
        t=np.asarray(ts),
    )
    outcome = Trajectory(
        x=np.asarray(after_x).reshape(steps, n_x),
        u=trajectory.u,
        d=trajectory.d,
        t=np.asarray(after_t),
    )
    wall = [r.wall_time for r in solves if r is not None]
    report = kpi_report(
        outcome,
        plant.config,
        wall_times=wall,
        violation_steps=len(flagged),
        power_channels=config.power_channels,
    )
    if flagged:
        logger.warning("MPC: %d of %d steps fell back to the previous control", len(flagged), steps)
    logger.info(
        "MPC: %s/%s %d steps, power %.4f kWh/m2, discomfort %.3f Kh",
        model.kind, solver, steps, report.total_power, report.discomfort,
    )
    return EpisodeResult(
        trajectory=trajectory,
        outcome=outcome,
        solves=solves,
        costs=np.asarray(costs, dtype=np.float64),
        iterations=np.asarray(iterations, dtype=np.int64),
        solve_ms=np.asarray(solve_ms, dtype=np.float64),
        flagged_steps=flagged,
        kpi=report,
    )


def save_episode(path: str | Path, episode: EpisodeResult) -> None:
    """Episode CSV t_sec,x_*,u_*,d_*,cost,iters,solve_ms."""
    tr = episode.trajectory
    frame = pd.DataFrame({"t_sec": tr.t})
    for name, block in (("x", tr.x), ("u", tr.u), ("d", tr.d)):
        for i in range(block.shape[1]):
            frame[f"{name}_{i}"] = block[:, i]
    frame["cost"] = episode.costs
    frame["iters"] = episode.iterations
    frame["solve_ms"] = episode.solve_ms
    frame.to_csv(path, index=False, float_format=FLOAT_FORMAT)
