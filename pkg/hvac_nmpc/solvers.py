from __future__ import annotations

import logging
import time
from dataclasses import dataclass, field
from typing import Callable, Protocol

import numpy as np
from scipy.optimize import minimize

from hvac_nmpc.config import MpcConfig
from hvac_nmpc.errors import ConfigError, ContractError, NumericDomainError, SolverError
from hvac_nmpc.optim import Adam

logger = logging.getLogger(__name__)


class BoxProblem(Protocol):
    """Anything with a per-entry box and a differentiable scalar cost over (H, n_u) plans."""
    u_lower: np.ndarray
    u_upper: np.ndarray

    def evaluate(self, plan: np.ndarray) -> float: ...

    def value_and_grad(self, plan: np.ndarray) -> tuple[float, np.ndarray]: ...


@dataclass(frozen=True)
class SolveResult:
    plan: np.ndarray
    cost: float
    iterations: int
    wall_time: float
    converged: bool
    cost_trace: list[float] = field(default_factory=list)
    initial_plan: np.ndarray | None = None
    message: str = ""


class _BoxScaling:
    """u = lower + s * (upper - lower), s in [0, 1]. Returned plans are always clipped onto the raw box."""

    def __init__(self, problem: BoxProblem) -> None:
        self.lower = np.asarray(problem.u_lower, dtype=np.float64)
        self.upper = np.asarray(problem.u_upper, dtype=np.float64)
        if self.lower.shape != self.upper.shape or np.any(self.lower > self.upper):
            raise ContractError("solver: control box must satisfy lower <= upper elementwise")
        self.span = self.upper - self.lower
        self.shape = self.lower.shape

    def to_s(self, u: np.ndarray) -> np.ndarray:
        u = np.clip(np.asarray(u, dtype=np.float64).reshape(self.shape), self.lower, self.upper)
        safe = np.where(self.span > 0, self.span, 1.0)
        return np.where(self.span > 0, (u - self.lower) / safe, 0.0)

    def to_u(self, s: np.ndarray) -> np.ndarray:
        return np.clip(self.lower + np.clip(s, 0.0, 1.0) * self.span, self.lower, self.upper)


def _guarded(problem: BoxProblem) -> tuple[Callable[[np.ndarray, int], tuple[float, np.ndarray]], Callable[[np.ndarray, int], float]]:
    def value_and_grad(u: np.ndarray, iteration: int) -> tuple[float, np.ndarray]:
        try:
            value, grad = problem.value_and_grad(u)
        except NumericDomainError as e:
            raise SolverError(f"non-finite cost or gradient: {e}", iteration=iteration) from e
        if not np.isfinite(value) or not np.all(np.isfinite(grad)):
            raise SolverError("non-finite cost or gradient", iteration=iteration)
        return float(value), np.asarray(grad, dtype=np.float64)

    def evaluate(u: np.ndarray, iteration: int) -> float:
        try:
            value = float(problem.evaluate(u))
        except NumericDomainError as e:
            raise SolverError(f"non-finite cost: {e}", iteration=iteration) from e
        if not np.isfinite(value):
            raise SolverError("non-finite cost", iteration=iteration)
        return value

    return value_and_grad, evaluate


def _check_init(init: np.ndarray, scaling: _BoxScaling) -> np.ndarray:
    init = np.asarray(init, dtype=np.float64)
    if init.shape != scaling.shape:
        raise ContractError(f"solver: initial plan has shape {init.shape}, expected {scaling.shape}")
    if not np.all(np.isfinite(init)):
        raise ContractError("solver: initial plan must be finite")
    return init


def solve_gdm(problem: BoxProblem, init: np.ndarray, config: MpcConfig | None = None) -> SolveResult:
    """
    Projected gradient descent: Adam on the box-scaled plan, clipped after every update,
    for a fixed iteration budget. Returns the best plan seen.
    """
    config = config or MpcConfig()
    scaling = _BoxScaling(problem)
    init = _check_init(init, scaling)
    value_and_grad, evaluate = _guarded(problem)
    start = time.perf_counter()

    s = scaling.to_s(init)
    opt = Adam({"s": s}, lr=config.gdm_lr)
    best_cost, best_plan = float("inf"), scaling.to_u(s)
    trace: list[float] = []

    for it in range(config.gdm_iterations):
        u = scaling.to_u(s)
        value, grad = value_and_grad(u, it)
        if value < best_cost:
            best_cost, best_plan = value, u
        trace.append(best_cost)
        s = np.clip(opt.step({"s": s}, {"s": grad * scaling.span})["s"], 0.0, 1.0)

    u = scaling.to_u(s)
    final = evaluate(u, config.gdm_iterations)
    if final < best_cost:
        best_cost, best_plan = final, u
        trace.append(best_cost)

    return SolveResult(
        plan=best_plan,
        cost=best_cost,
        iterations=config.gdm_iterations,
        wall_time=time.perf_counter() - start,
        converged=True,
        cost_trace=trace,
        initial_plan=init.copy(),
        message="iteration budget reached",
    )


def _damped_bfgs(b: np.ndarray, step: np.ndarray, y: np.ndarray) -> np.ndarray:
    """Powell-damped BFGS update of a Hessian approximation; keeps it positive definite."""
    bs = b @ step
    sbs = float(step @ bs)
    if sbs <= 0:
        return np.eye(len(step))
    sy = float(step @ y)
    theta = 1.0 if sy >= 0.2 * sbs else 0.8 * sbs / (sbs - sy)
    r = theta * y + (1.0 - theta) * bs
    sr = float(step @ r)
    if sr <= 0:
        return b
    return b - np.outer(bs, bs) / sbs + np.outer(r, r) / sr


def solve_sqp(problem: BoxProblem, init: np.ndarray, config: MpcConfig | None = None) -> SolveResult:
    """
    Bound-constrained quasi-Newton (the SQP subproblem with only box constraints).
    Each iteration: gradient projection picks the active bound set, a damped-BFGS Newton step
    is taken on the free variables, and a backtracking Armijo search runs over projected points.
    Stops on the projected-gradient infinity norm, relative cost decrease, or the iteration cap.
    """
    config = config or MpcConfig()
    scaling = _BoxScaling(problem)
    init = _check_init(init, scaling)
    value_and_grad, evaluate = _guarded(problem)
    start = time.perf_counter()

    s = scaling.to_s(init).reshape(-1)
    n = s.size
    span = scaling.span.reshape(-1)

    def fg(point: np.ndarray, iteration: int) -> tuple[float, np.ndarray]:
        value, grad = value_and_grad(scaling.to_u(point.reshape(scaling.shape)), iteration)
        return value, grad.reshape(-1) * span

    f, g = fg(s, 0)
    b = np.eye(n)
    scaled = False
    trace = [f]
    converged = False
    message = "iteration limit"
    it = 0

    for it in range(1, config.sqp_max_iter + 1):
        projected = s - np.clip(s - g, 0.0, 1.0)
        if np.max(np.abs(projected), initial=0.0) < config.sqp_gtol:
            converged, message = True, "projected gradient below tolerance"
            it -= 1
            break

        active = ((s <= 0.0) & (g > 0.0)) | ((s >= 1.0) & (g < 0.0))
        free = ~active
        direction = np.zeros(n)
        try:
            direction[free] = -np.linalg.solve(b[np.ix_(free, free)], g[free])
        except np.linalg.LinAlgError:
            direction[free] = -g[free]
        if not float(g @ direction) < 0.0:
            b = np.eye(n)
            direction = np.where(free, -g, 0.0)

        accepted = None
        for candidate in (direction, np.where(free, -g, 0.0)):
            t = 1.0
            while t >= config.min_step:
                trial = np.clip(s + t * candidate, 0.0, 1.0)
                f_trial = evaluate(scaling.to_u(trial.reshape(scaling.shape)), it)
                if f_trial <= min(f, f + config.armijo_c * float(g @ (trial - s))):
                    accepted = trial
                    break
                t *= 0.5
            if accepted is not None:
                break

        if accepted is None:
            message = "line search failed"
            break

        step = accepted - s
        if not np.any(step):
            converged, message = True, "no feasible descent step"
            break

        f_new, g_new = fg(accepted, it)
        y = g_new - g
        if not scaled and float(step @ y) > 0:
            # Shanno-Phua scaling of the initial matrix before the first update.
            b = np.eye(n) * float(y @ y) / float(step @ y)
            scaled = True
        b = _damped_bfgs(b, step, y)

        decrease = f - f_new
        s, f, g = accepted, f_new, g_new
        trace.append(f)
        if decrease <= config.sqp_ftol * max(abs(f), abs(f + decrease), 1.0):
            converged, message = True, "relative cost decrease below tolerance"
            break

    plan = scaling.to_u(s.reshape(scaling.shape))
    return SolveResult(
        plan=plan,
        cost=f,
        iterations=it,
        wall_time=time.perf_counter() - start,
        converged=converged,
        cost_trace=trace,
        initial_plan=init.copy(),
        message=message,
    )


def solve_slsqp(problem: BoxProblem, init: np.ndarray, config: MpcConfig | None = None) -> SolveResult:
    """SciPy SLSQP with the AD gradient and the box passed as bounds."""
    config = config or MpcConfig()
    scaling = _BoxScaling(problem)
    init = _check_init(init, scaling)
    value_and_grad, evaluate = _guarded(problem)
    start = time.perf_counter()

    u0 = np.clip(init, scaling.lower, scaling.upper)
    f0 = evaluate(u0, 0)
    calls = {"n": 0}
    trace = [f0]

    def fun(flat: np.ndarray) -> tuple[float, np.ndarray]:
        calls["n"] += 1
        u = np.clip(flat.reshape(scaling.shape), scaling.lower, scaling.upper)
        value, grad = value_and_grad(u, calls["n"])
        return value, grad.reshape(-1)

    def callback(flat: np.ndarray) -> None:
        trace.append(evaluate(np.clip(flat.reshape(scaling.shape), scaling.lower, scaling.upper), calls["n"]))

    res = minimize(
        fun,
        u0.reshape(-1),
        jac=True,
        method="SLSQP",
        bounds=list(zip(scaling.lower.reshape(-1), scaling.upper.reshape(-1))),
        callback=callback,
        options={"maxiter": config.sqp_max_iter, "ftol": max(config.sqp_ftol, 1e-15)},
    )
    plan = np.clip(np.asarray(res.x).reshape(scaling.shape), scaling.lower, scaling.upper)
    cost = evaluate(plan, int(res.nit))
    if cost > f0:
        plan, cost = u0, f0

    return SolveResult(
        plan=plan,
        cost=cost,
        iterations=int(res.nit),
        wall_time=time.perf_counter() - start,
        converged=bool(res.success),
        cost_trace=trace,
        initial_plan=init.copy(),
        message=str(res.message),
    )


SOLVERS: dict[str, Callable[[BoxProblem, np.ndarray, MpcConfig | None], SolveResult]] = {
    "gdm": solve_gdm,
    "sqp": solve_sqp,
    "slsqp": solve_slsqp,
}


def get_solver(name: str) -> Callable[[BoxProblem, np.ndarray, MpcConfig | None], SolveResult]:
    try:
        return SOLVERS[name]
    except KeyError as e:
        raise ConfigError(f"Unknown solver '{name}'. Use one of: {', '.join(SOLVERS)}.") from e
