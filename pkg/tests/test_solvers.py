from __future__ import annotations

from dataclasses import dataclass

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from hvac_nmpc.config import MpcConfig
from hvac_nmpc.errors import ConfigError, ContractError, SolverError
from hvac_nmpc.solvers import SOLVERS, get_solver, solve_gdm, solve_slsqp, solve_sqp


@dataclass
class Quadratic:
    """f(u) = sum 0.5 q (u - c)^2 over a box."""
    q: np.ndarray
    c: np.ndarray
    u_lower: np.ndarray
    u_upper: np.ndarray

    def evaluate(self, plan: np.ndarray) -> float:
        return float(0.5 * np.sum(self.q * (plan - self.c) ** 2))

    def value_and_grad(self, plan: np.ndarray) -> tuple[float, np.ndarray]:
        return self.evaluate(plan), self.q * (plan - self.c)

    def optimum(self) -> np.ndarray:
        return np.clip(self.c, self.u_lower, self.u_upper)


@dataclass
class Rosenbrock:
    u_lower: np.ndarray
    u_upper: np.ndarray

    def evaluate(self, plan: np.ndarray) -> float:
        x, y = plan.reshape(-1)
        return float((1 - x) ** 2 + 100 * (y - x * x) ** 2)

    def value_and_grad(self, plan: np.ndarray) -> tuple[float, np.ndarray]:
        x, y = plan.reshape(-1)
        grad = np.array([-2 * (1 - x) - 400 * x * (y - x * x), 200 * (y - x * x)])
        return self.evaluate(plan), grad.reshape(plan.shape)


@dataclass
class Poisoned(Quadratic):
    def evaluate(self, plan: np.ndarray) -> float:
        return float("nan")

    def value_and_grad(self, plan: np.ndarray) -> tuple[float, np.ndarray]:
        return float("nan"), np.zeros_like(plan)


def _interior() -> Quadratic:
    return Quadratic(
        q=np.array([[2.0, 4.0]]), c=np.array([[0.3, -0.4]]), u_lower=-np.ones((1, 2)), u_upper=np.ones((1, 2))
    )


def _pushed_to_bounds() -> Quadratic:
    # Unconstrained minimum (2, 4) lies outside [0, 1]^2.
    return Quadratic(q=np.ones((1, 2)), c=np.array([[2.0, 4.0]]), u_lower=np.zeros((1, 2)), u_upper=np.ones((1, 2)))


TIGHT = MpcConfig(sqp_gtol=1e-10, sqp_ftol=0.0, sqp_max_iter=200)


# ---- SQP ----

def test_sqp_finds_an_interior_minimum():
    problem = _interior()
    result = solve_sqp(problem, np.array([[0.9, 0.9]]), TIGHT)
    assert np.allclose(result.plan, problem.optimum(), atol=1e-6)
    assert result.cost < 1e-10


def test_sqp_lands_exactly_on_active_bounds():
    problem = _pushed_to_bounds()
    result = solve_sqp(problem, np.full((1, 2), 0.5), TIGHT)
    assert np.array_equal(result.plan, np.ones((1, 2)))
    assert result.converged
    # KKT at an upper bound: the gradient points out of the box.
    _, grad = problem.value_and_grad(result.plan)
    assert np.all(grad < 0)


def test_sqp_cost_trace_never_increases():
    problem = Rosenbrock(u_lower=np.full((1, 2), -2.0), u_upper=np.full((1, 2), 2.0))
    result = solve_sqp(problem, np.array([[-1.2, 1.0]]), MpcConfig(sqp_gtol=1e-10, sqp_ftol=0.0, sqp_max_iter=500))
    assert all(b <= a for a, b in zip(result.cost_trace, result.cost_trace[1:]))
    assert np.allclose(result.plan, [[1.0, 1.0]], atol=1e-3)


def test_sqp_clips_an_infeasible_start():
    problem = _interior()
    result = solve_sqp(problem, np.array([[5.0, -5.0]]), TIGHT)
    assert np.all(result.plan >= problem.u_lower) and np.all(result.plan <= problem.u_upper)
    assert np.array_equal(result.initial_plan, [[5.0, -5.0]])


def test_sqp_stops_immediately_at_the_optimum():
    problem = _interior()
    result = solve_sqp(problem, problem.optimum(), TIGHT)
    assert result.iterations == 0 and result.converged
    assert np.allclose(result.plan, problem.optimum(), rtol=0, atol=1e-15)


# ---- GDM ----

def test_gdm_approaches_the_minimum():
    problem = _interior()
    result = solve_gdm(problem, np.zeros((1, 2)), MpcConfig())
    assert result.cost < 1e-3
    assert result.iterations == 100
    assert all(b <= a for a, b in zip(result.cost_trace, result.cost_trace[1:]))


def test_gdm_projects_onto_the_box():
    problem = _pushed_to_bounds()
    result = solve_gdm(problem, np.full((1, 2), 0.5), MpcConfig(gdm_iterations=200, gdm_lr=0.05))
    assert np.array_equal(result.plan, np.ones((1, 2)))


def test_gdm_returns_the_best_plan_seen():
    problem = _interior()
    result = solve_gdm(problem, np.zeros((1, 2)), MpcConfig(gdm_iterations=50, gdm_lr=0.2))
    assert result.cost == min(result.cost_trace)
    assert result.cost == problem.evaluate(result.plan)


# ---- shared contracts ----

@pytest.mark.parametrize("name", sorted(SOLVERS))
@given(
    c=st.lists(st.floats(-10, 10), min_size=4, max_size=4),
    init=st.lists(st.floats(-10, 10), min_size=4, max_size=4),
)
def test_plans_stay_inside_the_box(name, c, init):
    lower = np.array([[0.0, -1.0], [0.0, 0.5]])
    upper = np.array([[1.0, 1.0], [0.0, 2.0]])
    problem = Quadratic(q=np.full((2, 2), 3.0), c=np.reshape(c, (2, 2)), u_lower=lower, u_upper=upper)
    result = get_solver(name)(problem, np.reshape(init, (2, 2)), MpcConfig(gdm_iterations=20, sqp_max_iter=20))
    assert result.plan.shape == (2, 2)
    assert np.all(result.plan >= lower) and np.all(result.plan <= upper)
    assert result.plan[1, 0] == 0.0


@pytest.mark.parametrize("name", sorted(SOLVERS))
def test_solution_is_no_worse_than_the_clipped_start(name):
    problem = _interior()
    init = np.array([[-0.8, 0.7]])
    result = get_solver(name)(problem, init, MpcConfig(gdm_iterations=30, sqp_max_iter=30))
    assert result.cost <= problem.evaluate(init)


def test_slsqp_matches_the_interior_minimum():
    problem = _interior()
    result = solve_slsqp(problem, np.array([[0.9, 0.9]]), MpcConfig(sqp_ftol=1e-14))
    assert np.allclose(result.plan, problem.optimum(), atol=1e-5)


@pytest.mark.parametrize("name", sorted(SOLVERS))
def test_non_finite_cost_is_a_solver_error(name):
    base = _interior()
    problem = Poisoned(q=base.q, c=base.c, u_lower=base.u_lower, u_upper=base.u_upper)
    with pytest.raises(SolverError) as err:
        get_solver(name)(problem, np.zeros((1, 2)), MpcConfig())
    assert err.value.iteration in (0, 1)


@pytest.mark.parametrize("name", sorted(SOLVERS))
def test_initial_plan_shape_is_checked(name):
    with pytest.raises(ContractError):
        get_solver(name)(_interior(), np.zeros((2, 2)), MpcConfig())


def test_inverted_box_is_rejected():
    problem = _interior()
    problem.u_lower = np.full((1, 2), 2.0)
    with pytest.raises(ContractError):
        solve_sqp(problem, np.zeros((1, 2)), MpcConfig())


def test_unknown_solver_name():
    with pytest.raises(ConfigError, match="Unknown solver"):
        get_solver("ipopt")
