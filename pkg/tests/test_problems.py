import numpy as np
import pytest

from graph_core import path_graph
from problems import (
    AllocationProblem,
    BinaryQuadraticCost,
    QuadraticCost,
    SinusoidalQuadraticCost,
    active_set_oracle,
    ev_example_costs,
    feasible_initializer,
    hessian_bounds,
    inner_kkt_solution,
    make_discrn_costs,
    random_sinusoidal_cost,
    solve_allocation_oracle,
)


def central_diff(fn, x, step=1e-5):
    return (fn(x + step) - fn(x - step)) / (2 * step)


def test_quadratic_hessian_is_constant():
    cost = QuadraticCost([1.0], [0.0])
    for x in (-3.0, 0.0, 7.5):
        assert cost.hess(np.array([x]))[0] == 1.0


def test_sinusoidal_hessian_formula():
    cost = SinusoidalQuadraticCost([2.0], [0.0], [1.0], [0.0])
    assert cost.hess(np.array([0.0]))[0] == pytest.approx(2.0)
    assert cost.hess(np.array([np.pi / 2]))[0] == pytest.approx(1.0)


def test_catalog_derivatives_match_finite_differences(rng):
    cost = random_sinusoidal_cost(1000, rng)
    x = rng.uniform(-5, 5, size=1000)
    assert np.allclose(cost.grad(x), central_diff(cost.value, x), rtol=1e-5, atol=1e-6)
    assert np.allclose(cost.hess(x), central_diff(cost.grad, x), rtol=1e-5, atol=1e-6)

    quad = QuadraticCost(rng.uniform(0.5, 3, 50), rng.uniform(-2, 2, 50))
    y = rng.uniform(-5, 5, size=50)
    assert np.allclose(quad.grad(y), central_diff(quad.value, y), rtol=1e-5, atol=1e-6)


def test_shifted_quadratic_outer_derivatives(rng):
    cost, _ = make_discrn_costs(5, rng)
    x = rng.uniform(-1.5, 1.5, size=5)
    p = rng.uniform(-2, 2, size=5)
    gx = central_diff(lambda t: cost.value(t, p), x)
    hx = central_diff(lambda t: cost.grad_x(t, p), x)
    assert np.allclose(cost.grad_x(x, p), gx, rtol=1e-5, atol=1e-6)
    assert np.allclose(cost.hess_x(x, p), hx, rtol=1e-5, atol=1e-5)
    assert np.allclose(cost.grad_p(x, p), central_diff(lambda q: cost.value(x, q), p), rtol=1e-5, atol=1e-6)


def test_shifted_quadratic_needs_inner_argument():
    with pytest.raises(TypeError):
        ev_example_costs().value(np.zeros(2))


def test_discrn_alpha_minimum_matches_omega(rng):
    cost, omega = make_discrn_costs(4, rng)
    grid = np.linspace(-2.5, 2.5, 20001)
    for i in range(4):
        vals = np.polynomial.polynomial.polyval(grid, cost.alpha_coef[i])
        assert vals.min() == pytest.approx(omega[i], abs=1e-5)


def test_ev_costs_expand_squares():
    cost = ev_example_costs()
    x = np.array([0.3, -1.2])
    p = np.array([0.7, 2.1])
    expected = np.array([(2 * x[0] + p[0] - 1) ** 2, (x[1] + p[1] - 2) ** 2])
    assert np.allclose(cost.value(x, p), expected)


def test_binary_cost_increment():
    cost = BinaryQuadraticCost.from_increments([2.0, 4.0], [1.5, -0.5])
    assert np.allclose(cost.value(np.ones(2)) - cost.value(np.zeros(2)), [1.5, -0.5])
    assert np.allclose(cost.increments, [1.5, -0.5])


def test_hessian_bounds_examples():
    b = hessian_bounds(QuadraticCost([3.0]))
    assert (b.delta[0], b.Delta[0]) == (3.0, 3.0)
    b = hessian_bounds(SinusoidalQuadraticCost([3.0], [0.0], [1.0], [0.0]))
    assert (b.delta[0], b.Delta[0]) == (2.0, 4.0)
    with pytest.raises(TypeError):
        hessian_bounds(BinaryQuadraticCost([1.0], [0.5]))


def test_hessian_bounds_are_sound(rng):
    cost = random_sinusoidal_cost(30, rng)
    bounds = hessian_bounds(cost)
    for x in np.linspace(-10, 10, 401):
        h = cost.hess(np.full(30, x))
        assert np.all(h >= bounds.delta - 1e-9)
        assert np.all(h <= bounds.Delta + 1e-9)


def test_global_bounds_fallback():
    b = hessian_bounds(QuadraticCost([1.0, 2.0, 5.0])).global_bounds()
    assert np.all(b.delta == 1.0)
    assert np.all(b.Delta == 5.0)


def test_cost_validation():
    with pytest.raises(ValueError):
        QuadraticCost([1.0, 0.0])
    with pytest.raises(ValueError):
        SinusoidalQuadraticCost([1.0], [0.0], [1.0], [0.0])


def test_feasible_initializer_modes():
    problem = AllocationProblem(QuadraticCost(np.ones(4)), 8.0)
    assert np.array_equal(feasible_initializer(problem, "uniform"), [2.0, 2.0, 2.0, 2.0])
    problem = AllocationProblem(QuadraticCost(np.ones(3)), 6.0)
    assert np.array_equal(feasible_initializer(problem, "single_agent"), [6.0, 0.0, 0.0])
    with pytest.raises(ValueError):
        feasible_initializer(problem, "random")


def test_feasible_initializer_large_preset():
    problem = AllocationProblem(QuadraticCost(np.full(100, 2.0)), 200.0)
    assert np.array_equal(feasible_initializer(problem), np.full(100, 2.0))


def test_box_feasibility_is_strict():
    cost = QuadraticCost(np.ones(2))
    with pytest.raises(ValueError):
        AllocationProblem(cost, 2.0, lower=[0.0, 0.0], upper=[1.0, 1.0])
    with pytest.raises(ValueError):
        AllocationProblem(cost, 1.0, lower=[0.0, 0.0])
    with pytest.raises(ValueError):
        AllocationProblem(cost, 1.0, graph=path_graph(3))


def test_problem_json_interchange(three_node_problem):
    restored = AllocationProblem.from_json(three_node_problem.to_json())
    assert restored.d == three_node_problem.d
    assert restored.graph == three_node_problem.graph
    assert np.array_equal(restored.lower, three_node_problem.lower)
    assert np.array_equal(restored.cost.a, three_node_problem.cost.a)


def test_oracle_unconstrained_equal_costs():
    sol = active_set_oracle(np.ones(4), np.zeros(4), 8.0)
    assert np.allclose(sol.x, 2.0)
    assert sol.nu == pytest.approx(-2.0)


def test_oracle_three_node_kkt(three_node_problem):
    p = three_node_problem
    sol = solve_allocation_oracle(p)
    assert sol.x.sum() == pytest.approx(6.0, abs=1e-10)
    assert np.all(sol.x >= p.lower - 1e-12) and np.all(sol.x <= p.upper + 1e-12)
    stationarity = p.cost.grad(sol.x) + sol.nu - sol.lam_lower + sol.lam_upper
    assert np.allclose(stationarity, 0.0, atol=1e-9)
    assert np.all(sol.lam >= 0.0)
    # complementary slackness
    assert np.allclose(sol.lam_lower * (sol.x - p.lower), 0.0, atol=1e-9)
    assert np.allclose(sol.lam_upper * (p.upper - sol.x), 0.0, atol=1e-9)


def test_oracle_rejects_infeasible_total():
    with pytest.raises(ValueError):
        active_set_oracle(np.ones(2), np.zeros(2), 5.0, [0.0, 0.0], [1.0, 1.0])


def test_inner_kkt_solution_sums_to_total():
    alpha = np.array([1.0, 2.0, 4.0])
    beta = np.array([0.5, -1.0, 0.0])
    p = inner_kkt_solution(alpha, beta, 3.0)
    assert p.sum() == pytest.approx(3.0)
    marginal = alpha * p + beta
    assert np.allclose(marginal, marginal[0])
    batch = inner_kkt_solution(alpha, beta, np.array([0.0, 3.0]))
    assert batch.shape == (3, 2)
    assert np.allclose(batch[:, 1], p)
