import numpy as np
import pytest

from discrn import (
    DiscrnConfig,
    InnerSolverConfig,
    NestedProblem,
    NoiseModel,
    Submodel,
    batch_size_bound,
    build_submodel,
    dgd_subsolver,
    discrn_run,
    eta_bounds,
    inner_flow_step,
    inner_stop_check,
    mixing_step,
    plateau_iteration,
    pt_inverse,
    sampled_objective,
    solve_inner,
    subsolver_condition_check,
)
from graph_core import build_laplacian, complete_graph, path_graph, random_connected_graph
from problems import ShiftedQuadraticCost, ev_example_costs, inner_kkt_solution, make_discrn_costs


def constant_cost(alpha, beta):
    """Inner costs alpha_i p^2 / 2 + beta_i p that do not depend on x."""
    return ShiftedQuadraticCost([[a] for a in alpha], [[b] for b in beta])


def test_pt_inverse_on_diagonal():
    out = pt_inverse(np.diag([2.0, -1.0, 0.05]), 0.1)
    assert np.allclose(out, np.diag([0.5, 1.0, 10.0]))


def test_pt_inverse_matches_inverse_when_well_conditioned(rng):
    B = rng.standard_normal((5, 5))
    A = B @ B.T + 2.0 * np.eye(5)
    assert np.allclose(pt_inverse(A, 0.5), np.linalg.inv(A))


def test_pt_inverse_spectrum(rng):
    m = 0.2
    for _ in range(20):
        B = rng.standard_normal((8, 8))
        out = pt_inverse(B + B.T, m)
        assert np.allclose(out, out.T, atol=1e-12)
        vals = np.linalg.eigvalsh(out)
        assert vals.min() > 0.0
        assert vals.max() <= 1.0 / m + 1e-9
    with pytest.raises(ValueError):
        pt_inverse(np.eye(2), 0.0)


def test_flow_is_stationary_under_uniform_gradient():
    cost = constant_cost([1.0, 1.0, 1.0], [-1.0, -2.0, -3.0])
    L = build_laplacian(path_graph(3))
    p = np.array([2.0, 3.0, 4.0])
    assert np.allclose(inner_flow_step(p, np.zeros(3), cost, L, 0.3), p)


def test_flow_conserves_sum_and_reaches_equal_marginals():
    cost = constant_cost([1.0, 1.0], [-1.0, -5.0])
    L = build_laplacian(complete_graph(2))
    bounds = eta_bounds(1.0, 1.0, L.lambda2, L.lambda_n)
    p = np.array([4.0, 0.0])
    for _ in range(50):
        nxt = inner_flow_step(p, np.zeros(2), cost, L, 0.5 * bounds.eta_asym)
        assert abs(nxt.sum() - p.sum()) <= 1e-12 * 4.0
        p = nxt
    # p_i - m_i equal across agents with the sum held at 4
    assert np.allclose(p, [0.0, 4.0], atol=1e-9)


def test_stop_check_basic_cases():
    p = np.array([1.0, 2.0, 3.0])
    assert inner_stop_check(p, p, 0.1, 0.5, 1.0, 1.0, 3)
    bumped = p.copy()
    bumped[1] += 1.0
    assert not inner_stop_check(p, bumped, 0.1, 0.5, 1.0, 1.0, 3)


def test_stop_rule_certifies_inner_accuracy():
    rng = np.random.default_rng(99)
    for trial in range(100):
        n = int(rng.integers(3, 9))
        graph = random_connected_graph(n, min(2 * n, n * (n - 1) // 2), trial)
        alpha = rng.uniform(1.0, 3.0, size=n)
        beta = rng.uniform(-2.0, 2.0, size=n)
        problem = NestedProblem(constant_cost(alpha, beta), 10.0, NoiseModel("uniform", 0.0, 1.5), graph)
        offsets = problem.sample_offsets(rng, 1)[:, 0]
        delta = float(rng.choice([0.1, 0.01]))
        out = solve_inner(problem, np.zeros(n), offsets, build_laplacian(graph), InnerSolverConfig(delta))
        assert out.stopped.all()
        p_star = inner_kkt_solution(alpha, beta, 10.0 + offsets.sum())
        assert np.linalg.norm(out.p[:, 0] - p_star) <= delta
        assert out.p[:, 0].sum() == pytest.approx(10.0 + offsets.sum(), abs=1e-9)


def test_eta_bounds_on_two_nodes():
    b = eta_bounds(1.0, 1.0, 2.0, 2.0)
    assert b.eta_asym == pytest.approx(1.0)
    assert b.eta_rate == pytest.approx(1.0)
    assert b.rate == pytest.approx(0.0)
    assert b.iterations(0.1, 5.0) == 1
    assert b.iterations(0.1, 0.05) == 0
    with pytest.raises(ValueError):
        eta_bounds(0.0, 1.0, 2.0, 2.0)


def test_eta_iteration_count_formula():
    b = eta_bounds(1.0, 2.0, 1.0, 4.0)
    expected = int(np.ceil(np.log(0.01 / 3.0) / np.log(np.sqrt(1 - (1.0 / 8.0) ** 2))))
    assert b.iterations(0.01, 3.0) == expected


def test_submodel_matches_base_value_at_anchor(rng):
    cost, _ = make_discrn_costs(6, rng)
    x_k = np.full(6, 0.4)
    p = rng.uniform(0.0, 2.0, size=(6, 4))
    for kind in ("cubic", "gradient", "newton"):
        model = build_submodel(x_k, p, cost, kind)
        assert model.value(x_k) == pytest.approx(sampled_objective(cost, x_k, p))


def test_submodel_gradient_matches_finite_differences(rng):
    cost, _ = make_discrn_costs(5, rng)
    x_k = rng.uniform(-1, 1, size=5)
    p = rng.uniform(0.0, 2.0, size=(5, 3))
    step = 1e-6
    for kind in ("cubic", "gradient", "newton"):
        model = build_submodel(x_k, p, cost, kind, rho=7.0)
        x = x_k + rng.uniform(-0.5, 0.5, size=5)
        fd = np.array([(model.value(x + step * e) - model.value(x - step * e)) / (2 * step) for e in np.eye(5)])
        assert np.allclose(model.grad(x), fd, rtol=1e-5, atol=1e-5)


def test_submodel_errors():
    cost = ev_example_costs()
    with pytest.raises(ValueError):
        build_submodel(np.zeros(2), np.zeros((2, 0)), cost, "cubic")
    with pytest.raises(ValueError):
        build_submodel(np.zeros(2), np.zeros((2, 1)), cost, "trust_region")


def test_deterministic_gradient_matches_envelope():
    cost = ev_example_costs()
    problem = NestedProblem(cost, 0.0, [NoiseModel("point", 1.5), NoiseModel("point", 0.0)], path_graph(2))
    x = np.array([0.3, 0.3])
    L = build_laplacian(problem.graph)
    inner = solve_inner(problem, x, problem.sample_offsets(np.random.default_rng(0), 1), L,
                        InnerSolverConfig(1e-8))
    p_star = inner_kkt_solution(cost.alpha(x), cost.beta(x), 1.5)
    model = build_submodel(x, inner.p, cost, "cubic")
    assert np.allclose(model.g, cost.grad_x(x, p_star), atol=1e-6)


def test_mixing_keeps_consensus():
    L = build_laplacian(random_connected_graph(7, 12, 1))
    assert np.allclose(mixing_step(np.full(7, 3.0), L), 3.0)


def test_dgd_fixed_point_when_gradient_vanishes():
    model = Submodel("newton", np.full(4, 1.5), np.zeros(4), np.ones(4), np.ones(4), 0.0)
    out = dgd_subsolver(model, build_laplacian(path_graph(4)), rounds=100)
    assert np.allclose(out.x, 1.5)


def test_dgd_reaches_scalar_cubic_minimizer():
    model = Submodel("cubic", np.zeros(2), np.full(2, -3.0), np.full(2, 2.0), np.full(2, 6.0), 0.0)
    grid = np.linspace(-2.0, 2.0, 400_001)
    values = -3.0 * grid + grid ** 2 + np.abs(grid) ** 3
    best = grid[np.argmin(values)]
    out = dgd_subsolver(model, build_laplacian(complete_graph(2)))
    assert np.allclose(out.x, best, atol=1e-2)
    assert out.model_end < out.model_start


def test_condition_check():
    model = Submodel("gradient", np.zeros(3), np.ones(3), np.zeros(3), np.ones(3), 0.0)
    x_k = np.zeros(3)
    assert not subsolver_condition_check(x_k, x_k, model, 1e-3, 1e-3, 1.0)
    assert subsolver_condition_check(x_k, np.full(3, -0.5), model, 1e-3, 1e-3, 1.0)
    assert not subsolver_condition_check(x_k, np.array([-1.0, 0.0, -0.5]), model, 1e-3, 1e-3, 1.0)


def test_batch_size_bound_is_monotone():
    base = dict(M1=1.0, sigma1=0.5, M2=1.0, sigma2=0.5, rho=10.0, zeta=0.1)
    assert batch_size_bound(c_bar=0.1, eps=0.01, **base) >= batch_size_bound(c_bar=0.2, eps=0.01, **base)
    assert batch_size_bound(c_bar=0.1, eps=0.01, **base) >= batch_size_bound(c_bar=0.1, eps=0.02, **base)
    with pytest.raises(ValueError):
        batch_size_bound(c_bar=0.0, eps=0.01, **base)


def test_plateau_iteration():
    assert plateau_iteration([10.0, 5.0, 2.0, 1.0, 1.0, 1.0, 1.0, 1.0, 1.0, 1.0]) == 3
    assert plateau_iteration([2.0] * 5) == 0
    assert plateau_iteration([]) is None


def test_noise_models():
    rng = np.random.default_rng(0)
    assert np.all(NoiseModel.from_spec(("point", 1.5)).sample(rng, 4) == 1.5)
    draws = NoiseModel.from_spec(("uniform", 0.0, 1.5)).sample(rng, 1000)
    assert draws.min() >= 0.0 and draws.max() <= 1.5
    with pytest.raises(ValueError):
        NoiseModel("gaussian", 0.0, 1.0)
    with pytest.raises(ValueError):
        DiscrnConfig(method="lbfgs")


def test_ev_run_stays_consensual():
    problem = NestedProblem(ev_example_costs(), 0.0, [NoiseModel("point", 1.5), NoiseModel("point", 0.0)],
                            path_graph(2))
    config = DiscrnConfig(method="cubic", outer_iters=5, x0=0.0, batch=1, subsolver_rounds=2000,
                          eval_realizations=10)
    out = discrn_run(problem, config, np.random.default_rng(3))
    assert len(out.rows) == 5
    assert all(np.isfinite(r["empirical_F"]) for r in out.rows)
    assert all(r["disagreement"] <= 1e-6 * max(1.0, np.linalg.norm(out.x)) for r in out.rows)
    assert out.rows[-1]["empirical_F"] <= out.rows[0]["empirical_F"] + 1e-9
