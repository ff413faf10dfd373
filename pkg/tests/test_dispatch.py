import json

import numpy as np
import pytest

from config import DISPATCH_TICKS
from dispatch import (
    DeviceSpec,
    DispatchConfig,
    PdState,
    TickState,
    allocate_tick,
    apply_update_hold,
    build_fleet,
    build_signal,
    default_device_mix,
    device_response,
    dispatch_run,
    load_devices,
    normalize_signal,
    normalized_mse,
    pd_residual,
    preprocess_measurement,
    primal_dual_step,
    push_sum_weights,
    quantize_fleet,
    quantize_setpoints,
    ratio_consensus,
    run_stage,
    simulate_fleet,
    synthetic_regd,
    tracking_metrics,
    two_stage_allocate,
)
from graph_core import build_laplacian, complete_graph, path_graph, random_connected_graph
from problems import AllocationProblem, QuadraticCost


def small_fleet_devices():
    devices = [DeviceSpec("V2G", -5.0, 5.0, 0.0, cost_weight=0.5) for _ in range(3)]
    devices += [DeviceSpec("BESS", -3.0, 3.0, 0.0, cost_weight=0.25) for _ in range(2)]
    devices.append(DeviceSpec("V1G", 1.6, 4.9, 3.25, cost_weight=2.0))
    return devices


@pytest.fixture
def fleet():
    return build_fleet(small_fleet_devices(), seed=0)


def test_signal_normalization_peak():
    regd = np.sin(np.linspace(0, 6 * np.pi, 500))
    regd /= np.abs(regd).max()
    zeros = np.zeros_like(regd)
    signal = normalize_signal(regd, zeros, zeros, np.full(10, 10.0), beta=0.75)
    assert np.abs(signal.samples).max() == pytest.approx(75.0)
    assert signal.capacity == pytest.approx(100.0)
    assert signal.ticks == 500


def test_signal_normalization_edge_cases():
    const = np.full(50, 0.5)
    zeros = np.zeros(50)
    signal = normalize_signal(const, zeros, zeros, [4.0, 6.0], beta=0.5)
    assert np.allclose(signal.samples, signal.samples[0])
    assert np.all(normalize_signal(const, zeros, zeros, [4.0, 6.0], beta=0.0).samples == 0.0)
    with pytest.raises(ValueError):
        normalize_signal(zeros, zeros, zeros, [1.0])
    with pytest.raises(ValueError):
        normalize_signal(const, zeros, zeros, [0.0])


def test_synthetic_signal_and_sources(tmp_path, rng):
    regd = synthetic_regd(600, rng)
    assert np.abs(regd).max() == pytest.approx(1.0)
    assert abs(regd.mean()) < 1e-12
    with pytest.raises(ValueError):
        synthetic_regd(1, rng)

    path = tmp_path / "regd.csv"
    path.write_text("regd,time\n" + "\n".join(f"{np.sin(t / 10.0):.6f},{t}" for t in range(100)))
    signal = build_signal(f"csv:{path}", 80, rng, [1.0, 1.0])
    assert signal.ticks == 80
    assert np.all(signal.pv == 0.0)
    with pytest.raises(ValueError):
        build_signal("weather", 10, rng, [1.0])


def test_ratio_consensus_examples():
    res = ratio_consensus([0.0, 0.0], [1.0, 3.0], 2.0, path_graph(2), tol=1e-12)
    assert np.allclose(res.p, [0.5, 1.5], atol=1e-9)
    res = ratio_consensus([0.0, 0.0, 0.0], [2.0, 2.0, 2.0], 3.0, complete_graph(3), tol=1e-12)
    assert np.allclose(res.p, [1.0, 1.0, 1.0], atol=1e-9)


def test_ratio_consensus_meets_total(rng):
    graph = random_connected_graph(20, 40, 6)
    lower = rng.uniform(-2, 0, size=20)
    upper = lower + rng.uniform(0.5, 3, size=20)
    p_ref = float(lower.sum() + 0.4 * (upper - lower).sum())
    res = ratio_consensus(lower, upper, p_ref, graph, informed=(3, 11), tol=1e-12)
    assert abs(res.p.sum() - p_ref) <= 1e-9 * max(1.0, abs(p_ref))
    assert np.all(res.p >= lower - 1e-12) and np.all(res.p <= upper + 1e-12)


def test_ratio_consensus_errors():
    with pytest.raises(ValueError):
        ratio_consensus([0.0, 0.0], [1.0, 1.0], 1.0, path_graph(2), informed=())
    with pytest.raises(ValueError):
        ratio_consensus([0.0, 0.0], [1.0, 1.0], 1.0, path_graph(3))
    with pytest.raises(RuntimeError):
        ratio_consensus(np.zeros(10), np.ones(10), 5.0, path_graph(10), tol=1e-14, max_rounds=2)


def test_ratio_consensus_rejects_zero_capacity_agent():
    with pytest.raises(ValueError, match="every agent"):
        ratio_consensus([0.0, 1.0, 0.0], [2.0, 1.0, 2.0], 2.0, path_graph(3))


def test_push_sum_weights_are_column_stochastic():
    W = push_sum_weights(random_connected_graph(12, 20, 3))
    assert np.allclose(W.sum(axis=0), 1.0)
    assert np.all(W >= 0.0)


def test_primal_dual_fixed_point_at_kkt():
    graph = path_graph(4)
    L = build_laplacian(graph)
    cost = QuadraticCost([1.0, 2.0, 0.5, 1.0], [0.0, -1.0, 0.5, 0.0])
    problem = AllocationProblem(cost, 4.0, graph, [-10.0] * 4, [10.0] * 4)
    # equal marginal cost -nu with sum 4
    nu = -(4.0 + np.sum(cost.b / cost.a)) / np.sum(1.0 / cost.a)
    p_star = (-nu - cost.b) / cost.a
    y = np.linalg.pinv(L.matrix) @ (problem.d / 4 - p_star)
    state = PdState(p_star, y, np.full(4, nu))
    nxt = primal_dual_step(state, problem, L, 0.1)
    assert np.allclose(nxt.p, state.p, atol=1e-12)
    assert np.allclose(nxt.y, state.y, atol=1e-12)
    assert np.allclose(nxt.lam, state.lam, atol=1e-12)
    assert pd_residual(state, problem, L) <= 1e-12
    assert pd_residual(PdState(p_star + 0.1, y, state.lam), problem, L) > 0.05


def test_baseline_target_keeps_devices_at_baseline(fleet):
    res = allocate_tick(float(fleet.baseline.sum()), fleet, "dana")
    assert res.converged
    assert np.allclose(res.setpoints, fleet.baseline, atol=1e-12)


@pytest.mark.parametrize("method", ["pd", "dana"])
def test_iterative_methods_match_oracle(fleet, method):
    target = float(fleet.baseline.sum() + 20.0)
    config = DispatchConfig(tick_max_rounds=200_000)
    res = allocate_tick(target, fleet, method, config=config)
    assert res.converged
    oracle = fleet.oracle(target)
    # the batteries saturate at this target
    assert np.allclose(oracle[3:5], 3.0)
    assert normalized_mse(res.setpoints, oracle) <= 1e-6
    assert abs(res.setpoints.sum() - target) <= 1e-4


@pytest.fixture(scope="module")
def full_fleet():
    return build_fleet(default_device_mix(), seed=0)


def test_dana_tick_step_comes_from_the_fleet(full_fleet):
    h = full_fleet.dana_tick_step(2)
    assert 0.0 < h <= 1.0
    assert full_fleet.dana_tick_step(2) == h
    with pytest.raises(ValueError):
        build_fleet([DeviceSpec("BESS", -3.0, 3.0, 0.0)], seed=0).dana_tick_step(2)


@pytest.mark.parametrize("method", ["pd", "dana"])
def test_saturating_tick_on_default_mix_converges(full_fleet, method):
    target = float(full_fleet.baseline.sum() + 60.0)
    res = allocate_tick(target, full_fleet, method)
    oracle = full_fleet.oracle(target)
    # the V2G chargers and the battery sit at their upper bounds
    saturated = np.isin(full_fleet.kinds, ["V2G", "BESS"])
    assert np.allclose(oracle[saturated], full_fleet.upper[saturated])
    assert res.converged
    assert normalized_mse(res.setpoints, oracle) <= 1e-6


def test_rc_matches_closed_form(fleet):
    target = float(fleet.lower.sum() + 0.3 * (fleet.upper - fleet.lower).sum())
    res = allocate_tick(target, fleet, "rc", config=DispatchConfig(rc_tol=1e-12))
    assert np.allclose(res.setpoints, fleet.closed_form(target), atol=1e-9)


def test_infeasible_tick_is_clamped_and_flagged(fleet):
    res = allocate_tick(float(fleet.upper.sum() + 5.0), fleet, "rc")
    assert res.flagged
    assert res.target < fleet.upper.sum()
    assert res.target == pytest.approx(fleet.upper.sum())
    assert not allocate_tick(float(fleet.baseline.sum()), fleet, "rc").flagged
    with pytest.raises(ValueError):
        allocate_tick(0.0, fleet, "admm")


def test_single_device_fleet_is_trivial():
    solo = build_fleet([DeviceSpec("BESS", -3.0, 3.0, 0.0)], seed=0)
    res = allocate_tick(1.25, solo, "pd")
    assert res.setpoints.tolist() == [1.25]
    assert res.rounds == 0


def test_normalized_mse_zero_reference():
    with pytest.raises(ValueError):
        normalized_mse([1.0, 2.0], [0.0, 0.0])


def test_battery_response_is_identity():
    spec = DeviceSpec("BESS", -3.0, 3.0, 0.0, update_period=1, response_delay=0)
    s = np.linspace(-2.5, 2.5, 50)
    assert np.array_equal(device_response(s, spec), s)


def test_transport_delay_is_recovered(rng):
    spec = DeviceSpec("AHU", 0.0, 2.0, 1.0, update_period=1, response_delay=105, quantization="continuous")
    setpoints = 1.0 + 0.8 * synthetic_regd(2000, rng)
    measured = device_response(setpoints, spec)
    assert np.all(measured[:105] == 1.0)
    report = tracking_metrics(measured, setpoints)
    assert abs(report.delay - 105) <= 1
    assert report.rmse_aligned <= report.rmse


def test_integer_quantization():
    spec = DeviceSpec("V1G", 0.0, 4.9, 2.0, quantization="integer")
    assert quantize_setpoints(np.array([1.4]), spec).tolist() == [1.0]
    assert quantize_setpoints(np.array([4.8]), spec).tolist() == [4.0]


def test_update_hold_with_phase():
    spec = DeviceSpec("V1G", 1.6, 4.9, 3.25, update_period=60, phase=20)
    raw = np.arange(200, dtype=float)[:, None]
    held = apply_update_hold(raw, [spec])[:, 0]
    assert np.all(held[:20] == 3.25)
    assert np.all(held[20:80] == 20.0)
    assert held[80] == 80.0
    assert held[199] == 140.0


def test_binary_group_rounding():
    ahus = [DeviceSpec("AHU", 0.0, 2.0, 1.0, quantization="binary") for _ in range(4)]
    commanded = np.array([[1.2, 1.2, 1.2, 0.4], [2.0, 0.0, 0.0, 0.0]])
    out = quantize_fleet(commanded, ahus)
    assert out[0].tolist() == [2.0, 2.0, 0.0, 0.0]
    assert out[1].tolist() == [2.0, 0.0, 0.0, 0.0]


def test_response_is_causal_and_settles():
    spec = DeviceSpec("V2G", -5.0, 5.0, 0.0, response_delay=3, time_constant=4.0)
    a = np.concatenate([np.zeros(20), np.full(200, 2.0)])
    b = a.copy()
    b[100:] = -1.0
    ra, rb = device_response(a, spec), device_response(b, spec)
    assert np.array_equal(ra[:100], rb[:100])
    assert ra[:23].max() == pytest.approx(0.0)
    assert ra[-1] == pytest.approx(2.0, abs=1e-6)


def test_simulate_fleet_shapes():
    devices = default_device_mix()
    raw = np.tile([d.baseline for d in devices], (30, 1))
    commanded, measured = simulate_fleet(raw, devices)
    assert commanded.shape == measured.shape == (30, len(devices))
    assert len(devices) == 58


def test_tracking_metrics_identity():
    target = 10.0 + np.sin(np.linspace(0, 12, 400))
    report = tracking_metrics(target, target)
    assert report.rmse == 0.0
    assert report.delay == 0
    assert report.S_c == pytest.approx(1.0)
    assert report.S_d == 1.0
    assert report.S_p == 1.0
    assert report.S == pytest.approx(1.0)


def test_tracking_metrics_precision_on_toy():
    target = np.array([1.0, 2.0, 3.0])
    report = tracking_metrics(2.0 * target, target)
    assert report.S_p == pytest.approx(0.0)


def test_tracking_metrics_errors():
    with pytest.raises(ValueError):
        tracking_metrics(np.ones(5), np.ones(5))
    with pytest.raises(ValueError):
        tracking_metrics(np.ones(4), np.arange(5.0))


def test_zero_mean_target_has_no_precision_score():
    target = np.array([1.0, -1.0, 2.0, -2.0])
    report = tracking_metrics(target, target, max_shift=1)
    assert report.rmse == 0.0
    assert report.S_c == pytest.approx(1.0)
    assert np.isnan(report.S_p)
    assert np.isnan(report.S)


def test_preprocess_constant_and_spike():
    const = np.full(200, 3.0)
    assert np.allclose(preprocess_measurement(const), const)
    spiky = np.ones(200)
    spiky[50] = 10.0
    assert np.allclose(preprocess_measurement(spiky), 1.0)
    with pytest.raises(ValueError):
        preprocess_measurement(spiky, window=0)


def test_preprocess_reduces_noise_variance(rng):
    noise = rng.standard_normal(20_000)
    out = preprocess_measurement(100.0 + noise, window=4)
    ratio = np.var(out) / np.var(noise)
    assert 0.25 * 0.7 <= ratio <= 0.25 * 1.3


def test_two_stage_without_stage_one_is_single_stage(fleet):
    regulation = 2.0 * np.sin(np.linspace(0, 3, 20))
    stages = two_stage_allocate(regulation, None, fleet, "rc")
    single = run_stage(fleet.baseline.sum() + regulation, fleet, "rc")
    assert len(stages) == 1
    assert np.allclose(stages[0].raw, single.raw)


def test_two_stage_perfect_first_stage():
    stage1 = build_fleet([DeviceSpec("BESS", -3.0, 3.0, 0.0) for _ in range(3)], seed=1)
    stage2 = build_fleet(small_fleet_devices(), seed=2)
    regulation = 4.0 * np.sin(np.linspace(0, 4, 30))
    config = DispatchConfig(rc_tol=1e-12)
    first, second = two_stage_allocate(regulation, stage1, stage2, "rc", config)
    share1 = regulation * stage1.headroom.sum() / (stage1.headroom.sum() + stage2.headroom.sum())
    assert np.allclose(first.measured.sum(axis=1), first.targets, atol=1e-9)
    assert np.allclose(second.targets, stage2.baseline.sum() + regulation - share1, atol=1e-8)


def test_two_stage_rejects_shared_devices():
    devices = small_fleet_devices()
    shared = build_fleet(devices, seed=0)
    with pytest.raises(ValueError):
        two_stage_allocate(np.zeros(5), shared, build_fleet(devices, seed=1), "rc")


def test_device_specs_from_json(tmp_path):
    path = tmp_path / "fleet.json"
    path.write_text(json.dumps([{"kind": "BESS", "lower": -3, "upper": 3, "baseline": 0, "count": 2},
                                {"kind": "AHU", "lower": 0, "upper": 2, "baseline": 1,
                                 "quantization": "binary", "update_period": 60}]))
    devices = load_devices(path)
    assert [d.kind for d in devices] == ["BESS", "BESS", "AHU"]
    assert devices[2].update_period == 60
    assert DeviceSpec.from_json(devices[2].to_json()) == devices[2]
    with pytest.raises(ValueError):
        DeviceSpec("AHU", 0.0, 2.0, 2.0)
    with pytest.raises(ValueError):
        DeviceSpec("HVAC", 0.0, 2.0, 1.0)


def small_mixed_fleet():
    devices = [DeviceSpec("AHU", 0.0, 2.0, 1.0, update_period=60, response_delay=105, quantization="binary")
               for _ in range(3)]
    devices += [DeviceSpec("V1G", 1.6, 4.9, 3.25, update_period=60, response_delay=10, quantization="integer",
                           phase=phase, cost_weight=2.0) for phase in (0, 20)]
    devices += [DeviceSpec("V2G", -5.0, 5.0, 0.0, response_delay=3, cost_weight=0.5) for _ in range(2)]
    devices.append(DeviceSpec("BESS", -3.0, 3.0, 0.0, update_period=20, cost_weight=0.25))
    return devices


def test_short_dispatch_run(rng):
    devices = small_mixed_fleet()
    signal = build_signal("synthetic", 120, rng, [d.headroom for d in devices], beta=0.5)
    result = dispatch_run(signal, devices, "rc", two_stage=True)
    assert result.converged
    assert len(result.stages) == 2
    rows = result.rows()
    assert len(rows) == 120
    assert {"t", "regulation", "target", "commanded_AHU", "measured_BESS", "provided", "nmse"} <= set(rows[0])
    summary = result.summary()
    assert summary["two_stage"] is True
    assert summary["flagged_ticks"] == 0
    assert 0.0 <= summary["S_d"] <= 1.0


def test_short_dana_dispatch_tracks_oracle(rng):
    devices = small_mixed_fleet()
    signal = build_signal("synthetic", 40, rng, [d.headroom for d in devices], beta=0.5)
    result = dispatch_run(signal, devices, "dana", config=DispatchConfig(max_shift=10, tick_max_rounds=200_000))
    assert result.converged
    assert result.summary()["nmse_max"] <= 1e-6
    assert len(result.stages) == 1
    assert np.all(result.stages[0].rounds >= 1)


def test_tick_state_warm_start(fleet):
    first = allocate_tick(float(fleet.baseline.sum() + 5.0), fleet, "dana")
    again = allocate_tick(float(fleet.baseline.sum() + 5.0), fleet, "dana", first.state)
    assert isinstance(again.state, TickState)
    assert again.rounds < first.rounds


@pytest.mark.slow
@pytest.mark.parametrize("method, bound", [("rc", 1e-12), ("pd", 1e-5), ("dana", 1e-5)])
def test_full_length_ticks_match_oracle_on_default_mix(method, bound):
    devices = default_device_mix()
    signal = build_signal("synthetic", DISPATCH_TICKS, np.random.default_rng(0), [d.headroom for d in devices])
    result = dispatch_run(signal, devices, method)
    summary = result.summary()
    assert summary["flagged_ticks"] == 0
    assert summary["capped_ticks"] == 0
    assert result.converged
    assert summary["nmse_max"] <= bound


@pytest.mark.slow
def test_two_stage_beats_single_stage_over_paired_seeds():
    devices = default_device_mix()
    capacities = [d.headroom for d in devices]
    wins = 0
    for seed in range(20):
        signal = build_signal("synthetic", 600, np.random.default_rng(seed), capacities)
        single = dispatch_run(signal, devices, "rc", graph_seed=seed)
        staged = dispatch_run(signal, devices, "rc", two_stage=True, graph_seed=seed)
        wins += staged.report.rmse <= single.report.rmse
    assert wins >= 18
