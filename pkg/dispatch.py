"""
Frequency-regulation tracking over a simulated fleet of heterogeneous devices.

Each 1 Hz tick solves min sum f_i(p_i) s.t. sum p_i = P_ref(t), lower <= p <= upper
with ratio-consensus, primal-dual dynamics or DANA; devices then hold, quantize,
delay and low-pass their setpoints before the measured total is scored.
"""
import json
import time
from dataclasses import dataclass, replace
from pathlib import Path
from typing import Dict, List, NamedTuple, Optional, Sequence, Tuple, Union

import numpy as np
import pandas as pd
from scipy.linalg import eigh
from scipy.ndimage import uniform_filter1d
from scipy.signal import lfilter

from config import (
    DANA_DEFAULT_Q,
    DISPATCH_DANA_STEP,
    DISPATCH_DELAY_REFERENCE,
    DISPATCH_EDGE_FACTOR,
    DISPATCH_FILTER_WINDOW,
    DISPATCH_MAX_SHIFT,
    DISPATCH_OUTLIER_FRAC,
    DISPATCH_PD_STEP,
    DISPATCH_RC_MAX_ROUNDS,
    DISPATCH_RC_TOL,
    DISPATCH_RESIDUAL_EVERY,
    DISPATCH_SIGNAL_BETA,
    DISPATCH_TICK_MAX_ROUNDS,
    DISPATCH_TICK_TOL,
    DISPATCH_V1G_PHASES,
)
from dana import PrimalDualState, aq_matrix, dana_c_residual, dana_c_step, laplacian_op
from graph_core import Graph, LaplacianMatrix, SynchronousNetwork, build_laplacian, is_connected, random_connected_graph, ring_graph
from problems import AllocationProblem, QuadraticCost, active_set_oracle, hessian_bounds
from utils import progress, verbose_log
from weight_design import EpsilonReport, scaled_laplacian_for

DEVICE_KINDS = ("AHU", "V1G", "V2G", "BESS")
QUANTIZATIONS = ("binary", "integer", "continuous")
METHODS = ("rc", "pd", "dana")


@dataclass
class DeviceSpec:
    """
    One controllable device. Setpoints and bounds are kW; periods, phases,
    delays and time constants are seconds on the 1 Hz tick grid.
    cost_weight scales the quadratic cost curvature relative to the headroom.
    """
    kind: str
    lower: float
    upper: float
    baseline: float
    update_period: int = 1
    response_delay: int = 0
    quantization: str = "continuous"
    phase: int = 0
    time_constant: float = 0.0
    cost_weight: float = 1.0

    def __post_init__(self):
        if self.kind not in DEVICE_KINDS:
            raise ValueError(f"Unknown device kind '{self.kind}' (expected one of {DEVICE_KINDS})")
        if self.quantization not in QUANTIZATIONS:
            raise ValueError(f"Unknown quantization '{self.quantization}'")
        if not self.lower < self.upper:
            raise ValueError(f"{self.kind}: lower={self.lower} must be below upper={self.upper}")
        if not self.lower < self.baseline < self.upper:
            raise ValueError(f"{self.kind}: baseline={self.baseline} must lie strictly inside the box")
        if self.update_period < 1:
            raise ValueError(f"{self.kind}: update_period must be >= 1, got {self.update_period}")
        if self.response_delay < 0 or self.phase < 0 or self.time_constant < 0:
            raise ValueError(f"{self.kind}: delay, phase and time constant must be nonnegative")
        if self.cost_weight <= 0:
            raise ValueError(f"{self.kind}: cost_weight must be positive")

    @property
    def headroom(self) -> float:
        return min(self.upper - self.baseline, self.baseline - self.lower)

    @property
    def rating(self) -> float:
        return self.upper - self.lower

    def to_json(self) -> Dict:
        return {"kind": self.kind, "lower": self.lower, "upper": self.upper, "baseline": self.baseline,
                "update_period": self.update_period, "response_delay": self.response_delay,
                "quantization": self.quantization, "phase": self.phase,
                "time_constant": self.time_constant, "cost_weight": self.cost_weight}

    @classmethod
    def from_json(cls, payload: Dict) -> "DeviceSpec":
        return cls(**payload)


def default_device_mix() -> List[DeviceSpec]:
    """
    34 AHUs, 17 V1G chargers in three staggered update groups, 6 V2G
    chargers and one battery.
    """
    devices = [DeviceSpec("AHU", 0.0, 2.0, 1.0, update_period=60, response_delay=105,
                          quantization="binary", cost_weight=1.0) for _ in range(34)]
    for k in range(17):
        devices.append(DeviceSpec("V1G", 1.6, 4.9, 3.25, update_period=60, response_delay=10,
                                  quantization="integer", phase=DISPATCH_V1G_PHASES[k % len(DISPATCH_V1G_PHASES)],
                                  cost_weight=2.0))
    devices += [DeviceSpec("V2G", -5.0, 5.0, 0.0, update_period=1, response_delay=3, cost_weight=0.5)
                for _ in range(6)]
    devices.append(DeviceSpec("BESS", -3.0, 3.0, 0.0, update_period=20, response_delay=0, cost_weight=0.25))
    return devices


def load_devices(path: Path) -> List[DeviceSpec]:
    """
    JSON list of device objects; an optional "count" field repeats an entry.
    """
    payload = json.loads(Path(path).read_text())
    if not isinstance(payload, list):
        raise ValueError(f"{path}: expected a JSON list of devices")
    devices = []
    for entry in payload:
        entry = dict(entry)
        count = int(entry.pop("count", 1))
        devices.extend(DeviceSpec.from_json(entry) for _ in range(count))
    return devices


# Signals


@dataclass
class RegulationSignal:
    """
    samples: the scaled regulation request P_ref(t) in kW, one value per tick.
    source: regd + pv - load normalized to [-1, 1].
    """
    samples: np.ndarray
    source: np.ndarray
    regd: np.ndarray
    pv: np.ndarray
    load: np.ndarray
    beta: float
    capacity: float

    @property
    def ticks(self) -> int:
        return len(self.samples)


def normalize_signal(regd, pv, load, capacities, beta: float = DISPATCH_SIGNAL_BETA) -> RegulationSignal:
    """
    P_ref = beta * sum(capacities) / ||s||_inf * s with s = regd + pv - load.
    """
    regd, pv, load = (np.asarray(v, dtype=float) for v in (regd, pv, load))
    if not (regd.shape == pv.shape == load.shape) or regd.ndim != 1:
        raise ValueError("regd, pv and load must be 1-D streams of equal length")
    capacities = np.asarray(capacities, dtype=float)
    if np.any(capacities <= 0):
        raise ValueError("capacities must be positive")
    s = regd + pv - load
    peak = float(np.max(np.abs(s))) if s.size else 0.0
    if peak == 0.0:
        raise ValueError("regulation source has zero sup-norm")
    capacity = float(np.sum(capacities))
    source = s / peak
    return RegulationSignal(beta * capacity * source, source, regd, pv, load, float(beta), capacity)


def synthetic_regd(ticks: int, rng: np.random.Generator, components: int = 8,
                   period_range: Tuple[float, float] = (30.0, 600.0), noise: float = 0.05) -> np.ndarray:
    """
    Zero-mean sum of sinusoids with periods in period_range plus white noise,
    scaled so that max |x| = 1.
    """
    if ticks < 2:
        raise ValueError(f"synthetic RegD needs at least 2 ticks, got {ticks}")
    t = np.arange(ticks)
    periods = rng.uniform(*period_range, size=components)
    phases = rng.uniform(0.0, 2 * np.pi, size=components)
    amps = rng.uniform(0.2, 1.0, size=components)
    x = np.sum(amps[:, None] * np.sin(2 * np.pi * t / periods[:, None] + phases[:, None]), axis=0)
    x = x + noise * rng.standard_normal(ticks)
    x -= x.mean()
    return x / np.max(np.abs(x))


def synthetic_passive(ticks: int, rng: np.random.Generator, smooth: int = 20) -> Tuple[np.ndarray, np.ndarray]:
    """
    Slow PV output and building load on the same normalized scale as RegD,
    passed through a smooth-second moving average.
    """
    t = np.arange(ticks)
    pv = 0.2 + 0.05 * np.sin(2 * np.pi * t / max(2 * ticks, 1) + rng.uniform(0, 2 * np.pi))
    pv = pv + 0.02 * rng.standard_normal(ticks)
    load = 0.15 + 0.03 * np.sin(2 * np.pi * t / 900.0 + rng.uniform(0, 2 * np.pi))
    load = load + 0.01 * rng.standard_normal(ticks)
    pv = uniform_filter1d(np.clip(pv, 0.0, 1.0), size=smooth, mode="nearest")
    load = uniform_filter1d(np.clip(load, 0.0, 1.0), size=smooth, mode="nearest")
    return pv, load


def load_signal_csv(path: Path, column: Optional[str] = None, source_hz: float = 1.0) -> np.ndarray:
    """
    Reads one column of a RegD CSV (the first numeric one by default) and
    interpolates it onto a 1 Hz grid.
    """
    frame = pd.read_csv(path)
    if column is None:
        numeric = frame.select_dtypes("number").columns
        if len(numeric) == 0:
            raise ValueError(f"{path}: no numeric column")
        column = numeric[0]
    elif column not in frame.columns:
        raise ValueError(f"{path}: no column '{column}'")
    values = frame[column].to_numpy(dtype=float)
    if source_hz != 1.0:
        src = np.arange(len(values)) / source_hz
        values = np.interp(np.arange(0.0, src[-1] + 1e-9, 1.0), src, values)
    verbose_log(f"📂 loaded {len(values)} RegD samples from {path}")
    return values


def build_signal(kind: str, ticks: int, rng: np.random.Generator, capacities,
                 beta: float = DISPATCH_SIGNAL_BETA) -> RegulationSignal:
    """
    kind is "synthetic" or "csv:PATH"; a CSV source carries no PV or load.
    """
    if kind == "synthetic":
        regd = synthetic_regd(ticks, rng)
        pv, load = synthetic_passive(ticks, rng)
    elif kind.startswith("csv:"):
        regd = load_signal_csv(Path(kind[4:]))[:ticks]
        pv = load = np.zeros_like(regd)
    else:
        raise ValueError(f"Unknown signal source '{kind}' (expected synthetic or csv:PATH)")
    return normalize_signal(regd, pv, load, capacities, beta)


# Fleet


class DeviceFleet:
    """
    Devices on a communication graph with quadratic costs centered at the
    baselines, a_i = cost_weight_i / headroom_i.
    """

    def __init__(self, devices: Sequence[DeviceSpec], graph: Graph):
        if graph.n != len(devices):
            raise ValueError(f"Graph has {graph.n} nodes for {len(devices)} devices")
        if graph.n > 1 and not is_connected(graph):
            raise ValueError("Fleet communication graph must be connected")
        self.devices = list(devices)
        self.graph = graph
        self.kinds = np.array([d.kind for d in devices])
        self.lower = np.array([d.lower for d in devices])
        self.upper = np.array([d.upper for d in devices])
        self.baseline = np.array([d.baseline for d in devices])
        self.headroom = np.array([d.headroom for d in devices])
        a = np.array([d.cost_weight for d in devices]) / self.headroom
        self.cost = QuadraticCost(a, -a * self.baseline)
        self.L = build_laplacian(graph)
        self.L_norm: Optional[LaplacianMatrix] = None
        self.L_star: Optional[LaplacianMatrix] = None
        self.eps_report: Optional[EpsilonReport] = None
        self._dana_steps: Dict[int, float] = {}
        if self.n > 1:
            self.L_norm = self.L.scaled(1.0 / self.L.lambda_n)
            _, self.L_star, self.eps_report = scaled_laplacian_for(graph, hessian_bounds(self.cost))

    @property
    def n(self) -> int:
        return len(self.devices)

    def clamp_target(self, value: float) -> Tuple[float, bool]:
        """
        Clamps a tick target strictly inside (sum lower, sum upper).
        """
        lo, hi = float(self.lower.sum()), float(self.upper.sum())
        margin = 1e-9 * (hi - lo)
        clamped = float(np.clip(value, lo + margin, hi - margin))
        return clamped, not (lo + margin < value < hi - margin)

    def dana_tick_step(self, q: int) -> float:
        """
        Step for the semi-implicit DANA tick with G = L* A_q L*:
        h * lambda_max(H^1/2 G H^1/2) <= 1 and h^2 * lambda_max(G) <= 1.
        The second bound covers every active box set.
        """
        if self.n < 2:
            raise ValueError("DANA needs at least two devices")
        if q not in self._dana_steps:
            Lm = self.L_star.matrix
            G = Lm @ aq_matrix(self.L_star, self.cost.a, q) @ Lm
            s = np.sqrt(self.cost.a)
            damping = float(eigh(s[:, None] * G * s[None, :], eigvals_only=True)[-1])
            coupling = float(eigh(G, eigvals_only=True)[-1])
            self._dana_steps[q] = min(1.0 / damping, 1.0 / np.sqrt(coupling))
            verbose_log(f"🧮 DANA tick step h={self._dana_steps[q]:.4g} (q={q}, n={self.n})")
        return self._dana_steps[q]

    def closed_form(self, target: float) -> np.ndarray:
        """Equitable split p_i = lower_i + r (upper_i - lower_i)."""
        ratio = (target - self.lower.sum()) / (self.upper - self.lower).sum()
        return self.lower + ratio * (self.upper - self.lower)

    def oracle(self, target: float) -> np.ndarray:
        if self.n == 1:
            return np.array([target])
        return active_set_oracle(self.cost.a, self.cost.b, target, self.lower, self.upper).x


def build_fleet(devices: Sequence[DeviceSpec], seed: int, topology: str = "random",
                edge_factor: int = DISPATCH_EDGE_FACTOR) -> DeviceFleet:
    n = len(devices)
    if n == 0:
        raise ValueError("A fleet needs at least one device")
    if topology == "ring":
        graph = ring_graph(n)
    elif topology == "random":
        graph = random_connected_graph(n, max(n - 1, min(edge_factor * n, n * (n - 1) // 2)), seed)
    else:
        raise ValueError(f"Unknown topology '{topology}' (expected random or ring)")
    return DeviceFleet(devices, graph)


# Tick solvers


class ConsensusResult(NamedTuple):
    p: np.ndarray
    ratios: np.ndarray
    rounds: int


def push_sum_weights(graph: Graph) -> np.ndarray:
    """
    Column-stochastic W with W[i, j] = 1 / (deg_j + 1) for j in N_i and j = i.
    """
    deg = graph.degrees()
    W = np.diag(1.0 / (deg + 1.0))
    for i, j in graph.edges:
        W[i, j] = 1.0 / (deg[j] + 1.0)
        W[j, i] = 1.0 / (deg[i] + 1.0)
    return W


def ratio_consensus(lower, upper, p_ref: float, graph: Graph, informed: Sequence[int] = (0,),
                    tol: float = DISPATCH_RC_TOL, max_rounds: int = DISPATCH_RC_MAX_ROUNDS) -> ConsensusResult:
    """
    Push-sum on y0 = P_ref/|I| - lower (informed) or -lower, z0 = upper - lower.
    Stops when the spread of y/z is within tol; p = lower + (y/z)(upper - lower).
    """
    lower = np.asarray(lower, dtype=float)
    upper = np.asarray(upper, dtype=float)
    cap = upper - lower
    if graph.n != len(lower):
        raise ValueError(f"Graph has {graph.n} nodes for {len(lower)} agents")
    if np.any(cap <= 0):
        raise ValueError(f"ratio consensus needs upper > lower for every agent (agents {np.flatnonzero(cap <= 0).tolist()})")
    if not informed:
        raise ValueError("At least one agent must know the reference")
    y = -lower.copy()
    y[list(informed)] += p_ref / len(informed)
    z = cap.copy()
    W = push_sum_weights(graph)
    ratios = y / z
    for rounds in range(max_rounds + 1):
        if ratios.max() - ratios.min() <= tol:
            return ConsensusResult(lower + ratios * cap, ratios, rounds)
        y = W @ y
        z = W @ z
        ratios = y / z
    raise RuntimeError(f"Ratio consensus did not converge within {max_rounds} rounds "
                       f"(spread {ratios.max() - ratios.min():.3g})")


@dataclass
class PdState:
    p: np.ndarray
    y: np.ndarray
    lam: np.ndarray


def primal_dual_step(state: PdState, problem: AllocationProblem, L: LaplacianMatrix, h: float,
                     network: Optional[SynchronousNetwork] = None) -> PdState:
    """
    Euler step of p' = -(f'(p) + lam + r), y' = -L(lam + r), lam' = r with
    r = p + L y - d/n; p is then projected onto the box.
    """
    Lop = laplacian_op(L, network)
    r = state.p + Lop(state.y) - problem.d / problem.n
    p = state.p - h * (problem.cost.grad(state.p) + state.lam + r)
    y = state.y - h * Lop(state.lam + r)
    lam = state.lam + h * r
    if problem.has_box:
        p = np.clip(p, problem.lower, problem.upper)
    return PdState(p, y, lam)


def pd_residual(state: PdState, problem: AllocationProblem, L: LaplacianMatrix) -> float:
    """
    Projected KKT residual of the primal-dual tick: max-norm of
    p - Pi(p - (f'(p) + lam + r)), of r = p + L y - d/n and of L lam.
    """
    r = state.p + L.matrix @ state.y - problem.d / problem.n
    moved = state.p - (problem.cost.grad(state.p) + state.lam + r)
    if problem.has_box:
        moved = np.clip(moved, problem.lower, problem.upper)
    return max(float(np.max(np.abs(state.p - moved))), float(np.max(np.abs(r))),
               float(np.max(np.abs(L.matrix @ state.lam))))


@dataclass
class DispatchConfig:
    pd_step: float = DISPATCH_PD_STEP
    dana_step: Optional[float] = DISPATCH_DANA_STEP
    q: int = DANA_DEFAULT_Q
    tick_tol: float = DISPATCH_TICK_TOL
    tick_max_rounds: int = DISPATCH_TICK_MAX_ROUNDS
    rc_tol: float = DISPATCH_RC_TOL
    rc_max_rounds: int = DISPATCH_RC_MAX_ROUNDS
    informed: Tuple[int, ...] = (0,)
    check_oracle: bool = True
    preprocess: bool = True
    outlier_frac: float = DISPATCH_OUTLIER_FRAC
    filter_window: int = DISPATCH_FILTER_WINDOW
    max_shift: int = DISPATCH_MAX_SHIFT


@dataclass
class TickState:
    pd: Optional[PdState] = None
    dana: Optional[PrimalDualState] = None


class TickResult(NamedTuple):
    setpoints: np.ndarray
    state: TickState
    rounds: int
    converged: bool
    flagged: bool
    target: float


def _pd_tick(problem: AllocationProblem, fleet: DeviceFleet, state: TickState,
             config: DispatchConfig) -> Tuple[np.ndarray, TickState, int, bool]:
    n = fleet.n
    pd_state = state.pd or PdState(fleet.baseline.copy(), np.zeros(n), np.zeros(n))
    h = config.pd_step
    rounds = 0
    while True:
        if rounds % DISPATCH_RESIDUAL_EVERY == 0 and pd_residual(pd_state, problem, fleet.L_norm) < config.tick_tol:
            return pd_state.p.copy(), replace(state, pd=pd_state), rounds, True
        if rounds == config.tick_max_rounds:
            return pd_state.p.copy(), replace(state, pd=pd_state), rounds, False
        pd_state = primal_dual_step(pd_state, problem, fleet.L_norm, h)
        rounds += 1


def _dana_tick(problem: AllocationProblem, fleet: DeviceFleet, state: TickState,
               config: DispatchConfig) -> Tuple[np.ndarray, TickState, int, bool]:
    n = fleet.n
    prev = state.dana or PrimalDualState(np.zeros(n), fleet.baseline.copy(), np.zeros(2 * n))
    # the sum change is spread over the fleet by headroom; z restarts at zero
    x0 = prev.x + (problem.d - prev.x.sum()) * fleet.headroom / fleet.headroom.sum()
    dana_state = PrimalDualState(np.zeros(n), x0.copy(), prev.lam.copy())
    h = config.dana_step if config.dana_step is not None else fleet.dana_tick_step(config.q)
    rounds = 0
    while True:
        if (rounds % DISPATCH_RESIDUAL_EVERY == 0
                and dana_c_residual(dana_state, problem, fleet.L_star, config.q) < config.tick_tol):
            return dana_state.x.copy(), replace(state, dana=dana_state), rounds, True
        if rounds == config.tick_max_rounds:
            return dana_state.x.copy(), replace(state, dana=dana_state), rounds, False
        dana_state = dana_c_step(dana_state, problem, fleet.L_star, x0, config.q, h, semi_implicit=True)
        rounds += 1


def allocate_tick(value: float, fleet: DeviceFleet, method: str, state: Optional[TickState] = None,
                  config: Optional[DispatchConfig] = None) -> TickResult:
    """
    Setpoints for one tick. Targets outside (sum lower, sum upper) are clamped
    and flagged. PD and DANA warm-start from state.
    """
    if method not in METHODS:
        raise ValueError(f"Unknown dispatch method '{method}' (expected one of {METHODS})")
    config = config or DispatchConfig()
    state = state or TickState()
    target, flagged = fleet.clamp_target(value)
    if fleet.n == 1:
        return TickResult(np.array([target]), state, 0, True, flagged, target)
    if method == "rc":
        res = ratio_consensus(fleet.lower, fleet.upper, target, fleet.graph, config.informed,
                              config.rc_tol, config.rc_max_rounds)
        return TickResult(res.p, state, res.rounds, True, flagged, target)
    problem = AllocationProblem(fleet.cost, target, fleet.graph, fleet.lower, fleet.upper)
    solver = _pd_tick if method == "pd" else _dana_tick
    setpoints, state, rounds, converged = solver(problem, fleet, state, config)
    return TickResult(setpoints, state, rounds, converged, flagged, target)


def normalized_mse(p, p_star) -> float:
    """mean((p - p*)^2) / mean(p*^2)"""
    p = np.asarray(p, dtype=float)
    p_star = np.asarray(p_star, dtype=float)
    denom = float(np.mean(p_star ** 2))
    if denom == 0.0:
        raise ValueError("normalized MSE is undefined for a zero reference")
    return float(np.mean((p - p_star) ** 2)) / denom


# Device models


def apply_update_hold(raw: np.ndarray, devices: Sequence[DeviceSpec]) -> np.ndarray:
    """
    Each device only accepts a new setpoint at ticks phase + k * update_period
    and holds it in between; before its first update it sits at baseline.
    """
    raw = np.asarray(raw, dtype=float)
    ticks = np.arange(raw.shape[0])
    held = np.empty_like(raw)
    for i, spec in enumerate(devices):
        last = spec.phase + ((ticks - spec.phase) // spec.update_period) * spec.update_period
        started = ticks >= spec.phase
        held[:, i] = np.where(started, raw[np.clip(last, 0, None), i], spec.baseline)
    return held


def quantize_setpoints(setpoints: np.ndarray, spec: DeviceSpec) -> np.ndarray:
    s = np.clip(np.asarray(setpoints, dtype=float), spec.lower, spec.upper)
    if spec.quantization == "binary":
        return np.where(s >= 0.5 * (spec.lower + spec.upper), spec.upper, spec.lower)
    if spec.quantization == "integer":
        return np.clip(np.round(s), np.ceil(spec.lower), np.floor(spec.upper))
    return s


def quantize_fleet(commanded: np.ndarray, devices: Sequence[DeviceSpec]) -> np.ndarray:
    """
    Binary devices of one kind are rounded as a group: the number of units on
    is the closest achievable aggregate, given to the units with the largest
    setpoints (lowest index on ties). Other devices are quantized one by one.
    """
    commanded = np.asarray(commanded, dtype=float)
    out = np.empty_like(commanded)
    for i, spec in enumerate(devices):
        if spec.quantization != "binary":
            out[:, i] = quantize_setpoints(commanded[:, i], spec)
    for kind in DEVICE_KINDS:
        idx = np.array([i for i, d in enumerate(devices) if d.kind == kind and d.quantization == "binary"], dtype=int)
        if idx.size == 0:
            continue
        lo = np.array([devices[i].lower for i in idx])
        hi = np.array([devices[i].upper for i in idx])
        frac = (np.clip(commanded[:, idx], lo, hi) - lo) / (hi - lo)
        units_on = np.clip(np.round(frac.sum(axis=1)), 0, idx.size).astype(int)
        order = np.argsort(-frac, axis=1, kind="stable")
        ranks = np.argsort(order, axis=1)
        out[:, idx] = np.where(ranks < units_on[:, None], hi, lo)
    return out


def device_response(setpoints, spec: DeviceSpec, quantize: bool = True) -> np.ndarray:
    """
    Measured output of one device: quantization, a pure transport delay of
    response_delay ticks (baseline before it), then first-order settling.
    Causal: output at t only uses setpoints up to t.
    """
    s = np.clip(np.asarray(setpoints, dtype=float), spec.lower, spec.upper)
    if quantize:
        s = quantize_setpoints(s, spec)
    out = np.full_like(s, spec.baseline)
    d = spec.response_delay
    if d < len(s):
        out[d:] = s[: len(s) - d]
    if spec.time_constant > 0:
        k = 1.0 - np.exp(-1.0 / spec.time_constant)
        out, _ = lfilter([k], [1.0, k - 1.0], out, zi=[(1.0 - k) * spec.baseline])
    return out


def simulate_fleet(raw: np.ndarray, devices: Sequence[DeviceSpec]) -> Tuple[np.ndarray, np.ndarray]:
    """(commanded, measured) streams, one column per device."""
    commanded = quantize_fleet(apply_update_hold(raw, devices), devices)
    measured = np.column_stack([device_response(commanded[:, i], spec, quantize=False)
                                for i, spec in enumerate(devices)])
    return commanded, measured


# Pipeline


@dataclass
class StageResult:
    fleet: DeviceFleet
    method: str
    targets: np.ndarray
    raw: np.ndarray
    commanded: np.ndarray
    measured: np.ndarray
    flagged: np.ndarray
    rounds: np.ndarray
    converged: np.ndarray
    nmse: Optional[np.ndarray] = None


def run_stage(targets: np.ndarray, fleet: DeviceFleet, method: str,
              config: Optional[DispatchConfig] = None, desc: str = "dispatch") -> StageResult:
    """
    Allocates every tick in order with warm starts, then simulates the devices.
    """
    config = config or DispatchConfig()
    targets = np.asarray(targets, dtype=float)
    ticks = len(targets)
    raw = np.empty((ticks, fleet.n))
    clamped = np.empty(ticks)
    flagged = np.zeros(ticks, dtype=bool)
    rounds = np.zeros(ticks, dtype=int)
    converged = np.ones(ticks, dtype=bool)
    nmse = np.zeros(ticks) if config.check_oracle else None
    state = TickState()
    bar = progress(total=ticks, desc=f"🔁 {desc} [{method}]", unit="tick")
    for t, value in enumerate(targets):
        res = allocate_tick(value, fleet, method, state, config)
        state = res.state
        raw[t], clamped[t], flagged[t] = res.setpoints, res.target, res.flagged
        rounds[t], converged[t] = res.rounds, res.converged
        if nmse is not None:
            reference = fleet.closed_form(res.target) if method == "rc" else fleet.oracle(res.target)
            nmse[t] = normalized_mse(res.setpoints, reference)
        bar.update(1)
    bar.close()
    if flagged.any():
        verbose_log(f"⚠️ {desc}: {int(flagged.sum())} ticks clamped to fleet capacity")
    commanded, measured = simulate_fleet(raw, fleet.devices)
    return StageResult(fleet, method, clamped, raw, commanded, measured, flagged, rounds, converged, nmse)


def two_stage_allocate(regulation: np.ndarray, stage1: Optional[DeviceFleet], stage2: DeviceFleet,
                       methods: Union[str, Tuple[str, str]] = "dana",
                       config: Optional[DispatchConfig] = None) -> List[StageResult]:
    """
    Stage 1 takes its capacity share of the regulation request. Stage 2 takes
    the rest plus the stage-1 tracking error measured at the same tick.
    Without stage 1 this is a single-stage run on stage 2.
    """
    m1, m2 = (methods, methods) if isinstance(methods, str) else methods
    regulation = np.asarray(regulation, dtype=float)
    base2 = stage2.baseline.sum()
    if stage1 is None:
        return [run_stage(base2 + regulation, stage2, m2, config, desc="single stage")]
    if set(map(id, stage1.devices)) & set(map(id, stage2.devices)):
        raise ValueError("Stage device sets must be disjoint")
    cap1, cap2 = stage1.headroom.sum(), stage2.headroom.sum()
    share1 = regulation * cap1 / (cap1 + cap2)
    first = run_stage(stage1.baseline.sum() + share1, stage1, m1, config, desc="stage 1")
    error1 = first.targets - first.measured.sum(axis=1)
    second = run_stage(base2 + (regulation - share1) + error1, stage2, m2, config, desc="stage 2")
    return [first, second]


class TrackingReport(NamedTuple):
    rmse: float
    delay: int
    S_c: float
    S_d: float
    S_p: float
    S: float
    rmse_aligned: float

    def to_json(self) -> Dict:
        return dict(self._asdict())


def _rmse(provided: np.ndarray, target: np.ndarray) -> float:
    denom = float(np.sum(target ** 2))
    return float(np.sqrt(np.sum((provided - target) ** 2) / denom)) if denom > 0 else float("inf")


def _correlation(a: np.ndarray, b: np.ndarray) -> float:
    da, db = a - a.mean(), b - b.mean()
    denom = np.sqrt(np.sum(da * da)) * np.sqrt(np.sum(db * db))
    if denom == 0.0:
        return 0.0
    return float(min(1.0, np.sum(da * db) / denom))


def tracking_metrics(provided, target, max_shift: int = DISPATCH_MAX_SHIFT,
                     delay_reference: float = DISPATCH_DELAY_REFERENCE) -> TrackingReport:
    """
    rmse = sqrt(sum (prov - tar)^2 / sum tar^2) on the unshifted streams.
    delay = the shift in 0..max_shift (ticks) of prov behind tar with the lowest
    rmse; S_c is the correlation at that shift, S_d = |(delay - ref) / ref|
    clamped to [0, 1], S_p = 1 - mean |prov - tar| / |mean tar|. A zero-mean
    target leaves S_p and S as nan.
    """
    provided = np.asarray(provided, dtype=float)
    target = np.asarray(target, dtype=float)
    if provided.shape != target.shape or provided.ndim != 1 or len(target) < 2:
        raise ValueError("provided and target must be equal-length 1-D streams with at least 2 samples")
    if np.var(target) == 0.0:
        raise ValueError("target has zero variance; the correlation score is undefined")
    mu = float(np.mean(target))
    ticks = len(target)
    shifts = range(min(max_shift, ticks - 2) + 1)
    errors = [_rmse(provided[s:], target[: ticks - s]) for s in shifts]
    delay = int(np.argmin(errors))
    S_c = _correlation(provided[delay:], target[: ticks - delay])
    S_d = float(np.clip(abs((delay - delay_reference) / delay_reference), 0.0, 1.0))
    S_p = 1.0 - float(np.mean(np.abs(provided - target))) / abs(mu) if mu != 0.0 else float("nan")
    return TrackingReport(errors[0], delay, S_c, S_d, S_p, (S_c + S_d + S_p) / 3.0, errors[delay])


def preprocess_measurement(stream, window: int = DISPATCH_FILTER_WINDOW,
                           outlier_frac: float = DISPATCH_OUTLIER_FRAC) -> np.ndarray:
    """
    A 1 s change above outlier_frac * mean|x| is an outlier and takes the
    previous cleaned value; the result is smoothed by a window-tick moving average.
    """
    if window < 1:
        raise ValueError(f"window must be >= 1, got {window}")
    x = np.asarray(stream, dtype=float)
    if x.size == 0:
        return x.copy()
    threshold = outlier_frac * float(np.mean(np.abs(x)))
    jumps = np.abs(np.diff(x)) > threshold
    cleaned = x.copy()
    for t in np.flatnonzero(jumps) + 1:
        cleaned[t] = cleaned[t - 1]
    return uniform_filter1d(cleaned, size=window, mode="nearest")


@dataclass
class DispatchResult:
    method: str
    two_stage: bool
    signal: RegulationSignal
    stages: List[StageResult]
    target_total: np.ndarray
    measured_total: np.ndarray
    provided: np.ndarray
    report: TrackingReport
    runtime: float = 0.0

    @property
    def converged(self) -> bool:
        return all(bool(stage.converged.all()) for stage in self.stages)

    @property
    def flagged_ticks(self) -> int:
        return int(np.any([stage.flagged for stage in self.stages], axis=0).sum())

    def rows(self) -> List[Dict]:
        ticks = len(self.target_total)
        class_totals: Dict[str, Dict[str, np.ndarray]] = {}
        for stage in self.stages:
            for kind in DEVICE_KINDS:
                mask = stage.fleet.kinds == kind
                if not mask.any():
                    continue
                acc = class_totals.setdefault(kind, {"commanded": np.zeros(ticks), "measured": np.zeros(ticks)})
                acc["commanded"] += stage.commanded[:, mask].sum(axis=1)
                acc["measured"] += stage.measured[:, mask].sum(axis=1)
        commanded_total = sum(stage.commanded.sum(axis=1) for stage in self.stages)
        rounds = sum(stage.rounds for stage in self.stages)
        nmse = [stage.nmse for stage in self.stages if stage.nmse is not None]
        rows = []
        for t in range(ticks):
            row = {"t": t, "regulation": self.signal.samples[t], "target": self.target_total[t]}
            for kind, acc in class_totals.items():
                row[f"commanded_{kind}"] = acc["commanded"][t]
                row[f"measured_{kind}"] = acc["measured"][t]
            row["commanded_total"] = commanded_total[t]
            row["measured_total"] = self.measured_total[t]
            row["provided"] = self.provided[t]
            row["rounds"] = int(rounds[t])
            if nmse:
                row["nmse"] = max(float(v[t]) for v in nmse)
            rows.append(row)
        return rows

    def summary(self) -> Dict:
        out = {"method": self.method, "two_stage": self.two_stage, **self.report.to_json(),
               "flagged_ticks": self.flagged_ticks, "converged": self.converged,
               "capped_ticks": int(sum((~stage.converged).sum() for stage in self.stages)),
               "runtime": self.runtime}
        nmse = [stage.nmse for stage in self.stages if stage.nmse is not None]
        if nmse:
            stacked = np.concatenate(nmse)
            out["nmse_max"] = float(stacked.max())
            out["nmse_mean"] = float(stacked.mean())
        return out


def dispatch_run(signal: RegulationSignal, devices: Sequence[DeviceSpec], method: str,
                 two_stage: bool = False, config: Optional[DispatchConfig] = None, graph_seed: int = 0,
                 topology: str = "random", edge_factor: int = DISPATCH_EDGE_FACTOR) -> DispatchResult:
    """
    Tracks signal.samples around the fleet baseline. In two-stage mode the AHUs
    form stage 1 and every other device stage 2.
    """
    config = config or DispatchConfig()
    start = time.time()
    devices = list(devices)
    stage1 = [d for d in devices if d.kind == "AHU"] if two_stage else []
    stage2 = [d for d in devices if not (two_stage and d.kind == "AHU")]
    if not stage2:
        raise ValueError("Two-stage dispatch needs at least one non-AHU device")
    fleet1 = build_fleet(stage1, graph_seed, topology, edge_factor) if stage1 else None
    fleet2 = build_fleet(stage2, graph_seed + 1, topology, edge_factor)
    stages = two_stage_allocate(signal.samples, fleet1, fleet2, method, config)

    target_total = sum(d.baseline for d in devices) + signal.samples
    measured_total = sum(stage.measured.sum(axis=1) for stage in stages)
    provided = measured_total
    if config.preprocess:
        provided = preprocess_measurement(measured_total, config.filter_window, config.outlier_frac)
    report = tracking_metrics(provided, target_total, config.max_shift)
    runtime = time.time() - start
    verbose_log(f"✅ dispatch [{method}{', two-stage' if two_stage else ''}] rmse={report.rmse:.4g} "
                f"delay={report.delay}s S={report.S:.3f} in {runtime:.1f}s")
    return DispatchResult(method, two_stage, signal, stages, target_total, measured_total, provided, report, runtime)
