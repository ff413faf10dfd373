"""
Binary resource allocation with Newton-like Hopfield dynamics.

    min_{x in {0,1}^n} sum_i f_i(x_i) + gamma/2 (p^T x - P_r)^2

The relaxed state lives in the open hypercube through the logistic
activation; a barrier weighted by T/tau keeps it there and deterministic
annealing drives it to a corner. binpac is the centralized PT-Newton flow;
binpad distributes the squared penalty through an auxiliary y so that every
agent only needs two-hop information.
"""
import time
from dataclasses import dataclass, field
from typing import Dict, List, Mapping, Optional, Sequence, Tuple

import numpy as np
from scipy.special import xlogy
from scipy.stats import rankdata

from config import (
    NNN_ALPHA,
    NNN_BETA,
    NNN_BRUTE_FORCE_MAX_N,
    NNN_EULER_STEP,
    NNN_INIT_RADIUS,
    NNN_INTERIOR_EPS,
    NNN_JITTER,
    NNN_LEARNING_STEPS,
    NNN_M,
    NNN_MAX_HALVINGS,
    NNN_STOP_TOL,
    NNN_T0,
    NNN_TAU0,
    NNN_WINDOW,
)
from discrn import pt_inverse
from graph_core import (
    Graph,
    LaplacianMatrix,
    SynchronousNetwork,
    build_laplacian,
    laplacian_pinv,
    random_connected_graph,
)
from problems import BinaryQuadraticCost
from utils import progress, verbose_log

MODES = ("binpac", "binpad", "hnn")


@dataclass
class BinaryProblem:
    """
    Increments c and sizes p, shaped into local quadratics with curvature a.
    The distributed reformulation carries the penalty with weight n * gamma
    so that its value at the optimal auxiliary state equals the centralized
    objective.
    """
    c: np.ndarray
    p: np.ndarray
    p_r: float
    gamma: float
    a: np.ndarray
    d: Optional[np.ndarray] = None
    graph: Optional[Graph] = None
    local: BinaryQuadraticCost = field(init=False, repr=False)

    def __post_init__(self):
        self.c = np.atleast_1d(np.asarray(self.c, dtype=float))
        self.p = np.atleast_1d(np.asarray(self.p, dtype=float))
        self.a = np.broadcast_to(np.asarray(self.a, dtype=float), self.c.shape).copy()
        self.d = np.zeros_like(self.c) if self.d is None else np.asarray(self.d, dtype=float)
        if not (self.c.shape == self.p.shape == self.d.shape):
            raise ValueError("c, p and d need one entry per agent")
        if self.gamma < 0:
            raise ValueError(f"gamma must be nonnegative, got {self.gamma}")
        if self.graph is not None and self.graph.n != self.n:
            raise ValueError(f"Graph has {self.graph.n} nodes for {self.n} agents")
        self.local = BinaryQuadraticCost.from_increments(self.a, self.c, self.d)
        if np.max(np.abs(self.local.increments - self.c)) > 1e-10 * max(1.0, float(np.max(np.abs(self.c)))):
            raise ValueError("Quadratic shape does not reproduce the increments c")

    @property
    def n(self) -> int:
        return len(self.c)

    @property
    def b(self) -> np.ndarray:
        return self.local.b

    @property
    def distributed_gamma(self) -> float:
        return self.n * self.gamma

    @property
    def W(self) -> np.ndarray:
        return -np.diag(self.a) - self.gamma * np.outer(self.p, self.p)

    @property
    def v(self) -> np.ndarray:
        return self.a * self.b + self.gamma * self.p_r * self.p

    def objective(self, x: np.ndarray) -> float:
        """Relaxed objective on [0,1]^n."""
        return float(np.sum(self.local.value(x)) + 0.5 * self.gamma * (self.p @ x - self.p_r) ** 2)

    def corner_cost(self, x: np.ndarray) -> float:
        """Objective of a binary point, evaluated from the increments."""
        x = np.asarray(x, dtype=float)
        return float(self.c @ x + np.sum(self.d) + 0.5 * self.gamma * (self.p @ x - self.p_r) ** 2)

    def distributed_objective(self, x: np.ndarray, y: np.ndarray, L: LaplacianMatrix) -> float:
        sigma = self.p * x + L.matrix @ y - self.p_r / self.n
        return float(np.sum(self.local.value(x)) + 0.5 * self.distributed_gamma * sigma @ sigma)


@dataclass
class NnnState:
    x: np.ndarray
    T: float
    tau: float
    m: float = NNN_M
    y: Optional[np.ndarray] = None
    alpha: Optional[np.ndarray] = None

    def __post_init__(self):
        if self.T <= 0 or self.tau <= 0 or self.m <= 0:
            raise ValueError("T, tau and m must be positive")
        if np.any(self.x <= 0) or np.any(self.x >= 1):
            raise ValueError("x must lie strictly inside the unit hypercube")


def logistic(u, T: float):
    if T <= 0:
        raise ValueError(f"Temperature must be positive, got {T}")
    return 0.5 * (1.0 + np.tanh(0.5 * np.asarray(u, dtype=float) / T))


def logistic_inverse(x, T: float):
    """g^-1(x) = -T log(1/x - 1) on (0, 1)."""
    if T <= 0:
        raise ValueError(f"Temperature must be positive, got {T}")
    x = np.asarray(x, dtype=float)
    if np.any(x <= 0) or np.any(x >= 1):
        raise ValueError("logistic_inverse needs x strictly inside (0, 1)")
    return T * (np.log(x) - np.log1p(-x))


def barrier_integral(x, T: float) -> np.ndarray:
    """int_0^x g^-1 = T (x log x + (1 - x) log(1 - x)), zero at the corners."""
    x = np.asarray(x, dtype=float)
    return T * (xlogy(x, x) + xlogy(1.0 - x, 1.0 - x))


def _log_odds(x: np.ndarray) -> np.ndarray:
    """log(1/x - 1)"""
    return np.log1p(-x) - np.log(x)


def energy(x: np.ndarray, problem: BinaryProblem, T: float, tau: float) -> float:
    return problem.objective(x) + float(np.sum(barrier_integral(x, T))) / tau


def energy_distributed(x: np.ndarray, y: np.ndarray, problem: BinaryProblem, L: LaplacianMatrix,
                       T: float, tau: float) -> float:
    return problem.distributed_objective(x, y, L) + float(np.sum(barrier_integral(x, T))) / tau


def energy_gradient(x: np.ndarray, problem: BinaryProblem, T: float, tau: float) -> np.ndarray:
    return -(problem.W @ x) - problem.v - (T / tau) * _log_odds(x)


def energy_hessian(x: np.ndarray, problem: BinaryProblem, T: float, tau: float) -> np.ndarray:
    return -problem.W + np.diag((T / tau) / (x - x * x))


def binpac_rate(x: np.ndarray, problem: BinaryProblem, T: float, tau: float, m: float) -> np.ndarray:
    drive = (x - x * x) / T * (problem.W @ x + problem.v + (T / tau) * _log_odds(x))
    return pt_inverse(energy_hessian(x, problem, T, tau), m) @ drive


def hnn_rate(x: np.ndarray, problem: BinaryProblem, T: float, tau: float) -> np.ndarray:
    """Classic Hopfield flow in x coordinates."""
    return (x - x * x) / T * (problem.W @ x + problem.v + (T / tau) * _log_odds(x))


def binpad_rates(x: np.ndarray, y: np.ndarray, problem: BinaryProblem, L: LaplacianMatrix, T: float,
                 tau: float, m: float, alpha, network: Optional[SynchronousNetwork] = None):
    """
    Diagonal PT-Newton rate for x and the gradient rate for y; the y rate is
    two Laplacian rounds.
    """
    Lop = network.laplacian_round if network is not None else (lambda v: L.matrix @ v)
    g = problem.distributed_gamma
    p = problem.p
    Ly = Lop(y)
    h_diag = problem.a + g * p * p + (T / tau) / (x - x * x)
    inv = 1.0 / np.maximum(np.abs(h_diag), m)
    v_tilde = problem.a * problem.b + g * p * (problem.p_r / problem.n - Ly)
    w_x = -(problem.a + g * p * p) * x
    x_dot = inv * (x - x * x) / T * (w_x + (T / tau) * _log_odds(x) + v_tilde)
    y_dot = -np.asarray(alpha) * g * Lop(p * x + Ly)
    return x_dot, y_dot


def _clamp(x: np.ndarray) -> Tuple[np.ndarray, bool]:
    lo, hi = NNN_INTERIOR_EPS, 1.0 - NNN_INTERIOR_EPS
    clamped = bool(np.any(x < lo) or np.any(x > hi))
    return np.clip(x, lo, hi), clamped


def binpac_step(x: np.ndarray, problem: BinaryProblem, T: float, tau: float, m: float, h: float) -> np.ndarray:
    """Euler step of binpac, clamped to the interior."""
    return _clamp(x + h * binpac_rate(x, problem, T, tau, m))[0]


def hnn_step(x: np.ndarray, problem: BinaryProblem, T: float, tau: float, h: float) -> np.ndarray:
    return _clamp(x + h * hnn_rate(x, problem, T, tau))[0]


def binpad_step(x: np.ndarray, y: np.ndarray, problem: BinaryProblem, L: LaplacianMatrix, T: float, tau: float,
                m: float, alpha, h: float, network: Optional[SynchronousNetwork] = None):
    x_dot, y_dot = binpad_rates(x, y, problem, L, T, tau, m, alpha, network)
    return _clamp(x + h * x_dot)[0], y + h * y_dot


def y_star(x: np.ndarray, problem: BinaryProblem, L: LaplacianMatrix, kappa: float = 0.0) -> np.ndarray:
    """Minimizer of the distributed energy in y with 1^T y = kappa."""
    return -laplacian_pinv(L) @ (problem.p * x) + (kappa / problem.n) * np.ones(problem.n)


# Annealing


@dataclass
class AnnealSchedule:
    beta: float = NNN_BETA
    T0: float = NNN_T0
    tau0: float = NNN_TAU0
    window: float = NNN_WINDOW
    steps: int = NNN_LEARNING_STEPS
    knob: str = "tau"
    h: float = NNN_EULER_STEP
    m: float = NNN_M
    alpha: float = NNN_ALPHA
    tol: float = NNN_STOP_TOL

    def __post_init__(self):
        if self.beta <= 1:
            raise ValueError(f"Annealing factor beta must exceed 1, got {self.beta}")
        if self.knob not in ("tau", "T"):
            raise ValueError(f"Annealing knob must be 'tau' or 'T', got '{self.knob}'")


@dataclass
class NnnResult:
    mode: str
    x: np.ndarray
    corner: np.ndarray
    cost: float
    rows: List[Dict] = field(default_factory=list)
    clamp_events: int = 0
    stalls: int = 0
    energy_increases: int = 0
    converged: bool = False
    runtime: float = 0.0
    state: Optional[NnnState] = None

    @property
    def corner_distance(self) -> float:
        return float(np.max(np.minimum(self.x, 1.0 - self.x)))

    def summary(self) -> Dict:
        return {"mode": self.mode, "cost": self.cost, "corner": self.corner.astype(int).tolist(),
                "corner_distance": self.corner_distance, "clamp_events": self.clamp_events,
                "stalls": self.stalls, "converged": self.converged, "runtime": self.runtime}


def random_initial_state(n: int, rng: np.random.Generator, T0: float, tau0: float,
                         radius: float = NNN_INIT_RADIUS, jitter: float = NNN_JITTER) -> Tuple[np.ndarray, float, float]:
    """
    x uniform in the ball of the given radius around 0.5, T and tau jittered
    by +/- jitter relative.
    """
    direction = rng.standard_normal(n)
    direction /= np.linalg.norm(direction)
    r = radius * rng.uniform() ** (1.0 / n)
    T = T0 * (1.0 + rng.uniform(-jitter, jitter))
    tau = tau0 * (1.0 + rng.uniform(-jitter, jitter))
    return 0.5 + r * direction, T, tau


def check_annealing_precondition(problem: BinaryProblem) -> bool:
    """a_i < -gamma ||p||^2 for every agent; violations only warn."""
    bound = -problem.gamma * float(problem.p @ problem.p)
    ok = bool(np.all(problem.a < bound))
    if not ok:
        verbose_log(f"⚠️ annealing precondition a_i < {bound:.4g} fails for "
                    f"{int(np.sum(problem.a >= bound))} agent(s); corner convergence is not guaranteed")
    return ok


def anneal_run(problem: BinaryProblem, schedule: AnnealSchedule, mode: str = "binpac",
               rng: Optional[np.random.Generator] = None, anneal: bool = True,
               network: Optional[SynchronousNetwork] = None, record_every: int = 100) -> NnnResult:
    """
    Integrates the chosen flow for `window` seconds per learning step with
    step control: h is halved while the energy would rise or x would leave
    the open cube (at most NNN_MAX_HALVINGS times, after which the step is
    rejected). Between windows tau <- beta tau (or T <- T / beta). Without
    annealing the flow runs a single long window until ||x'||_inf < tol.
    """
    if mode not in MODES:
        raise ValueError(f"Unknown mode '{mode}', expected one of {MODES}")
    start = time.time()
    rng = rng or np.random.default_rng(0)
    n = problem.n
    check_annealing_precondition(problem)
    x, T, tau = random_initial_state(n, rng, schedule.T0, schedule.tau0)

    L = None
    y = None
    alpha = np.full(n, schedule.alpha)
    if mode == "binpad":
        if problem.graph is None:
            raise ValueError("binpad needs a communication graph")
        L = build_laplacian(problem.graph)
        y = np.zeros(n)

    def rates(xc, yc):
        if mode == "binpac":
            return binpac_rate(xc, problem, T, tau, schedule.m), None
        if mode == "hnn":
            return hnn_rate(xc, problem, T, tau), None
        return binpad_rates(xc, yc, problem, L, T, tau, schedule.m, alpha, network)

    def E(xc, yc):
        if mode == "binpad":
            return energy_distributed(xc, yc, problem, L, T, tau)
        return energy(xc, problem, T, tau)

    windows = schedule.steps if anneal else 1
    window_time = schedule.window if anneal else schedule.window * schedule.steps
    nominal = int(np.ceil(window_time / schedule.h))
    rows: List[Dict] = []
    clamp_events = stalls = increases = 0
    it = 0
    settled = False
    bar = progress(total=windows * nominal, desc=f"🔁 {mode}", unit="step")
    for w in range(windows):
        t = 0.0
        steps = 0
        while t < window_time - 1e-12 and steps < 10 * nominal:
            x_dot, y_dot = rates(x, y)
            rate = float(np.max(np.abs(x_dot)))
            if rate < schedule.tol:
                settled = True
                break
            e0 = E(x, y)
            h = schedule.h
            accepted = False
            for halving in range(NNN_MAX_HALVINGS + 1):
                x_new = x + h * x_dot
                y_new = None if y_dot is None else y + h * y_dot
                inside = bool(np.all(x_new > 0) and np.all(x_new < 1))
                if inside and E(np.clip(x_new, NNN_INTERIOR_EPS, 1 - NNN_INTERIOR_EPS), y_new) <= e0:
                    accepted = True
                    break
                if inside and halving == 0:
                    increases += 1
                h *= 0.5
            if accepted:
                x, clamped = _clamp(x_new)
                clamp_events += int(clamped)
                y = y_new
            else:
                stalls += 1
                h = schedule.h
            t += h
            steps += 1
            it += 1
            if it % record_every == 0:
                rows.append({"iter": it, "window": w, "T": T, "tau": tau, "energy": E(x, y),
                             "cost": problem.objective(x),
                             "corner_distance": float(np.max(np.minimum(x, 1 - x)))})
            bar.update(1)
        rows.append({"iter": it, "window": w, "T": T, "tau": tau, "energy": E(x, y),
                     "cost": problem.objective(x), "corner_distance": float(np.max(np.minimum(x, 1 - x)))})
        if anneal and w < windows - 1:
            if schedule.knob == "tau":
                tau *= schedule.beta
            else:
                T /= schedule.beta
            settled = False
    bar.close()

    corner = (x >= 0.5).astype(float)
    cost = problem.corner_cost(corner)
    dist = float(np.max(np.minimum(x, 1 - x)))
    converged = settled or dist <= 1e-3
    if stalls:
        verbose_log(f"⚠️ {mode}: {stalls} step(s) rejected after {NNN_MAX_HALVINGS} halvings")
    verbose_log(f"{'✅' if converged else '⚠️'} {mode}: corner {corner.astype(int).tolist()[:10]}"
                f"{'...' if n > 10 else ''}, cost={cost:.6g}")
    final = NnnState(x, T, tau, schedule.m, y, alpha if mode == "binpad" else None)
    return NnnResult(mode, x, corner, cost, rows, clamp_events, stalls, increases, converged,
                     time.time() - start, final)


# Baselines and metrics


def greedy(problem: BinaryProblem) -> np.ndarray:
    """
    Adds the element giving the lowest objective while that improves it;
    ties go to the lowest index.
    """
    n = problem.n
    x = np.zeros(n)
    best = problem.corner_cost(x)
    while True:
        free = np.flatnonzero(x == 0)
        if free.size == 0:
            break
        costs = []
        for i in free:
            x[i] = 1.0
            costs.append(problem.corner_cost(x))
            x[i] = 0.0
        k = int(np.argmin(costs))
        if costs[k] >= best:
            break
        x[free[k]] = 1.0
        best = costs[k]
    return x


def brute_force(problem: BinaryProblem, chunk: int = 1 << 16) -> Tuple[np.ndarray, float]:
    """Exhaustive search over all 2^n corners in chunks of bit patterns."""
    n = problem.n
    if n > NNN_BRUTE_FORCE_MAX_N:
        raise ValueError(f"Brute force is limited to n <= {NNN_BRUTE_FORCE_MAX_N}, got n={n}")
    bits = np.arange(n, dtype=np.int64)
    best_cost = np.inf
    best_idx = 0
    total = 1 << n
    base = float(np.sum(problem.d))
    for lo in range(0, total, chunk):
        idx = np.arange(lo, min(lo + chunk, total), dtype=np.int64)
        X = ((idx[:, None] >> bits) & 1).astype(float)
        f = X @ problem.c + base + 0.5 * problem.gamma * (X @ problem.p - problem.p_r) ** 2
        k = int(np.argmin(f))
        if f[k] < best_cost:
            best_cost = float(f[k])
            best_idx = int(idx[k])
    x = ((best_idx >> bits) & 1).astype(float)
    return x, problem.corner_cost(x)


def quality_metric(costs: Mapping[str, Sequence[float]]) -> Dict[str, float]:
    """
    Per trial the best of k methods scores k-1 points and the worst 0, ties
    share averaged points; totals are normalized by (k-1) * trials.
    """
    names = list(costs)
    k = len(names)
    if k < 2:
        raise ValueError(f"Quality metric needs at least 2 methods, got {k}")
    table = np.array([np.asarray(costs[name], dtype=float) for name in names])
    if table.ndim != 2 or table.shape[1] < 1:
        raise ValueError("Quality metric needs at least one trial per method")
    points = k - rankdata(table, method="average", axis=0)
    totals = points.sum(axis=1) / ((k - 1) * table.shape[1])
    return {name: float(q) for name, q in zip(names, totals)}


def design_shape(p: np.ndarray, gamma: float, T0: float = NNN_T0, tau0: float = NNN_TAU0,
                 margin: float = 1.0) -> np.ndarray:
    """Locally chosen curvature a_i < -gamma p_i^2 - 4 T0 / tau0."""
    return -gamma * np.asarray(p, dtype=float) ** 2 - 4.0 * T0 / tau0 - margin


def quality_instance(n: int, rng: np.random.Generator, p_range=(1.0, 50.0), exponent_range=(2.0, 3.0),
                     p_r: float = 1500.0, gamma: float = 1.0, T0: float = NNN_T0, tau0: float = NNN_TAU0,
                     edge_factor: int = 2) -> BinaryProblem:
    """Random instance for the solution-quality study: c_i = p_i^e_i."""
    p = rng.uniform(*p_range, size=n)
    c = p ** rng.uniform(*exponent_range, size=n)
    m = min(max(edge_factor * n, n - 1), n * (n - 1) // 2)
    graph = random_connected_graph(n, m, int(rng.integers(2 ** 31)))
    a = design_shape(p, n * gamma, T0, tau0)
    return BinaryProblem(c, p, p_r, gamma, a, graph=graph)
