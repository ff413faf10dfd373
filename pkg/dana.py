"""
Distributed approximate Newton algorithms for resource allocation.

The sum constraint is removed by the change of variables x = x0 + L z with a
feasible x0, so any update of z keeps sum(x) = d. Curvature enters through
A_q = sum_{p=0}^{q} (I - L H L)^p, a truncated series for (L H L)^+ that costs
q rounds of two-hop exchanges.
"""
import time
from dataclasses import dataclass, field, replace
from typing import Callable, Dict, List, Optional, Sequence, Union

import numpy as np
from scipy.linalg import eigh

from config import (
    DANA_DEFAULT_ALPHA,
    DANA_DEFAULT_Q,
    DANA_EULER_STEP,
    DANA_MAX_HALVINGS,
    DANA_MAX_ITERS,
    DANA_TOL,
    FEASIBILITY_RTOL,
    ROBUST_AUG_PENALTY,
)
from graph_core import LaplacianMatrix, SynchronousNetwork, laplacian_pinv
from problems import AllocationProblem, OracleSolution, QuadraticCost, solve_allocation_oracle
from utils import progress, verbose_log


@dataclass
class DanaConfig:
    q: int = DANA_DEFAULT_Q
    alpha: Union[float, str] = DANA_DEFAULT_ALPHA
    h: float = DANA_EULER_STEP
    max_iters: int = DANA_MAX_ITERS
    tol: float = DANA_TOL
    record_every: int = 1
    adaptive: bool = False

    def __post_init__(self):
        if self.q < 0:
            raise ValueError(f"q must be >= 0, got {self.q}")
        if not isinstance(self.alpha, str) and self.alpha <= 0:
            raise ValueError(f"alpha must be positive, got {self.alpha}")
        if isinstance(self.alpha, str) and self.alpha != "auto":
            raise ValueError(f"alpha must be a number or 'auto', got '{self.alpha}'")
        if self.h <= 0 or self.tol <= 0:
            raise ValueError("h and tol must be positive")


@dataclass
class PrimalDualState:
    """
    z: consensus-free coordinates, x = x0 + L z.
    lam: box multipliers stacked as [lower; upper], kept >= 0.
    mu: multiplier of x + L z = d_bar (robust variant only).
    """
    z: np.ndarray
    x: np.ndarray
    lam: Optional[np.ndarray] = None
    mu: Optional[np.ndarray] = None

    @property
    def omega(self) -> float:
        return float(np.sum(self.z))


@dataclass
class DanaReport:
    x: np.ndarray
    z: np.ndarray
    iterations: int
    converged: bool
    rows: List[Dict] = field(default_factory=list)
    lam: Optional[np.ndarray] = None
    alpha: Optional[float] = None
    h: Optional[float] = None
    runtime: float = 0.0

    @property
    def final_cost(self) -> float:
        return self.rows[-1]["f"] if self.rows else float("nan")

    def summary(self) -> Dict:
        out = {"iterations": self.iterations, "converged": self.converged,
               "final_cost": self.final_cost, "runtime": self.runtime}
        if self.alpha is not None:
            out["alpha"] = self.alpha
        if self.h is not None:
            out["h"] = self.h
        return out


def laplacian_op(L: LaplacianMatrix, network: Optional[SynchronousNetwork]) -> Callable[[np.ndarray], np.ndarray]:
    if network is not None:
        return network.laplacian_round
    return lambda v: L.matrix @ v


def q_approx_apply(L: LaplacianMatrix, h: np.ndarray, v: np.ndarray, q: int,
                   network: Optional[SynchronousNetwork] = None) -> np.ndarray:
    """
    A_q v by the recursion w <- w - L(h * (L w)), acc += w.
    """
    Lop = laplacian_op(L, network)
    h = np.asarray(h, dtype=float)
    w = np.array(v, dtype=float)
    acc = w.copy()
    for _ in range(q):
        w = w - Lop(h * Lop(w))
        acc += w
    return acc


def aq_matrix(L: LaplacianMatrix, h: np.ndarray, q: int) -> np.ndarray:
    """Dense A_q; only for small n."""
    Lm = L.matrix
    B = np.eye(L.n) - Lm @ (np.asarray(h)[:, None] * Lm)
    acc = np.eye(L.n)
    term = np.eye(L.n)
    for _ in range(q):
        term = term @ B
        acc += term
    return acc


def step_size_bound(n: int, eps: float, q: int) -> float:
    """
    Largest primal step for asymptotic convergence of DANA-D:
    2(1 - eps) / ((n - 1)(1 + eps)(1 - eps^(q+1))).
    """
    if n < 2:
        raise ValueError(f"Step-size bound needs n >= 2, got {n}")
    if not 0 <= eps < 1:
        raise ValueError(f"eps must lie in [0, 1), got {eps}")
    return 2.0 * (1.0 - eps) / ((n - 1) * (1.0 + eps) * (1.0 - eps ** (q + 1)))


def theorem_step(n: int, eps: float, q: int) -> float:
    """Step used by the linear-rate guarantee, half of step_size_bound."""
    return 0.5 * step_size_bound(n, eps, q)


def resolve_alpha(config: DanaConfig, n: int, eps: Optional[float]) -> float:
    if config.alpha == "auto":
        if eps is None:
            raise ValueError("alpha='auto' needs the convergence metric eps")
        return theorem_step(n, eps, config.q)
    return float(config.alpha)


def linear_rate_certificate(g_z: float, g_next: float, z: np.ndarray, z_star: np.ndarray,
                            n: int, eps: float, q: int, tol: float = 1e-12) -> bool:
    """
    True iff the observed decrease g(z+) - g(z) meets the per-step linear-rate
    bound for the distance ||z - z*||.
    """
    dist2 = float(np.sum((np.asarray(z) - np.asarray(z_star)) ** 2))
    num = (1 - eps) ** 4 * (1 + eps * (-eps) ** q) ** 2 * dist2
    den = 2.0 * (n - 1) ** 2 * (1 + eps) ** 3 * (1 - eps ** (2 * (q + 1)))
    slack = tol * max(1.0, abs(g_z))
    return g_next - g_z <= -num / den + slack


def z_from_x(L: LaplacianMatrix, x: np.ndarray, x0: np.ndarray, omega: float = 0.0) -> np.ndarray:
    """
    The z with x = x0 + L z and sum(z) = omega.
    """
    n = L.n
    return laplacian_pinv(L) @ (np.asarray(x) - np.asarray(x0)) + (omega / n) * np.ones(n)


def inverse_sqrt_pd(A: np.ndarray) -> np.ndarray:
    vals, vecs = eigh(A)
    if vals[0] <= 0:
        raise RuntimeError(f"Matrix is not positive definite (min eigenvalue {vals[0]:.3g})")
    return (vecs / np.sqrt(vals)) @ vecs.T


def lyapunov_vq(state: PrimalDualState, z_star: np.ndarray, lam_star: Optional[np.ndarray],
                aq_inv_sqrt: np.ndarray) -> float:
    """
    V_Q = ||A_q^{-1/2} (z - z*)||^2 / 2 + ||lam - lam*||^2 / 2.
    """
    v = 0.5 * float(np.sum((aq_inv_sqrt @ (state.z - z_star)) ** 2))
    if state.lam is not None and lam_star is not None:
        v += 0.5 * float(np.sum((state.lam - lam_star) ** 2))
    return v


# DANA-D


def initial_state(problem: AllocationProblem, x0: np.ndarray, box: bool = False,
                  lam0: Optional[np.ndarray] = None) -> PrimalDualState:
    x0 = np.asarray(x0, dtype=float)
    lam = None
    if box:
        lam = np.zeros(2 * problem.n) if lam0 is None else np.asarray(lam0, dtype=float).copy()
        if np.any(lam < 0):
            raise ValueError("Initial box multipliers must be nonnegative")
    return PrimalDualState(np.zeros(problem.n), x0.copy(), lam)


def dana_d_step(state: PrimalDualState, problem: AllocationProblem, L: LaplacianMatrix,
                x0: np.ndarray, q: int, alpha: float,
                network: Optional[SynchronousNetwork] = None) -> PrimalDualState:
    """
    z+ = z - alpha A_q(z) L grad f(x0 + L z).
    """
    Lop = laplacian_op(L, network)
    cost = problem.cost
    grad_z = Lop(cost.grad(state.x))
    z = state.z - alpha * q_approx_apply(L, cost.hess(state.x), grad_z, q, network)
    return PrimalDualState(z, x0 + Lop(z), state.lam, state.mu)


def dgd_baseline_step(x: np.ndarray, problem: AllocationProblem, L: LaplacianMatrix, alpha: float) -> np.ndarray:
    """x+ = x - alpha L grad f(x)"""
    return x - alpha * (L.matrix @ problem.cost.grad(x))


def _record(rows: List[Dict], it: int, problem: AllocationProblem, x: np.ndarray, grad_norm: float,
            x_star: Optional[np.ndarray], extra: Optional[Dict] = None) -> None:
    row = {"iter": it, "f": problem.objective(x), "grad_norm": grad_norm,
           "feas_residual": abs(float(np.sum(x)) - problem.d)}
    if x_star is not None:
        row["dist"] = float(np.linalg.norm(x - x_star))
    if extra:
        row.update(extra)
    rows.append(row)


def dana_d_run(problem: AllocationProblem, L: LaplacianMatrix, config: DanaConfig,
               x0: Optional[np.ndarray] = None, eps: Optional[float] = None,
               x_star: Optional[np.ndarray] = None,
               network: Optional[SynchronousNetwork] = None) -> DanaReport:
    """
    Iterates DANA-D until ||z+ - z||_inf < tol or max_iters.
    """
    n = problem.n
    if n < 2:
        raise ValueError("DANA needs at least two agents")
    start = time.time()
    x0 = np.full(n, problem.d / n) if x0 is None else np.asarray(x0, dtype=float)
    alpha = resolve_alpha(config, n, eps)
    state = initial_state(problem, x0)
    rows: List[Dict] = []
    _record(rows, 0, problem, state.x, float(np.linalg.norm(L.matrix @ problem.cost.grad(state.x))), x_star)
    converged = False
    it = 0
    bar = progress(total=config.max_iters, desc=f"🔁 DANA-D q={config.q}", unit="it")
    for it in range(1, config.max_iters + 1):
        nxt = dana_d_step(state, problem, L, x0, config.q, alpha, network)
        delta = float(np.max(np.abs(nxt.z - state.z)))
        state = nxt
        if it % config.record_every == 0 or delta < config.tol:
            grad_norm = float(np.linalg.norm(L.matrix @ problem.cost.grad(state.x)))
            _record(rows, it, problem, state.x, grad_norm, x_star)
        bar.update(1)
        if not np.isfinite(delta):
            verbose_log(f"❌ DANA-D diverged at iteration {it} (alpha={alpha:.3g})")
            break
        if delta < config.tol:
            converged = True
            break
    bar.close()
    runtime = time.time() - start
    status = "✅" if converged else "⚠️"
    verbose_log(f"{status} DANA-D q={config.q}: {it} iterations, f={problem.objective(state.x):.10g}")
    return DanaReport(state.x, state.z, it, converged, rows, alpha=alpha, runtime=runtime)


def dgd_baseline_run(problem: AllocationProblem, L: LaplacianMatrix, alpha: float, max_iters: int,
                     tol: float = DANA_TOL, x0: Optional[np.ndarray] = None,
                     x_star: Optional[np.ndarray] = None, record_every: int = 1) -> DanaReport:
    n = problem.n
    start = time.time()
    x = np.full(n, problem.d / n) if x0 is None else np.asarray(x0, dtype=float).copy()
    rows: List[Dict] = []
    _record(rows, 0, problem, x, float(np.linalg.norm(L.matrix @ problem.cost.grad(x))), x_star)
    converged = False
    it = 0
    for it in range(1, max_iters + 1):
        nxt = dgd_baseline_step(x, problem, L, alpha)
        delta = float(np.max(np.abs(nxt - x)))
        x = nxt
        if it % record_every == 0 or delta < tol:
            _record(rows, it, problem, x, float(np.linalg.norm(L.matrix @ problem.cost.grad(x))), x_star)
        if delta < tol or not np.isfinite(delta):
            converged = bool(np.isfinite(delta))
            break
    return DanaReport(x, np.zeros(n), it, converged, rows, alpha=alpha, runtime=time.time() - start)


# DANA-C


def box_residual(problem: AllocationProblem, x: np.ndarray) -> np.ndarray:
    """P = [lower - x; x - upper], feasible iff P <= 0."""
    return np.concatenate([problem.lower - x, x - problem.upper])


def _dana_c_rates(state: PrimalDualState, problem: AllocationProblem, L: LaplacianMatrix, q: int,
                  network: Optional[SynchronousNetwork]):
    Lop = laplacian_op(L, network)
    n = problem.n
    lam_lo, lam_up = state.lam[:n], state.lam[n:]
    grad_z = Lop(problem.cost.grad(state.x) - lam_lo + lam_up)
    z_dot = -q_approx_apply(L, problem.cost.hess(state.x), grad_z, q, network)
    lam_dot = box_residual(problem, state.x)
    return z_dot, lam_dot, grad_z


def _stationarity(z_dot: np.ndarray, lam: np.ndarray, lam_dot: np.ndarray) -> float:
    proj_lam_dot = np.where((lam > 0) | (lam_dot > 0), lam_dot, 0.0)
    return max(float(np.max(np.abs(z_dot))), float(np.max(np.abs(proj_lam_dot))))


def dana_c_residual(state: PrimalDualState, problem: AllocationProblem, L: LaplacianMatrix, q: int,
                    network: Optional[SynchronousNetwork] = None) -> float:
    """Max-norm of (z', [P]+_lam) at state; zero exactly at a KKT point."""
    z_dot, lam_dot, _ = _dana_c_rates(state, problem, L, q, network)
    return _stationarity(z_dot, state.lam, lam_dot)


def dana_c_step(state: PrimalDualState, problem: AllocationProblem, L: LaplacianMatrix, x0: np.ndarray,
                q: int, h: float, network: Optional[SynchronousNetwork] = None,
                semi_implicit: bool = False) -> PrimalDualState:
    """
    Euler step of z' = -A_q grad_z Lagrangian, lam' = [P(z)]+_lam; the
    multipliers are clamped at zero after the update. With semi_implicit the
    multipliers read the box residual at the updated x.
    """
    if not problem.has_box:
        raise ValueError("DANA-C needs box constraints")
    z_dot, lam_dot, _ = _dana_c_rates(state, problem, L, q, network)
    z = state.z + h * z_dot
    x = x0 + laplacian_op(L, network)(z)
    if semi_implicit:
        lam_dot = box_residual(problem, x)
    lam = np.maximum(state.lam + h * lam_dot, 0.0)
    return PrimalDualState(z, x, lam, state.mu)


def dana_c_run(problem: AllocationProblem, L: LaplacianMatrix, config: DanaConfig, t_final: float,
               x0: Optional[np.ndarray] = None, lam0: Optional[np.ndarray] = None,
               optimum: Optional[OracleSolution] = None,
               network: Optional[SynchronousNetwork] = None) -> DanaReport:
    """
    Euler integration of DANA-C up to t_final. With quadratic costs the
    active-set optimum is computed and V_Q is reported; config.adaptive
    halves h whenever a step would increase V_Q.
    """
    n = problem.n
    if n < 2:
        raise ValueError("DANA needs at least two agents")
    if not problem.has_box:
        raise ValueError("DANA-C needs box constraints")
    start = time.time()
    x0 = np.full(n, problem.d / n) if x0 is None else np.asarray(x0, dtype=float)
    state = initial_state(problem, x0, box=True, lam0=lam0)

    if optimum is None and isinstance(problem.cost, QuadraticCost):
        optimum = solve_allocation_oracle(problem)
    vq = None
    if optimum is not None and isinstance(problem.cost, QuadraticCost):
        z_star = z_from_x(L, optimum.x, x0, state.omega)
        lam_star = np.concatenate([optimum.lam_lower, optimum.lam_upper])
        aq_inv_sqrt = inverse_sqrt_pd(aq_matrix(L, problem.cost.a, config.q))
        vq = lambda s: lyapunov_vq(s, z_star, lam_star, aq_inv_sqrt)
    x_star = optimum.x if optimum is not None else None

    h = config.h
    steps = min(int(np.ceil(t_final / h)), config.max_iters)
    rows: List[Dict] = []
    t = 0.0
    it = 0
    converged = False

    def record(s: PrimalDualState, grad_norm: float):
        extra = {"t": t, "box_violation": float(np.max(np.maximum(box_residual(problem, s.x), 0.0))),
                 "lam_min": float(np.min(s.lam))}
        if vq is not None:
            extra["VQ"] = vq(s)
        _record(rows, it, problem, s.x, grad_norm, x_star, extra)

    record(state, float("nan"))
    bar = progress(total=steps, desc=f"🔁 DANA-C q={config.q}", unit="step")
    while t < t_final - 1e-12 and it < config.max_iters:
        z_dot, lam_dot, grad_z = _dana_c_rates(state, problem, L, config.q, network)
        nxt = dana_c_step(state, problem, L, x0, config.q, h, network)
        if config.adaptive and vq is not None:
            halvings = 0
            while vq(nxt) > vq(state) + 1e-14 and halvings < DANA_MAX_HALVINGS:
                h *= 0.5
                halvings += 1
                nxt = dana_c_step(state, problem, L, x0, config.q, h, network)
            if halvings:
                verbose_log(f"🧮 DANA-C step halved {halvings}x to h={h:.3g} at t={t:.4g}")
        state = nxt
        t += h
        it += 1
        rate = _stationarity(z_dot, state.lam, lam_dot)
        if it % config.record_every == 0 or rate < config.tol:
            record(state, float(np.linalg.norm(grad_z)))
        bar.update(1)
        if not np.isfinite(rate):
            verbose_log(f"❌ DANA-C diverged at t={t:.4g}")
            break
        if rate < config.tol:
            converged = True
            break
    bar.close()
    if not converged and x_star is not None:
        converged = bool(np.linalg.norm(state.x - x_star) < 1e-4 * max(1.0, np.linalg.norm(x_star)))
    verbose_log(f"{'✅' if converged else '⚠️'} DANA-C q={config.q}: t={t:.4g}, "
                f"f={problem.objective(state.x):.10g}")
    return DanaReport(state.x, state.z, it, converged, rows, lam=state.lam, h=h, runtime=time.time() - start)


# Robust DANA: x is a free variable tied to z through x + L z = d_bar


def robust_laplacian(L: LaplacianMatrix, penalty: float) -> LaplacianMatrix:
    """
    Rescales L so that penalty * lambda_n^2 = 1, which keeps the series for
    (penalty L L)^+ convergent.
    """
    return L.scaled(1.0 / (np.sqrt(penalty) * L.lambda_n))


def robust_dana_step(state: PrimalDualState, problem: AllocationProblem, L: LaplacianMatrix,
                     d_bar: np.ndarray, q: int, h: float, penalty: float = ROBUST_AUG_PENALTY,
                     network: Optional[SynchronousNetwork] = None) -> PrimalDualState:
    """
    One Euler step of the saddle dynamics of the augmented Lagrangian
    sum f_i(x_i) + mu^T r + penalty ||r||^2 / 2 with r = x + L z - d_bar:
    Newton-scaled descent in x, A_q-scaled descent in z, ascent in mu and in
    the box multipliers when boxes are present.
    """
    Lop = laplacian_op(L, network)
    n = problem.n
    cost = problem.cost
    r = state.x + Lop(state.z) - d_bar
    force = state.mu + penalty * r
    grad_x = cost.grad(state.x) + force
    if state.lam is not None:
        grad_x = grad_x - state.lam[:n] + state.lam[n:]
    x = state.x - h * grad_x / (cost.hess(state.x) + penalty)
    z = state.z - h * q_approx_apply(L, np.full(n, penalty), Lop(force), q, network)
    mu = state.mu + h * r
    lam = state.lam
    if lam is not None:
        lam = np.maximum(lam + h * box_residual(problem, state.x), 0.0)
    return PrimalDualState(z, x, lam, mu)


def robust_run(problem: AllocationProblem, L: LaplacianMatrix, q: int, h: float, t_final: float,
               d_bar: Optional[np.ndarray] = None, x0: Optional[np.ndarray] = None,
               penalty: float = ROBUST_AUG_PENALTY, perturb_times: Sequence[float] = (),
               perturb_scale: float = 1.0, rng: Optional[np.random.Generator] = None,
               record_every: int = 1, x_star: Optional[np.ndarray] = None) -> DanaReport:
    """
    Integrates robust DANA; at each perturbation time x is hit with Gaussian
    noise of the given scale, breaking x + L z = d_bar until the dynamics
    restore it.
    """
    n = problem.n
    if n < 2:
        raise ValueError("DANA needs at least two agents")
    start = time.time()
    d_bar = np.full(n, problem.d / n) if d_bar is None else np.asarray(d_bar, dtype=float)
    if abs(d_bar.sum() - problem.d) > FEASIBILITY_RTOL * max(1.0, abs(problem.d)):
        raise ValueError(f"d_bar sums to {d_bar.sum():.6g}, expected d={problem.d:.6g}")
    L = robust_laplacian(L, penalty)
    x = d_bar.copy() if x0 is None else np.asarray(x0, dtype=float).copy()
    lam = np.zeros(2 * n) if problem.has_box else None
    state = PrimalDualState(np.zeros(n), x, lam, np.zeros(n))
    rng = rng or np.random.default_rng(0)
    pending = sorted(perturb_times)

    steps = int(np.ceil(t_final / h))
    rows: List[Dict] = []

    def record(it: int, t: float):
        viol = float(np.linalg.norm(state.x + L.matrix @ state.z - d_bar))
        _record(rows, it, problem, state.x, float("nan"), x_star, {"t": t, "violation": viol})

    record(0, 0.0)
    bar = progress(total=steps, desc=f"🔁 robust DANA q={q}", unit="step")
    for it in range(1, steps + 1):
        t = it * h
        state = robust_dana_step(state, problem, L, d_bar, q, h, penalty)
        while pending and t >= pending[0]:
            state = replace(state, x=state.x + perturb_scale * rng.standard_normal(n))
            verbose_log(f"⚠️ robust DANA: state perturbation at t={pending[0]:.4g}")
            pending.pop(0)
        if it % record_every == 0 or it == steps:
            record(it, t)
        bar.update(1)
    bar.close()
    violation = rows[-1]["violation"]
    converged = bool(np.isfinite(violation) and violation < 1e-3)
    verbose_log(f"{'✅' if converged else '⚠️'} robust DANA q={q}: violation={violation:.3g}")
    return DanaReport(state.x, state.z, steps, converged, rows, lam=state.lam, h=h, runtime=time.time() - start)
