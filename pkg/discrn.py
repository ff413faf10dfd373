"""
Distributed stochastic cubic-regularized Newton for nested allocation.

Outer problem: min_x E[ min_p sum_i f_i(x, p_i) s.t. sum p_i = P_ref + chi ].
Every agent keeps a scalar copy x_i of the outer variable. The inner
allocation is solved per realization by a discretized Laplacian flow with a
locally checkable stopping rule; the outer step minimizes a separable
cubic-regularized submodel by decentralized gradient descent.
"""
import time
from dataclasses import dataclass, field
from typing import Dict, List, NamedTuple, Optional, Sequence, Union

import numpy as np
from scipy.linalg import eigh

from config import (
    DISCRN_BATCH,
    DISCRN_CONDITION_C,
    DISCRN_CONDITION_EPS,
    DISCRN_CONSENSUS_ROUNDS,
    DISCRN_CONSENSUS_RTOL,
    DISCRN_DELTA,
    DISCRN_ETA_GRADIENT,
    DISCRN_ETA_NEWTON,
    DISCRN_EVAL_REALIZATIONS,
    DISCRN_INNER_MAX_ROUNDS,
    DISCRN_RHO,
    DISCRN_SUBSOLVER_ROUNDS,
    DISCRN_SUBSOLVER_TOL,
)
from graph_core import Graph, LaplacianMatrix, build_laplacian
from problems import ShiftedQuadraticCost, inner_kkt_solution
from utils import progress, verbose_log

SUBMODEL_KINDS = ("cubic", "gradient", "newton")


@dataclass(frozen=True)
class NoiseModel:
    """Per-agent disturbance chi_i: uniform on [low, high] or a point mass at low."""
    kind: str
    low: float
    high: float = 0.0

    def __post_init__(self):
        if self.kind not in ("uniform", "point"):
            raise ValueError(f"Unknown noise kind '{self.kind}'")
        if self.kind == "uniform" and self.high < self.low:
            raise ValueError(f"Uniform noise needs low <= high, got [{self.low}, {self.high}]")

    @classmethod
    def from_spec(cls, spec: Sequence) -> "NoiseModel":
        kind = spec[0]
        if kind == "point":
            return cls("point", float(spec[1]), float(spec[1]))
        return cls(kind, float(spec[1]), float(spec[2]))

    def sample(self, rng: np.random.Generator, size) -> np.ndarray:
        if self.kind == "point":
            return np.full(size, self.low)
        return rng.uniform(self.low, self.high, size=size)


@dataclass
class NestedProblem:
    cost: ShiftedQuadraticCost
    p_ref: float
    noise: List[NoiseModel]
    graph: Graph

    def __post_init__(self):
        if isinstance(self.noise, NoiseModel):
            self.noise = [self.noise] * self.cost.n
        if len(self.noise) != self.cost.n:
            raise ValueError(f"{len(self.noise)} noise models for {self.cost.n} agents")
        if self.graph.n != self.cost.n:
            raise ValueError(f"Graph has {self.graph.n} nodes but cost has {self.cost.n} agents")

    @property
    def n(self) -> int:
        return self.cost.n

    def sample_offsets(self, rng: np.random.Generator, count: int) -> np.ndarray:
        """chi_hat with shape (n, count)."""
        return np.vstack([model.sample(rng, count) for model in self.noise])

    def curvature_range(self, x: np.ndarray):
        """(omega, theta): min and max of alpha_i(x_i) at the current outer point."""
        a = self.cost.alpha(x)
        if np.any(a <= 0):
            raise ValueError("alpha_i(x) must stay positive")
        return float(np.min(a)), float(np.max(a))


@dataclass
class InnerSolverConfig:
    delta: float = DISCRN_DELTA
    eta: Optional[float] = None
    eta_rule: str = "rate"
    max_rounds: int = DISCRN_INNER_MAX_ROUNDS

    def __post_init__(self):
        if self.delta <= 0:
            raise ValueError(f"delta must be positive, got {self.delta}")
        if self.eta_rule not in ("rate", "asymptotic"):
            raise ValueError(f"Unknown eta rule '{self.eta_rule}'")


@dataclass
class DiscrnConfig:
    method: str = "cubic"
    delta: float = DISCRN_DELTA
    batch: int = DISCRN_BATCH
    rho: float = DISCRN_RHO
    eta_gradient: float = DISCRN_ETA_GRADIENT
    eta_newton: float = DISCRN_ETA_NEWTON
    outer_iters: int = 50
    x0: float = 1.0
    eta_rule: str = "rate"
    subsolver_rounds: int = DISCRN_SUBSOLVER_ROUNDS
    subsolver_tol: float = DISCRN_SUBSOLVER_TOL
    consensus_rtol: float = DISCRN_CONSENSUS_RTOL
    consensus_rounds: int = DISCRN_CONSENSUS_ROUNDS
    inner_max_rounds: int = DISCRN_INNER_MAX_ROUNDS
    eval_realizations: int = DISCRN_EVAL_REALIZATIONS
    condition_c: float = DISCRN_CONDITION_C
    condition_eps: float = DISCRN_CONDITION_EPS

    def __post_init__(self):
        if self.method not in SUBMODEL_KINDS:
            raise ValueError(f"Unknown method '{self.method}', expected one of {SUBMODEL_KINDS}")
        if self.batch < 1:
            raise ValueError(f"Batch size must be >= 1, got {self.batch}")


def pt_inverse(A: np.ndarray, m: float) -> np.ndarray:
    """
    Positive-definite truncated inverse: eigenvalues are replaced by
    max(|lambda|, m) before inversion.
    """
    if m <= 0:
        raise ValueError(f"PT-inverse needs m > 0, got {m}")
    A = np.asarray(A, dtype=float)
    vals, vecs = eigh(0.5 * (A + A.T))
    inv = 1.0 / np.maximum(np.abs(vals), m)
    out = (vecs * inv) @ vecs.T
    return 0.5 * (out + out.T)


# Inner problem


def inner_flow_step(p: np.ndarray, x: np.ndarray, cost: ShiftedQuadraticCost, L: LaplacianMatrix,
                    eta: float) -> np.ndarray:
    """p+ = p - eta L grad_p f(x, p); p may hold one column per realization."""
    return p - eta * (L.matrix @ cost.grad_p(x, p))


def inner_stop_threshold(delta: float, eta: float, lam2: float, omega: float, n: int) -> float:
    return delta * eta * lam2 * omega / np.sqrt(n)


def inner_stop_check(p: np.ndarray, p_next: np.ndarray, delta: float, eta: float, lam2: float,
                     omega: float, n: int) -> bool:
    """
    All |p+_i - p_i| <= delta eta lambda_2 omega / sqrt(n); when true the
    pre-step iterate p is within delta of the inner optimum.
    """
    return bool(np.all(np.abs(p_next - p) <= inner_stop_threshold(delta, eta, lam2, omega, n)))


class EtaBounds(NamedTuple):
    eta_asym: float     # asymptotic convergence below this
    eta_rate: float     # certified exponential convergence below this
    eta_star: float     # step with the stated contraction factor
    rate: float

    def iterations(self, delta: float, init_dist: float) -> int:
        """Rounds K after which ||p^K - p*|| <= delta at eta_star."""
        if init_dist <= delta:
            return 0
        if self.rate <= 0.0:
            return 1
        return int(np.ceil(np.log(delta / init_dist) / np.log(self.rate)))


def eta_bounds(omega: float, theta: float, lam2: float, lam_n: float) -> EtaBounds:
    if min(omega, theta, lam2, lam_n) <= 0:
        raise ValueError("eta bounds need positive omega, theta, lambda_2, lambda_n")
    ratio = (omega * lam2) / (theta * lam_n)
    rate = float(np.sqrt(max(0.0, 1.0 - ratio ** 2)))
    return EtaBounds(2.0 / (theta * lam_n), 2.0 * omega * lam2 / (theta ** 2 * lam_n ** 2),
                     omega * lam2 / (theta ** 2 * lam_n ** 2), rate)


def inner_step_size(omega: float, theta: float, L: LaplacianMatrix, config: InnerSolverConfig) -> float:
    if config.eta is not None:
        return config.eta
    bounds = eta_bounds(omega, theta, L.lambda2, L.lambda_n)
    if config.eta_rule == "asymptotic":
        return 0.5 * bounds.eta_asym
    return bounds.eta_star


class InnerResult(NamedTuple):
    p: np.ndarray
    rounds: np.ndarray
    stopped: np.ndarray
    eta: float


def initial_allocation(p_ref: float, offsets: np.ndarray) -> np.ndarray:
    """Agent 0 takes P_ref on top of its own offset; the rest start at their offset."""
    p0 = np.array(offsets, dtype=float, copy=True)
    p0[0] += p_ref
    return p0


def solve_inner(problem: NestedProblem, x: np.ndarray, offsets: np.ndarray, L: LaplacianMatrix,
                config: InnerSolverConfig) -> InnerResult:
    """
    Runs the Laplacian flow on every realization column until its stopping
    rule fires; stopped columns are frozen.
    """
    n = problem.n
    omega, theta = problem.curvature_range(x)
    eta = inner_step_size(omega, theta, L, config)
    thresh = inner_stop_threshold(config.delta, eta, L.lambda2, omega, n)
    p = initial_allocation(problem.p_ref, offsets)
    if p.ndim == 1:
        p = p[:, None]
    S = p.shape[1]
    rounds = np.zeros(S, dtype=int)
    active = np.ones(S, dtype=bool)
    for _ in range(config.max_rounds):
        idx = np.flatnonzero(active)
        if idx.size == 0:
            break
        cur = p[:, idx]
        nxt = inner_flow_step(cur, x, problem.cost, L, eta)
        done = np.all(np.abs(nxt - cur) <= thresh, axis=0)
        p[:, idx] = nxt
        rounds[idx] += 1
        active[idx[done]] = False
    if np.any(active):
        verbose_log(f"⚠️ inner flow hit {config.max_rounds} rounds on {int(active.sum())} realization(s)")
    return InnerResult(p, rounds, ~active, eta)


# Outer submodel


@dataclass
class Submodel:
    """
    Separable submodel around the anchor: F^S(anchor) + g^T xi + xi^T H xi / 2
    plus the kind's regularizer, with xi = x - anchor and H diagonal.
    """
    kind: str
    anchor: np.ndarray
    g: np.ndarray
    H: np.ndarray
    reg: np.ndarray
    base_value: float

    def _xi(self, x):
        return np.asarray(x, dtype=float) - self.anchor

    def value(self, x) -> float:
        xi = self._xi(x)
        lin = float(np.sum(self.g * xi))
        if self.kind == "cubic":
            return self.base_value + lin + 0.5 * float(np.sum(self.H * xi * xi)) + float(np.sum(self.reg / 6.0 * np.abs(xi) ** 3))
        if self.kind == "gradient":
            return self.base_value + lin + float(np.sum(0.5 * self.reg * xi * xi))
        return self.base_value + lin + 0.5 * float(np.sum((self.H + self.reg) * xi * xi))

    def grad(self, x) -> np.ndarray:
        xi = self._xi(x)
        if self.kind == "cubic":
            return self.g + self.H * xi + 0.5 * self.reg * np.abs(xi) * xi
        if self.kind == "gradient":
            return self.g + self.reg * xi
        return self.g + (self.H + self.reg) * xi

    def default_alpha0(self) -> float:
        if self.kind == "cubic":
            return 1.0 / (float(np.max(np.abs(self.H))) + float(np.sqrt(np.max(self.reg) * np.max(np.abs(self.g)))) + 1e-12)
        if self.kind == "gradient":
            return 1.0 / float(np.max(self.reg))
        return 1.0 / (float(np.max(np.maximum(self.H, 0.0))) + float(np.max(self.reg)))


def sampled_objective(cost: ShiftedQuadraticCost, x: np.ndarray, p: np.ndarray) -> float:
    """F^S(x) = mean over columns of sum_i f_i(x_i, p_i^s)."""
    return float(np.mean(np.sum(cost.value(x, p), axis=0)))


def build_submodel(x_k: np.ndarray, p_tilde: np.ndarray, cost: ShiftedQuadraticCost, kind: str,
                   rho: Union[float, np.ndarray] = DISCRN_RHO, eta_gradient: float = DISCRN_ETA_GRADIENT,
                   eta_newton: float = DISCRN_ETA_NEWTON) -> Submodel:
    if kind not in SUBMODEL_KINDS:
        raise ValueError(f"Unknown submodel kind '{kind}'")
    p_tilde = np.asarray(p_tilde, dtype=float)
    if p_tilde.ndim == 1:
        p_tilde = p_tilde[:, None]
    if p_tilde.shape[1] == 0:
        raise ValueError("Submodel needs a nonempty batch")
    x_k = np.asarray(x_k, dtype=float)
    n = len(x_k)
    g = np.mean(cost.grad_x(x_k, p_tilde), axis=1)
    H = np.mean(cost.hess_x(x_k, p_tilde), axis=1)
    reg = {"cubic": np.broadcast_to(np.asarray(rho, dtype=float), (n,)),
           "gradient": np.full(n, float(eta_gradient)),
           "newton": np.full(n, float(eta_newton))}[kind].copy()
    return Submodel(kind, x_k.copy(), g, H, reg, sampled_objective(cost, x_k, p_tilde))


def mixing_step(x: np.ndarray, L: LaplacianMatrix) -> np.ndarray:
    """W x with W = I - L / lambda_n."""
    return x - (L.matrix @ x) / L.lambda_n


def disagreement(x: np.ndarray) -> float:
    return float(np.linalg.norm(x - np.mean(x)))


class SubsolverResult(NamedTuple):
    x: np.ndarray
    rounds: int
    consensus_rounds: int
    model_start: float
    model_end: float


def dgd_subsolver(submodel: Submodel, L: LaplacianMatrix, alpha0: Optional[float] = None,
                  rounds: int = DISCRN_SUBSOLVER_ROUNDS, tol: float = DISCRN_SUBSOLVER_TOL,
                  consensus_rtol: float = DISCRN_CONSENSUS_RTOL,
                  consensus_rounds: int = DISCRN_CONSENSUS_ROUNDS) -> SubsolverResult:
    """
    x^{t+1} = W x^t - (alpha0 / t) grad m(x^t) from the anchor, then pure
    averaging rounds until the consensus residual is below consensus_rtol.
    """
    alpha0 = submodel.default_alpha0() if alpha0 is None else alpha0
    x = submodel.anchor.copy()
    start = submodel.value(x)
    t = 0
    for t in range(1, rounds + 1):
        nxt = mixing_step(x, L) - (alpha0 / t) * submodel.grad(x)
        step = float(np.max(np.abs(nxt - x)))
        x = nxt
        if step < tol or not np.isfinite(step):
            break
    k = 0
    scale = max(1.0, float(np.linalg.norm(x)))
    while disagreement(x) > consensus_rtol * scale and k < consensus_rounds:
        x = mixing_step(x, L)
        k += 1
    return SubsolverResult(x, t, k, start, submodel.value(x))


def subsolver_condition_check(x_k: np.ndarray, x_next: np.ndarray, submodel: Submodel, c: float,
                              eps: float, rho: float, consensus_tol: float = DISCRN_CONSENSUS_RTOL) -> bool:
    """
    (i) consensus residual within tolerance and (ii) strict submodel decrease
    m(x+) - m(x) < -c eps ||dx|| - c sqrt(rho eps) ||dx||^2.
    """
    x_next = np.asarray(x_next, dtype=float)
    consensual = disagreement(x_next) <= consensus_tol * max(1.0, float(np.linalg.norm(x_next)))
    step = float(np.linalg.norm(x_next - np.asarray(x_k)))
    bound = -c * eps * step - c * np.sqrt(rho * eps) * step ** 2
    return bool(consensual and submodel.value(x_next) - submodel.value(x_k) < bound)


# Evaluation helpers


def empirical_objective(cost: ShiftedQuadraticCost, x, p_ref: float, chi_totals: np.ndarray) -> float:
    """
    Mean over realizations of sum_i f_i(x, p*) with p* the closed-form inner
    optimum for total P_ref + chi.
    """
    x = np.broadcast_to(np.asarray(x, dtype=float), (cost.n,))
    totals = p_ref + np.asarray(chi_totals, dtype=float)
    p_star = inner_kkt_solution(cost.alpha(x), cost.beta(x), totals)
    return sampled_objective(cost, x, p_star)


def plateau_iteration(series: Sequence[float], band: float = 0.01, tail: float = 0.2) -> Optional[int]:
    """
    First index after which the series stays within band * |tail mean| of the
    mean of its last `tail` fraction. None when the final value itself is out.
    """
    values = np.asarray(series, dtype=float)
    if values.size == 0 or not np.all(np.isfinite(values)):
        return None
    k = max(1, int(np.ceil(tail * values.size)))
    ref = float(np.mean(values[-k:]))
    width = band * max(abs(ref), 1e-12)
    outside = np.flatnonzero(np.abs(values - ref) > width)
    if outside.size == 0:
        return 0
    last = int(outside[-1])
    return last + 1 if last + 1 < values.size else None


def batch_size_bound(M1: float, sigma1: float, M2: float, sigma2: float, c_bar: float, eps: float,
                     rho: float, zeta: float) -> int:
    """
    S >= max{M1/(c eps), s1^2/(c^2 eps^2), M2/(c sqrt(rho eps)), s2^2/(c^2 rho eps)}
         * log(1 / (eps^(3/2) zeta c)).
    """
    if min(c_bar, eps, rho, zeta) <= 0 or min(M1, sigma1, M2, sigma2) < 0:
        raise ValueError("batch-size bound needs positive c_bar, eps, rho, zeta and nonnegative M, sigma")
    terms = (M1 / (c_bar * eps), sigma1 ** 2 / (c_bar ** 2 * eps ** 2),
             M2 / (c_bar * np.sqrt(rho * eps)), sigma2 ** 2 / (c_bar ** 2 * rho * eps))
    factor = np.log(1.0 / (eps ** 1.5 * zeta * c_bar))
    return max(1, int(np.ceil(max(terms) * max(factor, 0.0))))


# Outer loop


@dataclass
class DiscrnReport:
    method: str
    x: np.ndarray
    rows: List[Dict] = field(default_factory=list)
    converged: bool = False
    plateau: Optional[int] = None
    runtime: float = 0.0

    @property
    def accepted_fraction(self) -> float:
        if not self.rows:
            return 0.0
        return float(np.mean([r["accepted"] for r in self.rows]))

    @property
    def final_cost(self) -> float:
        return self.rows[-1]["empirical_F"] if self.rows else float("nan")

    def summary(self) -> Dict:
        return {"method": self.method, "converged": self.converged, "plateau": self.plateau,
                "final_cost": self.final_cost, "accepted_fraction": self.accepted_fraction,
                "x_mean": float(np.mean(self.x)), "runtime": self.runtime}


def discrn_run(problem: NestedProblem, config: DiscrnConfig, rng: np.random.Generator,
               eval_rng: Optional[np.random.Generator] = None) -> DiscrnReport:
    """
    Outer loop: draw a batch, solve every inner realization to delta, build
    the submodel, minimize it by DGD, repeat. Reports the empirical objective
    at the agents' mean outer point.
    """
    start = time.time()
    L = build_laplacian(problem.graph)
    n = problem.n
    x = np.full(n, float(config.x0))
    inner_cfg = InnerSolverConfig(config.delta, None, config.eta_rule, config.inner_max_rounds)
    eval_rng = eval_rng or np.random.default_rng(0)
    eval_totals = problem.sample_offsets(eval_rng, config.eval_realizations).sum(axis=0)
    rows: List[Dict] = []
    inner_ok = True
    bar = progress(total=config.outer_iters, desc=f"🔁 DiSCRN {config.method}", unit="outer")
    for k in range(config.outer_iters):
        offsets = problem.sample_offsets(rng, config.batch)
        inner = solve_inner(problem, x, offsets, L, inner_cfg)
        inner_ok &= bool(np.all(inner.stopped))
        model = build_submodel(x, inner.p, problem.cost, config.method, config.rho,
                               config.eta_gradient, config.eta_newton)
        sub = dgd_subsolver(model, L, rounds=config.subsolver_rounds, tol=config.subsolver_tol,
                            consensus_rtol=config.consensus_rtol, consensus_rounds=config.consensus_rounds)
        accepted = subsolver_condition_check(x, sub.x, model, config.condition_c, config.condition_eps,
                                             float(np.max(model.reg)), config.consensus_rtol)
        x = sub.x
        rows.append({"outer_iter": k + 1,
                     "empirical_F": empirical_objective(problem.cost, np.mean(x), problem.p_ref, eval_totals),
                     "disagreement": disagreement(x), "accepted": accepted,
                     "inner_rounds_total": int(inner.rounds.sum()), "x_mean": float(np.mean(x))})
        bar.update(1)
        if not np.all(np.isfinite(x)):
            verbose_log(f"❌ DiSCRN {config.method} diverged at outer iteration {k + 1}")
            break
    bar.close()
    plateau = plateau_iteration([r["empirical_F"] for r in rows])
    converged = inner_ok and plateau is not None and bool(np.all(np.isfinite(x)))
    verbose_log(f"{'✅' if converged else '⚠️'} DiSCRN {config.method}: F={rows[-1]['empirical_F']:.6g}, "
                f"plateau at {plateau}")
    return DiscrnReport(config.method, x, rows, converged, plateau, time.time() - start)
