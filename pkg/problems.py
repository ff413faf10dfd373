"""
Cost-function catalog and problem containers for the allocation problems:
min sum_i f_i(x_i) subject to sum_i x_i = d and optional boxes.
"""
from dataclasses import dataclass
from typing import List, NamedTuple, Optional, Sequence, Tuple

import numpy as np
from numpy.polynomial import polynomial as P
from scipy.linalg import solve
from scipy.optimize import minimize_scalar

from graph_core import Graph


class CostFunction:
    """
    Separable cost sum_i f_i(x_i); every method is vectorized over agents.
    """
    kind = "abstract"

    @property
    def n(self) -> int:
        raise NotImplementedError

    def value(self, x: np.ndarray) -> np.ndarray:
        raise NotImplementedError

    def grad(self, x: np.ndarray) -> np.ndarray:
        raise NotImplementedError

    def hess(self, x: np.ndarray) -> np.ndarray:
        raise NotImplementedError

    def total(self, x: np.ndarray) -> float:
        return float(np.sum(self.value(x)))

    def to_json(self) -> dict:
        raise NotImplementedError


def _vec(values, name: str) -> np.ndarray:
    arr = np.atleast_1d(np.asarray(values, dtype=float))
    if arr.ndim != 1:
        raise ValueError(f"{name} must be one value per agent")
    return arr


class QuadraticCost(CostFunction):
    """f_i(x) = a_i x^2 / 2 + b_i x"""
    kind = "quadratic"

    def __init__(self, a, b=None):
        self.a = _vec(a, "a")
        self.b = np.zeros_like(self.a) if b is None else _vec(b, "b")
        if self.a.shape != self.b.shape:
            raise ValueError("a and b must have the same length")
        if np.any(self.a <= 0):
            raise ValueError("quadratic cost needs a_i > 0")

    @property
    def n(self) -> int:
        return len(self.a)

    def value(self, x):
        return 0.5 * self.a * x * x + self.b * x

    def grad(self, x):
        return self.a * x + self.b

    def hess(self, x):
        return np.broadcast_to(self.a, np.shape(x)).copy()

    def to_json(self):
        return {"kind": self.kind, "a": self.a.tolist(), "b": self.b.tolist()}


class SinusoidalQuadraticCost(CostFunction):
    """f_i(x) = a_i x^2 / 2 + b_i x + c_i sin(x + theta_i)"""
    kind = "sinusoidal_quadratic"

    def __init__(self, a, b, c, theta):
        self.a = _vec(a, "a")
        self.b = _vec(b, "b")
        self.c = _vec(c, "c")
        self.theta = _vec(theta, "theta")
        if not (self.a.shape == self.b.shape == self.c.shape == self.theta.shape):
            raise ValueError("a, b, c, theta must have the same length")
        if np.any(self.a - self.c <= 0):
            raise ValueError("sinusoidal cost needs a_i - c_i > 0")

    @property
    def n(self) -> int:
        return len(self.a)

    def value(self, x):
        return 0.5 * self.a * x * x + self.b * x + self.c * np.sin(x + self.theta)

    def grad(self, x):
        return self.a * x + self.b + self.c * np.cos(x + self.theta)

    def hess(self, x):
        return self.a - self.c * np.sin(x + self.theta)

    def to_json(self):
        return {"kind": self.kind, "a": self.a.tolist(), "b": self.b.tolist(),
                "c": self.c.tolist(), "theta": self.theta.tolist()}


def _stack_coefficients(rows: Sequence[Sequence[float]]) -> np.ndarray:
    width = max(len(r) for r in rows)
    out = np.zeros((len(rows), width))
    for k, r in enumerate(rows):
        out[k, : len(r)] = r
    return out


class ShiftedQuadraticCost(CostFunction):
    """
    Nested-problem cost f_i(x, p) = alpha_i(x) p^2 / 2 + beta_i(x) p + gamma_i(x)
    with polynomial alpha_i, beta_i, gamma_i (coefficients low to high degree,
    one row per agent). The outer argument x is scalar per agent.
    """
    kind = "shifted_quadratic"

    def __init__(self, alpha_coef, beta_coef, gamma_coef=None):
        self.alpha_coef = _stack_coefficients(alpha_coef)
        self.beta_coef = _stack_coefficients(beta_coef)
        n = self.alpha_coef.shape[0]
        self.gamma_coef = np.zeros((n, 1)) if gamma_coef is None else _stack_coefficients(gamma_coef)
        if not (self.beta_coef.shape[0] == self.gamma_coef.shape[0] == n):
            raise ValueError("alpha, beta, gamma need one coefficient row per agent")

    @property
    def n(self) -> int:
        return self.alpha_coef.shape[0]

    @staticmethod
    def _eval(coef: np.ndarray, x: np.ndarray, der: int = 0) -> np.ndarray:
        c = P.polyder(coef, m=der, axis=1) if der else coef
        if c.shape[1] == 0:
            return np.zeros_like(np.asarray(x, dtype=float))
        return P.polyval(np.asarray(x, dtype=float), c.T, tensor=False)

    def alpha(self, x, der: int = 0):
        return self._eval(self.alpha_coef, x, der)

    def beta(self, x, der: int = 0):
        return self._eval(self.beta_coef, x, der)

    def gamma(self, x, der: int = 0):
        return self._eval(self.gamma_coef, x, der)

    @staticmethod
    def _col(v, p):
        v = np.asarray(v)
        return v[:, None] if np.ndim(p) == 2 else v

    # Accessors below accept p with shape (n,) or (n, S) for S realizations

    def value(self, x, p=None):
        if p is None:
            raise TypeError("shifted_quadratic cost needs the inner argument p")
        a, b, g = self.alpha(x), self.beta(x), self.gamma(x)
        return 0.5 * self._col(a, p) * p * p + self._col(b, p) * p + self._col(g, p)

    def grad_p(self, x, p):
        return self._col(self.alpha(x), p) * p + self._col(self.beta(x), p)

    def hess_p(self, x):
        return self.alpha(x)

    def grad_x(self, x, p):
        return (0.5 * self._col(self.alpha(x, 1), p) * p * p
                + self._col(self.beta(x, 1), p) * p + self._col(self.gamma(x, 1), p))

    def hess_x(self, x, p):
        return (0.5 * self._col(self.alpha(x, 2), p) * p * p
                + self._col(self.beta(x, 2), p) * p + self._col(self.gamma(x, 2), p))

    def grad(self, x, p=None):
        if p is None:
            raise TypeError("shifted_quadratic cost needs the inner argument p")
        return self.grad_p(x, p)

    def hess(self, x, p=None):
        return self.hess_p(x)

    def to_json(self):
        return {"kind": self.kind, "alpha": self.alpha_coef.tolist(),
                "beta": self.beta_coef.tolist(), "gamma": self.gamma_coef.tolist()}


class BinaryQuadraticCost(CostFunction):
    """
    f_i(x) = a_i (x - b_i)^2 / 2 - a_i b_i^2 / 2 + d_i, shaped so that
    f_i(1) - f_i(0) = c_i, i.e. b_i = (1 - 2 c_i / a_i) / 2.
    """
    kind = "binary_quadratic"

    def __init__(self, a, b, d=None):
        self.a = _vec(a, "a")
        self.b = _vec(b, "b")
        self.d = np.zeros_like(self.a) if d is None else _vec(d, "d")
        if np.any(self.a == 0):
            raise ValueError("binary cost needs a_i != 0")

    @classmethod
    def from_increments(cls, a, c, d=None) -> "BinaryQuadraticCost":
        a = _vec(a, "a")
        c = _vec(c, "c")
        return cls(a, 0.5 * (1.0 - 2.0 * c / a), d)

    @property
    def n(self) -> int:
        return len(self.a)

    @property
    def increments(self) -> np.ndarray:
        return 0.5 * self.a * (1.0 - self.b) ** 2 - 0.5 * self.a * self.b ** 2

    def value(self, x):
        return 0.5 * self.a * (x - self.b) ** 2 - 0.5 * self.a * self.b ** 2 + self.d

    def grad(self, x):
        return self.a * (x - self.b)

    def hess(self, x):
        return np.broadcast_to(self.a, np.shape(x)).copy()

    def to_json(self):
        return {"kind": self.kind, "a": self.a.tolist(), "b": self.b.tolist(), "d": self.d.tolist()}


class HessianBounds(NamedTuple):
    delta: np.ndarray
    Delta: np.ndarray

    def global_bounds(self) -> "HessianBounds":
        """
        Scalar (min delta, max Delta) broadcast to every agent, for when local
        bounds are unknown.
        """
        n = len(self.delta)
        return HessianBounds(np.full(n, float(np.min(self.delta))), np.full(n, float(np.max(self.Delta))))


def hessian_bounds(cost: CostFunction) -> HessianBounds:
    if isinstance(cost, QuadraticCost):
        return HessianBounds(cost.a.copy(), cost.a.copy())
    if isinstance(cost, SinusoidalQuadraticCost):
        return HessianBounds(cost.a - cost.c, cost.a + cost.c)
    raise TypeError(f"No analytic Hessian bounds for cost kind '{cost.kind}'")


def cost_from_json(payload: dict) -> CostFunction:
    kind = payload.get("kind")
    if kind == QuadraticCost.kind:
        return QuadraticCost(payload["a"], payload["b"])
    if kind == SinusoidalQuadraticCost.kind:
        return SinusoidalQuadraticCost(payload["a"], payload["b"], payload["c"], payload["theta"])
    if kind == ShiftedQuadraticCost.kind:
        return ShiftedQuadraticCost(payload["alpha"], payload["beta"], payload["gamma"])
    if kind == BinaryQuadraticCost.kind:
        return BinaryQuadraticCost(payload["a"], payload["b"], payload["d"])
    raise TypeError(f"Unknown cost kind '{kind}'")


@dataclass
class AllocationProblem:
    """
    min sum f_i(x_i) s.t. sum x_i = d, lower <= x <= upper (boxes optional).
    """
    cost: CostFunction
    d: float
    graph: Optional[Graph] = None
    lower: Optional[np.ndarray] = None
    upper: Optional[np.ndarray] = None

    def __post_init__(self):
        self.d = float(self.d)
        if self.graph is not None and self.graph.n != self.cost.n:
            raise ValueError(f"Graph has {self.graph.n} nodes but cost has {self.cost.n} agents")
        if (self.lower is None) != (self.upper is None):
            raise ValueError("Give both lower and upper bounds or neither")
        if self.lower is not None:
            self.lower = _vec(self.lower, "lower")
            self.upper = _vec(self.upper, "upper")
            if np.any(self.lower > self.upper):
                raise ValueError("lower bound exceeds upper bound")
            if not (self.lower.sum() < self.d < self.upper.sum()):
                raise ValueError(
                    f"d={self.d} must lie strictly between sum(lower)={self.lower.sum():.6g} "
                    f"and sum(upper)={self.upper.sum():.6g}")

    @property
    def n(self) -> int:
        return self.cost.n

    @property
    def has_box(self) -> bool:
        return self.lower is not None

    def objective(self, x: np.ndarray) -> float:
        return self.cost.total(x)

    def to_json(self) -> dict:
        payload = {"cost": self.cost.to_json(), "d": self.d}
        if self.has_box:
            payload["lower"] = self.lower.tolist()
            payload["upper"] = self.upper.tolist()
        if self.graph is not None:
            payload["graph"] = self.graph.to_json()
        return payload

    @classmethod
    def from_json(cls, payload: dict) -> "AllocationProblem":
        graph = Graph.from_json(payload["graph"]) if "graph" in payload else None
        return cls(cost_from_json(payload["cost"]), payload["d"], graph,
                   payload.get("lower"), payload.get("upper"))


def feasible_initializer(problem: AllocationProblem, mode: str = "uniform",
                         offsets: Optional[np.ndarray] = None) -> np.ndarray:
    """
    Returns x0 with sum(x0) = d. With offsets (single_agent mode only), agent 0
    holds d + offsets[0] and agent j holds offsets[j], so the sum is d + sum(offsets).
    """
    n = problem.n
    if mode == "uniform":
        x0 = np.full(n, problem.d / n)
    elif mode == "single_agent":
        x0 = np.zeros(n) if offsets is None else _vec(offsets, "offsets").copy()
        x0[0] += problem.d
    else:
        raise ValueError(f"Unknown initializer mode '{mode}'")
    return x0


class OracleSolution(NamedTuple):
    x: np.ndarray
    nu: float
    lam_lower: np.ndarray
    lam_upper: np.ndarray
    iterations: int

    @property
    def lam(self) -> np.ndarray:
        return np.concatenate([self.lam_lower, self.lam_upper])

    @property
    def marginal_cost(self) -> float:
        return -self.nu


def active_set_oracle(Q, c, d: float, lower=None, upper=None, max_iter: int = 500,
                      tol: float = 1e-12) -> OracleSolution:
    """
    Solves min x^T Q x / 2 + c^T x s.t. 1^T x = d, lower <= x <= upper by a
    primal active-set method on the KKT block system. Q may be given by its
    diagonal. Stationarity: Q x + c + nu 1 - lam_lower + lam_upper = 0.
    """
    Q = np.asarray(Q, dtype=float)
    if Q.ndim == 1:
        Q = np.diag(Q)
    c = np.asarray(c, dtype=float)
    n = len(c)
    lower = np.full(n, -np.inf) if lower is None else np.asarray(lower, dtype=float)
    upper = np.full(n, np.inf) if upper is None else np.asarray(upper, dtype=float)
    if not (lower.sum() <= d <= upper.sum()):
        raise ValueError(f"Infeasible allocation: d={d} outside [{lower.sum()}, {upper.sum()}]")

    # Rows of G x <= h: upper bounds are +e_i, lower bounds are -e_i
    G = np.vstack([np.eye(n), -np.eye(n)])
    h = np.concatenate([upper, -lower])
    finite = np.isfinite(h)
    active: List[int] = []
    ones = np.ones((1, n))
    scale = max(1.0, float(np.max(np.abs(np.where(np.isfinite(h), h, 0.0)))))

    for it in range(1, max_iter + 1):
        k = len(active)
        Ga = G[active]
        KKT = np.block([
            [Q, ones.T, Ga.T],
            [ones, np.zeros((1, 1)), np.zeros((1, k))],
            [Ga, np.zeros((k, 1)), np.zeros((k, k))],
        ])
        rhs = np.concatenate([-c, [d], h[active]])
        sol = solve(KKT, rhs)
        x, nu, mu = sol[:n], sol[n], sol[n + 1:]

        violation = np.where(finite, G @ x - h, -np.inf)
        worst = int(np.argmax(violation))
        if violation[worst] > tol * scale:
            active.append(worst)
            continue
        if k and mu.min() < -tol * scale:
            active.pop(int(np.argmin(mu)))
            continue

        mu_full = np.zeros(2 * n)
        mu_full[active] = np.maximum(mu, 0.0)
        x = np.clip(x, lower, upper)
        return OracleSolution(x, float(nu), mu_full[n:], mu_full[:n], it)

    raise RuntimeError(f"Active-set oracle did not terminate within {max_iter} iterations")


def solve_allocation_oracle(problem: AllocationProblem) -> OracleSolution:
    """
    Exact optimum of a quadratic allocation problem.
    """
    cost = problem.cost
    if not isinstance(cost, QuadraticCost):
        raise TypeError(f"Active-set oracle needs quadratic costs, got '{cost.kind}'")
    return active_set_oracle(cost.a, cost.b, problem.d, problem.lower, problem.upper)


def inner_kkt_solution(alpha: np.ndarray, beta: np.ndarray, total) -> np.ndarray:
    """
    Minimizer of sum alpha_i p_i^2 / 2 + beta_i p_i s.t. sum p_i = total:
    p_i = (nu - beta_i) / alpha_i with nu = (total + sum beta/alpha) / sum(1/alpha).
    total may be a vector of S totals, giving an (n, S) result.
    """
    alpha = np.asarray(alpha, dtype=float)
    beta = np.asarray(beta, dtype=float)
    inv = 1.0 / alpha
    nu = (np.asarray(total, dtype=float) + np.sum(beta * inv)) / np.sum(inv)
    if np.ndim(nu) == 0:
        return (nu - beta) * inv
    return (nu[None, :] - beta[:, None]) * inv[:, None]


# Problem generators


def random_sinusoidal_cost(n: int, rng: np.random.Generator, a_range=(2.0, 4.0), b_range=(-1.0, 1.0),
                           c_range=(0.0, 1.0), theta_range=(0.0, 2 * np.pi)) -> SinusoidalQuadraticCost:
    a = rng.uniform(*a_range, size=n)
    b = rng.uniform(*b_range, size=n)
    c = rng.uniform(*c_range, size=n)
    theta = rng.uniform(*theta_range, size=n)
    c = np.minimum(c, 0.99 * a)
    return SinusoidalQuadraticCost(a, b, c, theta)


def random_quadratic_cost(n: int, rng: np.random.Generator, a_range=(0.5, 3.0), b_range=(-2.0, 2.0)) -> QuadraticCost:
    return QuadraticCost(rng.uniform(*a_range, size=n), rng.uniform(*b_range, size=n))


def quartic_with_minimum(a1: float, roots: Sequence[float], omega: float, grid: int = 2001) -> np.ndarray:
    """
    Coefficients of a1 * prod(x - z_k) + a2 with a2 chosen so the global
    minimum equals omega. Grid search between the outer roots, then bounded
    1-D refinement around the best grid cell.
    """
    base = a1 * P.polyfromroots(roots)
    lo, hi = float(min(roots)), float(max(roots))
    xs = np.linspace(lo, hi, grid)
    vals = P.polyval(xs, base)
    k = int(np.argmin(vals))
    left, right = xs[max(k - 1, 0)], xs[min(k + 1, grid - 1)]
    res = minimize_scalar(lambda t: P.polyval(t, base), bounds=(left, right), method="bounded",
                          options={"xatol": 1e-12})
    vmin = min(float(res.fun), float(vals[k]))
    coef = base.copy()
    coef[0] += omega - vmin
    return coef


def make_discrn_costs(n: int, rng: np.random.Generator) -> Tuple[ShiftedQuadraticCost, np.ndarray]:
    """
    alpha_i(x) = a1 (x-z1)(x-z2)(x-z3)(x-z4) + a2 with min_x alpha_i = omega_i,
    beta_i(x) = b1 (x-z5)(x-z6), gamma_i = 0.
    """
    alpha_rows, beta_rows = [], []
    omega = rng.uniform(1.0, 5.0, size=n)
    for i in range(n):
        a1 = rng.uniform(0.5, 1.5)
        roots = [rng.uniform(-2, -1), rng.uniform(-1, 0), rng.uniform(0, 1), rng.uniform(1, 2)]
        alpha_rows.append(quartic_with_minimum(a1, roots, omega[i]))
        b1 = rng.uniform(-1.0, 1.0)
        beta_rows.append(b1 * P.polyfromroots([rng.uniform(-2, 0), rng.uniform(0, 2)]))
    return ShiftedQuadraticCost(alpha_rows, beta_rows, [[0.0]] * n), omega


def ev_example_costs() -> ShiftedQuadraticCost:
    """
    f1 = (2x + p1 - 1)^2 and f2 = (x + p2 - 2)^2 expanded into alpha, beta, gamma.
    """
    alpha = [[2.0], [2.0]]
    beta = [[-2.0, 4.0], [-4.0, 2.0]]
    gamma = [[1.0, -4.0, 4.0], [4.0, -4.0, 1.0]]
    return ShiftedQuadraticCost(alpha, beta, gamma)
