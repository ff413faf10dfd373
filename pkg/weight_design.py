"""
Convergence metric epsilon and spectral post-scaling of the Laplacian.
"""
from typing import Dict, NamedTuple, Optional, Sequence, Tuple

import numpy as np
from scipy.linalg import eigh

from graph_core import (
    LaplacianMatrix,
    ProjectionMatrix,
    build_laplacian,
    projection_T,
    random_connected_graph,
    reduced_hessian,
)
from problems import HessianBounds
from utils import progress, rng_for, verbose_log


class EpsilonReport(NamedTuple):
    epsilon: float
    mu_min_delta: float
    mu_max_Delta: float
    satisfied: bool

    def to_json(self) -> Dict:
        return {"epsilon": self.epsilon, "mu_min_delta": self.mu_min_delta,
                "mu_max_Delta": self.mu_max_Delta, "satisfied": self.satisfied}


def _extreme_eigs(L: LaplacianMatrix, bounds: HessianBounds, T: ProjectionMatrix) -> Tuple[float, float]:
    mu_delta = eigh(reduced_hessian(L, bounds.delta, T), eigvals_only=True)
    mu_Delta = eigh(reduced_hessian(L, bounds.Delta, T), eigvals_only=True)
    return float(mu_delta[0]), float(mu_Delta[-1])


def epsilon_metric(L: LaplacianMatrix, bounds: HessianBounds, T: Optional[ProjectionMatrix] = None) -> EpsilonReport:
    """
    eps = max(1 - mu_min(M_delta), mu_max(M_Delta) - 1) over the reduced
    Hessians at the per-agent curvature bounds.
    """
    T = T or projection_T(L.n)
    lo, hi = _extreme_eigs(L, bounds, T)
    eps = max(1.0 - lo, hi - 1.0)
    return EpsilonReport(eps, lo, hi, eps < 1.0)


def post_scale_beta(L: LaplacianMatrix, bounds: HessianBounds,
                    T: Optional[ProjectionMatrix] = None) -> Tuple[float, LaplacianMatrix]:
    """
    beta = sqrt(2 / (mu_1(M_delta) + mu_{n-1}(M_Delta))) centers the reduced
    spectrum of beta * L around 1.
    """
    T = T or projection_T(L.n)
    lo, hi = _extreme_eigs(L, bounds, T)
    denom = lo + hi
    if denom <= 0:
        raise RuntimeError(f"Degenerate post-scaling: mu_min + mu_max = {denom:.3g} (is the graph connected?)")
    beta = float(np.sqrt(2.0 / denom))
    return beta, L.scaled(beta)


def scaled_laplacian_for(graph, bounds: HessianBounds) -> Tuple[float, LaplacianMatrix, EpsilonReport]:
    """
    Unweighted Laplacian of the graph, post-scaled for the given bounds.
    """
    L = build_laplacian(graph)
    T = projection_T(L.n)
    beta, L_star = post_scale_beta(L, bounds, T)
    report = epsilon_metric(L_star, bounds, T)
    verbose_log(f"🧮 post-scaling beta={beta:.6g}, eps={report.epsilon:.6g}")
    return beta, L_star, report


def epsilon_study(sizes: Sequence[int], trials: int, families: Dict[str, Tuple[float, float]],
                  edge_factor: int = 3, seed: int = 0):
    """
    eps of the post-scaled unweighted design over random graphs with
    |E| = edge_factor * n and diagonal Hessians drawn from each family.
    Returns one row per (family, n, trial).
    """
    rows = []
    rng = rng_for(seed, "weight_study")
    bar = progress(total=len(sizes) * trials * len(families), desc="🔁 eps study", unit="graph")
    for family, (lo, hi) in families.items():
        for n in sizes:
            m = min(edge_factor * n, n * (n - 1) // 2)
            for trial in range(trials):
                graph = random_connected_graph(n, m, int(rng.integers(2 ** 31)))
                a = rng.uniform(lo, hi, size=n)
                bounds = HessianBounds(a, a)
                L = build_laplacian(graph)
                T = projection_T(n)
                beta, L_star = post_scale_beta(L, bounds, T)
                raw = epsilon_metric(L, bounds, T)
                report = epsilon_metric(L_star, bounds, T)
                rows.append({"family": family, "n": n, "trial": trial, "beta": beta,
                             "epsilon_unscaled": raw.epsilon, "epsilon": report.epsilon,
                             "satisfied": report.satisfied})
                bar.update(1)
    bar.close()
    return rows
