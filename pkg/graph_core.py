import json
from dataclasses import dataclass, field
from pathlib import Path
from typing import Dict, List, NamedTuple, Optional, Set, Tuple

import networkx as nx
import numpy as np
from scipy.linalg import eigh, pinvh

from config import GRAPH_DEFAULT_WEIGHT, LAPLACIAN_EIG_TOL, PROJECTION_TOL


@dataclass(frozen=True)
class Graph:
    """
    Undirected weighted communication topology on nodes 0..n-1.
    Edges are stored as (i, j) with i < j; weights align with edges.
    """
    n: int
    edges: Tuple[Tuple[int, int], ...]
    weights: Optional[Tuple[float, ...]] = None

    def __post_init__(self):
        if self.n < 1:
            raise ValueError(f"Graph needs at least one node, got n={self.n}")
        normalized = []
        seen = set()
        for i, j in self.edges:
            i, j = int(i), int(j)
            if i == j:
                raise ValueError(f"Self-loop on node {i}")
            if not (0 <= i < self.n and 0 <= j < self.n):
                raise ValueError(f"Edge ({i}, {j}) outside node range 0..{self.n - 1}")
            key = (min(i, j), max(i, j))
            if key in seen:
                raise ValueError(f"Duplicate edge {key}")
            seen.add(key)
            normalized.append(key)
        weights = self.weights
        if weights is None:
            weights = tuple(GRAPH_DEFAULT_WEIGHT for _ in normalized)
        weights = tuple(float(w) for w in weights)
        if len(weights) != len(normalized):
            raise ValueError(f"{len(weights)} weights for {len(normalized)} edges")
        if any(w <= 0 for w in weights):
            raise ValueError("Edge weights must be strictly positive")
        object.__setattr__(self, "edges", tuple(normalized))
        object.__setattr__(self, "weights", weights)

    @property
    def m(self) -> int:
        return len(self.edges)

    def neighbors(self, i: int) -> List[int]:
        return sorted(j for e in self.edges for j in e if i in e and j != i)

    def degrees(self) -> np.ndarray:
        deg = np.zeros(self.n, dtype=int)
        for i, j in self.edges:
            deg[i] += 1
            deg[j] += 1
        return deg

    def to_networkx(self) -> nx.Graph:
        g = nx.Graph()
        g.add_nodes_from(range(self.n))
        for (i, j), w in zip(self.edges, self.weights):
            g.add_edge(i, j, weight=w)
        return g

    def scaled(self, beta: float) -> "Graph":
        return Graph(self.n, self.edges, tuple(beta * w for w in self.weights))

    # Serialization: edge-list text ("n m" header, "i j w" lines) and JSON

    def to_edgelist(self) -> str:
        lines = [f"{self.n} {self.m}"]
        lines += [f"{i} {j} {w!r}" for (i, j), w in zip(self.edges, self.weights)]
        return "\n".join(lines) + "\n"

    @classmethod
    def from_edgelist(cls, text: str) -> "Graph":
        rows = [r.split() for r in text.strip().splitlines() if r.strip()]
        n, m = int(rows[0][0]), int(rows[0][1])
        body = rows[1:]
        if len(body) != m:
            raise ValueError(f"Header announces {m} edges, found {len(body)}")
        edges = tuple((int(r[0]), int(r[1])) for r in body)
        weights = tuple(float(r[2]) if len(r) > 2 else GRAPH_DEFAULT_WEIGHT for r in body)
        return cls(n, edges, weights)

    def to_json(self) -> Dict:
        return {"n": self.n, "edges": [[i, j, w] for (i, j), w in zip(self.edges, self.weights)]}

    @classmethod
    def from_json(cls, payload: Dict) -> "Graph":
        edges = tuple((int(e[0]), int(e[1])) for e in payload["edges"])
        weights = tuple(float(e[2]) if len(e) > 2 else GRAPH_DEFAULT_WEIGHT for e in payload["edges"])
        return cls(int(payload["n"]), edges, weights)

    @classmethod
    def load(cls, path: Path) -> "Graph":
        path = Path(path)
        if path.suffix == ".json":
            return cls.from_json(json.loads(path.read_text()))
        return cls.from_edgelist(path.read_text())


@dataclass(frozen=True)
class LaplacianMatrix:
    """
    Dense weighted Laplacian with its eigen-decomposition cached at construction.
    """
    matrix: np.ndarray
    eigenvalues: np.ndarray = field(repr=False)
    eigenvectors: np.ndarray = field(repr=False)

    @classmethod
    def from_matrix(cls, matrix: np.ndarray) -> "LaplacianMatrix":
        matrix = np.asarray(matrix, dtype=float)
        vals, vecs = eigh(matrix)
        return cls(matrix, vals, vecs)

    @property
    def n(self) -> int:
        return self.matrix.shape[0]

    @property
    def lambda2(self) -> float:
        return float(self.eigenvalues[1]) if self.n > 1 else 0.0

    @property
    def lambda_n(self) -> float:
        return float(self.eigenvalues[-1])

    def scaled(self, beta: float) -> "LaplacianMatrix":
        return LaplacianMatrix(beta * self.matrix, beta * self.eigenvalues, self.eigenvectors)

    def __matmul__(self, other):
        return self.matrix @ other


class SpectralSummary(NamedTuple):
    eigenvalues: np.ndarray
    lambda2: float
    lambda_n: float


@dataclass(frozen=True)
class ProjectionMatrix:
    """
    T removes the null space of the reduced Hessian: J T^T A T J^T drops the
    direction along 1_n.
    """
    T: np.ndarray
    J: np.ndarray

    @property
    def n(self) -> int:
        return self.T.shape[0]

    def pseudo_identity(self) -> np.ndarray:
        V = self.T @ self.J.T
        return V @ V.T

    def projection_error(self) -> float:
        n = self.n
        target = np.eye(n) - np.ones((n, n)) / n
        return float(np.linalg.norm(self.pseudo_identity() - target, "fro"))

    def reduce(self, A: np.ndarray) -> np.ndarray:
        V = self.T @ self.J.T
        return V.T @ A @ V


def build_laplacian(graph: Graph) -> LaplacianMatrix:
    """
    L_ij = -w_ij on edges, L_ii = sum of incident weights.
    """
    L = np.zeros((graph.n, graph.n))
    for (i, j), w in zip(graph.edges, graph.weights):
        L[i, j] = -w
        L[j, i] = -w
    np.fill_diagonal(L, -L.sum(axis=1))
    return LaplacianMatrix.from_matrix(L)


def is_connected(graph: Graph) -> bool:
    return nx.is_connected(graph.to_networkx())


def component_count(graph: Graph) -> int:
    return nx.number_connected_components(graph.to_networkx())


def spectral_summary(L: LaplacianMatrix) -> SpectralSummary:
    vals = np.sort(L.eigenvalues)
    lam2 = float(vals[1]) if len(vals) > 1 else 0.0
    return SpectralSummary(vals, lam2, float(vals[-1]))


def zero_multiplicity(L: LaplacianMatrix, tol: float = LAPLACIAN_EIG_TOL) -> int:
    return int(np.sum(np.abs(L.eigenvalues) <= max(tol, tol * L.lambda_n)))


def k_hop_neighbors(graph: Graph, i: int, k: int) -> Set[int]:
    if k not in (1, 2):
        raise ValueError(f"k must be 1 or 2, got {k}")
    if not 0 <= i < graph.n:
        raise ValueError(f"Node {i} outside 0..{graph.n - 1}")
    reach = nx.single_source_shortest_path_length(graph.to_networkx(), i, cutoff=k)
    return {j for j in reach if j != i}


def random_connected_graph(n: int, m: int, seed: int) -> Graph:
    """
    Random spanning tree over a random permutation, then m - (n - 1) extra
    edges drawn uniformly without replacement from the remaining pairs.
    """
    if n < 1 or m < n - 1 or m > n * (n - 1) // 2:
        raise ValueError(f"Infeasible edge count m={m} for n={n} (need {n - 1} <= m <= {n * (n - 1) // 2})")
    rng = np.random.default_rng(seed)
    order = rng.permutation(n)
    edges = set()
    for k in range(1, n):
        parent = order[rng.integers(k)]
        child = order[k]
        edges.add((min(parent, child), max(parent, child)))
    extra = m - len(edges)
    if extra > 0:
        pool = [(i, j) for i in range(n) for j in range(i + 1, n) if (i, j) not in edges]
        picks = rng.choice(len(pool), size=extra, replace=False)
        edges.update(pool[p] for p in picks)
    return Graph(n, tuple(sorted((int(i), int(j)) for i, j in edges)))


def path_graph(n: int) -> Graph:
    return Graph(n, tuple((i, i + 1) for i in range(n - 1)))


def ring_graph(n: int) -> Graph:
    if n < 3:
        return path_graph(n)
    return Graph(n, tuple((i, (i + 1) % n) for i in range(n)))


def complete_graph(n: int) -> Graph:
    return Graph(n, tuple((i, j) for i in range(n) for j in range(i + 1, n)))


def projection_T(n: int) -> ProjectionMatrix:
    """
    Columns 0..n-2 are rho * (n - 1 + sqrt(n)) on the diagonal, -rho in the other
    leading rows and -rho * (1 + sqrt(n)) in the last row; the last column is
    1/sqrt(n).
    """
    if n < 2:
        raise ValueError(f"projection_T needs n >= 2, got {n}")
    s = np.sqrt(n)
    rho = (n * (n + 1 + 2 * s)) ** -0.5
    T = np.empty((n, n))
    T[: n - 1, : n - 1] = -1.0
    np.fill_diagonal(T[: n - 1, : n - 1], n - 1 + s)
    T[n - 1, : n - 1] = -1.0 - s
    T[:, : n - 1] *= rho
    T[:, n - 1] = 1.0 / s
    J = np.hstack([np.eye(n - 1), np.zeros((n - 1, 1))])
    proj = ProjectionMatrix(T, J)
    if proj.projection_error() > PROJECTION_TOL:
        raise RuntimeError(f"T J^T J T^T is not the consensus projector for n={n}")
    return proj


def reduced_hessian(L: LaplacianMatrix, h: np.ndarray, proj: Optional[ProjectionMatrix] = None) -> np.ndarray:
    """
    M(x) = J T^T L H(x) L T J^T for a diagonal Hessian given by its diagonal h.
    """
    proj = proj or projection_T(L.n)
    Lm = L.matrix
    return proj.reduce(Lm @ (np.asarray(h)[:, None] * Lm))


def laplacian_pinv(L: LaplacianMatrix) -> np.ndarray:
    return pinvh(L.matrix)


class SynchronousNetwork:
    """
    Synchronous message passing over a graph: in one round each agent reads the
    values held by its one-hop neighbours. Reads are recorded in access_log as
    (reader, owner) pairs.
    """

    def __init__(self, graph: Graph, scale: float = 1.0):
        self.graph = graph
        self.scale = scale
        self._nbrs = [[] for _ in range(graph.n)]
        for (i, j), w in zip(graph.edges, graph.weights):
            self._nbrs[i].append((j, w))
            self._nbrs[j].append((i, w))
        self.access_log: Set[Tuple[int, int]] = set()
        self.rounds = 0

    def laplacian_round(self, values: np.ndarray) -> np.ndarray:
        values = np.asarray(values, dtype=float)
        out = np.zeros_like(values)
        for i, nbrs in enumerate(self._nbrs):
            acc = 0.0
            for j, w in nbrs:
                self.access_log.add((i, j))
                acc += w * (values[i] - values[j])
            out[i] = self.scale * acc
        self.rounds += 1
        return out

    def __matmul__(self, values):
        return self.laplacian_round(values)

    def reads_within(self, hops: int) -> bool:
        allowed = {i: k_hop_neighbors(self.graph, i, hops) for i in range(self.graph.n)}
        return all(j in allowed[i] for i, j in self.access_log)
