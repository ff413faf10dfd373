import numpy as np
import pytest

from graph_core import (
    Graph,
    SynchronousNetwork,
    build_laplacian,
    complete_graph,
    component_count,
    is_connected,
    k_hop_neighbors,
    path_graph,
    projection_T,
    random_connected_graph,
    reduced_hessian,
    ring_graph,
    spectral_summary,
    zero_multiplicity,
)


def test_single_edge_laplacian():
    L = build_laplacian(Graph(2, ((0, 1),)))
    assert np.array_equal(L.matrix, np.array([[1.0, -1.0], [-1.0, 1.0]]))


def test_path_laplacian_rows(path3):
    L = build_laplacian(path3).matrix
    assert np.array_equal(np.diag(L), [1.0, 2.0, 1.0])
    assert L[0, 1] == L[1, 2] == -1.0
    assert L[0, 2] == 0.0


def test_weighted_laplacian():
    L = build_laplacian(Graph(3, ((0, 1), (1, 2)), (2.0, 0.5))).matrix
    assert np.allclose(L, [[2.0, -2.0, 0.0], [-2.0, 2.5, -0.5], [0.0, -0.5, 0.5]])


def test_complete_graph_spectrum(k3):
    s = spectral_summary(build_laplacian(k3))
    assert np.allclose(s.eigenvalues, [0.0, 3.0, 3.0], atol=1e-12)
    assert s.lambda2 == pytest.approx(3.0)
    assert s.lambda_n == pytest.approx(3.0)


def test_path_spectrum(path3):
    s = spectral_summary(build_laplacian(path3))
    assert np.allclose(s.eigenvalues, [0.0, 1.0, 3.0], atol=1e-12)


def test_k2_spectrum():
    s = spectral_summary(build_laplacian(complete_graph(2)))
    assert np.allclose(s.eigenvalues, [0.0, 2.0], atol=1e-12)


def test_connectivity():
    assert is_connected(Graph(2, ((0, 1),)))
    assert not is_connected(Graph(2, ()))


def test_k_hop_neighbors(path3, k3):
    assert k_hop_neighbors(path3, 0, 1) == {1}
    assert k_hop_neighbors(path3, 0, 2) == {1, 2}
    assert k_hop_neighbors(k3, 0, 2) == {1, 2}
    with pytest.raises(ValueError):
        k_hop_neighbors(path3, 0, 3)


def test_graph_validation():
    with pytest.raises(ValueError):
        Graph(2, ((0, 0),))
    with pytest.raises(ValueError):
        Graph(3, ((0, 1), (1, 0)))
    with pytest.raises(ValueError):
        Graph(2, ((0, 1),), (0.0,))
    with pytest.raises(ValueError):
        Graph(2, ((0, 2),))


def test_random_graph_is_connected_with_exact_edge_count():
    g = random_connected_graph(100, 250, seed=7)
    assert g.m == 250
    assert is_connected(g)
    assert random_connected_graph(100, 250, seed=7).edges == g.edges


def test_random_graph_smallest_case():
    g = random_connected_graph(2, 1, seed=0)
    assert g.edges == ((0, 1),)


@pytest.mark.parametrize("m", [3, 11])
def test_random_graph_rejects_infeasible_edge_count(m):
    with pytest.raises(ValueError):
        random_connected_graph(5, m, seed=0)


def test_laplacian_invariants_and_zero_multiplicity():
    rng = np.random.default_rng(3)
    for trial in range(100):
        n = int(rng.integers(2, 25))
        m = int(rng.integers(n - 1, n * (n - 1) // 2 + 1))
        L = build_laplacian(random_connected_graph(n, m, trial))
        assert np.array_equal(L.matrix.sum(axis=1), np.zeros(n))
        assert np.array_equal(L.matrix, L.matrix.T)
        assert L.eigenvalues.min() >= -1e-10
        assert zero_multiplicity(L) == 1


def test_zero_multiplicity_counts_components():
    g = Graph(5, ((0, 1), (2, 3)))
    assert component_count(g) == 3
    assert zero_multiplicity(build_laplacian(g)) == 3


@pytest.mark.parametrize("n", [2, 3, 5, 10, 30])
def test_projection_property(n):
    assert projection_T(n).projection_error() <= 1e-10


def test_projection_two_nodes_pseudo_identity():
    vals = np.linalg.eigvalsh(projection_T(2).pseudo_identity())
    assert np.allclose(vals, [0.0, 1.0], atol=1e-12)


def test_reduced_hessian_matches_lhl_spectrum():
    rng = np.random.default_rng(11)
    for n in (5, 12, 30):
        L = build_laplacian(random_connected_graph(n, 2 * n, n))
        h = rng.uniform(0.5, 3.0, size=n)
        reduced = np.linalg.eigvalsh(reduced_hessian(L, h, projection_T(n)))
        full = np.linalg.eigvalsh(L.matrix @ np.diag(h) @ L.matrix)
        assert np.allclose(reduced, full[1:], atol=1e-8)


def test_edgelist_and_json_interchange(tmp_path):
    g = Graph(4, ((0, 1), (1, 2), (2, 3)), (1.0, 2.5, 0.75))
    assert Graph.from_edgelist(g.to_edgelist()) == g
    assert Graph.from_json(g.to_json()) == g
    path = tmp_path / "g.txt"
    path.write_text(g.to_edgelist())
    assert Graph.load(path) == g
    with pytest.raises(ValueError):
        Graph.from_edgelist("3 2\n0 1 1.0\n")


def test_network_round_matches_dense_product_and_stays_local():
    g = ring_graph(6)
    L = build_laplacian(g)
    net = SynchronousNetwork(g)
    v = np.arange(6.0) ** 2
    assert np.allclose(net.laplacian_round(v), L.matrix @ v)
    assert np.allclose(net @ (net @ v), L.matrix @ (L.matrix @ v))
    assert net.rounds == 3
    assert net.reads_within(1)


def test_network_scale():
    g = path_graph(4)
    net = SynchronousNetwork(g, scale=0.5)
    v = np.array([1.0, -2.0, 0.5, 3.0])
    assert np.allclose(net.laplacian_round(v), 0.5 * (build_laplacian(g).matrix @ v))
