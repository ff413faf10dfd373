import sys
from pathlib import Path

import numpy as np
import pytest

sys.path.insert(0, str(Path(__file__).resolve().parents[1]))

from graph_core import Graph, complete_graph, path_graph  # noqa: E402
from problems import AllocationProblem, QuadraticCost  # noqa: E402
from utils import set_verbose  # noqa: E402


@pytest.fixture(autouse=True)
def quiet():
    set_verbose(False)
    yield
    set_verbose(True)


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


@pytest.fixture
def path3():
    return path_graph(3)


@pytest.fixture
def k3():
    return complete_graph(3)


@pytest.fixture
def three_node_problem():
    """Box-constrained quadratic instance on the path 0-1-2."""
    cost = QuadraticCost([0.5, 1.5, 4.0], [0.5, 0.5, 0.5])
    return AllocationProblem(cost, 6.0, Graph(3, ((0, 1), (1, 2))),
                             [0.2, 2.5, 1.5], [1.0, 6.0, 4.0])
