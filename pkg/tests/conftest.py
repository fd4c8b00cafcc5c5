import numpy as np
import pytest
from hypothesis import HealthCheck, settings
from hypothesis import strategies as st

from lacar.graph import AdjacencyGraph, NeighbourMatrix, full_matrix, lattice_graph

settings.register_profile("lacar", deadline=None, max_examples=40,
                          suppress_health_check=[HealthCheck.too_slow])
settings.load_profile("lacar")


@st.composite
def neighbour_matrices(draw, min_n=1, max_n=20):
    """Random graph with a random active subset of its edges."""
    n = draw(st.integers(min_n, max_n))
    pairs = [(k, j) for k in range(n) for j in range(k + 1, n)]
    mask = draw(st.lists(st.booleans(), min_size=len(pairs), max_size=len(pairs)))
    edges = np.array([p for p, m in zip(pairs, mask) if m], dtype=np.int64).reshape(-1, 2)
    g = AdjacencyGraph(n, edges)
    active = draw(st.lists(st.booleans(), min_size=g.m, max_size=g.m))
    return NeighbourMatrix(g, np.array(active, dtype=bool))


def dense_leroux(rho, tau, w):
    """Dense ``tau * (rho * (D - W) + (1 - rho) * I)`` built entry by entry."""
    n = w.n
    W = np.zeros((n, n))
    for (k, j), a in zip(w.graph.edges, w.active):
        if a:
            W[k, j] = W[j, k] = 1.0
    return tau * (rho * (np.diag(W.sum(axis=1)) - W) + (1.0 - rho) * np.eye(n))


@pytest.fixture
def path3():
    return full_matrix(AdjacencyGraph(3, [(0, 1), (1, 2)]))


@pytest.fixture
def lattice10():
    return lattice_graph(10, 10)
