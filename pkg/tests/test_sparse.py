import numpy as np
import pytest
import scipy.sparse as sp
from hypothesis import given
from hypothesis import strategies as st

from lacar import sparse
from lacar.errors import NotPositiveDefiniteError

from conftest import neighbour_matrices


def _random_spd(w, rng, tail=0):
    """Diagonally dominant matrix on the pattern of ``w`` plus ``tail`` dense rows."""
    n0 = w.n
    n = n0 + tail
    e = w.active_edges
    rows = [e[:, 0]]
    cols = [e[:, 1]]
    for t in range(tail):
        rows.append(np.full(n0 + t, n0 + t))
        cols.append(np.arange(n0 + t))
    rows = np.concatenate(rows).astype(np.int64)
    cols = np.concatenate(cols).astype(np.int64)
    off = rng.uniform(-1, 1, len(rows))
    a = sp.coo_matrix((off, (rows, cols)), shape=(n, n)).toarray()
    a = a + a.T
    diag = np.abs(a).sum(axis=1) + rng.uniform(0.5, 2.0, n)
    return rows, cols, diag, off, a + np.diag(diag)


class TestFactorization:
    @given(neighbour_matrices(), st.integers(0, 3), st.integers(0, 2**32 - 1))
    def test_matches_dense(self, w, tail, seed):
        rng = np.random.default_rng(seed)
        rows, cols, diag, off, a = _random_spd(w, rng, tail)
        n = len(diag)
        f = sparse.factorize(sparse.analyze(n, rows, cols, tail=tail), diag, off)
        np.testing.assert_allclose(f.logdet(), np.linalg.slogdet(a)[1], rtol=1e-10, atol=1e-10)
        b = rng.standard_normal(n)
        np.testing.assert_allclose(a @ f.solve(b), b, atol=1e-9)
        inv = np.linalg.inv(a)
        np.testing.assert_allclose(f.inverse_diagonal(), np.diag(inv), rtol=1e-9, atol=1e-12)
        if len(rows):
            np.testing.assert_allclose(f.inverse_entries(rows, cols), inv[rows, cols], rtol=1e-9, atol=1e-12)

    def test_permuted_factor_reconstructs(self):
        rng = np.random.default_rng(3)
        from lacar.graph import full_matrix, lattice_graph
        w = full_matrix(lattice_graph(5, 6))
        rows, cols, diag, off, a = _random_spd(w, rng, 2)
        s = sparse.analyze(len(diag), rows, cols, tail=2)
        L = sparse.factorize(s, diag, off).to_sparse_l().toarray()
        pa = a[np.ix_(s.perm, s.perm)]
        np.testing.assert_allclose(L @ L.T, pa, atol=1e-10)
        # dense tail rows stay last in the ordering
        np.testing.assert_array_equal(s.perm[-2:], [30, 31])

    def test_sampling_covariance(self):
        a = np.array([[2.0, -0.5, 0.0], [-0.5, 1.5, 0.3], [0.0, 0.3, 1.0]])
        rows, cols = np.array([0, 1]), np.array([1, 2])
        f = sparse.factorize(sparse.analyze(3, rows, cols), np.diag(a), a[rows, cols])
        x = f.sample(np.random.default_rng(0), 40000)
        np.testing.assert_allclose(np.cov(x.T), np.linalg.inv(a), atol=0.02)

    def test_not_positive_definite(self):
        rows, cols = np.array([0]), np.array([1])
        s = sparse.analyze(2, rows, cols)
        with pytest.raises(NotPositiveDefiniteError):
            sparse.factorize(s, np.array([1.0, 1.0]), np.array([2.0]))
