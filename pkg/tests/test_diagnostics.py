from types import SimpleNamespace

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from lacar import gmrf
from lacar.diagnostics import (
    MetricsReport,
    ReplicateScore,
    Truth,
    aggregate,
    metrics_table,
    moran_permutation_test,
    morans_i,
    overdispersion,
    score_replicate,
)
from lacar.errors import ModelError, UndefinedStatistic
from lacar.graph import AdjacencyGraph, NeighbourMatrix, full_matrix, lattice_graph
from lacar.inference import GridConfig, ModelSpec, Summary, fit

from conftest import neighbour_matrices


def brute_moran(v, w):
    a = w.toarray()
    z = v - v.mean()
    num = 0.0
    for k in range(len(v)):
        for j in range(len(v)):
            num += a[k, j] * z[k] * z[j]
    return len(v) / a.sum() * num / np.sum(z**2)


class TestMoransI:
    def test_two_areas(self):
        w = full_matrix(AdjacencyGraph(2, [(0, 1)]))
        assert morans_i(np.array([1.0, -1.0]), w) == pytest.approx(-1.0)

    def test_constant_is_undefined(self, lattice10):
        with pytest.raises(UndefinedStatistic):
            morans_i(np.full(100, 3.0), full_matrix(lattice10))

    def test_no_active_edges_is_undefined(self, path3):
        w = NeighbourMatrix(path3.graph, [False, False])
        with pytest.raises(UndefinedStatistic):
            morans_i(np.arange(3.0), w)

    def test_lattice_brute_force(self, lattice10):
        rng = np.random.default_rng(0)
        w = full_matrix(lattice10)
        w = NeighbourMatrix(lattice10, rng.random(lattice10.m) < 0.8)
        v = rng.standard_normal(100)
        assert abs(morans_i(v, w) - brute_moran(v, w)) < 1e-12

    @given(neighbour_matrices(min_n=2), st.integers(0, 2**32 - 1))
    def test_random_graphs_brute_force(self, w, seed):
        v = np.random.default_rng(seed).standard_normal(w.n)
        if not w.active.any():
            return
        assert morans_i(v, w) == pytest.approx(brute_moran(v, w), abs=1e-12)


class TestPermutationTest:
    def test_zero_permutations(self, lattice10):
        v = np.random.default_rng(1).standard_normal(100)
        p, i_obs = moran_permutation_test(v, full_matrix(lattice10), 0)
        assert p == 1.0 and i_obs == pytest.approx(morans_i(v, full_matrix(lattice10)))

    def test_smooth_field_detected(self, lattice10):
        w = full_matrix(lattice10)
        v = np.sin(lattice10.coords[:, 0] / 3.0) + np.cos(lattice10.coords[:, 1] / 4.0)
        p, _ = moran_permutation_test(v, w, 999, np.random.default_rng(2))
        assert p <= 0.01

    def test_null_rejection_rate(self, lattice10):
        w = full_matrix(lattice10)
        rng = np.random.default_rng(3)
        ps = np.array([moran_permutation_test(rng.standard_normal(100), w, 999, rng)[0] for _ in range(200)])
        rate = np.mean(ps <= 0.05)
        assert 0.01 <= rate <= 0.10

    def test_seeded(self, lattice10):
        w = full_matrix(lattice10)
        v = np.random.default_rng(4).standard_normal(100)
        a = moran_permutation_test(v, w, 199, np.random.default_rng(9))
        b = moran_permutation_test(v, w, 199, np.random.default_rng(9))
        assert a == b

    def test_python_batch_kernel_matches(self, lattice10):
        from lacar import diagnostics
        w = full_matrix(lattice10)
        rng = np.random.default_rng(5)
        z = rng.standard_normal(100)
        perms = rng.permuted(np.tile(np.arange(100), (20, 1)), axis=1)
        e0, e1 = w.active_edges[:, 0].copy(), w.active_edges[:, 1].copy()
        kern = diagnostics._moran_batch
        a = kern(z, perms, e0, e1, 1.0)
        b = getattr(kern, "py_func", kern)(z, perms, e0, e1, 1.0)
        np.testing.assert_allclose(a, b, rtol=1e-13)


def _poisson_overdispersed(rng, w, extra_sd):
    n = w.n
    x = rng.standard_normal(n)
    y = rng.poisson(30 * np.exp(0.2 * x + extra_sd * rng.standard_normal(n)))
    return ModelSpec("poisson", y, np.column_stack([np.ones(n), x]))


class TestOverdispersion:
    def test_gaussian_calibrated(self, lattice10):
        rng = np.random.default_rng(6)
        w = full_matrix(lattice10)
        spec = ModelSpec("gaussian", 2.0 + rng.standard_normal(100), random_effects=False)
        assert overdispersion(spec, fit(spec, w)) == pytest.approx(1.0, abs=0.15)

    def test_needs_more_areas_than_parameters(self):
        spec = ModelSpec("poisson", [1.0])
        with pytest.raises(ModelError):
            overdispersion(spec, SimpleNamespace(residuals=np.zeros(1)))

    def test_extra_poisson_noise_flagged_and_reduced(self):
        rng = np.random.default_rng(7)
        w = full_matrix(lattice_graph(5, 5))
        grid = GridConfig(n_tau=9, refine=False)
        flagged = lowered = 0
        for _ in range(100):
            spec = _poisson_overdispersed(rng, w, 0.4)
            base = overdispersion(spec, fit(spec.covariate_only(), w, grid))
            with_re = overdispersion(spec, fit(spec.with_rho(0.0), w, grid))
            flagged += base > 2
            lowered += with_re < base
        assert flagged >= 90
        assert lowered >= 90


class TestScoring:
    def _fit(self, mu, beta=(0.0, 0.1), lo=0.05, hi=0.15):
        mu = np.asarray(mu, dtype=float)
        b = np.asarray(beta, dtype=float)
        return SimpleNamespace(mu=Summary(mu, mu * 0, mu, mu, mu),
                               beta=Summary(b, b * 0, b, np.r_[b[0], lo], np.r_[b[0], hi]))

    def test_exact_fit_zero_error(self):
        mu = np.array([10.0, 20.0, 30.0])
        s = score_replicate(Truth(mu, np.array([0.1]), np.zeros(2, bool)), self._fit(mu))
        assert s.bias_mu == 0.0 and s.sq_mu == 0.0 and s.bias_beta == pytest.approx(0.0) and s.covered == 1.0

    def test_boundary_agreement(self):
        g = lattice_graph(2, 4)
        assert g.m == 10
        truth = np.zeros(10, bool)
        truth[[0, 1]] = True
        w_hat = NeighbourMatrix(g, np.ones(10, bool)).toggled(*g.edges[0])
        s = score_replicate(Truth(np.ones(8), np.zeros(0), truth), self._fit(np.ones(8)), w_hat)
        assert s.ba == 50.0 and s.nba == 100.0

    @given(st.lists(st.booleans(), min_size=10, max_size=10), st.lists(st.booleans(), min_size=10, max_size=10))
    def test_rates_complement(self, tb, active):
        g = lattice_graph(2, 4)
        tb = np.array(tb)
        w_hat = NeighbourMatrix(g, np.array(active))
        s = score_replicate(Truth(np.ones(8), np.zeros(0), tb), self._fit(np.ones(8)), w_hat)
        if tb.any():
            fn = 100.0 * np.sum(tb & w_hat.active) / tb.sum()
            assert s.ba + fn == pytest.approx(100.0)
        else:
            assert s.ba is None
        if (~tb).any():
            fp = 100.0 * np.sum(~tb & ~w_hat.active) / (~tb).sum()
            assert s.nba + fp == pytest.approx(100.0)

    @given(st.permutations(range(6)))
    def test_aggregate_order_invariant(self, order):
        rng = np.random.default_rng(0)
        recs = [ReplicateScore(rng.normal(), rng.random(), rng.normal(), rng.random(), 1.0, 90.0 + i, 99.0, 3)
                for i in range(6)]
        a = aggregate("m", recs)
        b = aggregate("m", [recs[i] for i in order])
        assert a.as_dict() == b.as_dict()

    def test_aggregate_means_replicate_rmse(self):
        recs = [ReplicateScore(0.1, 0.04, 0.0, 0.01, 1.0, None, 100.0),
                ReplicateScore(-0.1, 0.16, 0.0, 0.09, 0.0, None, 90.0)]
        r = aggregate("m", recs, n_failed=1)
        assert r.pct_rmse_mu == pytest.approx(30.0) and r.pct_rmse_beta == pytest.approx(20.0)
        assert r.extra["pooled_rmse_mu"] == pytest.approx(100 * np.sqrt(0.1))
        assert r.pct_bias_mu == pytest.approx(0.0) and r.coverage_beta == pytest.approx(50.0)
        assert r.ba is None and r.nba == pytest.approx(95.0) and r.n_failed == 1

    def test_table_marks_unavailable(self):
        r = MetricsReport("adaptive", 2, 0, 0.1, 1.0, 0.2, 2.0, 95.0, None, 99.0)
        text = metrics_table([r])
        assert "Boundary agreement (BA)\tunavailable" in text
        assert text.splitlines()[0] == "metric\tadaptive"
