import numpy as np
import pytest
from scipy.special import logsumexp
from scipy.stats import multivariate_normal

from lacar.graph import full_matrix, lattice_graph
from lacar.inference import MCMCConfig, ModelSpec, Priors, fit, fit_mcmc, run_chain
from lacar.inference import mcmc as mcmc_mod

from conftest import dense_leroux


def poisson_fixture(seed, shape=(4, 5)):
    rng = np.random.default_rng(seed)
    w = full_matrix(lattice_graph(*shape))
    n = w.n
    x = rng.standard_normal(n)
    e = rng.uniform(20, 50, n)
    phi = 0.3 * np.sin(w.graph.coords[:, 0])
    y = rng.poisson(e * np.exp(0.2 * x + phi))
    return ModelSpec("poisson", y, np.column_stack([np.ones(n), x]), np.log(e)), w


def batch_se(x, batches=20):
    b = np.asarray(x).reshape(batches, -1).mean(axis=1)
    return b.std(ddof=1) / np.sqrt(batches)


class TestConfig:
    def test_validation(self):
        with pytest.raises(ValueError):
            MCMCConfig(n_iter=10, burn_in=10)
        with pytest.raises(ValueError):
            MCMCConfig(thin=0)
        with pytest.raises(ValueError):
            MCMCConfig(logit_rho_bounds=(1.0, -1.0))


class TestChain:
    def test_seed_reproducible(self):
        spec, w = poisson_fixture(0)
        cfg = MCMCConfig(n_iter=1500, burn_in=500, seed=4)
        a, b = run_chain(spec, w, cfg), run_chain(spec, w, cfg)
        for u, v in zip(a, b):
            np.testing.assert_array_equal(u, v)
        c = run_chain(spec, w, MCMCConfig(n_iter=1500, burn_in=500, seed=5))
        assert not np.array_equal(a[0], c[0])

    def test_python_kernel_gives_same_chain(self, monkeypatch):
        spec, w = poisson_fixture(1)
        cfg = MCMCConfig(n_iter=300, burn_in=100, seed=2, chunk=100)
        fast = run_chain(spec, w, cfg)
        monkeypatch.setattr(mcmc_mod, "_sweeps", getattr(mcmc_mod._sweeps, "py_func", mcmc_mod._sweeps))
        slow = run_chain(spec, w, cfg)
        for u, v in zip(fast, slow):
            np.testing.assert_allclose(u, v, rtol=1e-9, atol=1e-12)

    def test_thinning_shapes(self):
        spec, w = poisson_fixture(2)
        phi, beta, hyp = run_chain(spec, w, MCMCConfig(n_iter=1000, burn_in=400, thin=3))
        assert phi.shape == (200, w.n) and beta.shape == (200, 2) and hyp.shape == (200, 3)
        assert np.all((hyp[:, 1] > 0) & (hyp[:, 1] < 1)) and np.all(hyp[:, 0] > 0)

    def test_rho_stays_in_bounds(self):
        spec, w = poisson_fixture(3)
        _, _, hyp = run_chain(spec, w, MCMCConfig(n_iter=4000, burn_in=1000, logit_rho_bounds=(-1.0, 1.0)))
        lr = np.log(hyp[:, 1] / (1 - hyp[:, 1]))
        assert lr.min() >= -1.0 - 1e-12 and lr.max() <= 1.0 + 1e-12


class TestConjugateOracle:
    def test_gaussian_tau_posterior_mean(self):
        # exact marginal posterior of (tau, sigma) by quadrature on the log scale
        rng = np.random.default_rng(6)
        w = full_matrix(lattice_graph(4, 5))
        n, rho = w.n, 0.5
        q1 = dense_leroux(rho, 1.0, w)
        phi = np.linalg.cholesky(np.linalg.inv(q1 * 4.0)) @ rng.standard_normal(n)
        y = 1.0 + phi + rng.standard_normal(n) / np.sqrt(3.0)
        pr = Priors(tau_shape=2.0, tau_rate=0.5, sigma_shape=2.0, sigma_rate=0.5)
        spec = ModelSpec("gaussian", y, rho=rho, priors=pr)
        lt = np.linspace(-3.0, 5.0, 121)
        ls = np.linspace(-3.0, 5.0, 121)
        X = np.ones((n, 1))
        logp = np.empty((len(lt), len(ls)))
        for i, a in enumerate(lt):
            qinv = np.linalg.inv(q1 * np.exp(a))
            for j, b in enumerate(ls):
                cov = X @ X.T * pr.beta_var + qinv + np.eye(n) / np.exp(b)
                logp[i, j] = (multivariate_normal(np.zeros(n), cov).logpdf(y)
                              + pr.tau_shape * a - pr.tau_rate * np.exp(a)
                              + pr.sigma_shape * b - pr.sigma_rate * np.exp(b))
        wts = np.exp(logp - logsumexp(logp))
        exact = float(np.sum(wts.sum(axis=1) * np.exp(lt)))
        _, _, hyp = run_chain(spec, w, MCMCConfig(n_iter=60_000, burn_in=10_000, seed=1))
        est = hyp[:, 0].mean()
        assert abs(est - exact) < 4 * batch_se(hyp[:, 0]) + 0.01 * exact


class TestAgainstLaplace:
    def test_independent_effects(self):
        spec, w = poisson_fixture(7, (4, 4))
        spec = spec.with_rho(0.0)
        a = fit(spec, w)
        b = fit_mcmc(spec, w, MCMCConfig(n_iter=40_000, burn_in=5_000, seed=3))
        assert b.hyper["rho"].median == 0.0
        np.testing.assert_allclose(a.phi.median, b.phi.median, atol=0.05)
        np.testing.assert_allclose(a.beta.median, b.beta.median, atol=0.02)
        np.testing.assert_allclose(a.phi.sd, b.phi.sd, rtol=0.15)

    def test_fit_result_fields(self):
        spec, w = poisson_fixture(8, (3, 4))
        f = fit_mcmc(spec, w, MCMCConfig(n_iter=3000, burn_in=1000))
        assert f.backend == "mcmc" and f.info["draws"] == 2000
        # every centred draw sums to zero, so the posterior means do too
        assert abs(f.phi_centred.mean.sum()) < 1e-9
        assert np.isfinite(f.dic) and f.residuals.shape == (w.n,)
