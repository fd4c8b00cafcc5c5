"""Metropolis-within-Gibbs sampler, the independent check on the Laplace engine.

Random-walk Metropolis updates for each phi_k and each beta_j, a joint
"shift" move along the intercept / random-effect level direction (the data
cannot see it, only the priors can), conjugate Gibbs draws for tau and the
Gaussian precision sigma, and a random walk on logit(rho) when it is
estimated.  Step sizes adapt during burn-in towards 40% acceptance.

All random numbers are drawn outside the kernel from a seeded numpy
Generator in fixed-size chunks, so the numba and pure-Python paths produce
the same chain.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .._jit import njit
from ..errors import ModelError
from ..gmrf import laplacian_eigenvalues
from .laplace import check_isolation
from .model import inverse_link
from .results import FitResult, Summary, dic_from_draws, pearson_residuals

__all__ = ["MCMCConfig", "fit_mcmc"]

_FAMILY_CODE = {"poisson": 0, "binomial": 1, "gaussian": 2}
_ADAPT_EVERY = 50


@dataclass(frozen=True)
class MCMCConfig:
    """Chain settings.

    ``logit_rho_bounds`` truncates the logit(rho) random walk to the support
    of the default Laplace grid so both backends target the same posterior;
    ``None`` samples the untruncated prior range.
    """

    n_iter: int = 20_000
    burn_in: int = 10_000
    thin: int = 1
    seed: int = 0
    target_accept: float = 0.4
    chunk: int = 500
    logit_rho_bounds: tuple | None = (-6.0, 6.0)

    def __post_init__(self):
        if self.n_iter <= self.burn_in:
            raise ValueError("n_iter must exceed burn_in")
        if self.thin < 1 or self.chunk < 1:
            raise ValueError("thin and chunk must be positive")
        if self.logit_rho_bounds is not None and not self.logit_rho_bounds[0] < self.logit_rho_bounds[1]:
            raise ValueError("logit_rho_bounds must be an increasing pair")


@njit
def _ll(fam, y, eta, ntr, sigma):
    if fam == 0:
        return y * eta - np.exp(eta)
    if fam == 1:
        if eta > 0.0:
            return y * eta - ntr * (eta + np.log1p(np.exp(-eta)))
        return y * eta - ntr * np.log1p(np.exp(eta))
    r = y - eta
    return -0.5 * sigma * r * r


@njit
def _sweeps(fam, y, ntr, X, offset, nb_ptr, nb_idx, wdeg, e0, e1, lam,
            has_phi, est_rho, shift_ok, beta_var, tau_a, tau_b, sig_a, sig_b, lrho_var, lr_lo, lr_hi,
            phi, beta, eta, state, s_phi, s_beta, s_misc, acc_phi, acc_beta, acc_misc,
            zphi, uphi, zbeta, ubeta, zmisc, umisc, gtau, gsig,
            it0, burn_in, thin, target, out_phi, out_beta, out_hyp):
    n = y.shape[0]
    p = beta.shape[0]
    T = zbeta.shape[0]
    for t in range(T):
        it = it0 + t
        tau = state[0]
        rho = state[1]
        sigma = state[2]
        # random effects, one site at a time
        if has_phi:
            for k in range(n):
                nb = 0.0
                for q in range(nb_ptr[k], nb_ptr[k + 1]):
                    nb += phi[nb_idx[q]]
                qkk = rho * wdeg[k] + 1.0 - rho
                old = phi[k]
                new = old + s_phi[k] * zphi[t, k]
                eta_new = eta[k] + (new - old)
                dl = _ll(fam, y[k], eta_new, ntr[k], sigma) - _ll(fam, y[k], eta[k], ntr[k], sigma)
                dp = -0.5 * tau * (qkk * (new * new - old * old) - 2.0 * rho * nb * (new - old))
                if uphi[t, k] < dl + dp:
                    phi[k] = new
                    eta[k] = eta_new
                    acc_phi[k] += 1
        # regression coefficients
        for j in range(p):
            d = s_beta[j] * zbeta[t, j]
            dl = 0.0
            for k in range(n):
                en = eta[k] + X[k, j] * d
                dl += _ll(fam, y[k], en, ntr[k], sigma) - _ll(fam, y[k], eta[k], ntr[k], sigma)
            b = beta[j]
            dp = -0.5 * ((b + d) * (b + d) - b * b) / beta_var
            if ubeta[t, j] < dl + dp:
                beta[j] = b + d
                for k in range(n):
                    eta[k] += X[k, j] * d
                acc_beta[j] += 1
        if has_phi:
            # level shift: beta_0 + d, phi - d leaves eta unchanged
            if shift_ok:
                d = s_misc[0] * zmisc[t, 0]
                sphi = 0.0
                for k in range(n):
                    sphi += phi[k]
                dp = -0.5 * tau * (1.0 - rho) * (-2.0 * d * sphi + d * d * n)
                b = beta[0]
                dp += -0.5 * ((b + d) * (b + d) - b * b) / beta_var
                if umisc[t, 0] < dp:
                    beta[0] = b + d
                    for k in range(n):
                        phi[k] -= d
                    acc_misc[0] += 1
            esum = 0.0
            for q in range(e0.shape[0]):
                df = phi[e0[q]] - phi[e1[q]]
                esum += df * df
            ssum = 0.0
            for k in range(n):
                ssum += phi[k] * phi[k]
            # tau | phi is conjugate
            quad = rho * esum + (1.0 - rho) * ssum
            tau = gtau[t] / (tau_b + 0.5 * quad)
            if est_rho:
                lr = np.log(rho) - np.log1p(-rho)
                lr_new = lr + s_misc[1] * zmisc[t, 1]
                rho_new = 1.0 / (1.0 + np.exp(-lr_new))
                if rho_new < 1.0 and rho_new > 0.0 and lr_lo <= lr_new <= lr_hi:
                    ld = 0.0
                    for i in range(lam.shape[0]):
                        ld += np.log(rho_new * lam[i] + 1.0 - rho_new) - np.log(rho * lam[i] + 1.0 - rho)
                    q_new = rho_new * esum + (1.0 - rho_new) * ssum
                    dlog = 0.5 * ld - 0.5 * tau * (q_new - quad) - 0.5 * (lr_new * lr_new - lr * lr) / lrho_var
                    if umisc[t, 1] < dlog:
                        rho = rho_new
                        acc_misc[1] += 1
        if fam == 2:
            rss = 0.0
            for k in range(n):
                r = y[k] - eta[k]
                rss += r * r
            sigma = gsig[t] / (sig_b + 0.5 * rss)
        state[0] = tau
        state[1] = rho
        state[2] = sigma
        if it < burn_in and (it + 1) % 50 == 0:
            for k in range(n):
                s_phi[k] *= np.exp(2.0 * (acc_phi[k] / 50.0 - target))
                acc_phi[k] = 0
            for j in range(p):
                s_beta[j] *= np.exp(2.0 * (acc_beta[j] / 50.0 - target))
                acc_beta[j] = 0
            for j in range(2):
                s_misc[j] *= np.exp(2.0 * (acc_misc[j] / 50.0 - target))
                acc_misc[j] = 0
        if it >= burn_in and (it - burn_in) % thin == 0:
            r = (it - burn_in) // thin
            if has_phi:
                for k in range(n):
                    out_phi[r, k] = phi[k]
            for j in range(p):
                out_beta[r, j] = beta[j]
            out_hyp[r, 0] = tau
            out_hyp[r, 1] = rho
            out_hyp[r, 2] = sigma


def _initial_state(spec):
    y = spec.y
    p = spec.p
    beta = np.zeros(p)
    if spec.family == "poisson":
        beta[0] = np.log((y.sum() + 0.5) / np.exp(spec.offset).sum())
    elif spec.family == "binomial":
        pr = (y.sum() + 0.5) / (spec.trials.sum() + 1.0)
        beta[0] = np.log(pr / (1.0 - pr)) - spec.offset.mean()
    else:
        beta[0] = float(np.mean(y - spec.offset))
    return beta


def run_chain(spec, w, config):
    """Raw retained draws ``(phi, beta, hyper)``; ``hyper`` columns are tau, rho, sigma."""
    n, p = spec.n, spec.p
    X = np.ascontiguousarray(spec.design)
    fam = _FAMILY_CODE[spec.family]
    has_phi = bool(spec.random_effects)
    est_rho = has_phi and spec.rho_fixed is None
    nb_ptr, nb_idx = w.neighbour_lists
    e = np.ascontiguousarray(w.active_edges, dtype=np.int64)
    lam = np.ascontiguousarray(laplacian_eigenvalues(w)) if est_rho else np.zeros(0)
    ntr = spec.trials if spec.trials is not None else np.zeros(n)
    pr = spec.priors
    lr_lo, lr_hi = (-np.inf, np.inf) if config.logit_rho_bounds is None else map(float, config.logit_rho_bounds)

    beta = _initial_state(spec)
    phi = np.zeros(n)
    eta = X @ beta + spec.offset
    state = np.array([
        1.0,
        (0.5 if est_rho else (spec.rho_fixed or 0.0)),
        (1.0 / max(np.var(spec.y), 1e-8) if fam == 2 else 1.0),
    ])
    s_phi = np.full(n, 0.1)
    s_beta = np.full(p, 0.05)
    s_misc = np.array([0.1, 0.5])
    acc_phi = np.zeros(n, dtype=np.int64)
    acc_beta = np.zeros(p, dtype=np.int64)
    acc_misc = np.zeros(2, dtype=np.int64)

    n_keep = (config.n_iter - config.burn_in + config.thin - 1) // config.thin
    out_phi = np.zeros((n_keep, n if has_phi else 0))
    out_beta = np.zeros((n_keep, p))
    out_hyp = np.zeros((n_keep, 3))

    rng = np.random.default_rng(config.seed)
    it0 = 0
    while it0 < config.n_iter:
        T = min(config.chunk, config.n_iter - it0)
        zphi = rng.standard_normal((T, n)) if has_phi else np.zeros((T, n))
        uphi = np.log(rng.random((T, n))) if has_phi else np.zeros((T, n))
        zbeta = rng.standard_normal((T, p))
        ubeta = np.log(rng.random((T, p)))
        zmisc = rng.standard_normal((T, 2))
        umisc = np.log(rng.random((T, 2)))
        gtau = rng.standard_gamma(pr.tau_shape + 0.5 * n, T)
        gsig = rng.standard_gamma(pr.sigma_shape + 0.5 * n, T)
        _sweeps(fam, spec.y, ntr, X, spec.offset, nb_ptr, nb_idx, w.row_sums.astype(float), e[:, 0].copy(),
                e[:, 1].copy(), lam, has_phi, est_rho, True, pr.beta_var, pr.tau_shape, pr.tau_rate,
                pr.sigma_shape, pr.sigma_rate, pr.logit_rho_var, lr_lo, lr_hi, phi, beta, eta, state, s_phi, s_beta, s_misc,
                acc_phi, acc_beta, acc_misc, zphi, uphi, zbeta, ubeta, zmisc, umisc, gtau, gsig,
                it0, config.burn_in, config.thin, config.target_accept, out_phi, out_beta, out_hyp)
        it0 += T
    return out_phi, out_beta, out_hyp


def fit_mcmc(spec, w, config=None):
    """Posterior summaries from a Metropolis-within-Gibbs run."""
    config = config or MCMCConfig()
    check_isolation(spec, w)
    if not np.allclose(spec.design[:, 0], 1.0):
        raise ModelError("first design column must be the intercept")
    phi_d, beta_d, hyp_d = run_chain(spec, w, config)
    eta_d = beta_d @ spec.design.T + spec.offset
    if spec.random_effects:
        eta_d += phi_d
    sigma_d = hyp_d[:, 2] if spec.family == "gaussian" else None
    eta = Summary.from_draws(eta_d)
    mu = Summary.from_draws(inverse_link(spec.family, eta_d))
    risk = Summary.from_draws(np.exp(eta_d - spec.offset)) if spec.family == "poisson" else None
    hyper = {}
    if spec.random_effects:
        hyper["tau"] = Summary.from_draws(hyp_d[:, 0])
        hyper["rho"] = Summary.from_draws(hyp_d[:, 1])
    if sigma_d is not None:
        hyper["sigma"] = Summary.from_draws(sigma_d)
    dic, p_d, dbar = dic_from_draws(spec, eta_d, sigma_d)
    sigma_hat = float(np.median(sigma_d)) if sigma_d is not None else None
    return FitResult(
        family=spec.family, backend="mcmc", beta=Summary.from_draws(beta_d), eta=eta, mu=mu, hyper=hyper,
        residuals=pearson_residuals(spec, mu.median, sigma_hat), dic=dic, p_d=p_d, mean_deviance=dbar,
        phi=Summary.from_draws(phi_d) if spec.random_effects else None,
        phi_centred=Summary.from_draws(phi_d - phi_d.mean(axis=1, keepdims=True)) if spec.random_effects else None,
        risk=risk, grid=None,
        names=spec.names, rho_fixed=spec.rho_fixed if spec.random_effects else None,
        info={"draws": len(beta_d), "seed": config.seed},
    )
