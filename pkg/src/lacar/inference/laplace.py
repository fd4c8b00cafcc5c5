"""Laplace-approximated latent field integrated over a hyperparameter grid.

For each hyperparameter point the joint latent vector ``x = (phi, beta)`` is
approximated by a Gaussian at its posterior mode, found by Newton's method
on the sparse joint precision.  The Laplace evidence gives each point a
weight, and every marginal is then a finite mixture of per-point Gaussians.
"""

from __future__ import annotations

import itertools
import logging
from dataclasses import dataclass
from functools import lru_cache

import numpy as np
import scipy.sparse as sp
from scipy.special import gammaln

from .. import sparse
from ..errors import ConvergenceError, IsolatedAreaError, ModelError, NumericalError
from .model import Hyper, eta_derivatives, inverse_link, loglik_terms
from .results import (
    FitResult,
    HyperGrid,
    Summary,
    dic_from_draws,
    grid_summary,
    mixture_link_mean,
    normalize_log_weights,
    pearson_residuals,
)

__all__ = ["GridConfig", "LatentMode", "latent_mode", "laplace_log_marginal", "log_hyperprior", "fit",
           "check_isolation"]

log = logging.getLogger(__name__)

LOG_2PI = np.log(2.0 * np.pi)
ISOLATION_RHO = 0.99


@dataclass(frozen=True)
class GridConfig:
    """Hyperparameter grid settings.

    The first pass spans ``logit_rho_range`` and ``centre +/- log_span`` on the
    log-precision axes (centres from a moment estimate).  With ``refine`` a
    second pass of the same size is laid over the region holding the mass
    of the first.
    """

    n_rho: int = 15
    n_tau: int = 15
    n_sigma: int = 10
    logit_rho_range: tuple = (-6.0, 6.0)
    log_span: float = 4.0
    refine: bool = True
    max_shifts: int = 3
    n_draws: int = 1000
    seed: int = 0
    weight_floor: float = 1e-9
    newton_tol: float = 1e-6
    newton_max_iter: int = 100


# ---------------------------------------------------------------------------
# sparsity structure of the joint precision
# ---------------------------------------------------------------------------


class JointStructure:
    """Pattern of the (phi, beta) precision and the maps used to fill it."""

    def __init__(self, n_phi, p, edges):
        self.n_phi = n_phi
        self.p = p
        self.dim = n_phi + p
        edges = np.asarray(edges, dtype=np.int64).reshape(-1, 2)
        self.edges = edges
        kk, jj = np.meshgrid(np.arange(n_phi), np.arange(p), indexing="ij")
        self.fb_rows = kk.ravel()
        self.fb_cols = n_phi + jj.ravel()
        self.bb_i, self.bb_j = np.triu_indices(p, 1)
        rows = np.concatenate([edges[:, 0], self.fb_rows, n_phi + self.bb_i])
        cols = np.concatenate([edges[:, 1], self.fb_cols, n_phi + self.bb_j])
        self.rows, self.cols = rows, cols
        self.symbolic = sparse.analyze(self.dim, rows, cols, tail=p)

    def values(self, X, d, tau, rho, w_rowsums, beta_var):
        """Diagonal and off-diagonal entries of prior precision + X_a^T D X_a."""
        n, p = self.n_phi, self.p
        if n:
            dX = d[:, None] * X
            XtDX = X.T @ dX
            diag = np.concatenate([tau * (rho * w_rowsums + 1.0 - rho) + d, np.diag(XtDX) + 1.0 / beta_var])
            off = np.concatenate([np.full(len(self.edges), -tau * rho), dX.ravel(), XtDX[self.bb_i, self.bb_j]])
        else:
            XtDX = X.T @ (d[:, None] * X) if d is not None else np.zeros((p, p))
            diag = np.diag(XtDX) + 1.0 / beta_var
            off = XtDX[self.bb_i, self.bb_j]
        return diag, off

    def to_sparse(self, diag, off):
        m = self.dim
        r = np.concatenate([np.arange(m), self.rows, self.cols])
        c = np.concatenate([np.arange(m), self.cols, self.rows])
        return sp.csr_matrix((np.concatenate([diag, off, off]), (r, c)), shape=(m, m))


@lru_cache(maxsize=128)
def _structure(n_phi, p, edges_bytes):
    edges = np.frombuffer(edges_bytes, dtype=np.int64).reshape(-1, 2)
    return JointStructure(n_phi, p, edges)


def joint_structure(spec, w, rho):
    if not spec.random_effects:
        return _structure(0, spec.p, b"")
    edges = w.active_edges if rho > 0.0 else np.zeros((0, 2), dtype=np.int64)
    return _structure(spec.n, spec.p, np.ascontiguousarray(edges, dtype=np.int64).tobytes())


# ---------------------------------------------------------------------------
# mode finding
# ---------------------------------------------------------------------------


@dataclass(eq=False)
class LatentMode:
    """Gaussian approximation of the latent field at one hyperparameter point."""

    hyper: Hyper
    mode: np.ndarray
    factor: sparse.SparseFactor
    structure: JointStructure
    loglik: float
    prior_quad: float
    prior_logdet: float
    n_iter: int
    _diag: np.ndarray = None
    _off: np.ndarray = None

    @property
    def precision(self):
        """Negative Hessian of the log joint density at the mode (sparse)."""
        return self.structure.to_sparse(self._diag, self._off)

    def log_marginal(self):
        """Laplace log evidence log p(y | hyper), without the hyperprior."""
        return self.loglik - 0.5 * self.prior_quad + 0.5 * self.prior_logdet - 0.5 * self.factor.logdet()


def check_isolation(spec, w):
    """Reject W states leaving an area without neighbours when rho is fixed near one."""
    rho = spec.rho_fixed
    if spec.random_effects and rho is not None and rho >= ISOLATION_RHO:
        iso = w.isolated()
        if len(iso):
            raise IsolatedAreaError(iso[0], rho)


def _split(spec, x):
    n = spec.n if spec.random_effects else 0
    return x[:n], x[n:]


def _eta(spec, x):
    phi, beta = _split(spec, x)
    eta = spec.design @ beta + spec.offset
    if spec.random_effects:
        eta = eta + phi
    return eta


def _initial_latent(spec):
    y = spec.y
    if spec.family == "poisson":
        b0 = np.log((y.sum() + 0.5) / np.exp(spec.offset).sum())
    elif spec.family == "binomial":
        pr = (y.sum() + 0.5) / (spec.trials.sum() + 1.0)
        b0 = np.log(pr / (1 - pr)) - spec.offset.mean()
    else:
        b0 = float(np.mean(y - spec.offset))
    n = spec.n if spec.random_effects else 0
    x = np.zeros(n + spec.p)
    x[n] = b0
    return x


def latent_mode(spec, w, hyper, x0=None, tol=1e-6, max_iter=100):
    """Posterior mode of ``(phi, beta)`` given the hyperparameters.

    Newton iterations on the joint log density with step halving; converged
    when the largest absolute gradient entry falls below ``tol``.
    """
    hyper = Hyper(*hyper)
    rho, tau, sigma = hyper
    if spec.random_effects and not (0.0 <= rho < 1.0 and tau > 0.0):
        raise ValueError(f"hyperparameters out of range: {hyper}")
    if spec.family == "gaussian" and not (sigma is not None and sigma > 0.0):
        raise ValueError("gaussian family needs sigma > 0")
    st = joint_structure(spec, w, rho)
    X = spec.design
    V = spec.priors.beta_var
    n_phi = st.n_phi
    ws = w.row_sums if n_phi else None
    prior_diag, prior_off = st.values(X, np.zeros(n_phi) if n_phi else None, tau, rho, ws, V)
    prior_factor = sparse.factorize(st.symbolic, prior_diag, prior_off)

    def prior_apply(x):
        phi, beta = x[:n_phi], x[n_phi:]
        out = np.empty_like(x)
        if n_phi:
            e = st.edges
            qphi = (rho * ws + 1.0 - rho) * phi
            if len(e):
                np.subtract.at(qphi, e[:, 0], rho * phi[e[:, 1]])
                np.subtract.at(qphi, e[:, 1], rho * phi[e[:, 0]])
            out[:n_phi] = tau * qphi
        out[n_phi:] = beta / V
        return out

    def objective(x):
        eta = _eta(spec, x)
        ll = float(np.sum(loglik_terms(spec, eta, sigma)))
        return ll - 0.5 * float(x @ prior_apply(x)), eta

    x = _initial_latent(spec) if x0 is None else np.array(x0, dtype=float)
    obj, eta = objective(x)
    converged = False
    for it in range(max_iter + 1):
        g_eta, d = eta_derivatives(spec, eta, sigma)
        grad = -prior_apply(x)
        if n_phi:
            grad[:n_phi] += g_eta
        grad[n_phi:] += X.T @ g_eta
        diag, off = st.values(X, d, tau, rho, ws, V)
        factor = sparse.factorize(st.symbolic, diag, off)
        if np.max(np.abs(grad)) < tol:
            converged = True
            break
        if it == max_iter:
            break
        step = factor.solve(grad)
        decrement = float(grad @ step)
        if decrement < 1e-20 * max(1.0, abs(obj)):
            converged = True
            break
        t = 1.0
        for _ in range(40):
            x_new = x + t * step
            obj_new, eta_new = objective(x_new)
            if np.isfinite(obj_new) and obj_new >= obj - 1e-12 * abs(obj):
                break
            t *= 0.5
        else:
            raise ConvergenceError("line search failed to improve the log density")
        x, obj, eta = x_new, obj_new, eta_new
    if not converged:
        raise ConvergenceError(f"Newton did not converge in {max_iter} iterations (max |grad| = "
                               f"{np.max(np.abs(grad)):.3g})")
    ll = float(np.sum(loglik_terms(spec, eta, sigma)))
    return LatentMode(
        hyper=hyper, mode=x, factor=factor, structure=st, loglik=ll,
        prior_quad=float(x @ prior_apply(x)), prior_logdet=prior_factor.logdet(), n_iter=it,
        _diag=diag, _off=off,
    )


def log_gradient(spec, w, hyper, x):
    """Gradient of the log joint density in ``x`` (used to audit the mode)."""
    rho, tau, sigma = Hyper(*hyper)
    st = joint_structure(spec, w, rho)
    n_phi = st.n_phi
    eta = _eta(spec, x)
    g_eta, _ = eta_derivatives(spec, eta, sigma)
    prior = st.to_sparse(*st.values(spec.design, np.zeros(n_phi) if n_phi else None, tau, rho,
                                   w.row_sums if n_phi else None, spec.priors.beta_var))
    grad = -(prior @ x)
    if n_phi:
        grad[:n_phi] += g_eta
    grad[n_phi:] += spec.design.T @ g_eta
    return grad


def log_joint(spec, w, hyper, x):
    """Log joint density of ``(y, phi, beta)`` given the hyperparameters."""
    rho, tau, sigma = Hyper(*hyper)
    st = joint_structure(spec, w, rho)
    n_phi = st.n_phi
    diag, off = st.values(spec.design, np.zeros(n_phi) if n_phi else None, tau, rho,
                          w.row_sums if n_phi else None, spec.priors.beta_var)
    prior = st.to_sparse(diag, off)
    logdet = sparse.factorize(st.symbolic, diag, off).logdet()
    ll = float(np.sum(loglik_terms(spec, _eta(spec, x), sigma)))
    return ll + 0.5 * logdet - 0.5 * st.dim * LOG_2PI - 0.5 * float(x @ (prior @ x))


# ---------------------------------------------------------------------------
# hyperparameters
# ---------------------------------------------------------------------------


def _log_gamma_on_log_scale(value, shape, rate):
    # density of log(value) when value ~ Gamma(shape, rate)
    if not value > 0.0:
        return -np.inf
    return shape * np.log(rate) - gammaln(shape) + shape * np.log(value) - rate * value


def log_hyperprior(spec, hyper):
    """Log prior density on the internal scale (logit rho, log tau, log sigma)."""
    rho, tau, sigma = Hyper(*hyper)
    pr = spec.priors
    out = 0.0
    if spec.random_effects:
        if spec.rho_fixed is None:
            if not 0.0 < rho < 1.0:
                return -np.inf
            lr = np.log(rho) - np.log1p(-rho)
            out += -0.5 * np.log(2 * np.pi * pr.logit_rho_var) - 0.5 * lr * lr / pr.logit_rho_var
        out += _log_gamma_on_log_scale(tau, pr.tau_shape, pr.tau_rate)
    if spec.family == "gaussian":
        out += _log_gamma_on_log_scale(sigma, pr.sigma_shape, pr.sigma_rate)
    return float(out)


def laplace_log_marginal(spec, w, hyper, mode=None, include_prior=True):
    """Laplace approximation to ``log p(y | hyper)`` plus the hyperprior.

    Exact for the Gaussian family.  ``mode`` may pass a precomputed
    :class:`LatentMode` for the same hyperparameters.
    """
    if mode is None:
        mode = latent_mode(spec, w, hyper)
    out = mode.log_marginal()
    if include_prior:
        out += log_hyperprior(spec, hyper)
    return float(out)


def moment_precisions(spec):
    """Crude (tau, sigma) starting values from an independence moment fit."""
    y, X, off = spec.y, spec.design, spec.offset
    if spec.family == "poisson":
        z = np.log(y + 0.5) - off
        samp = np.mean(1.0 / (y + 0.5))
    elif spec.family == "binomial":
        N = spec.trials
        z = np.log((y + 0.5) / (N - y + 0.5)) - off
        samp = np.mean(1.0 / (y + 0.5) + 1.0 / (N - y + 0.5))
    else:
        z = y - off
        samp = 0.0
    n, p = X.shape
    if n > p:
        coef, *_ = np.linalg.lstsq(X, z, rcond=None)
        r = z - X @ coef
        v = float(r @ r / (n - p))
    else:
        v = 1.0
    if spec.family == "gaussian":
        v = max(v, 1e-8)
        if spec.random_effects:
            return 2.0 / v, 2.0 / v
        return 1.0, 1.0 / v
    v_re = max(v - samp, 0.05 * v, 1e-3)
    return 1.0 / v_re, None


def _axes(spec, config, centres):
    axes = []
    if spec.random_effects:
        if spec.rho_fixed is None:
            axes.append(("rho", np.linspace(*config.logit_rho_range, config.n_rho)))
        t = np.log(centres[0])
        axes.append(("tau", np.linspace(t - config.log_span, t + config.log_span, config.n_tau)))
    if spec.family == "gaussian":
        s = np.log(centres[1])
        axes.append(("sigma", np.linspace(s - config.log_span, s + config.log_span, config.n_sigma)))
    return axes


def _hyper_from_coords(spec, names, coords):
    vals = dict(zip(names, coords))
    if "rho" in vals:
        rho = 1.0 / (1.0 + np.exp(-vals["rho"]))
    else:
        rho = spec.rho_fixed if spec.rho_fixed is not None else 0.0
    tau = float(np.exp(vals["tau"])) if "tau" in vals else 1.0
    sigma = float(np.exp(vals["sigma"])) if "sigma" in vals else None
    return Hyper(float(rho), tau, sigma)


def _snake(axes):
    """Cartesian product ordered so consecutive points are grid neighbours."""
    sizes = [len(a) for _, a in axes]
    if not sizes:
        return [()]
    order = [()]
    for size in sizes:
        nxt = []
        for t, prefix in enumerate(order):
            idx = range(size) if t % 2 == 0 else range(size - 1, -1, -1)
            nxt.extend(prefix + (i,) for i in idx)
        order = nxt
    return order


def _evaluate(spec, w, axes, config, cache):
    names = tuple(name for name, _ in axes)
    idx_list = _snake(axes)
    coords = np.array([[axes[d][1][i] for d, i in enumerate(idx)] for idx in idx_list]).reshape(len(idx_list), len(axes))
    modes, logpost = [], np.full(len(coords), -np.inf)
    x0 = None
    for g, c in enumerate(coords):
        hyper = _hyper_from_coords(spec, names, c)
        key = tuple(np.round(c, 12))
        if key in cache:
            lm = cache[key]
        else:
            try:
                lm = latent_mode(spec, w, hyper, x0=x0, tol=config.newton_tol, max_iter=config.newton_max_iter)
            except NumericalError as exc:
                log.debug("grid point %s failed: %s", hyper, exc)
                lm = None
            cache[key] = lm
        modes.append(lm)
        if lm is not None:
            x0 = lm.mode
            logpost[g] = lm.log_marginal() + log_hyperprior(spec, hyper)
    return names, coords, modes, logpost


def _weighted_moments(coords, weights):
    mean = weights @ coords
    sd = np.sqrt(np.maximum(weights @ (coords - mean) ** 2, 0.0))
    return mean, sd


def _run_grid(spec, w, config):
    centres = moment_precisions(spec)
    axes = _axes(spec, config, centres)
    cache = {}
    names, coords, modes, logpost = _evaluate(spec, w, axes, config, cache)
    if not np.isfinite(logpost).any():
        raise ModelError("model could not be fitted at any hyperparameter point")
    # slide log-precision axes whose mass piles up against an edge
    for _ in range(config.max_shifts):
        best = coords[np.argmax(logpost)]
        moved = False
        new_axes = []
        for d, (name, grid) in enumerate(axes):
            if name != "rho" and len(grid) > 2:
                half = 0.5 * (grid[-1] - grid[0])
                if np.isclose(best[d], grid[-1]):
                    grid = grid + half
                    moved = True
                elif np.isclose(best[d], grid[0]):
                    grid = grid - half
                    moved = True
            new_axes.append((name, grid))
        if not moved:
            break
        axes = new_axes
        names, coords, modes, logpost = _evaluate(spec, w, axes, config, cache)
    if config.refine and axes:
        weights = normalize_log_weights(logpost)
        mean, sd = _weighted_moments(coords, weights)
        new_axes = []
        for d, (name, grid) in enumerate(axes):
            h = grid[1] - grid[0] if len(grid) > 1 else 1.0
            half = max(4.0 * sd[d], 2.0 * h)
            lo, hi = mean[d] - half, mean[d] + half
            if name == "rho":
                lo, hi = max(lo, config.logit_rho_range[0]), min(hi, config.logit_rho_range[1])
            new_axes.append((name, np.linspace(lo, hi, len(grid))))
        names, coords, modes, logpost = _evaluate(spec, w, new_axes, config, {})
        if not np.isfinite(logpost).any():
            raise ModelError("model could not be fitted at any refined hyperparameter point")
    return names, coords, modes, logpost


# ---------------------------------------------------------------------------
# fit
# ---------------------------------------------------------------------------


def _marginals(spec, lm):
    """Means and sds of phi, beta and eta at one grid point."""
    n_phi = lm.structure.n_phi
    p = spec.p
    X = spec.design
    f = lm.factor
    dvar = f.inverse_diagonal()
    phi_m, beta_m = lm.mode[:n_phi], lm.mode[n_phi:]
    eta_m = X @ beta_m + spec.offset
    bb = f.inverse_entries(np.repeat(np.arange(p), p) + n_phi, np.tile(np.arange(p), p) + n_phi).reshape(p, p)
    eta_var = np.einsum("ki,ij,kj->k", X, bb, X)
    if n_phi:
        eta_m = eta_m + phi_m
        st = lm.structure
        fb = f.inverse_entries(st.fb_rows, st.fb_cols).reshape(n_phi, p)
        eta_var = eta_var + dvar[:n_phi] + 2.0 * np.sum(X * fb, axis=1)
        # phi_k - mean(phi): drops the level shared with the intercept
        v = np.zeros(st.dim)
        v[:n_phi] = 1.0 / n_phi
        u = f.solve(v)
        c_m = phi_m - phi_m.mean()
        c_s = np.sqrt(np.maximum(dvar[:n_phi] - 2.0 * u[:n_phi] + v @ u, 0.0))
    else:
        c_m = c_s = np.zeros(0)
    return (phi_m, np.sqrt(dvar[:n_phi]), beta_m, np.sqrt(dvar[n_phi:]), eta_m,
            np.sqrt(np.maximum(eta_var, 0.0)), c_m, c_s)


def fit(spec, w, config=None):
    """Approximate posterior of the model given a fixed neighbourhood matrix."""
    config = config or GridConfig()
    check_isolation(spec, w)
    names, coords, modes, logpost = _run_grid(spec, w, config)
    weights = normalize_log_weights(logpost)
    points = np.array([[getattr(m.hyper, nm) if m is not None else np.nan for nm in names] for m in modes]
                      ).reshape(len(modes), len(names))
    grid = HyperGrid(names, coords, points, logpost)

    keep = np.flatnonzero(weights >= config.weight_floor * weights.max())
    wk = weights[keep] / weights[keep].sum()
    margs = [_marginals(spec, modes[g]) for g in keep]
    stack = [np.array([m[i] for m in margs]) for i in range(8)]
    phi_m, phi_s, beta_m, beta_s, eta_m, eta_s, c_m, c_s = stack

    beta = Summary.from_mixture(wk, beta_m, beta_s)
    eta = Summary.from_mixture(wk, eta_m, eta_s)
    phi = Summary.from_mixture(wk, phi_m, phi_s) if spec.random_effects else None
    phi_c = Summary.from_mixture(wk, c_m, c_s) if spec.random_effects else None
    link = lambda v: inverse_link(spec.family, v)  # noqa: E731
    mu_mean, mu_sd = mixture_link_mean(spec.family, wk, eta_m, eta_s)
    mu = eta.mapped(link, mu_mean, mu_sd)
    risk = None
    if spec.family == "poisson":
        r_m, r_s = mixture_link_mean("poisson", wk, eta_m - spec.offset, eta_s)
        risk = Summary(r_m, r_s, np.exp(eta.median - spec.offset), np.exp(eta.lo - spec.offset),
                       np.exp(eta.hi - spec.offset))

    hyper = {nm: grid_summary(points[keep, d], wk) for d, nm in enumerate(names)}
    if spec.random_effects and spec.rho_fixed is not None:
        hyper["rho"] = Summary(spec.rho_fixed, 0.0, spec.rho_fixed, spec.rho_fixed, spec.rho_fixed)
    sigma_hat = hyper["sigma"].median if "sigma" in hyper else None

    rng = np.random.default_rng(config.seed)
    which = rng.choice(len(keep), size=config.n_draws, p=wk)
    eta_draws = np.empty((config.n_draws, spec.n))
    sigma_draws = np.empty(config.n_draws) if spec.family == "gaussian" else None
    for s, g in enumerate(which):
        lm = modes[keep[g]]
        x = lm.mode + lm.factor.solve_lt(rng.standard_normal(lm.structure.dim))
        eta_draws[s] = _eta(spec, x)
        if sigma_draws is not None:
            sigma_draws[s] = lm.hyper.sigma
    dic, p_d, dbar = dic_from_draws(spec, eta_draws, sigma_draws)

    return FitResult(
        family=spec.family, backend="laplace", beta=beta, eta=eta, mu=mu, hyper=hyper,
        residuals=pearson_residuals(spec, mu.median, sigma_hat), dic=dic, p_d=p_d, mean_deviance=dbar,
        phi=phi, phi_centred=phi_c, risk=risk, grid=grid, names=spec.names,
        rho_fixed=spec.rho_fixed if spec.random_effects else None,
        info={"grid_points": len(coords), "points_used": len(keep),
              "newton_iterations": int(sum(m.n_iter for m in modes if m is not None))},
    )
