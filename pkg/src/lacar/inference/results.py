"""Posterior summaries shared by both inference backends."""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
from scipy.special import ndtr, ndtri

from ..errors import NumericalError
from .model import fitted_mean, inverse_link, loglik_terms, response_variance

__all__ = ["Summary", "HyperGrid", "FitResult", "credible_intervals_phi", "mixture_quantiles",
           "dic_from_draws", "pearson_residuals"]

PROBS = (0.025, 0.5, 0.975)
_GH_T, _GH_W = np.polynomial.hermite.hermgauss(24)


@dataclass(frozen=True, eq=False)
class Summary:
    """Marginal posterior summaries, elementwise over a vector of parameters."""

    mean: np.ndarray
    sd: np.ndarray
    median: np.ndarray
    lo: np.ndarray
    hi: np.ndarray

    def __len__(self):
        return len(np.atleast_1d(self.mean))

    def __getitem__(self, idx):
        return Summary(*(np.asarray(getattr(self, f))[idx] for f in ("mean", "sd", "median", "lo", "hi")))

    @classmethod
    def from_draws(cls, draws):
        draws = np.asarray(draws, dtype=float)
        q = np.quantile(draws, PROBS, axis=0)
        return cls(draws.mean(axis=0), draws.std(axis=0, ddof=1) if len(draws) > 1 else np.zeros(draws.shape[1:]),
                   q[1], q[0], q[2])

    @classmethod
    def from_mixture(cls, weights, means, sds, tol=1e-6):
        weights = np.asarray(weights, dtype=float)
        means = np.atleast_2d(means)
        sds = np.atleast_2d(sds)
        mean = weights @ means
        var = weights @ (sds**2 + means**2) - mean**2
        q = mixture_quantiles(weights, means, sds, PROBS, tol)
        return cls(mean, np.sqrt(np.maximum(var, 0.0)), q[1], q[0], q[2])

    def mapped(self, func, mean=None, sd=None):
        """Push quantiles through a monotone increasing map."""
        return Summary(
            func(self.mean) if mean is None else mean,
            np.full_like(np.asarray(self.sd, dtype=float), np.nan) if sd is None else sd,
            func(self.median), func(self.lo), func(self.hi),
        )


def mixture_quantiles(weights, means, sds, probs=PROBS, tol=1e-6):
    """Quantiles of ``sum_g w_g N(means[g], sds[g]^2)`` columnwise, by bisection.

    ``means`` and ``sds`` have shape ``(G, K)``; the result is ``(len(probs), K)``.
    """
    weights = np.asarray(weights, dtype=float)
    means = np.atleast_2d(np.asarray(means, dtype=float))
    sds = np.atleast_2d(np.asarray(sds, dtype=float))
    probs = np.asarray(probs, dtype=float)
    if means.shape[0] == 1:
        return means[0] + sds[0] * ndtri(probs)[:, None]
    keep = weights > 0
    weights, means, sds = weights[keep] / weights[keep].sum(), means[keep], sds[keep]
    sds = np.maximum(sds, 1e-300)
    lo = np.broadcast_to((means - 9.0 * sds).min(axis=0), (len(probs), means.shape[1])).copy()
    hi = np.broadcast_to((means + 9.0 * sds).max(axis=0), (len(probs), means.shape[1])).copy()
    target = probs[:, None]
    w = weights[:, None, None]
    while np.max(hi - lo) > tol:
        mid = 0.5 * (lo + hi)
        cdf = np.sum(w * ndtr((mid[None] - means[:, None, :]) / sds[:, None, :]), axis=0)
        below = cdf < target
        lo = np.where(below, mid, lo)
        hi = np.where(below, hi, mid)
    return 0.5 * (lo + hi)


def mixture_link_mean(family, weights, means, sds):
    """E[g^{-1}(eta)] and its sd under a Gaussian mixture on eta."""
    if family == "gaussian":
        m = weights @ means
        return m, np.sqrt(np.maximum(weights @ (sds**2 + means**2) - m**2, 0.0))
    if family == "poisson":
        e1 = np.exp(means + 0.5 * sds**2)
        e2 = np.exp(2.0 * means + 2.0 * sds**2)
    else:
        nodes = means[..., None] + np.sqrt(2.0) * sds[..., None] * _GH_T
        vals = inverse_link(family, nodes)
        e1 = (vals * _GH_W).sum(-1) / np.sqrt(np.pi)
        e2 = (vals**2 * _GH_W).sum(-1) / np.sqrt(np.pi)
    m = weights @ e1
    return m, np.sqrt(np.maximum(weights @ e2 - m**2, 0.0))


@dataclass(frozen=True, eq=False)
class HyperGrid:
    """Hyperparameter integration points and their posterior weights.

    ``coords`` are on the internal scale (logit rho, log tau, log sigma);
    ``points`` hold the natural-scale values in the same column order.
    """

    names: tuple
    coords: np.ndarray
    points: np.ndarray
    log_weights: np.ndarray

    @property
    def weights(self):
        return normalize_log_weights(self.log_weights)

    def __len__(self):
        return len(self.log_weights)


def normalize_log_weights(log_weights):
    lw = np.asarray(log_weights, dtype=float)
    finite = np.isfinite(lw)
    if not finite.any():
        raise NumericalError("every hyperparameter point has zero posterior weight")
    shifted = np.where(finite, lw - lw[finite].max(), -np.inf)
    w = np.exp(shifted)
    total = w.sum()
    if not total > 0.0:
        raise NumericalError("posterior weights underflowed")
    return w / total


def grid_summary(values, weights):
    """Summary of a scalar discretised on grid points (interpolated CDF)."""
    values = np.asarray(values, dtype=float)
    uniq, inv = np.unique(values, return_inverse=True)
    w = np.bincount(inv, weights=weights, minlength=len(uniq))
    mean = float(w @ uniq)
    sd = float(np.sqrt(max(w @ uniq**2 - mean**2, 0.0)))
    if len(uniq) == 1:
        v = float(uniq[0])
        return Summary(mean, sd, v, v, v)
    mid = np.cumsum(w) - 0.5 * w
    qs = np.interp(PROBS, mid, uniq)
    return Summary(mean, sd, float(qs[1]), float(qs[0]), float(qs[2]))


@dataclass(frozen=True, eq=False)
class FitResult:
    """Posterior summaries for one model fit under a fixed W.

    ``mu`` is on the inverse-link scale (a probability for the binomial
    family); ``risk`` is ``exp(x^T beta + phi)`` and only set for Poisson.
    ``phi_centred`` summarises ``phi_k - mean(phi)``.
    """

    family: str
    backend: str
    beta: Summary
    eta: Summary
    mu: Summary
    hyper: dict
    residuals: np.ndarray
    dic: float
    p_d: float
    mean_deviance: float
    phi: Summary | None = None
    phi_centred: Summary | None = None
    risk: Summary | None = None
    grid: HyperGrid | None = None
    names: tuple = ()
    rho_fixed: float | None = None
    info: dict = field(default_factory=dict)

    @property
    def n(self):
        return len(self.eta)

    def hyper_median(self, name):
        s = self.hyper.get(name)
        return None if s is None else float(s.median)

    def phi_intervals(self, centred=True):
        return credible_intervals_phi(self, centred)


def credible_intervals_phi(result, centred=True):
    """``(n, 2)`` array of 2.5% and 97.5% posterior quantiles per area.

    By default the quantiles are those of ``phi_k - mean(phi)``.  With an
    intercept in the model the common level of ``phi`` is identified only
    through the prior, and as rho approaches one its uncertainty dominates
    every marginal while cancelling from any contrast ``phi_k - phi_j``.
    Centring removes it.  ``centred=False`` gives the plain marginals.
    """
    s = result.phi_centred if centred else result.phi
    if s is None:
        raise ValueError("fit has no random effects" if result.phi is None
                         else "fit carries no centred random-effect summaries")
    return np.column_stack([s.lo, s.hi])


def pearson_residuals(spec, mu_hat, sigma_hat=None):
    mean = fitted_mean(spec, mu_hat)
    var = response_variance(spec, mu_hat, sigma_hat)
    return (spec.y - mean) / np.sqrt(np.maximum(var, 1e-300))


def deviance(spec, eta, sigma=None):
    return -2.0 * np.sum(loglik_terms(spec, eta, sigma), axis=-1)


def dic_from_draws(spec, eta_draws, sigma_draws=None):
    """DIC = mean deviance + p_D with p_D = mean deviance - deviance at the mean."""
    eta_draws = np.atleast_2d(eta_draws)
    if sigma_draws is None:
        dev = deviance(spec, eta_draws)
        dev_at_mean = deviance(spec, eta_draws.mean(axis=0))
    else:
        sigma_draws = np.asarray(sigma_draws, dtype=float)
        dev = deviance(spec, eta_draws, sigma_draws[:, None])
        dev_at_mean = deviance(spec, eta_draws.mean(axis=0), sigma_draws.mean())
    dbar = float(dev.mean())
    p_d = dbar - float(dev_at_mean)
    return dbar + p_d, p_d, dbar
