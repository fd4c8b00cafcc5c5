"""Model specification and the three likelihood families."""

from __future__ import annotations

from dataclasses import dataclass, field, replace
from typing import NamedTuple

import numpy as np
from scipy.special import expit, gammaln

from ..errors import ModelError

__all__ = ["Priors", "ModelSpec", "Hyper", "FAMILIES", "loglik_terms", "eta_derivatives",
           "inverse_link", "response_variance"]

FAMILIES = ("poisson", "binomial", "gaussian")
LOG_2PI = np.log(2.0 * np.pi)


@dataclass(frozen=True)
class Priors:
    """Prior settings.  Normal priors are parameterised by their variance;
    gamma priors by shape and rate."""

    beta_var: float = 1000.0
    tau_shape: float = 0.001
    tau_rate: float = 0.001
    sigma_shape: float = 0.001
    sigma_rate: float = 0.001
    logit_rho_var: float = 100.0


class Hyper(NamedTuple):
    rho: float = 0.0
    tau: float = 1.0
    sigma: float | None = None


@dataclass(frozen=True, eq=False)
class ModelSpec:
    """Data and prior choices for one hierarchical model.

    Parameters
    ----------
    family : {"poisson", "binomial", "gaussian"}
        Log, logit and identity links respectively.
    y : array (n,)
        Responses.
    design : array (n, p), optional
        Covariates with a leading column of ones.  Defaults to intercept only.
    offset : array (n,), optional
        Known term on the linear-predictor scale (``log E_k`` for disease mapping).
    trials : array (n,), optional
        Binomial trial counts; required for the binomial family.
    rho : float or "estimate"
        Spatial dependence; a float fixes it.
    random_effects : bool
        False drops ``phi`` entirely (covariate-only model).
    """

    family: str
    y: np.ndarray
    design: np.ndarray | None = None
    offset: np.ndarray | None = None
    trials: np.ndarray | None = None
    priors: Priors = field(default_factory=Priors)
    rho: float | str = "estimate"
    random_effects: bool = True
    names: tuple = ()

    def __post_init__(self):
        fam = str(self.family).lower()
        aliases = {"poisson-log": "poisson", "binomial-logit": "binomial", "gaussian-identity": "gaussian"}
        fam = aliases.get(fam, fam)
        if fam not in FAMILIES:
            raise ModelError(f"unknown family {self.family!r}; expected one of {FAMILIES}")
        object.__setattr__(self, "family", fam)
        y = np.asarray(self.y, dtype=float).ravel()
        n = len(y)
        object.__setattr__(self, "y", y)
        X = np.ones((n, 1)) if self.design is None else np.asarray(self.design, dtype=float)
        if X.ndim == 1:
            X = X[:, None]
        object.__setattr__(self, "design", X)
        off = np.zeros(n) if self.offset is None else np.asarray(self.offset, dtype=float).ravel()
        object.__setattr__(self, "offset", off)
        if self.trials is not None:
            object.__setattr__(self, "trials", np.asarray(self.trials, dtype=float).ravel())
        names = tuple(self.names) or ("intercept",) + tuple(f"x{j}" for j in range(1, X.shape[1]))
        object.__setattr__(self, "names", names)
        rho = self.rho
        if isinstance(rho, str):
            if rho != "estimate":
                raise ModelError(f"rho must be 'estimate' or a number, got {rho!r}")
        else:
            rho = float(rho)
            if not 0.0 <= rho < 1.0:
                raise ModelError(f"fixed rho must lie in [0, 1), got {rho}")
            object.__setattr__(self, "rho", rho)
        self.validate()

    @property
    def n(self):
        return len(self.y)

    @property
    def p(self):
        return self.design.shape[1]

    @property
    def rho_fixed(self):
        return None if self.rho == "estimate" else float(self.rho)

    def validate(self):
        n, X = self.n, self.design
        if X.shape[0] != n:
            raise ModelError(f"design has {X.shape[0]} rows but y has {n} entries")
        if len(self.offset) != n:
            raise ModelError(f"offset has {len(self.offset)} entries but y has {n}")
        if len(self.names) != X.shape[1]:
            raise ModelError("one name per design column required")
        if not np.all(np.isfinite(self.y)) or not np.all(np.isfinite(X)) or not np.all(np.isfinite(self.offset)):
            raise ModelError("non-finite values in y, design or offset")
        if not np.allclose(X[:, 0], 1.0):
            raise ModelError("first design column must be the intercept (all ones)")
        if np.linalg.matrix_rank(X) < X.shape[1]:
            raise ModelError("design matrix is not of full column rank")
        if self.family == "poisson":
            bad = np.flatnonzero((self.y < 0) | (self.y != np.round(self.y)))
            if len(bad):
                raise ModelError(f"area {bad[0]}: Poisson response must be a non-negative integer")
        if self.family == "binomial":
            if self.trials is None:
                raise ModelError("binomial family needs per-area trial counts")
            if len(self.trials) != n:
                raise ModelError(f"trials has {len(self.trials)} entries but y has {n}")
            bad = np.flatnonzero((self.y < 0) | (self.y > self.trials) | (self.y != np.round(self.y)))
            if len(bad):
                k = bad[0]
                raise ModelError(
                    f"area {k}: binomial response {self.y[k]:g} outside [0, trials={self.trials[k]:g}]"
                )

    def with_rho(self, rho):
        return replace(self, rho=rho)

    def covariate_only(self):
        return replace(self, random_effects=False)

    def intercept_only(self):
        return replace(self, design=None, names=())

    def hyper_names(self):
        names = []
        if self.random_effects:
            if self.rho_fixed is None:
                names.append("rho")
            names.append("tau")
        if self.family == "gaussian":
            names.append("sigma")
        return tuple(names)


# ---------------------------------------------------------------------------
# family calculus on the linear predictor
# ---------------------------------------------------------------------------


def loglik_terms(spec, eta, sigma=None):
    """Per-area log-likelihood including normalising constants."""
    y = spec.y
    if spec.family == "poisson":
        return y * eta - np.exp(eta) - gammaln(y + 1.0)
    if spec.family == "binomial":
        N = spec.trials
        logc = gammaln(N + 1.0) - gammaln(y + 1.0) - gammaln(N - y + 1.0)
        return y * eta - N * np.logaddexp(0.0, eta) + logc
    r = y - eta
    return 0.5 * np.log(sigma) - 0.5 * LOG_2PI - 0.5 * sigma * r * r


def eta_derivatives(spec, eta, sigma=None):
    """First derivative and negated second derivative of the log-likelihood."""
    y = spec.y
    if spec.family == "poisson":
        mu = np.exp(eta)
        return y - mu, mu
    if spec.family == "binomial":
        pr = expit(eta)
        N = spec.trials
        return y - N * pr, N * pr * (1.0 - pr)
    return sigma * (y - eta), np.full_like(eta, sigma)


def inverse_link(family, eta):
    if family == "poisson":
        return np.exp(eta)
    if family == "binomial":
        return expit(eta)
    return np.asarray(eta, dtype=float)


def response_variance(spec, mu, sigma=None):
    """Var(Y_k) at mean ``mu``; for the binomial family ``mu`` is a probability."""
    if spec.family == "poisson":
        return mu
    if spec.family == "binomial":
        return spec.trials * mu * (1.0 - mu)
    return np.full_like(mu, 1.0 / sigma)


def fitted_mean(spec, prob_or_mu):
    """Expected response: binomial probabilities are scaled by the trial counts."""
    if spec.family == "binomial":
        return spec.trials * prob_or_mu
    return prob_or_mu
