"""Spatial autocorrelation, overdispersion and simulation-study scoring."""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from ._jit import njit
from .errors import ModelError, UndefinedStatistic

__all__ = [
    "morans_i",
    "moran_permutation_test",
    "overdispersion",
    "Truth",
    "ReplicateScore",
    "score_replicate",
    "MetricsReport",
    "aggregate",
    "metrics_table",
]


def _moran_parts(values, w):
    v = np.asarray(values, dtype=float)
    if v.shape != (w.n,):
        raise ValueError(f"need {w.n} values, got shape {v.shape}")
    if w.n < 2:
        raise UndefinedStatistic("Moran's I needs at least two areas")
    e = w.active_edges
    if len(e) == 0:
        raise UndefinedStatistic("Moran's I is undefined without active edges")
    z = v - v.mean()
    ss = float(z @ z)
    if not ss > 1e-300 * max(1.0, float(np.abs(v).max()) ** 2):
        raise UndefinedStatistic("Moran's I is undefined for constant values")
    return z, ss, e


def morans_i(values, w):
    """Moran's I of ``values`` with binary weights ``w``.

    Each active unordered edge contributes twice to both the cross-product
    sum and ``S0``, so the factor of two cancels.
    """
    z, ss, e = _moran_parts(values, w)
    cross = float(np.dot(z[e[:, 0]], z[e[:, 1]]))
    return w.n * cross / (len(e) * ss)


@njit
def _moran_batch(z, perms, e0, e1, scale):
    out = np.empty(perms.shape[0])
    for r in range(perms.shape[0]):
        s = 0.0
        for q in range(e0.shape[0]):
            s += z[perms[r, e0[q]]] * z[perms[r, e1[q]]]
        out[r] = s * scale
    return out


def moran_permutation_test(values, w, n_perm=999, rng=None):
    """Two-sided permutation p-value for Moran's I.

    Returns ``(p, I_obs)``.  Values are permuted across areas with ``w``
    held fixed; all permutations come from one seeded generator.
    """
    if n_perm < 0:
        raise ValueError("n_perm must be non-negative")
    z, ss, e = _moran_parts(values, w)
    scale = w.n / (len(e) * ss)
    obs = float(np.dot(z[e[:, 0]], z[e[:, 1]])) * scale
    if n_perm == 0:
        return 1.0, obs
    rng = np.random.default_rng(rng)
    perms = rng.permuted(np.tile(np.arange(w.n), (n_perm, 1)), axis=1)
    stats = _moran_batch(z, perms, np.ascontiguousarray(e[:, 0]), np.ascontiguousarray(e[:, 1]), scale)
    # tolerance keeps exact ties (e.g. the identity permutation) counted
    hits = int(np.sum(np.abs(stats) >= abs(obs) - 1e-12 * max(1.0, abs(obs))))
    return (1 + hits) / (n_perm + 1), obs


def overdispersion(spec, fit):
    """Sum of squared Pearson residuals over ``n - p``."""
    n, p = spec.n, spec.p
    if n <= p:
        raise ModelError(f"overdispersion needs n > p (n={n}, p={p})")
    r = np.asarray(fit.residuals, dtype=float)
    return float(r @ r) / (n - p)


# ---------------------------------------------------------------------------
# simulation-study scoring
# ---------------------------------------------------------------------------


@dataclass(frozen=True, eq=False)
class Truth:
    """Data-generating values for one replicate.

    ``beta`` holds the covariate coefficients only (the intercept is not
    scored); ``boundary`` is a boolean mask over graph edges.
    """

    mu: np.ndarray
    beta: np.ndarray
    boundary: np.ndarray


@dataclass(frozen=True)
class ReplicateScore:
    """Per-replicate metrics; ``None`` marks a metric that is unavailable."""

    bias_mu: float | None
    sq_mu: float | None
    bias_beta: float | None
    sq_beta: float | None
    covered: float | None
    ba: float | None
    nba: float | None
    n_boundaries: int = 0

    @property
    def rmse_mu(self):
        return None if self.sq_mu is None else math.sqrt(self.sq_mu)

    @property
    def rmse_beta(self):
        return None if self.sq_beta is None else math.sqrt(self.sq_beta)


def _relative(est, true):
    est = np.asarray(est, dtype=float)
    true = np.asarray(true, dtype=float)
    if true.size == 0 or np.any(true == 0):
        return None
    return (est - true) / true


def score_replicate(truth, fit, w_hat=None):
    """Relative errors, coverage and boundary agreement for one fit.

    ``bias_mu`` is the mean relative error of the fitted values and
    ``sq_mu`` the mean squared relative error, so ``rmse_mu`` is this
    replicate's root mean squared relative error.  All are fractions,
    turned into percentages on aggregation.
    """
    mu_hat = np.asarray(fit.mu.median, dtype=float)
    if mu_hat.shape != np.shape(truth.mu):
        raise ValueError("fitted values and truth differ in length")
    rel = _relative(mu_hat, truth.mu)
    bias_mu = sq_mu = None
    if rel is not None:
        bias_mu, sq_mu = float(rel.mean()), float(np.mean(rel**2))

    beta_true = np.atleast_1d(np.asarray(truth.beta, dtype=float))
    bias_beta = sq_beta = covered = None
    if beta_true.size:
        b = fit.beta[1:1 + beta_true.size]
        if len(b) != beta_true.size:
            raise ValueError("fit has fewer covariates than the truth")
        rb = _relative(b.median, beta_true)
        if rb is not None:
            bias_beta, sq_beta = float(rb.mean()), float(np.mean(rb**2))
        covered = float(np.mean((b.lo <= beta_true) & (beta_true <= b.hi)))

    ba = nba = None
    tb = np.asarray(truth.boundary, dtype=bool)
    if w_hat is not None:
        if tb.shape != w_hat.active.shape:
            raise ValueError("boundary mask and estimated W cover different edge sets")
        est_b = ~w_hat.active
        if tb.any():
            ba = 100.0 * np.sum(tb & est_b) / tb.sum()
        if (~tb).any():
            nba = 100.0 * np.sum(~tb & ~est_b) / (~tb).sum()
        ba = None if ba is None else float(ba)
        nba = None if nba is None else float(nba)
    return ReplicateScore(bias_mu, sq_mu, bias_beta, sq_beta, covered, ba, nba, int(tb.sum()))


@dataclass(frozen=True)
class MetricsReport:
    """Aggregated study metrics for one model; all values are percentages.

    Every metric is the mean over replicates of the per-replicate value, so
    %RMSE is the average of the replicate root mean squared relative
    errors.  ``extra`` holds the pooled alternative
    ``100 * sqrt(mean over replicates of the mean squared relative error)``
    under ``pooled_rmse_mu`` and ``pooled_rmse_beta``.
    """

    model: str
    n_replicates: int
    n_failed: int = 0
    pct_bias_mu: float | None = None
    pct_rmse_mu: float | None = None
    pct_bias_beta: float | None = None
    pct_rmse_beta: float | None = None
    coverage_beta: float | None = None
    ba: float | None = None
    nba: float | None = None
    extra: dict = field(default_factory=dict)

    METRICS = ("pct_bias_mu", "pct_rmse_mu", "pct_bias_beta", "pct_rmse_beta", "coverage_beta", "ba", "nba")

    def as_dict(self):
        return {k: getattr(self, k) for k in self.METRICS}


def _mean_of(records, name):
    vals = [getattr(r, name) for r in records if getattr(r, name) is not None]
    return (math.fsum(vals) / len(vals)) if vals else None


def aggregate(model, records, n_failed=0):
    """Combine replicate scores.  The result does not depend on record order."""
    records = list(records)
    if not records:
        raise ValueError("need at least one replicate")

    def pct(x):
        return None if x is None else 100.0 * x

    sq_mu = _mean_of(records, "sq_mu")
    sq_beta = _mean_of(records, "sq_beta")
    cov = _mean_of(records, "covered")
    pooled = {
        "pooled_rmse_mu": None if sq_mu is None else 100.0 * math.sqrt(sq_mu),
        "pooled_rmse_beta": None if sq_beta is None else 100.0 * math.sqrt(sq_beta),
    }
    return MetricsReport(
        model=model,
        n_replicates=len(records),
        n_failed=n_failed,
        pct_bias_mu=pct(_mean_of(records, "bias_mu")),
        pct_rmse_mu=pct(_mean_of(records, "rmse_mu")),
        pct_bias_beta=pct(_mean_of(records, "bias_beta")),
        pct_rmse_beta=pct(_mean_of(records, "rmse_beta")),
        coverage_beta=pct(cov),
        ba=_mean_of(records, "ba"),
        nba=_mean_of(records, "nba"),
        extra=pooled,
    )


_LABELS = {
    "pct_bias_mu": "% Bias - mu",
    "pct_rmse_mu": "% RMSE - mu",
    "pct_bias_beta": "% Bias - beta",
    "pct_rmse_beta": "% RMSE - beta",
    "coverage_beta": "Coverage probability - beta",
    "ba": "Boundary agreement (BA)",
    "nba": "Non-boundary agreement (NBA)",
}


def metrics_table(reports, sep="\t"):
    """Delimited text: one row per metric, one column per model."""
    lines = [sep.join(["metric"] + [r.model for r in reports])]
    for key in MetricsReport.METRICS:
        row = [_LABELS[key]]
        for r in reports:
            v = getattr(r, key)
            row.append("unavailable" if v is None else f"{v:.3f}")
        lines.append(sep.join(row))
    lines.append(sep.join(["replicates"] + [str(r.n_replicates) for r in reports]))
    lines.append(sep.join(["failed"] + [str(r.n_failed) for r in reports]))
    return "\n".join(lines) + "\n"
