"""Leroux CAR precision, its sparse factor, densities and conditionals.

The joint prior of the random effects is ``phi ~ N(0, (tau * Q(rho, W))^{-1})``
with ``Q(rho, W) = rho * (diag(w_k+) - W) + (1 - rho) * I``.  Throughout the
package the *precision* is ``tau * Q``; ``tau`` is never folded into ``Q``.
"""

from __future__ import annotations

from dataclasses import dataclass
from functools import lru_cache

import numpy as np
import scipy.sparse as sp

from . import sparse
from .errors import ModelError

__all__ = [
    "LerouxPrecision",
    "build_precision",
    "partial_correlation",
    "log_density",
    "sample",
    "full_conditional",
    "laplacian_eigenvalues",
    "leroux_logdet",
]

LOG_2PI = np.log(2.0 * np.pi)


def _check_rho(rho):
    if not (0.0 <= rho < 1.0):
        raise ValueError(f"rho must lie in [0, 1), got {rho!r}")


@lru_cache(maxsize=256)
def _symbolic(key, n, edges_bytes, m):
    edges = np.frombuffer(edges_bytes, dtype=np.int64).reshape(m, 2)
    return sparse.analyze(n, edges[:, 0], edges[:, 1])


@dataclass(frozen=True, eq=False)
class LerouxPrecision:
    """``tau * Q(rho, W)`` stored as diagonal values plus one value per active edge."""

    rho: float
    tau: float
    w: object  # NeighbourMatrix

    @property
    def n(self):
        return self.w.n

    @property
    def diag(self):
        return self.tau * (self.rho * self.w.row_sums + 1.0 - self.rho)

    @property
    def offdiag(self):
        return np.full(len(self.w.active_edges), -self.tau * self.rho)

    def tocsr(self):
        e = self.w.active_edges
        n = self.n
        off = self.offdiag
        rows = np.concatenate([np.arange(n), e[:, 0], e[:, 1]])
        cols = np.concatenate([np.arange(n), e[:, 1], e[:, 0]])
        vals = np.concatenate([self.diag, off, off])
        return sp.csr_matrix((vals, (rows, cols)), shape=(n, n))

    def toarray(self):
        return self.tocsr().toarray()

    def symbolic(self):
        e = np.ascontiguousarray(self.w.active_edges, dtype=np.int64)
        return _symbolic(self.w.key, self.n, e.tobytes(), len(e))

    def factor(self):
        # frozen dataclass: cache by hand in the instance dict
        f = self.__dict__.get("_factor")
        if f is None:
            f = sparse.factorize(self.symbolic(), self.diag, self.offdiag)
            self.__dict__["_factor"] = f
        return f

    def quad(self, phi):
        """``phi^T (tau Q) phi`` in O(n + edges)."""
        phi = np.asarray(phi, dtype=float)
        e = self.w.active_edges
        diffsq = np.sum((phi[e[:, 0]] - phi[e[:, 1]]) ** 2)
        return self.tau * (self.rho * diffsq + (1.0 - self.rho) * np.dot(phi, phi))


def build_precision(rho, tau, w):
    rho = float(rho)
    tau = float(tau)
    _check_rho(rho)
    if not tau > 0.0:
        raise ValueError(f"tau must be positive, got {tau!r}")
    return LerouxPrecision(rho, tau, w)


def partial_correlation(rho, w, k, j):
    """Correlation of ``phi_k`` and ``phi_j`` given all other random effects."""
    if k == j:
        raise ValueError("partial correlation needs two distinct areas")
    wkj = w.weight(k, j)
    if wkj == 0:
        return 0.0
    ws = w.row_sums
    return rho * wkj / np.sqrt((rho * ws[k] + 1.0 - rho) * (rho * ws[j] + 1.0 - rho))


def log_density(phi, q):
    phi = np.asarray(phi, dtype=float)
    if phi.shape != (q.n,):
        raise ValueError(f"phi must have length {q.n}")
    logdet = q.factor().logdet()
    return 0.5 * logdet - 0.5 * q.n * LOG_2PI - 0.5 * q.quad(phi)


def sample(q, rng, size=None):
    """Draw(s) from ``N(0, (tau Q)^{-1})`` by back-substitution through L^T."""
    return q.factor().sample(rng, size)


def full_conditional(phi, rho, tau, w, k):
    """Mean and variance of ``phi_k`` given the other random effects."""
    ws = w.row_sums[k]
    denom = rho * ws + 1.0 - rho
    if not denom > 0.0:
        raise ModelError(
            f"area {k} has no active neighbours and rho={rho:g}: full conditional undefined"
        )
    indptr, idx = w.neighbour_lists
    nb = np.asarray(phi, dtype=float)[idx[indptr[k]:indptr[k + 1]]].sum()
    return rho * nb / denom, 1.0 / (tau * denom)


@lru_cache(maxsize=64)
def _laplacian_eigs(key, n, edges_bytes, m):
    edges = np.frombuffer(edges_bytes, dtype=np.int64).reshape(m, 2)
    lap = np.zeros((n, n))
    np.add.at(lap, (edges[:, 0], edges[:, 0]), 1.0)
    np.add.at(lap, (edges[:, 1], edges[:, 1]), 1.0)
    lap[edges[:, 0], edges[:, 1]] = -1.0
    lap[edges[:, 1], edges[:, 0]] = -1.0
    ev = np.linalg.eigvalsh(lap)
    ev = np.clip(ev, 0.0, None)
    ev.setflags(write=False)
    return ev


def laplacian_eigenvalues(w):
    """Eigenvalues of ``diag(w_k+) - W``; ``log|Q(rho)|`` is then a sum of logs."""
    e = np.ascontiguousarray(w.active_edges, dtype=np.int64)
    return _laplacian_eigs(w.key, w.n, e.tobytes(), len(e))


def leroux_logdet(rho, tau, eigenvalues):
    return float(np.sum(np.log(tau * (rho * eigenvalues + 1.0 - rho))))
