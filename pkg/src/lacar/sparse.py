"""Sparse Cholesky factorization for symmetric positive definite matrices.

Up-looking factorization in the style of CSparse: the elimination tree and
row subtrees give the pattern of ``L`` once per sparsity pattern
(:class:`SymbolicFactor`); numeric factorizations then reuse it for every
new set of values.  The factor supports solves, log-determinants,
sampling from ``N(0, A^{-1})`` and Takahashi selected inversion (entries of
``A^{-1}`` on the pattern of ``L``).

Storage conventions: the permuted matrix ``C = A[perm][:, perm]`` is held as
the upper triangle in CSC (rows ``<=`` column).  ``L`` is CSC with the
diagonal first in every column and row indices ascending.
"""

from __future__ import annotations

import numpy as np
import scipy.sparse as sp
from scipy.sparse.csgraph import reverse_cuthill_mckee

from ._jit import njit
from .errors import NotPositiveDefiniteError

__all__ = [
    "SymbolicFactor",
    "SparseFactor",
    "analyze",
    "fill_reducing_order",
    "factorize",
]


# ---------------------------------------------------------------------------
# kernels
# ---------------------------------------------------------------------------


@njit
def _etree(n, Ap, Ai):
    parent = np.full(n, -1, dtype=np.int64)
    ancestor = np.full(n, -1, dtype=np.int64)
    for k in range(n):
        for p in range(Ap[k], Ap[k + 1]):
            i = Ai[p]
            while i != -1 and i < k:
                inext = ancestor[i]
                ancestor[i] = k
                if inext == -1:
                    parent[i] = k
                i = inext
    return parent


@njit
def _ereach(Ap, Ai, k, parent, s, w):
    # nonzero pattern of row k of L, topologically ordered in s[top:n];
    # w[i] == k marks node i as visited for this row
    n = parent.shape[0]
    top = n
    w[k] = k
    for p in range(Ap[k], Ap[k + 1]):
        i = Ai[p]
        if i > k:
            continue
        length = 0
        while w[i] != k:
            s[length] = i
            length += 1
            w[i] = k
            i = parent[i]
        while length > 0:
            top -= 1
            length -= 1
            s[top] = s[length]
    return top


@njit
def _column_counts(n, Ap, Ai, parent):
    counts = np.zeros(n, dtype=np.int64)
    s = np.empty(n, dtype=np.int64)
    w = np.full(n, -1, dtype=np.int64)
    for k in range(n):
        top = _ereach(Ap, Ai, k, parent, s, w)
        for t in range(top, n):
            counts[s[t]] += 1
        counts[k] += 1
    return counts


@njit
def _numeric(n, Ap, Ai, Ax, parent, Lp, Li, Lx):
    """Fill ``Li``/``Lx``; return -1 on success or the failing pivot."""
    c = Lp[:n].copy()
    x = np.zeros(n)
    s = np.empty(n, dtype=np.int64)
    w = np.full(n, -1, dtype=np.int64)
    for k in range(n):
        top = _ereach(Ap, Ai, k, parent, s, w)
        x[k] = 0.0
        for p in range(Ap[k], Ap[k + 1]):
            i = Ai[p]
            if i <= k:
                x[i] = Ax[p]
        d = x[k]
        x[k] = 0.0
        for t in range(top, n):
            i = s[t]
            lki = x[i] / Lx[Lp[i]]
            x[i] = 0.0
            for p in range(Lp[i] + 1, c[i]):
                x[Li[p]] -= Lx[p] * lki
            d -= lki * lki
            p = c[i]
            c[i] += 1
            Li[p] = k
            Lx[p] = lki
        if not d > 0.0:
            return k
        p = c[k]
        c[k] += 1
        Li[p] = k
        Lx[p] = np.sqrt(d)
    return -1


@njit
def _lsolve(n, Lp, Li, Lx, x):
    for j in range(n):
        x[j] /= Lx[Lp[j]]
        xj = x[j]
        for p in range(Lp[j] + 1, Lp[j + 1]):
            x[Li[p]] -= Lx[p] * xj


@njit
def _ltsolve(n, Lp, Li, Lx, x):
    for j in range(n - 1, -1, -1):
        acc = x[j]
        for p in range(Lp[j] + 1, Lp[j + 1]):
            acc -= Lx[p] * x[Li[p]]
        x[j] = acc / Lx[Lp[j]]


@njit
def _find(Lp, Li, row, col):
    lo = Lp[col]
    hi = Lp[col + 1] - 1
    while lo <= hi:
        mid = (lo + hi) // 2
        r = Li[mid]
        if r == row:
            return mid
        if r < row:
            lo = mid + 1
        else:
            hi = mid - 1
    return -1


@njit
def _selected_inverse(n, Lp, Li, Lx):
    """Entries of ``(L L^T)^{-1}`` on the pattern of ``L`` (same layout)."""
    S = np.zeros(Lx.shape[0])
    for i in range(n - 1, -1, -1):
        start = Lp[i]
        end = Lp[i + 1]
        lii = Lx[start]
        # off-diagonal entries of column i, then the diagonal
        for q in range(end - 1, start, -1):
            j = Li[q]
            acc = 0.0
            for p in range(start + 1, end):
                k = Li[p]
                if k >= j:
                    pos = _find(Lp, Li, k, j)
                else:
                    pos = _find(Lp, Li, j, k)
                acc += Lx[p] * S[pos]
            S[q] = -acc / lii
        acc = 0.0
        for p in range(start + 1, end):
            acc += Lx[p] * S[p]
        S[start] = 1.0 / (lii * lii) - acc / lii
    return S


@njit
def _gather(Lp, Li, S, rows, cols):
    out = np.empty(rows.shape[0])
    for t in range(rows.shape[0]):
        r = rows[t]
        c = cols[t]
        if r < c:
            r, c = c, r
        pos = _find(Lp, Li, r, c)
        if pos < 0:
            out[t] = np.nan
        else:
            out[t] = S[pos]
    return out


# ---------------------------------------------------------------------------
# symbolic / numeric wrappers
# ---------------------------------------------------------------------------


def fill_reducing_order(n, rows, cols, tail=0):
    """Reverse Cuthill-McKee on the first ``n - tail`` nodes; the last
    ``tail`` nodes (dense rows such as regression coefficients) stay last."""
    head = n - tail
    rows = np.asarray(rows, dtype=np.int64)
    cols = np.asarray(cols, dtype=np.int64)
    keep = (rows < head) & (cols < head)
    if head == 0:
        return np.arange(n, dtype=np.int64)
    g = sp.csr_matrix(
        (np.ones(2 * keep.sum()), (np.r_[rows[keep], cols[keep]], np.r_[cols[keep], rows[keep]])),
        shape=(head, head),
    )
    order = reverse_cuthill_mckee(g, symmetric_mode=True).astype(np.int64)
    return np.concatenate([order, np.arange(head, n, dtype=np.int64)])


class SymbolicFactor:
    """Ordering, elimination tree and pattern of L for one sparsity pattern.

    ``rows``/``cols`` list every structurally nonzero off-diagonal pair
    once (either orientation); the diagonal is always structural.  After
    analysis, :meth:`assemble` places diagonal and off-diagonal values into
    the permuted upper-triangular CSC value array in O(nnz).
    """

    def __init__(self, n, rows, cols, perm):
        n = int(n)
        rows = np.asarray(rows, dtype=np.int64)
        cols = np.asarray(cols, dtype=np.int64)
        perm = np.asarray(perm, dtype=np.int64)
        iperm = np.empty(n, dtype=np.int64)
        iperm[perm] = np.arange(n)
        a = iperm[rows]
        b = iperm[cols]
        r = np.concatenate([iperm, np.minimum(a, b)])
        c = np.concatenate([iperm, np.maximum(a, b)])
        order = np.lexsort((r, c))
        inv = np.empty_like(order)
        inv[order] = np.arange(len(order))
        self.n = n
        self.perm = perm
        self.iperm = iperm
        self.Ai = r[order]
        self.Ap = np.zeros(n + 1, dtype=np.int64)
        np.cumsum(np.bincount(c, minlength=n), out=self.Ap[1:])
        self.diag_pos = inv[:n]
        self.offdiag_pos = inv[n:]
        self.parent = _etree(n, self.Ap, self.Ai)
        counts = _column_counts(n, self.Ap, self.Ai, self.parent)
        self.Lp = np.zeros(n + 1, dtype=np.int64)
        np.cumsum(counts, out=self.Lp[1:])
        self.Li = np.empty(self.Lp[-1], dtype=np.int64)

    @property
    def nnz_l(self):
        return int(self.Lp[-1])

    def assemble(self, diag, offdiag):
        Ax = np.empty(len(self.Ai))
        Ax[self.diag_pos] = diag
        Ax[self.offdiag_pos] = offdiag
        return Ax


def analyze(n, rows, cols, tail=0, perm=None):
    if perm is None:
        perm = fill_reducing_order(n, rows, cols, tail)
    return SymbolicFactor(n, rows, cols, perm)


def factorize(symbolic, diag, offdiag):
    """Numeric Cholesky; raises :class:`NotPositiveDefiniteError` on failure."""
    Ax = symbolic.assemble(diag, offdiag)
    Li = np.empty(symbolic.nnz_l, dtype=np.int64)
    Lx = np.empty(symbolic.nnz_l)
    status = _numeric(symbolic.n, symbolic.Ap, symbolic.Ai, Ax, symbolic.parent, symbolic.Lp, Li, Lx)
    if status >= 0:
        raise NotPositiveDefiniteError(symbolic.perm[status])
    return SparseFactor(symbolic, Li, Lx)


class SparseFactor:
    """``P A P^T = L L^T`` for one numeric matrix."""

    def __init__(self, symbolic, Li, Lx):
        self.symbolic = symbolic
        self.Li = Li
        self.Lx = Lx
        self._sinv = None

    @property
    def n(self):
        return self.symbolic.n

    def logdet(self):
        return 2.0 * float(np.sum(np.log(self.Lx[self.symbolic.Lp[:-1]])))

    def solve(self, b):
        s = self.symbolic
        x = np.ascontiguousarray(b, dtype=float)[s.perm].copy()
        _lsolve(s.n, s.Lp, self.Li, self.Lx, x)
        _ltsolve(s.n, s.Lp, self.Li, self.Lx, x)
        out = np.empty_like(x)
        out[s.perm] = x
        return out

    def solve_lt(self, z):
        """``x`` with ``x ~ N(0, A^{-1})`` when ``z`` is standard normal."""
        s = self.symbolic
        v = np.ascontiguousarray(z, dtype=float).copy()
        _ltsolve(s.n, s.Lp, self.Li, self.Lx, v)
        out = np.empty_like(v)
        out[s.perm] = v
        return out

    def sample(self, rng, size=None):
        if size is None:
            return self.solve_lt(rng.standard_normal(self.n))
        return np.stack([self.solve_lt(rng.standard_normal(self.n)) for _ in range(size)])

    def _selected(self):
        if self._sinv is None:
            s = self.symbolic
            self._sinv = _selected_inverse(s.n, s.Lp, self.Li, self.Lx)
        return self._sinv

    def inverse_diagonal(self):
        s = self.symbolic
        d = self._selected()[s.Lp[:-1]]
        out = np.empty(s.n)
        out[s.perm] = d
        return out

    def inverse_entries(self, rows, cols):
        """Entries ``A^{-1}[rows[t], cols[t]]``; NaN where off the pattern of L."""
        s = self.symbolic
        r = s.iperm[np.asarray(rows, dtype=np.int64)]
        c = s.iperm[np.asarray(cols, dtype=np.int64)]
        return _gather(s.Lp, self.Li, self._selected(), r, c)

    def to_sparse_l(self):
        s = self.symbolic
        return sp.csc_matrix((self.Lx, self.Li, s.Lp), shape=(s.n, s.n))
