"""Areal geography and the estimable binary neighbourhood matrix.

Edges are the unit of storage.  An :class:`AdjacencyGraph` holds the fixed
set of border-sharing pairs; a :class:`NeighbourMatrix` is one binary flag
per graph edge, so symmetry and "only adjacent pairs may be neighbours"
hold by construction.
"""

from __future__ import annotations

import hashlib
from dataclasses import dataclass, field
from functools import cached_property
from pathlib import Path

import numpy as np
import scipy.sparse as sp

from .errors import ParseError

__all__ = [
    "AdjacencyGraph",
    "NeighbourMatrix",
    "BoundarySet",
    "full_matrix",
    "boundaries",
    "state_key",
    "edge_count",
    "lattice_graph",
    "read_edge_list",
    "write_edge_list",
    "read_centroids",
]


def _canonical_edges(pairs, n):
    pairs = np.asarray(pairs, dtype=np.int64).reshape(-1, 2)
    if pairs.size and (pairs.min() < 0 or pairs.max() >= n):
        raise ValueError(f"edge index out of range [0, {n})")
    if np.any(pairs[:, 0] == pairs[:, 1]):
        k = int(pairs[pairs[:, 0] == pairs[:, 1]][0, 0])
        raise ValueError(f"self-loop on area {k}")
    lo = np.minimum(pairs[:, 0], pairs[:, 1])
    hi = np.maximum(pairs[:, 0], pairs[:, 1])
    # (k, j) and (j, k) name the same edge; duplicates collapse
    keys = np.unique(lo * n + hi)
    return np.column_stack([keys // n, keys % n]).astype(np.int64)


@dataclass(frozen=True, eq=False)
class AdjacencyGraph:
    """``n`` areas and the unordered pairs that share a border.

    ``edges`` is stored as an ``(m, 2)`` array with ``k < j`` in each row,
    sorted lexicographically.  ``coords`` are optional planar centroids (km).
    """

    n: int
    edges: np.ndarray
    coords: np.ndarray | None = None

    def __post_init__(self):
        n = int(self.n)
        if n < 0:
            raise ValueError("n must be non-negative")
        object.__setattr__(self, "n", n)
        edges = _canonical_edges(self.edges, n)
        edges.setflags(write=False)
        object.__setattr__(self, "edges", edges)
        if self.coords is not None:
            coords = np.asarray(self.coords, dtype=float)
            if coords.shape != (n, 2):
                raise ValueError(f"coords must have shape ({n}, 2), got {coords.shape}")
            coords.setflags(write=False)
            object.__setattr__(self, "coords", coords)

    @property
    def m(self):
        return len(self.edges)

    @cached_property
    def digest(self):
        h = hashlib.sha256()
        h.update(np.int64(self.n).tobytes())
        h.update(np.ascontiguousarray(self.edges).tobytes())
        return h.hexdigest()

    @cached_property
    def _edge_index(self):
        return {(int(k), int(j)): e for e, (k, j) in enumerate(self.edges)}

    def edge_id(self, k, j):
        """Index of the edge ``{k, j}`` or ``KeyError`` when not adjacent."""
        k, j = int(k), int(j)
        return self._edge_index[(min(k, j), max(k, j))]

    def has_edge(self, k, j):
        k, j = int(k), int(j)
        return (min(k, j), max(k, j)) in self._edge_index

    def degree(self):
        return np.bincount(self.edges.ravel(), minlength=self.n)

    def with_coords(self, coords):
        return AdjacencyGraph(self.n, self.edges, coords)


@dataclass(frozen=True, eq=False)
class NeighbourMatrix:
    """Binary symmetric W restricted to the edges of ``graph``."""

    graph: AdjacencyGraph
    active: np.ndarray

    def __post_init__(self):
        active = np.asarray(self.active, dtype=bool).copy()
        if active.shape != (self.graph.m,):
            raise ValueError(f"need one flag per graph edge ({self.graph.m}), got {active.shape}")
        active.setflags(write=False)
        object.__setattr__(self, "active", active)

    @property
    def n(self):
        return self.graph.n

    @cached_property
    def active_edges(self):
        return self.graph.edges[self.active]

    @cached_property
    def row_sums(self):
        """``w_k+``: number of active edges incident to each area."""
        return np.bincount(self.active_edges.ravel(), minlength=self.n).astype(np.int64)

    @cached_property
    def key(self):
        return state_key(self)

    def weight(self, k, j):
        if k == j or not self.graph.has_edge(k, j):
            return 0
        return int(self.active[self.graph.edge_id(k, j)])

    def toggled(self, k, j):
        """A copy with edge ``{k, j}`` flipped."""
        active = self.active.copy()
        e = self.graph.edge_id(k, j)
        active[e] = not active[e]
        return NeighbourMatrix(self.graph, active)

    def with_active(self, active):
        return NeighbourMatrix(self.graph, active)

    def tocsr(self):
        e = self.active_edges
        n = self.n
        rows = np.concatenate([e[:, 0], e[:, 1]])
        cols = np.concatenate([e[:, 1], e[:, 0]])
        return sp.csr_matrix((np.ones(len(rows)), (rows, cols)), shape=(n, n))

    def toarray(self):
        return self.tocsr().toarray()

    @cached_property
    def neighbour_lists(self):
        """CSR-style ``(indptr, indices)`` over active neighbours."""
        m = self.tocsr()
        m.sort_indices()
        return m.indptr.astype(np.int64), m.indices.astype(np.int64)

    def isolated(self):
        """Indices of areas with no active neighbour."""
        return np.flatnonzero(self.row_sums == 0)


@dataclass(frozen=True, eq=False)
class BoundarySet:
    """Graph edges whose weight is zero."""

    graph: AdjacencyGraph
    edge_ids: np.ndarray = field(default_factory=lambda: np.zeros(0, dtype=np.int64))

    @property
    def edges(self):
        return self.graph.edges[self.edge_ids]

    def __len__(self):
        return len(self.edge_ids)

    def as_set(self):
        return {(int(k), int(j)) for k, j in self.edges}


def full_matrix(graph):
    """W with every border-sharing pair active."""
    return NeighbourMatrix(graph, np.ones(graph.m, dtype=bool))


def boundaries(w):
    return BoundarySet(w.graph, np.flatnonzero(~w.active).astype(np.int64))


def state_key(w):
    """Hex digest identifying the active set; stable across processes."""
    h = hashlib.sha256()
    h.update(w.graph.digest.encode())
    h.update(np.packbits(w.active).tobytes())
    h.update(np.int64(w.graph.m).tobytes())
    return h.hexdigest()


def edge_count(graph):
    return graph.m


def lattice_graph(nrow, ncol, spacing=1.0):
    """Rook-adjacency lattice; area ``r * ncol + c`` sits at ``(c, r) * spacing``."""
    idx = np.arange(nrow * ncol).reshape(nrow, ncol)
    horiz = np.column_stack([idx[:, :-1].ravel(), idx[:, 1:].ravel()])
    vert = np.column_stack([idx[:-1, :].ravel(), idx[1:, :].ravel()])
    cc, rr = np.meshgrid(np.arange(ncol), np.arange(nrow))
    coords = np.column_stack([cc.ravel(), rr.ravel()]).astype(float) * spacing
    return AdjacencyGraph(nrow * ncol, np.vstack([horiz, vert]), coords)


def _data_lines(path):
    with open(path, encoding="utf-8") as fh:
        for lineno, raw in enumerate(fh, start=1):
            line = raw.split("#", 1)[0].strip()
            if line:
                yield lineno, line


def read_edge_list(path, n=None):
    """Parse a ``k j`` edge list (0-based, ``#`` comments).

    When ``n`` is not given it is inferred as ``max index + 1``; a header
    comment ``# n=<count>`` overrides the inference so that trailing areas
    without neighbours are representable.
    """
    path = Path(path)
    pairs = []
    declared_n = None
    with open(path, encoding="utf-8") as fh:
        for lineno, raw in enumerate(fh, start=1):
            stripped = raw.strip()
            if stripped.startswith("#"):
                body = stripped[1:].strip()
                if body.startswith("n="):
                    try:
                        declared_n = int(body[2:].split()[0])
                    except ValueError:
                        raise ParseError(f"bad area count {body!r}", path, lineno) from None
                continue
            line = raw.split("#", 1)[0].strip()
            if not line:
                continue
            parts = line.split()
            if len(parts) != 2:
                raise ParseError(f"expected 'k j', got {line!r}", path, lineno)
            try:
                k, j = int(parts[0]), int(parts[1])
            except ValueError:
                raise ParseError(f"non-integer area index in {line!r}", path, lineno) from None
            if k < 0 or j < 0:
                raise ParseError("negative area index", path, lineno)
            if k == j:
                raise ParseError(f"self-loop on area {k}", path, lineno)
            if n is not None and max(k, j) >= n:
                raise ParseError(f"area index {max(k, j)} out of range for n={n}", path, lineno)
            pairs.append((k, j))
    if n is None:
        n = declared_n if declared_n is not None else (max(max(p) for p in pairs) + 1 if pairs else 0)
    elif declared_n is not None and declared_n != n:
        raise ParseError(f"file declares n={declared_n} but {n} areas expected", path)
    if pairs and max(max(p) for p in pairs) >= n:
        raise ParseError(f"area index out of range for n={n}", path)
    return AdjacencyGraph(n, np.array(pairs, dtype=np.int64).reshape(-1, 2))


def write_edge_list(path, edges, n=None, header=()):
    with open(path, "w", encoding="utf-8") as fh:
        for line in header:
            fh.write(f"# {line}\n")
        if n is not None:
            fh.write(f"# n={n}\n")
        for k, j in np.asarray(edges).reshape(-1, 2):
            fh.write(f"{int(k)} {int(j)}\n")


def read_centroids(path, n):
    """Parse ``k x y`` lines into an ``(n, 2)`` array; every area must appear once."""
    coords = np.full((n, 2), np.nan)
    seen = np.zeros(n, dtype=bool)
    for lineno, line in _data_lines(path):
        parts = line.split()
        if len(parts) != 3:
            raise ParseError(f"expected 'k x y', got {line!r}", path, lineno)
        try:
            k = int(parts[0])
            x, y = float(parts[1]), float(parts[2])
        except ValueError:
            raise ParseError(f"bad centroid record {line!r}", path, lineno) from None
        if not 0 <= k < n:
            raise ParseError(f"area index {k} out of range for n={n}", path, lineno)
        if seen[k]:
            raise ParseError(f"duplicate centroid for area {k}", path, lineno)
        seen[k] = True
        coords[k] = (x, y)
    if not seen.all():
        raise ParseError(f"missing centroid for area {int(np.flatnonzero(~seen)[0])}", path)
    return coords
