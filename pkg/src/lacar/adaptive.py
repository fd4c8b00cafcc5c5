"""Iterative estimation of the neighbourhood matrix W.

Starting from an independence fit, each pass sets ``w_kj = 1`` for a border
pair whose 95% intervals for ``phi_k`` and ``phi_j`` overlap and 0
otherwise, then refits under the new W.  The loop stops once W repeats: a
repeat of the immediately preceding state is a steady state, a repeat of
an older one a cycle, which is resolved by picking the cycle member whose
residuals show the least spatial autocorrelation.
"""

from __future__ import annotations

import logging
import math
import warnings
from dataclasses import dataclass, field

import numpy as np

from .diagnostics import morans_i
from .errors import LacarError, UndefinedStatistic
from .graph import BoundarySet, NeighbourMatrix, boundaries, full_matrix
from .inference import GridConfig, fit
from .inference.laplace import check_isolation
from .inference.results import credible_intervals_phi

__all__ = ["AdaptiveConfig", "AdaptiveState", "AdaptiveTrace", "BoundaryReport", "update_w", "run",
           "boundary_report"]

log = logging.getLogger(__name__)

BOUNDARY_RHO = 0.99


@dataclass(frozen=True)
class AdaptiveConfig:
    """Settings for :func:`run`.

    ``rho`` is ``"estimate"`` (covariate mode) or a fixed value for the
    refits; :meth:`boundary_mode` gives the fixed 0.99 setting.
    """

    rho: float | str = "estimate"
    max_iterations: int = 50
    grid: GridConfig = field(default_factory=GridConfig)

    def __post_init__(self):
        if int(self.max_iterations) < 1:
            raise ValueError("max_iterations must be at least 1")
        if not isinstance(self.rho, str):
            r = float(self.rho)
            if not 0.0 <= r < 1.0:
                raise ValueError(f"rho must lie in [0, 1), got {r}")

    @classmethod
    def boundary_mode(cls, **kw):
        return cls(rho=BOUNDARY_RHO, **kw)


@dataclass(frozen=True, eq=False)
class AdaptiveState:
    iteration: int
    key: str
    w: NeighbourMatrix
    fit: object
    moran: float

    @property
    def n_boundaries(self):
        return int(np.count_nonzero(~self.w.active))


@dataclass(eq=False)
class AdaptiveTrace:
    """Record of one run.

    ``states[i]`` is the W used by refit ``i + 1``.  On a steady state or
    cycle the repeated W is appended once more, so the final key equals the
    one it repeats.  ``termination`` is ``"steady_state"``, ``"cycle"`` or
    ``"max_iterations_exceeded"``.
    """

    initial_fit: object = None
    states: list = field(default_factory=list)
    termination: str | None = None
    cycle_length: int | None = None
    selected_index: int | None = None
    final_fit: object = None

    @property
    def selected(self):
        return None if self.selected_index is None else self.states[self.selected_index].w

    @property
    def keys(self):
        return [s.key for s in self.states]

    @property
    def n_iterations(self):
        """Number of refits performed under distinct W states."""
        n = len(self.states)
        return n - 1 if self.termination in ("steady_state", "cycle") else n

    def log_lines(self):
        out = []
        for s in self.states:
            m = "nan" if not math.isfinite(s.moran) else f"{s.moran:.6f}"
            out.append(f"iter={s.iteration} state={s.key[:16]} boundaries={s.n_boundaries} moran={m}")
        if self.termination is not None:
            extra = f" length={self.cycle_length}" if self.termination == "cycle" else ""
            out.append(f"termination={self.termination}{extra} selected_iter="
                       f"{self.states[self.selected_index].iteration}")
        return out


def update_w(fit_result, graph):
    """W with an edge active exactly when the two 95% intervals for phi overlap.

    Intervals are closed, so touching endpoints count as overlapping.  They
    come from :func:`~lacar.inference.credible_intervals_phi`, i.e. are
    taken for the centred effects.
    """
    ci = credible_intervals_phi(fit_result)
    if ci.shape[0] != graph.n:
        raise ValueError(f"fit covers {ci.shape[0]} areas, graph has {graph.n}")
    k, j = graph.edges[:, 0], graph.edges[:, 1]
    lo, hi = ci[:, 0], ci[:, 1]
    return NeighbourMatrix(graph, (lo[k] <= hi[j]) & (lo[j] <= hi[k]))


def _moran(fit_result, w):
    try:
        return morans_i(fit_result.residuals, w)
    except UndefinedStatistic:
        return math.nan


def _rank(state):
    # undefined statistics sort last; ties go to the earlier state
    m = state.moran
    return (0, abs(m), state.iteration) if math.isfinite(m) else (1, 0.0, state.iteration)


def run(spec, graph, config=None, fitter=None):
    """Alternate fitting and W updates until W repeats.

    ``fitter(spec, w)`` defaults to the Laplace-grid :func:`~lacar.inference.fit`
    with ``config.grid``; any callable returning an object with ``phi``
    intervals and ``residuals`` may be substituted.

    Errors from a fit are re-raised with the partial trace attached as
    ``exc.trace``.
    """
    config = config or AdaptiveConfig()
    if fitter is None:
        def fitter(s, w):
            return fit(s, w, config.grid)

    if graph.n != spec.n:
        raise ValueError(f"graph has {graph.n} areas, data have {spec.n}")
    trace = AdaptiveTrace()
    refit_spec = spec.with_rho(config.rho)
    try:
        trace.initial_fit = fitter(spec.with_rho(0.0), full_matrix(graph))
        seen = {}
        prev = trace.initial_fit
        for it in range(1, config.max_iterations + 1):
            w = update_w(prev, graph)
            key = w.key
            if key in seen:
                first = seen[key]
                last = trace.states[-1]
                trace.states.append(AdaptiveState(it, key, w, trace.states[first].fit, trace.states[first].moran))
                if first == len(trace.states) - 2:
                    trace.termination = "steady_state"
                    trace.selected_index = first
                    trace.final_fit = last.fit
                else:
                    members = range(first, len(trace.states) - 1)
                    trace.termination = "cycle"
                    trace.cycle_length = len(members)
                    trace.selected_index = min(members, key=lambda i: _rank(trace.states[i]))
                    trace.final_fit = fitter(refit_spec, trace.selected)
                log.debug("terminated: %s after %d refits", trace.termination, trace.n_iterations)
                return trace
            check_isolation(refit_spec, w)
            f = fitter(refit_spec, w)
            state = AdaptiveState(it, key, w, f, _moran(f, w))
            seen[key] = len(trace.states)
            trace.states.append(state)
            log.debug("iter=%d boundaries=%d", it, state.n_boundaries)
            prev = f
        trace.termination = "max_iterations_exceeded"
        trace.selected_index = min(range(len(trace.states)), key=lambda i: _rank(trace.states[i]))
        trace.final_fit = fitter(refit_spec, trace.selected)
        return trace
    except LacarError as exc:
        exc.trace = trace
        raise


@dataclass(frozen=True, eq=False)
class BoundaryReport:
    """Boundaries of the selected W with the absolute difference in posterior
    median risk across each, largest first."""

    boundaries: BoundarySet
    edges: np.ndarray
    risk_difference: np.ndarray
    low_rho: bool = False

    def __len__(self):
        return len(self.edges)

    def rows(self):
        return [(int(k), int(j), float(d)) for (k, j), d in zip(self.edges, self.risk_difference)]


def boundary_report(trace):
    """Rank the selected boundaries by ``|R_k - R_j|``.

    ``R`` is the posterior median risk for Poisson fits and the posterior
    median of ``mu`` otherwise.  ``low_rho`` is set, with a warning, when
    the final fit's median rho is below 0.5, where an inactive edge says
    little about a step change.
    """
    if trace.termination is None or trace.selected is None:
        raise ValueError("trace has not terminated")
    f = trace.final_fit
    b = boundaries(trace.selected)
    src = f.risk if getattr(f, "risk", None) is not None else f.mu
    r = np.asarray(src.median, dtype=float)
    e = b.edges
    d = np.abs(r[e[:, 0]] - r[e[:, 1]])
    order = np.lexsort((e[:, 1], e[:, 0], -d))
    low = False
    rho = f.hyper.get("rho") if getattr(f, "hyper", None) else None
    if rho is not None and float(rho.median) < 0.5:
        low = True
        warnings.warn("posterior median of rho is below 0.5; boundaries may not reflect step changes",
                      stacklevel=2)
    return BoundaryReport(BoundarySet(b.graph, b.edge_ids[order]), e[order], d[order], low)
