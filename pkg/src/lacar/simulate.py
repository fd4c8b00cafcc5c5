"""Synthetic Poisson data with step changes, and the replicate study driver.

Random effects are Matérn (nu = 2.5) fields whose mean is 0 on background
areas and ``m`` on the clustered areas of a template; counts are Poisson
with log mean ``ln 40 + 0.1 x + phi``.
"""

from __future__ import annotations

import logging
import math
import os
from collections import Counter
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field, replace
from functools import lru_cache

import numpy as np
from scipy.linalg import cholesky
from scipy.spatial.distance import pdist, squareform

from . import adaptive
from .diagnostics import Truth, aggregate, score_replicate
from .errors import LacarError, ModelError, NumericalError, ParseError
from .graph import AdjacencyGraph, full_matrix, lattice_graph, read_edge_list, write_edge_list
from .inference import GridConfig, ModelSpec, fit

__all__ = ["Template", "SimScenario", "SimData", "default_template", "matern_covariance", "calibrate_range",
           "generate", "run_study", "StudyResult", "read_template", "write_template", "MODELS"]

log = logging.getLogger(__name__)

MODELS = ("global-leroux", "adaptive")

# rows x cols (0-based, end exclusive) of the elevated clusters on the 20 x 20 lattice
_DEFAULT_CLUSTERS = (
    ((2, 4), (2, 7)),
    ((3, 8), (13, 15)),
    ((9, 12), (5, 8)),
    ((13, 15), (11, 17)),
    ((15, 18), (2, 6)),
)


@dataclass(frozen=True, eq=False)
class Template:
    """Geography plus group labels: 0 is background, 1..G are elevated clusters."""

    graph: AdjacencyGraph
    group: np.ndarray

    def __post_init__(self):
        g = np.asarray(self.group, dtype=np.int64).copy()
        if g.shape != (self.graph.n,):
            raise ValueError(f"need one group label per area ({self.graph.n})")
        if np.any(g < 0):
            raise ValueError("group labels must be non-negative")
        if self.graph.coords is None:
            raise ValueError("template graph needs area centroids")
        g.setflags(write=False)
        object.__setattr__(self, "group", g)

    @property
    def n(self):
        return self.graph.n

    @property
    def elevated(self):
        return self.group > 0

    @property
    def true_boundary(self):
        """Boolean mask over graph edges: endpoints differ in background/cluster membership."""
        e = self.graph.edges
        el = self.elevated
        return el[e[:, 0]] != el[e[:, 1]]


def default_template():
    """20 x 20 unit lattice with five rectangular clusters (53 areas, 70 true boundaries of 760 edges)."""
    g = lattice_graph(20, 20)
    lab = np.zeros((20, 20), dtype=np.int64)
    for i, ((r0, r1), (c0, c1)) in enumerate(_DEFAULT_CLUSTERS, start=1):
        lab[r0:r1, c0:c1] = i
    return Template(g, lab.ravel())


@dataclass(frozen=True)
class SimScenario:
    """One data-generating setting.  ``range`` is the Matérn range; None calibrates it
    so the mean pairwise correlation is 0.5."""

    m: float = 1.0
    include_covariate: bool = True
    intercept: float = math.log(40.0)
    beta: float = 0.1
    range: float | None = None
    variance: float = 1.0
    nu: float = 2.5

    def __post_init__(self):
        if self.m < 0:
            raise ValueError("m must be non-negative")
        if self.range is not None and not self.range > 0:
            raise ValueError("range must be positive")
        if not self.variance >= 0:
            raise ValueError("variance must be non-negative")
        if self.nu != 2.5:
            raise ValueError("only nu = 2.5 is supported")

    @classmethod
    def named(cls, name, **kw):
        name = name.upper()
        if name not in ("A", "B"):
            raise ValueError(f"unknown scenario {name!r}; expected A or B")
        return cls(m=1.0 if name == "A" else 0.0, **kw)


def matern_correlation(d, range_):
    s = math.sqrt(5.0) * np.asarray(d, dtype=float) / range_
    return (1.0 + s + s * s / 3.0) * np.exp(-s)


def matern_covariance(coords, range_, variance=1.0, nu=2.5):
    """Dense Matérn covariance with smoothness 2.5.  Duplicate points get a warning."""
    if nu != 2.5:
        raise ValueError("only nu = 2.5 has the closed form used here")
    if not range_ > 0:
        raise ValueError("range must be positive")
    coords = np.asarray(coords, dtype=float)
    d = pdist(coords)
    if np.any(d == 0):
        log.warning("duplicate coordinates: those areas are perfectly correlated")
    c = squareform(variance * matern_correlation(d, range_))
    np.fill_diagonal(c, variance)
    return c


def mean_correlation(coords, range_):
    return float(np.mean(matern_correlation(pdist(np.asarray(coords, dtype=float)), range_)))


def calibrate_range(coords, target=0.5, tol=1e-3, bracket=(1e-6, 1e6)):
    """Range giving mean off-diagonal correlation ``target``, by bisection on log range."""
    coords = np.asarray(coords, dtype=float)
    if len(coords) < 2:
        raise ValueError("need at least two areas")
    d = pdist(coords)
    lo, hi = np.log(bracket[0]), np.log(bracket[1])

    def f(lr):
        return float(np.mean(matern_correlation(d, math.exp(lr)))) - target

    flo, fhi = f(lo), f(hi)
    if flo > 0 or fhi < 0:
        raise ModelError(
            f"mean correlation {target} is unattainable: it ranges over [{flo + target:.4g}, {fhi + target:.4g}]"
        )
    for _ in range(200):
        mid = 0.5 * (lo + hi)
        fm = f(mid)
        if abs(fm) < tol * 1e-3:
            break
        if fm < 0:
            lo = mid
        else:
            hi = mid
    r = math.exp(0.5 * (lo + hi))
    if abs(f(math.log(r))) > tol:
        raise NumericalError("range calibration did not converge")
    return r


@lru_cache(maxsize=8)
def _cached_factor(coords_bytes, n, range_, variance):
    coords = np.frombuffer(coords_bytes, dtype=float).reshape(n, 2)
    c = matern_covariance(coords, range_, variance)
    try:
        return cholesky(c, lower=True)
    except np.linalg.LinAlgError:
        pass
    c[np.diag_indices_from(c)] += 1e-10
    try:
        return cholesky(c, lower=True)
    except np.linalg.LinAlgError as exc:
        raise NumericalError("Matérn covariance is not positive definite even with jitter") from exc


@lru_cache(maxsize=8)
def _cached_range(coords_bytes, n):
    return calibrate_range(np.frombuffer(coords_bytes, dtype=float).reshape(n, 2))


def scenario_range(template, scenario):
    if scenario.range is not None:
        return float(scenario.range)
    c = np.ascontiguousarray(template.graph.coords, dtype=float)
    return _cached_range(c.tobytes(), template.n)


@dataclass(frozen=True, eq=False)
class SimData:
    y: np.ndarray
    offset: np.ndarray
    design: np.ndarray
    phi: np.ndarray
    mu: np.ndarray
    boundary: np.ndarray
    beta: np.ndarray

    def spec(self, rho="estimate", with_covariate=True):
        X = self.design if with_covariate else self.design[:, :1]
        names = ("intercept", "x")[: X.shape[1]]
        return ModelSpec("poisson", self.y, X, self.offset, rho=rho, names=names)

    @property
    def truth(self):
        return Truth(self.mu, self.beta, self.boundary)


def generate(template, scenario, rng):
    """One replicate: fresh random effects, covariate and counts."""
    rng = np.random.default_rng(rng)
    n = template.n
    c = np.ascontiguousarray(template.graph.coords, dtype=float)
    mean = np.where(template.elevated, scenario.m, 0.0)
    if scenario.variance > 0:
        L = _cached_factor(c.tobytes(), n, scenario_range(template, scenario), float(scenario.variance))
        phi = mean + L @ rng.standard_normal(n)
    else:
        phi = mean.copy()
    eta = np.full(n, scenario.intercept) + phi
    if scenario.include_covariate:
        x = rng.standard_normal(n)
        eta = eta + scenario.beta * x
        design = np.column_stack([np.ones(n), x])
        beta = np.array([scenario.beta])
    else:
        design = np.ones((n, 1))
        beta = np.zeros(0)
    mu = np.exp(eta)
    y = rng.poisson(mu).astype(float)
    # with m = 0 there is no step in the mean, so no edge is a true boundary
    boundary = template.true_boundary.copy() if scenario.m != 0 else np.zeros(template.graph.m, dtype=bool)
    return SimData(y, np.zeros(n), design, phi, mu, boundary, beta)


# ---------------------------------------------------------------------------
# replicate study
# ---------------------------------------------------------------------------


@dataclass
class StudyResult:
    reports: dict
    records: list
    failures: list
    termination: Counter = field(default_factory=Counter)
    iterations: Counter = field(default_factory=Counter)

    def termination_summary(self, max_iterations):
        total = sum(self.termination.values())
        lines = [f"adaptive_runs={total}"]
        for case in ("steady_state", "cycle", "max_iterations_exceeded"):
            c = self.termination.get(case, 0)
            frac = c / total if total else float("nan")
            lines.append(f"{case}={c} fraction={frac:.4f}")
        lines.append("iterations\tcount")
        for i in range(1, max_iterations + 1):
            lines.append(f"{i}\t{self.iterations.get(i, 0)}")
        return "\n".join(lines) + "\n"


def _replicate(template, scenario, models, adaptive_config, grid, index, seed_seq):
    data = generate(template, scenario, np.random.default_rng(seed_seq))
    out = {"index": index, "scores": {}, "errors": {}, "termination": None, "iterations": None}
    for model in models:
        try:
            if model == "global-leroux":
                spec = data.spec("estimate", scenario.include_covariate)
                w = full_matrix(template.graph)
                f = fit(spec, w, grid)
                out["scores"][model] = score_replicate(data.truth, f, w)
            elif model == "adaptive":
                spec = data.spec("estimate", scenario.include_covariate)
                tr = adaptive.run(spec, template.graph, adaptive_config)
                out["termination"] = tr.termination
                out["iterations"] = tr.n_iterations
                out["scores"][model] = score_replicate(data.truth, tr.final_fit, tr.selected)
            else:
                raise ValueError(f"unknown model {model!r}")
        except LacarError as exc:
            out["errors"][model] = f"{type(exc).__name__}: {exc}"
    return out


def run_study(template, scenario, n_replicates, models=MODELS, seed=0, adaptive_config=None, grid=None,
              workers=1):
    """Simulate ``n_replicates`` datasets and score every model on each.

    Replicate ``i`` uses the ``i``-th child of ``SeedSequence(seed)``, so
    results do not depend on ``workers`` or on execution order.
    """
    if n_replicates < 1:
        raise ValueError("n_replicates must be at least 1")
    models = tuple(models)
    for m in models:
        if m not in MODELS:
            raise ValueError(f"unknown model {m!r}; expected one of {MODELS}")
    grid = grid or GridConfig()
    adaptive_config = adaptive_config or adaptive.AdaptiveConfig(grid=grid)
    # calibrate once in the parent so workers inherit nothing stateful
    scenario = replace(scenario, range=scenario_range(template, scenario))
    seeds = np.random.SeedSequence(seed).spawn(n_replicates)
    args = [(template, scenario, models, adaptive_config, grid, i, s) for i, s in enumerate(seeds)]
    workers = max(1, int(workers or 1))
    if workers == 1:
        outs = [_replicate(*a) for a in args]
    else:
        with ProcessPoolExecutor(max_workers=workers) as ex:
            outs = list(ex.map(_replicate, *zip(*args)))
    outs.sort(key=lambda o: o["index"])

    reports, failures = {}, []
    for model in models:
        recs = [o["scores"][model] for o in outs if model in o["scores"]]
        failed = [(o["index"], o["errors"][model]) for o in outs if model in o["errors"]]
        failures.extend((i, model, msg) for i, msg in failed)
        if recs:
            reports[model] = aggregate(model, recs, n_failed=len(failed))
    term = Counter(o["termination"] for o in outs if o["termination"] is not None)
    iters = Counter(o["iterations"] for o in outs if o["iterations"] is not None)
    return StudyResult(reports, outs, failures, term, iters)


# ---------------------------------------------------------------------------
# template files
# ---------------------------------------------------------------------------


def write_template(prefix, template):
    """Write ``<prefix>.areas.csv`` (area_id,x,y,group) and ``<prefix>.edges``."""
    areas = f"{prefix}.areas.csv"
    with open(areas, "w") as fh:
        fh.write("area_id,x,y,group\n")
        for k, ((x, y), g) in enumerate(zip(template.graph.coords, template.group)):
            fh.write(f"{k},{x:.17g},{y:.17g},{g}\n")
    edges = f"{prefix}.edges"
    write_edge_list(edges, template.graph.edges, template.n)
    return areas, edges


def read_template(areas_path, edges_path):
    rows = []
    with open(areas_path) as fh:
        header = fh.readline().strip().lower().replace(" ", "")
        if header != "area_id,x,y,group":
            raise ParseError("expected header 'area_id,x,y,group'", areas_path, 1)
        for ln, line in enumerate(fh, start=2):
            line = line.strip()
            if not line or line.startswith("#"):
                continue
            parts = line.split(",")
            if len(parts) != 4:
                raise ParseError(f"expected 4 fields, found {len(parts)}", areas_path, ln)
            try:
                k, x, y, g = int(parts[0]), float(parts[1]), float(parts[2]), int(parts[3])
            except ValueError as exc:
                raise ParseError(str(exc), areas_path, ln) from None
            if k != len(rows):
                raise ParseError(f"area ids must run 0..n-1 in order; got {k}", areas_path, ln)
            rows.append((x, y, g))
    if not rows:
        raise ParseError("no areas", areas_path)
    n = len(rows)
    g = read_edge_list(edges_path, n)
    arr = np.array(rows)
    return Template(AdjacencyGraph(n, g.edges, arr[:, :2]), arr[:, 2].astype(np.int64))


def default_workers():
    return max(1, len(os.sched_getaffinity(0)) if hasattr(os, "sched_getaffinity") else (os.cpu_count() or 1))
