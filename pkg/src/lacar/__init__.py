"""Locally adaptive conditional autoregressive smoothing for areal data.

Hierarchical models with a Leroux CAR random-effect prior, an iterative
estimator of the binary neighbourhood matrix W (boundary detection), and
the simulation harness used to assess both.
"""

__version__ = "0.1.0"

from . import adaptive, diagnostics, gmrf, graph, inference, simulate  # noqa: E402
from .adaptive import AdaptiveConfig, AdaptiveTrace, boundary_report  # noqa: E402
from .errors import (  # noqa: E402
    ConvergenceError,
    IsolatedAreaError,
    LacarError,
    ModelError,
    NotPositiveDefiniteError,
    NumericalError,
    ParseError,
    UndefinedStatistic,
)
from .graph import AdjacencyGraph, NeighbourMatrix, full_matrix, lattice_graph, read_edge_list  # noqa: E402
from .inference import FitResult, GridConfig, MCMCConfig, ModelSpec, Priors, fit, fit_mcmc  # noqa: E402

__all__ = [
    "__version__", "adaptive", "diagnostics", "gmrf", "graph", "inference", "simulate",
    "AdaptiveConfig", "AdaptiveTrace", "boundary_report", "AdjacencyGraph", "NeighbourMatrix", "full_matrix",
    "lattice_graph", "read_edge_list", "FitResult", "GridConfig", "MCMCConfig", "ModelSpec", "Priors", "fit",
    "fit_mcmc", "LacarError", "ParseError", "ModelError", "IsolatedAreaError", "NumericalError",
    "NotPositiveDefiniteError", "ConvergenceError", "UndefinedStatistic",
]
