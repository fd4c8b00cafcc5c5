"""Command-line interface: ``lacar {fit,boundaries,simulate,diagnose}``.

Every output file starts with ``#`` lines carrying the package and library
versions, the seed and a digest of the run configuration.  Nothing
time- or host-dependent is written, so a rerun with the same arguments
reproduces the files byte for byte.

Exit status: 0 success, 2 usage, 3 unreadable or malformed input,
4 invalid model or data, 5 numerical failure.
"""

from __future__ import annotations

import argparse
import logging
import math
import sys
from dataclasses import replace
from pathlib import Path

import numpy as np
import scipy

from . import __version__, adaptive, simulate
from ._jit import backend_name
from .diagnostics import metrics_table, moran_permutation_test, overdispersion
from .errors import LacarError, ModelError, NumericalError, ParseError, UndefinedStatistic
from .graph import full_matrix, read_edge_list, write_edge_list
from .inference import GridConfig, MCMCConfig, ModelSpec, fit, fit_mcmc
from .io import config_digest, format_float, read_data, write_data, write_fit_table

log = logging.getLogger("lacar")

EXIT_OK, EXIT_USAGE, EXIT_PARSE, EXIT_MODEL, EXIT_NUMERICAL = 0, 2, 3, 4, 5

# arguments that change how a run executes but not what it writes
_NOT_CONFIG = {"out_dir", "threads", "verbose", "func"}


def _rho(text):
    if text == "estimate":
        return "estimate"
    if text.startswith("fixed:"):
        try:
            v = float(text[6:])
        except ValueError:
            raise argparse.ArgumentTypeError(f"bad rho value {text[6:]!r}") from None
        if not 0.0 <= v < 1.0:
            raise argparse.ArgumentTypeError("fixed rho must lie in [0, 1)")
        return v
    raise argparse.ArgumentTypeError("expected 'estimate' or 'fixed:<v>'")


def _positive_int(text):
    try:
        v = int(text)
    except ValueError:
        raise argparse.ArgumentTypeError(f"{text!r} is not an integer") from None
    if v < 1:
        raise argparse.ArgumentTypeError("must be at least 1")
    return v


def _versions():
    try:
        import numba
        nb = numba.__version__
    except ImportError:  # pragma: no cover
        nb = "absent"
    return f"lacar {__version__} numpy {np.__version__} scipy {scipy.__version__} numba {nb} kernels {backend_name()}"


class Run:
    """Output directory plus the header stamped on every file."""

    def __init__(self, args):
        self.args = args
        self.out = Path(args.out_dir)
        self.out.mkdir(parents=True, exist_ok=True)
        cfg = {k: v for k, v in vars(args).items() if k not in _NOT_CONFIG}
        self.digest = config_digest(cfg)
        self.header = [_versions(), f"command={args.command} seed={args.seed} config={self.digest}"]

    def path(self, name):
        return self.out / name

    def write(self, name, lines):
        with open(self.path(name), "w", encoding="utf-8") as fh:
            for h in self.header:
                fh.write(f"# {h}\n")
            for line in lines:
                fh.write(line + "\n")


# ---------------------------------------------------------------------------
# shared pieces
# ---------------------------------------------------------------------------


def _load(args, with_covariates, rho):
    graph = read_edge_list(args.adjacency)
    data = read_data(args.data, n=graph.n)
    if args.family == "binomial" and data.trials is None:
        raise ModelError("binomial family needs a 'trials' column in the data file")
    spec = ModelSpec(args.family, data.y, data.design(with_covariates), data.offset,
                     trials=data.trials if args.family == "binomial" else None, rho=rho,
                     names=data.names(with_covariates))
    return graph, spec


def _fitter(args):
    if args.backend == "mcmc":
        cfg = MCMCConfig(n_iter=args.mcmc_iter, burn_in=args.mcmc_burn, seed=args.seed)
        return lambda s, w: fit_mcmc(s, w, cfg)
    grid = GridConfig(seed=args.seed)
    return lambda s, w: fit(s, w, grid)


def _row(kind, name, s):
    vals = [s.median, s.lo, s.hi, s.mean, s.sd]
    return "\t".join([kind, name] + [format_float(v) for v in vals])


def _summary_lines(spec, f, graph, seed, n_perm):
    lines = ["kind\tname\tmedian\tlo\thi\tmean\tsd"]
    for i, nm in enumerate(f.names):
        lines.append(_row("beta", nm, f.beta[i]))
    for nm in sorted(f.hyper):
        lines.append(_row("hyper", nm, f.hyper[nm]))
    stats = {"dic": f.dic, "p_d": f.p_d, "mean_deviance": f.mean_deviance}
    try:
        stats["overdispersion"] = overdispersion(spec, f)
    except ModelError:
        stats["overdispersion"] = math.nan
    try:
        p, i_obs = moran_permutation_test(f.residuals, full_matrix(graph), n_perm, np.random.default_rng(seed))
    except UndefinedStatistic:
        p = i_obs = math.nan
    stats["moran_i"] = i_obs
    stats["moran_p"] = p
    stats["moran_permutations"] = n_perm
    lines += ["stat\tname\tvalue"] + [f"stat\t{k}\t{format_float(v)}" for k, v in stats.items()]
    return lines


def _write_fit(run, spec, f, graph, prefix="fit"):
    write_fit_table(run.path(f"{prefix}_areas.csv"), f, run.header)
    run.write(f"{prefix}_summary.tsv", _summary_lines(spec, f, graph, run.args.seed, run.args.n_perm))


# ---------------------------------------------------------------------------
# subcommands
# ---------------------------------------------------------------------------


def cmd_fit(args):
    graph, spec = _load(args, not args.no_covariates, args.rho)
    run = Run(args)
    f = _fitter(args)(spec, full_matrix(graph))
    _write_fit(run, spec, f, graph)
    return EXIT_OK


def cmd_boundaries(args):
    rho = args.rho
    if rho is None:
        rho = "estimate" if args.covariate_mode else adaptive.BOUNDARY_RHO
    graph, spec = _load(args, args.covariate_mode, rho)
    run = Run(args)
    cfg = adaptive.AdaptiveConfig(rho=rho, max_iterations=args.max_iterations, grid=GridConfig(seed=args.seed))
    try:
        trace = adaptive.run(spec, graph, cfg, fitter=_fitter(args))
    except LacarError as exc:
        tr = getattr(exc, "trace", None)
        if tr is not None:
            run.write("trace.log", tr.log_lines() + [f"error={type(exc).__name__}: {exc}"])
        raise
    run.write("trace.log", trace.log_lines())
    rep = adaptive.boundary_report(trace)
    write_edge_list(run.path("boundaries.edges"), rep.edges, graph.n, header=run.header)
    run.write("risk_differences.tsv",
              ["k\tj\tabs_risk_difference"] + [f"{k}\t{j}\t{format_float(d)}" for k, j, d in rep.rows()])
    _write_fit(run, spec.with_rho(rho), trace.final_fit, graph, prefix="final_fit")
    return EXIT_OK


def _scenario(args):
    kw = {"include_covariate": args.mode == "covariate"}
    if args.m is not None:
        kw["m"] = args.m
    return simulate.SimScenario.named(args.scenario, **kw)


def cmd_simulate(args):
    if args.template:
        template = simulate.read_template(f"{args.template}.areas.csv", f"{args.template}.edges")
    else:
        template = simulate.default_template()
    scenario = _scenario(args)
    run = Run(args)
    rho = args.rho
    if rho is None:
        rho = "estimate" if args.mode == "covariate" else adaptive.BOUNDARY_RHO
    grid = GridConfig(seed=args.seed)
    acfg = adaptive.AdaptiveConfig(rho=rho, max_iterations=args.max_iterations, grid=grid)
    workers = args.threads or simulate.default_workers()
    res = simulate.run_study(template, scenario, args.replicates, models=args.models, seed=args.seed,
                             adaptive_config=acfg, grid=grid, workers=workers)

    reports = [res.reports[m] if m in res.reports else None for m in args.models]
    present = [r for r in reports if r is not None]
    table = metrics_table(present).rstrip("\n").split("\n") if present else ["metric"]
    run.write("metrics.tsv", table)

    rows = ["replicate\tmodel\tbias_mu\tsq_mu\tbias_beta\tsq_beta\tcovered\tba\tnba\ttermination\titerations\terror"]
    for o in res.records:
        for m in args.models:
            s = o["scores"].get(m)
            vals = [getattr(s, k) if s is not None else None
                    for k in ("bias_mu", "sq_mu", "bias_beta", "sq_beta", "covered", "ba", "nba")]
            cells = ["unavailable" if v is None else format_float(v) for v in vals]
            adaptive_row = m == "adaptive"
            term = o["termination"] if adaptive_row and o["termination"] else "NA"
            iters = str(o["iterations"]) if adaptive_row and o["iterations"] is not None else "NA"
            err = o["errors"].get(m, "").replace("\t", " ") or "NA"
            rows.append("\t".join([str(o["index"]), m] + cells + [term, iters, err]))
    run.write("replicates.tsv", rows)
    run.write("termination.txt", res.termination_summary(args.max_iterations).rstrip("\n").split("\n"))

    if args.export_data:
        ddir = run.path("data")
        ddir.mkdir(exist_ok=True)
        simulate.write_template(ddir / "template", template)
        sc = replace(scenario, range=simulate.scenario_range(template, scenario))
        for i, ss in enumerate(np.random.SeedSequence(args.seed).spawn(args.replicates)):
            d = simulate.generate(template, sc, np.random.default_rng(ss))
            cov = d.design[:, 1:]
            write_data(ddir / f"replicate_{i:04d}.csv", d.y, d.offset, cov, ("x",) * cov.shape[1])
    return EXIT_OK


def cmd_diagnose(args):
    graph, spec = _load(args, not args.no_covariates, "estimate")
    spec = spec.covariate_only()
    run = Run(args)
    f = _fitter(args)(spec, full_matrix(graph))
    _write_fit(run, spec, f, graph, prefix="diagnose")
    return EXIT_OK


# ---------------------------------------------------------------------------
# parser
# ---------------------------------------------------------------------------


def build_parser():
    p = argparse.ArgumentParser(prog="lacar", description="Locally adaptive CAR smoothing and boundary detection.")
    p.add_argument("--version", action="version", version=_versions())
    sub = p.add_subparsers(dest="command", required=True)

    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--out-dir", default=".", help="directory for output files (created if missing)")
    common.add_argument("--seed", type=int, default=0)
    common.add_argument("--threads", type=_positive_int, default=None,
                        help="worker processes for replicate studies (default: available CPUs)")
    common.add_argument("-v", "--verbose", action="count", default=0)

    model = argparse.ArgumentParser(add_help=False)
    model.add_argument("--data", required=True, help="CSV with area_id,y,offset[,trials][,covariates]")
    model.add_argument("--adjacency", required=True, help="edge list of border-sharing pairs")
    model.add_argument("--family", choices=("poisson", "binomial", "gaussian"), default="poisson")
    model.add_argument("--backend", choices=("laplace", "mcmc"), default="laplace")
    model.add_argument("--mcmc-iter", type=_positive_int, default=20_000)
    model.add_argument("--mcmc-burn", type=int, default=10_000)
    model.add_argument("--n-perm", type=int, default=999, help="permutations for the Moran test")

    f = sub.add_parser("fit", parents=[common, model], help="fit the model with W fixed at the full adjacency")
    f.add_argument("--rho", type=_rho, default="estimate")
    f.add_argument("--no-covariates", action="store_true", help="intercept-only mean model")
    f.set_defaults(func=cmd_fit)

    b = sub.add_parser("boundaries", parents=[common, model], help="estimate W and report boundaries")
    b.add_argument("--rho", type=_rho, default=None,
                   help="default fixed:0.99, or estimate with --covariate-mode")
    b.add_argument("--covariate-mode", action="store_true", help="keep covariates in the mean model")
    b.add_argument("--max-iterations", type=_positive_int, default=50)
    b.set_defaults(func=cmd_boundaries)

    s = sub.add_parser("simulate", parents=[common], help="run a replicate simulation study")
    s.add_argument("--template", default=None,
                   help="prefix of <prefix>.areas.csv and <prefix>.edges (default: built-in 20x20 lattice)")
    s.add_argument("--scenario", choices=("A", "B"), default="A")
    s.add_argument("--m", type=float, default=None, help="override the step size between regions")
    s.add_argument("--replicates", type=_positive_int, default=2)
    s.add_argument("--mode", choices=("covariate", "boundary"), default="covariate",
                   help="boundary: no covariate and rho fixed at 0.99 for the adaptive refits")
    s.add_argument("--rho", type=_rho, default=None, help="rho for the adaptive refits")
    s.add_argument("--models", nargs="+", choices=simulate.MODELS, default=list(simulate.MODELS))
    s.add_argument("--max-iterations", type=_positive_int, default=50)
    s.add_argument("--export-data", action="store_true", help="also write each replicate dataset")
    s.set_defaults(func=cmd_simulate)

    d = sub.add_parser("diagnose", parents=[common, model],
                       help="covariate-only fit with overdispersion and Moran test on its residuals")
    d.add_argument("--no-covariates", action="store_true")
    d.set_defaults(func=cmd_diagnose)
    return p


def main(argv=None):
    parser = build_parser()
    args = parser.parse_args(argv)
    if getattr(args, "mcmc_burn", 0) >= getattr(args, "mcmc_iter", 1):
        parser.error("--mcmc-burn must be below --mcmc-iter")
    if getattr(args, "n_perm", 0) < 0:
        parser.error("--n-perm must be non-negative")
    logging.basicConfig(level=logging.WARNING - 10 * min(args.verbose, 2), format="%(levelname)s %(name)s: %(message)s")
    try:
        return args.func(args)
    except ParseError as exc:
        print(f"lacar: parse error: {exc}", file=sys.stderr)
        return EXIT_PARSE
    except OSError as exc:
        print(f"lacar: cannot read input: {exc}", file=sys.stderr)
        return EXIT_PARSE
    except ModelError as exc:
        print(f"lacar: model error: {exc}", file=sys.stderr)
        return EXIT_MODEL
    except (NumericalError, LacarError) as exc:
        print(f"lacar: numerical error: {exc}", file=sys.stderr)
        return EXIT_NUMERICAL


if __name__ == "__main__":  # pragma: no cover
    sys.exit(main())
