"""Time the compiled kernels against the pure-Python fallback.

Each backend runs in its own interpreter because ``LACAR_NO_NUMBA`` is read
at import time.  Usage::

    python3 benchmarks/bench_kernels.py [--side 20] [--repeats 3]
"""

import argparse
import json
import os
import subprocess
import sys
import time


def workload(side, repeats):
    import numpy as np

    from lacar import sparse
    from lacar.diagnostics import moran_permutation_test
    from lacar.graph import full_matrix, lattice_graph
    from lacar.inference import MCMCConfig, ModelSpec, fit_mcmc

    g = lattice_graph(side, side)
    w = full_matrix(g)
    n, e = g.n, g.edges
    deg = np.bincount(e.ravel(), minlength=n).astype(float)
    rho, tau = 0.7, 2.0
    sym = sparse.analyze(n, e[:, 0], e[:, 1])
    rng = np.random.default_rng(0)
    y = rng.poisson(20, n).astype(float)
    spec = ModelSpec("poisson", y, np.ones((n, 1)), np.log(np.full(n, 20.0)))

    def chol():
        f = sparse.factorize(sym, tau * (rho * deg + 1 - rho), np.full(len(e), -tau * rho))
        f.inverse_diagonal()

    def moran():
        moran_permutation_test(rng.normal(size=n), w, n_perm=999, rng=1)

    def mcmc():
        fit_mcmc(spec, w, MCMCConfig(n_iter=2000, burn_in=1000, seed=0))

    out = {}
    for name, job in (("cholesky+selinv", chol), ("moran_999_perm", moran), ("mcmc_2000_iter", mcmc)):
        job()  # compile or warm caches
        times = []
        for _ in range(repeats):
            t0 = time.perf_counter()
            job()
            times.append(time.perf_counter() - t0)
        out[name] = min(times)
    return out


def main():
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--side", type=int, default=20, help="lattice side length (n = side^2)")
    ap.add_argument("--repeats", type=int, default=3)
    ap.add_argument("--worker", action="store_true", help=argparse.SUPPRESS)
    args = ap.parse_args()
    if args.worker:
        print(json.dumps(workload(args.side, args.repeats)))
        return
    res = {}
    for label, flag in (("numba", "0"), ("python", "1")):
        env = dict(os.environ, LACAR_NO_NUMBA=flag)
        cmd = [sys.executable, __file__, "--worker", "--side", str(args.side), "--repeats", str(args.repeats)]
        res[label] = json.loads(subprocess.run(cmd, env=env, check=True, capture_output=True,
                                               text=True).stdout.strip().splitlines()[-1])
    print(f"n = {args.side ** 2}, best of {args.repeats}")
    print(f"{'kernel':<18}{'numba (s)':>12}{'python (s)':>12}{'speed-up':>10}")
    for k in res["numba"]:
        a, b = res["numba"][k], res["python"][k]
        print(f"{k:<18}{a:>12.4f}{b:>12.4f}{b / a:>10.1f}")


if __name__ == "__main__":
    main()
