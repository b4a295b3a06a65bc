"""Compare the compiled and pure-Python Kalman kernels.

Times one filter pass (the unit of work inside every likelihood
evaluation) and one full maximum-likelihood fit per model, on each
backend, and checks that both return the same log-likelihood.

    python benchmarks/bench_kernel.py [--n 2000] [--repeat 5] [--fit]
"""

import argparse
import time

import numpy as np

from stsad import kernels
from stsad.ssm import fit_mle, kalman_filter
from stsad.structural import build_model

CASES = [
    ("local_level:none:gaussian", 3600),
    ("local_linear:daily:ar1", 3600),
    ("local_level:daily:ar2", 300),
    ("local_linear:hourly:ar2", 60),
]


def simulate(n, granularity, rng):
    t = np.arange(n)
    period = 86400 // granularity if granularity >= 60 * 5 else 3600 // granularity
    return 10 + np.cumsum(rng.normal(0, 0.2, n)) + 3 * np.sin(2 * np.pi * t / period) \
        + rng.normal(0, 0.5, n)


def best_of(fn, repeat):
    times = []
    for _ in range(repeat):
        t0 = time.perf_counter()
        out = fn()
        times.append(time.perf_counter() - t0)
    return min(times), out


def main(argv=None):
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--n", type=int, default=2000, help="series length")
    ap.add_argument("--repeat", type=int, default=5)
    ap.add_argument("--fit", action="store_true", help="also time a full MLE fit")
    args = ap.parse_args(argv)
    if kernels.compiled_filter_loop is None:
        raise SystemExit("compiled extension not built; run `pip install -e .` first")

    backends = {"cython": kernels.compiled_filter_loop, "python": kernels.python_filter_loop}
    rng = np.random.default_rng(0)
    print(f"{'model':28s} {'m':>3s} {'cython ms':>10s} {'python ms':>10s} {'speedup':>8s} {'|dll|':>9s}")
    for spec, gran in CASES:
        y = simulate(args.n, gran, rng)
        fam = build_model(spec, gran, scale=float(np.var(y)), level0=float(y[0]))
        model = fam.model(fam.start_params(y, np.ones(y.size, bool))[0])
        res = {}
        for name, loop in backends.items():
            reps = args.repeat if name == "cython" else max(1, args.repeat // 2)
            res[name] = best_of(lambda: kalman_filter(model, y, backend=loop, store_cov=False),
                                reps)
        tc, oc = res["cython"]
        tp, op = res["python"]
        print(f"{spec:28s} {model.state_dim:3d} {tc * 1e3:10.2f} {tp * 1e3:10.2f} "
              f"{tp / tc:8.1f} {abs(oc.loglik - op.loglik):9.2e}")

        if args.fit:
            for name, loop in backends.items():
                saved = kernels.filter_loop
                kernels.filter_loop = loop
                try:
                    t0 = time.perf_counter()
                    fit = fit_mle(fam, y)
                    dt = time.perf_counter() - t0
                finally:
                    kernels.filter_loop = saved
                print(f"  fit [{name}] {dt:8.2f} s  loglik {fit.loglik:.6f}  evals {fit.n_evals}")


if __name__ == "__main__":
    main()
