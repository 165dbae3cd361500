"""Compiled vs numpy backend for the subsampled interaction kernel.

Times the raw kernel on random data and one full solver run per backend, and
checks that both backends agree. Usage::

    python3 benchmarks/bench_kernels.py [--J 2000] [--d 64] [--M 200] [--repeat 5]
"""
import argparse
import timeit

import numpy as np

from kenkf import kernels
from kenkf.meanfield import SolverConfig, run
from kenkf.problems import build_problem


def best_of(func, repeat):
    return min(timeit.repeat(func, number=1, repeat=repeat))


def bench_kernel(J, d, M, repeat):
    rng = np.random.default_rng(0)
    A = rng.standard_normal((J, d))
    B = rng.standard_normal((J, d))
    W = rng.standard_normal((J, d))
    out = {}
    for name, mod in (("python", kernels.python_backend), ("compiled", kernels.compiled_backend)):
        if mod is None:
            continue
        call = lambda: kernels.subsampled_drift(A, B, W, M, 12345, backend_module=mod)
        out[name] = (best_of(call, repeat), call())
    return out


def bench_solver(n, J, M, repeat):
    prob = build_problem("elliptic-tc1", n=n, gamma=0.1)
    cfg = SolverConfig(J=J, M=M, n_tot=20, stopping="time", seed=1)
    out = {}
    for name, mod in (("python", kernels.python_backend), ("compiled", kernels.compiled_backend)):
        if mod is None:
            continue
        call = lambda: run(prob, cfg, backend_module=mod)
        out[name] = (best_of(call, repeat), call().ensemble.members)
    return out


def report(title, results):
    print(title)
    for name, (secs, _) in results.items():
        print(f"  {name:9s} {secs * 1e3:10.2f} ms")
    if len(results) == 2:
        (tp, xp), (tc, xc) = results["python"], results["compiled"]
        diff = np.abs(xp - xc).max() / max(1.0, np.abs(xp).max())
        print(f"  speedup   {tp / tc:10.2f} x   max rel diff {diff:.1e}")


def main(argv=None):
    parser = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    parser.add_argument("--J", type=int, default=2000)
    parser.add_argument("--d", type=int, default=64)
    parser.add_argument("--M", type=int, default=200)
    parser.add_argument("--repeat", type=int, default=5)
    args = parser.parse_args(argv)
    print(f"threads: {kernels.num_threads()}  compiled available: "
          f"{kernels.compiled_backend is not None}")
    report(f"kernel  J={args.J} d={args.d} M={args.M}",
           bench_kernel(args.J, args.d, args.M, args.repeat))
    report(f"solver  elliptic n={args.d} J={args.J} M={args.M}, 20 steps",
           bench_solver(args.d, args.J, args.M, max(1, args.repeat // 2)))


if __name__ == "__main__":
    main()
