"""Compare the compiled and pure-Python iteration kernels.

Usage::

    python benchmarks/bench_kernel.py [--T 100000] [--repeat 3]

Runs the electricity-market iteration with each available backend, checks
that the logs are identical, and prints the best wall-clock time and the
speedup over the pure-Python kernel.
"""

import argparse
import time

import numpy as np

from pushsum_gne import BACKEND
from pushsum_gne.engine import StepsizeSchedule, run
from pushsum_gne.game import make_electricity_market
from pushsum_gne.graph import paper_fig1


def best_time(backend, model, graphs, sched, T, repeat):
    times, log = [], None
    for _ in range(repeat):
        t0 = time.perf_counter()
        _, log = run(model, graphs, sched, T, seed=0, backend=backend)
        times.append(time.perf_counter() - t0)
    return min(times), log


def main(argv=None):
    p = argparse.ArgumentParser(description=__doc__.split("\n\n")[0])
    p.add_argument("--T", type=int, default=100_000)
    p.add_argument("--N", type=int, default=5)
    p.add_argument("--repeat", type=int, default=3)
    p.add_argument("--generic", action="store_true", help="also time the per-step generic path (slow)")
    args = p.parse_args(argv)

    model = make_electricity_market(N=args.N, seed=0)
    graphs = paper_fig1(args.N)
    sched = StepsizeSchedule(0.8, 0.2, 0.2)
    backends = ["python"] + (["compiled"] if BACKEND == "compiled" else []) + (["generic"] if args.generic else [])
    if BACKEND != "compiled":
        print("compiled kernel not built; timing the pure-Python fallback only")

    results = {}
    for b in backends:
        results[b] = best_time(b, model, graphs, sched, args.T, args.repeat)
    ref_time, ref_log = results["python"]
    print(f"T = {args.T}, N = {args.N}, best of {args.repeat}")
    print(f"{'backend':<10}{'seconds':>10}{'steps/s':>14}{'speedup':>10}  identical")
    for b, (sec, lg) in results.items():
        same = all(np.array_equal(getattr(lg, k), getattr(ref_log, k)) for k in ("x", "z", "mu", "sigma"))
        print(f"{b:<10}{sec:>10.3f}{args.T / sec:>14.0f}{ref_time / sec:>10.1f}  {same}")


if __name__ == "__main__":
    main()
