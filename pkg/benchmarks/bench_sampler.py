"""Benchmark the reverse sampler's compiled kernel against the pure-Python one.

Both backends draw identical trajectories (same Philox streams, same float
arithmetic), so this measures implementation overhead only. Example:

    python benchmarks/bench_sampler.py --d 6 --n-samples 2000
"""

from __future__ import annotations

import argparse
import time

import numpy as np

from cubediff import DenseDistribution, ExactScore, SamplerConfig, sample_reverse_batch
from cubediff._backend import available_backends


def parse_args() -> argparse.Namespace:
    parser = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    parser.add_argument("--d", type=int, default=6, help="hypercube dimension")
    parser.add_argument("--T", type=float, default=4.0, help="forward horizon")
    parser.add_argument("--delta", type=float, default=0.01,
                        help="early-stopping offset")
    parser.add_argument("--n-samples", type=int, default=2000,
                        help="trajectories per timed run")
    parser.add_argument("--seed", type=int, default=0, help="trajectory seed")
    parser.add_argument("--repeats", type=int, default=3,
                        help="timed runs per backend (best is reported)")
    return parser.parse_args()


def main() -> None:
    args = parse_args()
    config = SamplerConfig(d=args.d, T=args.T, delta=args.delta,
                           seed=args.seed, n_samples=args.n_samples)
    rng = np.random.default_rng(12345)
    p0 = DenseDistribution(args.d, rng.dirichlet(np.ones(1 << args.d)))
    score = ExactScore(p0)

    print(f"workload: d={args.d} T={args.T} delta={args.delta} "
          f"n_samples={args.n_samples} seed={args.seed}")
    results: dict[str, float] = {}
    reference = None
    for backend in available_backends():
        sample_reverse_batch(config, score, n_samples=64, backend=backend)
        best = float("inf")
        for _ in range(args.repeats):
            start = time.perf_counter()
            batch = sample_reverse_batch(config, score, backend=backend)
            best = min(best, time.perf_counter() - start)
        if reference is None:
            reference = batch.states
        elif not np.array_equal(batch.states, reference):
            raise AssertionError("backends disagree on sampled states")
        results[backend] = best
        rate = args.n_samples / best
        print(f"  {backend:>8s}: {best * 1e3:9.1f} ms   "
              f"{rate:10.0f} traj/s   mean events {batch.n_events.mean():.1f}")

    if len(results) == 2:
        speedup = results["python"] / results["compiled"]
        print(f"compiled speedup: {speedup:.1f}x")
    else:
        print("compiled backend unavailable; timed the pure-Python kernel only")


if __name__ == "__main__":
    main()
