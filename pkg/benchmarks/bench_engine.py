"""Compare the python and compiled step kernels.

Two views: kernel microbenchmarks (tight loop over one operator application
or one moment update) and whole-run timings, where the python-side event
loop, oracle, and recording overhead dilute whatever the kernels gain.

Usage: python benchmarks/bench_engine.py [--steps N] [--d D]
"""

import argparse
import time

import numpy as np

from mixsim.engine import RunConfig, available_backends, get_backend, run
from mixsim.optimizers import StepSchedule
from mixsim.protocols import OP_AVG, OP_GOSSIP, ProtocolSpec, ring_topology


def time_call(fn, reps):
    t0 = time.perf_counter()
    for _ in range(reps):
        fn()
    return (time.perf_counter() - t0) / reps


def bench_kernels(backend, n, d, reps):
    mod = get_backend(backend)
    rng = np.random.default_rng(0)
    x = rng.standard_normal(n * d)
    weights = ring_topology(n).weights
    rows = {}
    rows["apply_slot avg"] = time_call(
        lambda: mod.apply_slot(x, n, d, OP_AVG, 0, 0, 0.0, None, None), reps
    )
    rows["apply_slot gossip"] = time_call(
        lambda: mod.apply_slot(x, n, d, OP_GOSSIP, 0, 0, 0.0, weights, None), reps
    )
    m = np.zeros(d)
    v = np.full(d, 1e-8)
    g = rng.standard_normal(d)
    rows["sam_update p=1/2"] = time_call(
        lambda: mod.sam_update(m, v, g, 0.5, 0.9, 0.999), reps
    )
    return rows


def bench_run(backend, T, d):
    spec = ProtocolSpec(kind="sync_gossip", n=8, d=d, topology="ring")
    cfg = RunConfig(
        protocol=spec,
        schedule=StepSchedule(kind="constant", alpha0=0.01),
        T=T,
        objective="sigmoid_sum",
        optimizer="amsgrad",
        sigma=1.0,
        seed=0,
    )
    t0 = time.perf_counter()
    run(cfg, backend=backend)
    return time.perf_counter() - t0


def main():
    ap = argparse.ArgumentParser()
    ap.add_argument("--steps", type=int, default=4000)
    ap.add_argument("--d", type=int, default=64)
    ap.add_argument("--reps", type=int, default=20000)
    args = ap.parse_args()

    backends = available_backends()
    print(f"backends: {backends}")
    if "compiled" not in backends:
        print("compiled core not built; run pip install -e . first")
        return

    print(f"\nkernel microbenchmarks (n=8, d={args.d}, {args.reps} reps):")
    py = bench_kernels("python", 8, args.d, args.reps)
    cy = bench_kernels("compiled", 8, args.d, args.reps)
    for name in py:
        print(
            f"  {name:18s} python {py[name] * 1e6:8.2f} us"
            f"  compiled {cy[name] * 1e6:8.2f} us"
            f"  speedup {py[name] / cy[name]:5.2f}x"
        )

    print(f"\nwhole runs (sync_gossip ring n=8, amsgrad, T={args.steps}, d={args.d}):")
    tp = bench_run("python", args.steps, args.d)
    tc = bench_run("compiled", args.steps, args.d)
    print(f"  python   {tp:7.3f} s  ({tp / args.steps * 1e6:6.1f} us/step)")
    print(f"  compiled {tc:7.3f} s  ({tc / args.steps * 1e6:6.1f} us/step)")
    print(f"  speedup  {tp / tc:5.2f}x (event loop and oracle stay in python)")


if __name__ == "__main__":
    main()
