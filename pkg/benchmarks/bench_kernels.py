#!/usr/bin/env python3
"""Benchmark the numba kernels against the pure-numpy fallback.

Times conv2d forward/backward and 2x2 maxpool on training-shaped batches
and prints a side-by-side table. Run from the repo root:

    python3 benchmarks/bench_kernels.py
    python3 benchmarks/bench_kernels.py --batch 32 --size 32 --filters 64
"""

import argparse
import time

import numpy as np

from layerlab import kernels


def time_call(fn, *args, repeats: int, warmup: int = 2) -> float:
    for _ in range(warmup):
        fn(*args)
    best = float("inf")
    for _ in range(repeats):
        t0 = time.perf_counter()
        fn(*args)
        best = min(best, time.perf_counter() - t0)
    return best


def main() -> None:
    parser = argparse.ArgumentParser(description=__doc__)
    parser.add_argument("--batch", type=int, default=16)
    parser.add_argument("--channels", type=int, default=3)
    parser.add_argument("--filters", type=int, default=32)
    parser.add_argument("--size", type=int, default=28)
    parser.add_argument("--repeats", type=int, default=5)
    args = parser.parse_args()

    rng = np.random.default_rng(0)
    n, c, f, hw = args.batch, args.channels, args.filters, args.size
    xp = rng.normal(size=(n, c, hw + 2, hw + 2)).astype(np.float32)  # pre-padded
    w = rng.normal(size=(f, c, 3, 3)).astype(np.float32)
    pool_in = rng.normal(size=(n, f, hw, hw)).astype(np.float32)

    backends = ["numpy"]
    if kernels._numba_available():
        backends.append("numba")
    else:
        print("numba not importable; timing the numpy path only")

    cases = []
    for backend in backends:
        impl = kernels.get_impl(backend)
        fwd = time_call(impl["conv2d_forward"], xp, w, 1, repeats=args.repeats)
        dout = impl["conv2d_forward"](xp, w, 1)
        bwd = time_call(impl["conv2d_backward"], xp, w, dout, 1, True,
                        repeats=args.repeats)
        pool_out, idx = impl["maxpool2_forward"](pool_in)
        pf = time_call(impl["maxpool2_forward"], pool_in, repeats=args.repeats)
        pb = time_call(impl["maxpool2_backward"], pool_out, idx, repeats=args.repeats)
        cases.append((backend, fwd, bwd, pf, pb))

    shape = f"[{n},{c},{hw},{hw}] x {f} filters"
    print(f"\nkernel timings, best of {args.repeats} ({shape}); seconds")
    print(f"{'backend':<8} {'conv fwd':>10} {'conv bwd':>10} {'pool fwd':>10} {'pool bwd':>10}")
    for backend, fwd, bwd, pf, pb in cases:
        print(f"{backend:<8} {fwd:>10.5f} {bwd:>10.5f} {pf:>10.5f} {pb:>10.5f}")
    if len(cases) == 2:
        base, fast = cases[0], cases[1]
        print(f"\nnumba speedup over numpy: "
              f"conv fwd x{base[1] / fast[1]:.1f}, conv bwd x{base[2] / fast[2]:.1f}, "
              f"pool fwd x{base[3] / fast[3]:.1f}, pool bwd x{base[4] / fast[4]:.1f}")
        a = kernels.get_impl("numpy")["conv2d_forward"](xp, w, 1)
        b = kernels.get_impl("numba")["conv2d_forward"](xp, w, 1)
        print(f"max |numpy - numba| on conv fwd: {np.abs(a - b).max():.2e}")


if __name__ == "__main__":
    main()
