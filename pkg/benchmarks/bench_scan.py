"""Time the selective-scan kernels: numba vs pure numpy.

    python3 benchmarks/bench_scan.py --lengths 64 512 4096 --repeat 5
"""
import argparse
import time

import numpy as np

from diffcl import kernels
from diffcl._accel import HAVE_NUMBA


def case(rng, B, L, D, N):
    return (rng.normal(size=(B, L, D)), rng.uniform(0.0, 1.0, size=(B, L, D, N)),
            rng.normal(size=(B, L, D, N)), rng.normal(size=(B, L, N)))


def best_of(fn, repeat):
    times = []
    for _ in range(repeat):
        t0 = time.perf_counter()
        fn()
        times.append(time.perf_counter() - t0)
    return min(times)


def main(argv=None):
    p = argparse.ArgumentParser(description=__doc__, formatter_class=argparse.RawDescriptionHelpFormatter)
    p.add_argument("--lengths", type=int, nargs="+", default=[64, 512, 4096])
    p.add_argument("--batch", type=int, default=2)
    p.add_argument("--channels", type=int, default=32)
    p.add_argument("--state", type=int, default=16)
    p.add_argument("--repeat", type=int, default=5)
    p.add_argument("--seed", type=int, default=0)
    args = p.parse_args(argv)

    rng = np.random.default_rng(args.seed)
    backends = [("numpy", False)] + ([("numba", True)] if HAVE_NUMBA else [])
    if not HAVE_NUMBA:
        print("numba unavailable or disabled; timing the numpy path only")
    print(f"{'L':>6} {'backend':>8} {'forward ms':>11} {'backward ms':>12}")
    for L in args.lengths:
        x, a, b, c = case(rng, args.batch, L, args.channels, args.state)
        gy = rng.normal(size=x.shape)
        ref = None
        for name, flag in backends:
            # warm-up also triggers compilation
            y, hs = kernels.scan_forward(x, a, b, c, use_numba=flag)
            kernels.scan_backward(gy, x, a, b, c, hs, use_numba=flag)
            if ref is None:
                ref = y
            else:
                assert np.allclose(y, ref, rtol=1e-10, atol=1e-10), "backends disagree"
            fwd = best_of(lambda: kernels.scan_forward(x, a, b, c, use_numba=flag), args.repeat)
            bwd = best_of(lambda: kernels.scan_backward(gy, x, a, b, c, hs, use_numba=flag), args.repeat)
            print(f"{L:>6} {name:>8} {1e3 * fwd:>11.2f} {1e3 * bwd:>12.2f}")


if __name__ == "__main__":
    main()
