"""Time the hot kernels under the numba and numpy backends.

    python3 benchmarks/bench_kernels.py [--n 20000] [--q 64] [--repeat 5]

Each kernel is run once per backend to warm up (JIT compile), then timed as
the best of ``--repeat`` runs.  Outputs of the two backends are compared so a
speedup never hides a divergence.
"""

import argparse
import time

import numpy as np

from sparsefield import kernels
from sparsefield._accel import HAVE_NUMBA, set_backend
from sparsefield.geometry import SpatialIndex


def best_of(fn, repeat):
    fn()
    times = []
    for _ in range(repeat):
        t0 = time.perf_counter()
        fn()
        times.append(time.perf_counter() - t0)
    return min(times)


def max_diff(a, b):
    worst = 0.0
    for x, y in zip(a, b):
        x, y = np.asarray(x, float), np.asarray(y, float)
        both_inf = np.isinf(x) & (x == y)
        if x.size:
            with np.errstate(invalid="ignore"):
                d = np.abs(x - y)
            worst = max(worst, float(np.max(np.where(both_inf, 0.0, d))))
    return worst


def cases(n, q, c, seed):
    rng = np.random.default_rng(seed)
    pts = rng.uniform(-0.2, 0.2, size=(n, 3))
    feats = rng.normal(size=(n, c))
    queries = rng.uniform(-0.2, 0.2, size=(q, 3))
    ptr, ids = SpatialIndex(pts).radius_neighbors_all(0.02)
    centers = rng.uniform(-0.2, 0.2, size=(43, 3))
    radii = rng.uniform(0.005, 0.02, size=43)
    return {
        "idw": lambda: kernels.idw(pts, feats, queries, 1e-6),
        "idw+grad": lambda: kernels.idw(pts, feats, queries, 1e-6, want_grad=True),
        "votes": lambda: kernels.neighbour_votes(feats, ptr, ids, 1.0),
        "penetration": lambda: kernels.penetration(pts, centers, radii),
    }


def main(argv=None):
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--n", type=int, default=20000, help="cloud size")
    ap.add_argument("--q", type=int, default=64, help="query count")
    ap.add_argument("--c", type=int, default=32, help="channels")
    ap.add_argument("--repeat", type=int, default=5)
    ap.add_argument("--seed", type=int, default=0)
    args = ap.parse_args(argv)

    backends = ["numba", "numpy"] if HAVE_NUMBA else ["numpy"]
    fns = cases(args.n, args.q, args.c, args.seed)
    print(f"N={args.n} Q={args.q} C={args.c}")
    print(f"{'kernel':<12} " + " ".join(f"{b:>10}" for b in backends) + "   speedup  max|diff|")
    prev = set_backend("numpy")
    try:
        for name, fn in fns.items():
            times, outs = [], []
            for b in backends:
                set_backend(b)
                times.append(best_of(fn, args.repeat))
                outs.append(fn())
            diff = max_diff(*outs) if len(outs) == 2 else 0.0
            speed = times[-1] / times[0] if len(times) == 2 else 1.0
            print(f"{name:<12} " + " ".join(f"{t * 1e3:9.2f}ms" for t in times) + f"   {speed:6.1f}x  {diff:.1e}")
    finally:
        set_backend(prev)


if __name__ == "__main__":
    main()
