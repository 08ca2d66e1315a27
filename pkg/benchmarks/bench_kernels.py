"""Time the compiled kernels against the pure-Python fallback.

Run with ``python3 benchmarks/bench_kernels.py``. Each kernel is called
on identical inputs through both backends; the table reports the best
of ``--repeat`` timings and the speed-up.
"""

import argparse
import timeit

import numpy as np

from arealrisk import _kernels
from arealrisk._kernels import _fallback
from arealrisk.lattice import build_adjacency, grid_regions


def cases(rng):
    g = build_adjacency(grid_regions(20, 20), "queen")
    indptr, indices = g.csr
    n = g.n
    base = rng.normal(size=(n, 12))
    y = rng.poisson(4, size=(n, 12)).astype(float)
    z, logu = rng.normal(size=n), np.log(rng.random(n))
    zmat = rng.normal(size=(999, n))
    small = build_adjacency(grid_regions(2, 2), "rook")
    s_ptr, s_idx = small.csr
    normals = rng.normal(size=(20000, 4))
    ang = np.linspace(0, 2 * np.pi, 201)
    rx, ry = np.cos(ang), np.sin(ang)
    rx[-1], ry[-1] = rx[0], ry[0]
    px, py = rng.uniform(-1.2, 1.2, 10000), rng.uniform(-1.2, 1.2, 10000)
    a = rng.normal(size=(200, 40))
    gram, c = a.T @ a / 200, rng.normal(size=40)

    def sweep(mod):
        return lambda: mod.car_sweep(np.zeros(n), base, y, 2.0, 0, 1.0, 1.0, indptr, indices,
                                     np.full(n, 0.3), z, logu, np.zeros(n, dtype=np.int64))

    return {
        "car_sweep (400 sites x 12 years)": sweep,
        "moran_cross_products (999 x 400)":
            lambda mod: lambda: mod.moran_cross_products(zmat, indptr, indices),
        "proper_car_gibbs (2e4 sweeps, 4 sites)":
            lambda mod: lambda: mod.proper_car_gibbs(0.2, np.ones(4), s_ptr, s_idx, normals, 100),
        "ring_crossing_parity (1e4 pts, 200 edges)":
            lambda mod: lambda: mod.ring_crossing_parity(px, py, rx, ry),
        "ring_on_boundary (1e4 pts, 200 edges)":
            lambda mod: lambda: mod.ring_on_boundary(px, py, rx, ry, 1e-9),
        "lasso_cd_gram (p=40)":
            lambda mod: lambda: mod.lasso_cd_gram(gram, c, np.zeros(40), 0.05, 1e-12, 1000,
                                                  np.empty(1000)),
    }


def main(argv=None):
    ap = argparse.ArgumentParser(description=__doc__.split("\n\n")[0])
    ap.add_argument("--repeat", type=int, default=5)
    ap.add_argument("--number", type=int, default=3)
    args = ap.parse_args(argv)
    if _kernels.BACKEND != "cython":
        print("compiled extension not built; only the fallback can be timed")
    rng = np.random.default_rng(0)
    width = 44
    print(f"{'kernel':<{width}} {'cython ms':>10} {'python ms':>10} {'speed-up':>9}")
    for name, make in cases(rng).items():
        times = []
        for mod in (_kernels, _fallback):
            t = min(timeit.repeat(make(mod), number=args.number, repeat=args.repeat))
            times.append(1e3 * t / args.number)
        print(f"{name:<{width}} {times[0]:>10.3f} {times[1]:>10.3f} {times[1] / times[0]:>8.1f}x")


if __name__ == "__main__":
    main()
