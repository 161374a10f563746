"""Compare the compiled and pure-Python kernel backends.

Runs the Metropolis sweep kernel and the PCD-1 update kernel on identical
inputs with each backend, checks that the results agree, and prints the
median wall time and the speed-up.  The PCD kernel is bound by scalar
``exp`` calls in the portable build, so its advantage shrinks as the hidden
layer grows, where NumPy's vectorized ``exp`` catches up.

    python3 benchmarks/bench_kernels.py [--repeats 5] [--quick]
"""
import argparse
import statistics
import time

import numpy as np

from landmark_maxent import cubic as cb
from landmark_maxent import kernels


def metropolis_case(r, chains, sweeps, thin, seed=0):
    rng = np.random.default_rng(seed)
    A = rng.standard_normal((r, r))
    J = A @ A.T / r + np.eye(r)
    Q = cb.symmetrize(0.1 * rng.standard_normal((r, r, r)))
    h = 0.2 * rng.standard_normal(r)
    lo, hi = np.full(r, -4.0), np.full(r, 4.0)
    x = rng.uniform(-1, 1, (chains, r))
    U = rng.random((sweeps, chains, r))
    L = np.log(rng.random((sweeps, chains, r)))
    out = np.zeros((sweeps // thin, chains, r))
    return [x, h, J, Q, lo, hi, U, L, thin, out]


def pcd_case(nv, nh, steps, batch, seed=0):
    rng = np.random.default_rng(seed)
    data = rng.standard_normal((5000, nv))
    return [
        0.1 * rng.standard_normal((nv, nh)), np.zeros(nh), np.zeros(nv), np.log(np.full(nv, 0.5)), data,
        rng.integers(0, len(data), (steps, batch)).astype(np.int64), data[:batch].copy(),
        rng.random((steps, batch, nh)), rng.standard_normal((steps, batch, nv)), np.linspace(2e-3, 2e-5, steps),
        0, np.zeros(steps),
    ]


def fresh(args):
    return [np.copy(a) if isinstance(a, np.ndarray) else a for a in args]


def timed(fn, args, repeats):
    times, result = [], None
    for _ in range(repeats):
        a = fresh(args)
        t0 = time.perf_counter()
        fn(*a)
        times.append(time.perf_counter() - t0)
        result = a
    return statistics.median(times), result


def main():
    p = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    p.add_argument("--repeats", type=int, default=5)
    p.add_argument("--quick", action="store_true", help="smaller problem sizes")
    args = p.parse_args()
    try:
        compiled = kernels.get_backend("cython")
    except ImportError:
        print("compiled extension not built; nothing to compare")
        return
    pure = kernels.get_backend("python")
    k = 10 if args.quick else 1
    cases = [
        ("metropolis r=4, 10 chains", "metropolis_sweeps", metropolis_case(4, 10, 20_000 // k, 10), (0, 9)),
        ("metropolis r=10, 10 chains", "metropolis_sweeps", metropolis_case(10, 10, 10_000 // k, 10), (0, 9)),
        ("pcd Nv=2, Nh=4, batch 200", "pcd_steps", pcd_case(2, 4, 5_000 // k, 200), (0, 1, 2)),
        ("pcd Nv=4, Nh=16, batch 200", "pcd_steps", pcd_case(4, 16, 5_000 // k, 200), (0, 1, 2)),
        ("pcd Nv=10, Nh=20, batch 200", "pcd_steps", pcd_case(10, 20, 2_000 // k, 200), (0, 1, 2)),
    ]
    print(f"{'case':32s} {'python [s]':>11s} {'cython [s]':>11s} {'speed-up':>9s} {'max diff':>9s}")
    for name, fn, inputs, check in cases:
        t_py, r_py = timed(getattr(pure, fn), inputs, max(1, args.repeats // 2))
        t_cy, r_cy = timed(getattr(compiled, fn), inputs, args.repeats)
        diff = max(float(np.abs(r_py[i] - r_cy[i]).max()) for i in check)
        print(f"{name:32s} {t_py:11.4f} {t_cy:11.4f} {t_py / t_cy:8.1f}x {diff:9.1e}")


if __name__ == "__main__":
    main()
