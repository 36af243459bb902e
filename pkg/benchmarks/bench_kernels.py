"""Time each hot kernel under the numba and numpy backends.

Run ``python benchmarks/bench_kernels.py [--points N] [--repeat R]``.
Prints one row per kernel with the best time per call for each backend,
the speedup, and the largest absolute difference between the outputs.
"""
import argparse
import time

import numpy as np

from anosovfam._kernels import get_backend


def _cases(n, rng):
    d = 2
    P = rng.standard_normal((n, d, d))
    J = rng.standard_normal((n, d, d))
    U = np.linalg.qr(rng.standard_normal((n, d, 1)))[0]
    V = np.linalg.qr(rng.standard_normal((n, d, 1)))[0]
    X = rng.uniform(0.0, 2.0 * np.pi, (n, d))
    M, T = 16, 6
    axes = rng.integers(0, d, (M, T))
    freqs = rng.integers(-2, 3, (M, T, d)).astype(float)
    amps = 0.05 * rng.standard_normal((M, T))
    phases = rng.uniform(0.0, 2.0 * np.pi, (M, T))
    idx = rng.integers(0, M, n)
    A = np.broadcast_to(np.array([[2.0, 1.0], [1.0, 1.0]]), (M, d, d)).copy()
    b = np.zeros((M, d))
    Ainv = np.linalg.inv(A)
    Q = rng.uniform(0.0, 2.0 * np.pi, (n, d))
    return {
        "accumulate": (P, J),
        "top_left_subspace": (P, 1),
        "subspace_distance": (U, V),
        "op_norm": (P,),
        "cone_margins": (P, rng.standard_normal((64, d)), 1, 0.2, True),
        "trig_sum": (X, axes[0], freqs[0], amps[0], phases[0]),
        "trig_sum_indexed": (X, idx, axes, freqs, amps, phases),
        "bank_inverse": (Q, idx, A, b, Ainv, axes, freqs, amps, phases, 1e-12, 50),
    }


def _best(fn, args, repeat):
    fn(*args)  # warm-up (triggers compilation for numba)
    best = np.inf
    for _ in range(repeat):
        t = time.perf_counter()
        out = fn(*args)
        best = min(best, time.perf_counter() - t)
    return best, out


def _maxdiff(a, b):
    a = a if isinstance(a, tuple) else (a,)
    b = b if isinstance(b, tuple) else (b,)
    return max(float(np.max(np.abs(np.asarray(x) - np.asarray(y)), initial=0.0))
               for x, y in zip(a, b))


def main():
    parser = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    parser.add_argument("--points", type=int, default=4096)
    parser.add_argument("--repeat", type=int, default=20)
    parser.add_argument("--seed", type=int, default=0)
    args = parser.parse_args()
    nb, npy = get_backend("numba"), get_backend("numpy")
    cases = _cases(args.points, np.random.default_rng(args.seed))
    print(f"{'kernel':<20} {'numba [ms]':>11} {'numpy [ms]':>11} {'speedup':>8} {'max diff':>10}")
    for name, call_args in cases.items():
        t_nb, out_nb = _best(getattr(nb, name), call_args, args.repeat)
        t_np, out_np = _best(getattr(npy, name), call_args, args.repeat)
        print(f"{name:<20} {1e3 * t_nb:11.3f} {1e3 * t_np:11.3f} {t_np / t_nb:8.1f} "
              f"{_maxdiff(out_nb, out_np):10.2e}")


if __name__ == "__main__":
    main()
