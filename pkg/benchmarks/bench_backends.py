"""Time the compiled core against the pure-Python fallback.

Run with ``python benchmarks/bench_backends.py [--repeat N] [--quick]``.
Prints one row per kernel: best-of-N wall time for each backend and the
speed-up of the compiled one.  Both backends are checked to agree first.
"""

import argparse
import time

import numpy as np

from rslkit import _backend


def best_of(fn, repeat):
    best = float("inf")
    for _ in range(repeat):
        t0 = time.perf_counter()
        fn()
        best = min(best, time.perf_counter() - t0)
    return best


def cases(quick):
    rng = np.random.default_rng(0)
    n = 300 if quick else 800
    t = np.sort(rng.uniform(-10000, 2000, n))
    lat, lon = rng.uniform(-60, 60, n), rng.uniform(-180, 180, n)
    r = np.abs(t[:, None] - t[None, :])
    g = np.array([500.0, 1200.0])
    betas = np.array([0.001, 0.003, 0.0005])
    w = rng.uniform(0.5, 2.0, n)
    y = rng.standard_normal(n)

    N, ns, m = (300 if quick else 2000), 8, 4
    Phi = np.eye(ns) + 0.01 * rng.standard_normal((ns, ns))
    A = rng.standard_normal((ns, ns))
    Q = 0.01 * A @ A.T
    H = rng.standard_normal((m, ns))
    R = 0.1 * np.eye(m)
    Z = rng.standard_normal((N, m))
    Z[rng.random(Z.shape) < 0.2] = np.nan
    Bu = np.zeros((N, ns))

    return {
        f"abs_diff n={n}": ("abs_diff", (t, t)),
        f"angular_distance n={n}": ("angular_distance", (lat, lon, lat, lon)),
        f"matern nu=3/2 n={n}": ("matern", (r, 1.0, 300.0, 3)),
        f"matern_sym nu=3/2 n={n}": ("matern_sym", (r, 1.0, 300.0, 3)),
        f"changepoint_eval n={n}": ("changepoint_eval", (t, g, 0.0, betas)),
        f"changepoint_normal_eq n={n}": ("changepoint_normal_eq", (t, y, w, g)),
        f"kalman_forward N={N} states={ns}": ("kalman_forward", (Phi, Bu, Q, H, R, Z, np.zeros(ns), np.eye(ns))),
        f"information_backward N={N} states={ns}": ("information_backward", (Phi, Bu, Q, H, R, Z)),
    }


def agree(a, b):
    if isinstance(a, tuple):
        return all(agree(x, y) for x, y in zip(a, b))
    if np.isscalar(a) or np.ndim(a) == 0:
        return a == b or np.isclose(a, b, rtol=1e-9, atol=1e-12)
    return np.allclose(np.asarray(a), np.asarray(b), rtol=1e-9, atol=1e-12, equal_nan=True)


def main():
    p = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    p.add_argument("--repeat", type=int, default=5)
    p.add_argument("--quick", action="store_true", help="smaller problems")
    args = p.parse_args()

    have = _backend.available()
    print(f"backends available: {', '.join(have)}; default {_backend.BACKEND}")
    if "cython" not in have:
        print("compiled core not built; nothing to compare")
        return
    print(f"{'kernel':42s} {'cython (ms)':>12s} {'python (ms)':>12s} {'speed-up':>9s}")
    for label, (name, call) in cases(args.quick).items():
        c, f = _backend.get(name, "cython"), _backend.get(name, "python")
        if not agree(c(*call), f(*call)):
            raise SystemExit(f"{label}: backends disagree")
        tc = best_of(lambda: c(*call), args.repeat)
        tp = best_of(lambda: f(*call), max(1, args.repeat // 2))
        print(f"{label:42s} {1e3 * tc:12.3f} {1e3 * tp:12.3f} {tp / tc:8.1f}x")


if __name__ == "__main__":
    main()
