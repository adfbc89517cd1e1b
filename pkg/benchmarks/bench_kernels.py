"""Time the numba kernels against their pure-numpy twins.

Both variants are called directly, so the comparison does not depend on
REFKV_NUMBA.  Each kernel is warmed up once (JIT compile or cache load),
checked for agreement, then timed as the best of several repeats.

    python benchmarks/bench_kernels.py [--repeats 5] [--scale 1]
"""
import argparse
import time

import numpy as np

from refkv import kernels
from refkv.degrade import gaussian_kernel


def best_of(fn, repeats):
    best = float("inf")
    for _ in range(repeats):
        t0 = time.perf_counter()
        fn()
        best = min(best, time.perf_counter() - t0)
    return best


def cases(scale):
    rng = np.random.default_rng(0)
    x = rng.normal(size=(8 * scale, 32, 16, 16)).astype(np.float32)
    cols = kernels.im2col_numpy(x, 3, 3, 1, 1)
    n = 400 * scale
    pts = rng.normal(size=(n, 16))
    pts /= np.linalg.norm(pts, axis=1, keepdims=True)
    dist = np.clip(1.0 - pts @ pts.T, 0.0, 2.0)
    np.fill_diagonal(dist, 0.0)
    m = 64
    to_target = rng.random(m)
    pair = np.abs(rng.normal(size=(m, m)))
    pair = pair + pair.T
    np.fill_diagonal(pair, 0.0)
    img = rng.random((3, 64 * scale, 64 * scale))
    k = gaussian_kernel(4.0)
    return [
        ("im2col", lambda f: f(x, 3, 3, 1, 1), kernels.im2col_numba, kernels.im2col_numpy),
        ("col2im", lambda f: f(cols, *x.shape, 3, 3, 1, 1), kernels.col2im_numba, kernels.col2im_numpy),
        ("threshold_components", lambda f: f(dist, 0.9), kernels.threshold_components_numba,
         kernels.threshold_components_numpy),
        ("fps_order", lambda f: f(to_target, pair), kernels.fps_order_numba, kernels.fps_order_numpy),
        ("blur_axis", lambda f: f(img, k, 2), kernels.blur_axis_numba, kernels.blur_axis_numpy),
        ("bilinear_resize", lambda f: f(img, 17 * scale, 23 * scale), kernels.bilinear_resize_numba,
         kernels.bilinear_resize_numpy),
    ]


def main(argv=None):
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--repeats", type=int, default=5)
    ap.add_argument("--scale", type=int, default=1)
    args = ap.parse_args(argv)
    print(f"{'kernel':<22}{'numba ms':>10}{'numpy ms':>10}{'speedup':>9}  agree")
    for name, call, fast, slow in cases(args.scale):
        a, b = call(fast), call(slow)
        if name == "threshold_components":
            agree = bool(np.array_equal(a, b))
        else:
            agree = bool(np.allclose(a, b, rtol=1e-5, atol=1e-6))
        t_fast = best_of(lambda: call(fast), args.repeats)
        t_slow = best_of(lambda: call(slow), args.repeats)
        print(f"{name:<22}{t_fast * 1e3:>10.3f}{t_slow * 1e3:>10.3f}{t_slow / t_fast:>8.1f}x  {agree}")


if __name__ == "__main__":
    main()
