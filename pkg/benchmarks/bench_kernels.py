"""Compare the compiled kernels with the numpy fallback.

    python3 benchmarks/bench_kernels.py [--repeat 5]
"""
import argparse
import time

import numpy as np

from sdconv import kernels


def best_of(fn, repeat):
    times = []
    for _ in range(repeat):
        t0 = time.perf_counter()
        fn()
        times.append(time.perf_counter() - t0)
    return min(times)


def cases(rng):
    x = rng.standard_normal((32, 16, 30, 30)).astype(np.float32)
    cols = kernels.python_backend.im2col(x, 3, 3, 1)
    w = rng.standard_normal((32, 32, 16, 3, 3)).astype(np.float32)
    w[rng.random(w.shape) < 0.7] = 0.0  # 30% density
    b = rng.standard_normal((32, 32)).astype(np.float32)
    return {
        "im2col 32x16x30x30 k3": lambda be: be.im2col(x, 3, 3, 1),
        "col2im 32x16x30x30 k3": lambda be: be.col2im(cols, 16, 30, 30, 3, 3, 1),
        "sparse_conv 32x16->32 30% dense": lambda be: be.sparse_conv2d(x, w, b, 1, 1),
    }


def main():
    ap = argparse.ArgumentParser()
    ap.add_argument("--repeat", type=int, default=5)
    args = ap.parse_args()
    if kernels.compiled_backend is None:
        raise SystemExit("compiled extension not built; run `pip install -e . --no-build-isolation`")
    rng = np.random.default_rng(0)
    print(f"{'kernel':36s} {'python ms':>10s} {'compiled ms':>12s} {'speedup':>8s}")
    for name, fn in cases(rng).items():
        py = best_of(lambda: fn(kernels.python_backend), args.repeat)
        cc = best_of(lambda: fn(kernels.compiled_backend), args.repeat)
        print(f"{name:36s} {py * 1e3:10.2f} {cc * 1e3:12.2f} {py / cc:7.1f}x")


if __name__ == "__main__":
    main()
