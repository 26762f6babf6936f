"""Time every hot kernel in its numba and numpy flavour on realistic shapes.

Usage: python3 benchmarks/bench_kernels.py [--repeat N]
"""

import argparse
import time

import numpy as np

from consistmmt.kernels import NUMBA_KERNELS, NUMPY_KERNELS


def cases(rng):
    x = rng.normal(size=(32 * 20, 128)).astype(np.float32)
    g = rng.normal(size=128)
    b = rng.normal(size=128)
    scores = rng.normal(size=(32 * 4 * 20, 21)).astype(np.float32)
    mask = np.ones_like(scores, dtype=bool)
    mask[:, -3:] = False
    p = NUMPY_KERNELS.masked_softmax_fwd(scores, mask)
    _, xhat, rstd = NUMPY_KERNELS.layer_norm_fwd(x, g, b, 1e-5)
    hs = rng.normal(size=(32, 128))
    ha = rng.normal(size=(32, 128))
    idx = rng.integers(0, 10000, size=640)
    src = rng.normal(size=(640, 128)).astype(np.float32)
    m = np.abs(hs[0]) / np.abs(hs[0]).sum()
    n = np.abs(ha[0]) / np.abs(ha[0]).sum()
    return {
        "nearest_target [32x128]": lambda k: k.nearest_target(hs, ha),
        "quantile_coupling [128]": lambda k: k.quantile_coupling(hs[0], m, ha[0], n),
        "layer_norm_fwd [640x128]": lambda k: k.layer_norm_fwd(x, g, b, 1e-5),
        "layer_norm_bwd [640x128]": lambda k: k.layer_norm_bwd(x, xhat, rstd, g),
        "masked_softmax_fwd [2560x21]": lambda k: k.masked_softmax_fwd(scores, mask),
        "softmax_bwd [2560x21]": lambda k: k.softmax_bwd(scores, p),
        "scatter_add_rows [640->10000x128]": lambda k: k.scatter_add_rows(
            np.zeros((10000, 128), np.float32), idx, src
        ),
    }


def best_of(fn, repeat):
    fn()  # warm-up (and JIT compile)
    times = []
    for _ in range(repeat):
        t0 = time.perf_counter()
        fn()
        times.append(time.perf_counter() - t0)
    return min(times)


def main():
    ap = argparse.ArgumentParser()
    ap.add_argument("--repeat", type=int, default=20)
    args = ap.parse_args()
    rng = np.random.default_rng(0)
    print(f"{'kernel':36s} {'numpy ms':>10s} {'numba ms':>10s} {'speedup':>8s}")
    for name, call in cases(rng).items():
        t_np = best_of(lambda: call(NUMPY_KERNELS), args.repeat)
        t_nb = best_of(lambda: call(NUMBA_KERNELS), args.repeat)
        print(f"{name:36s} {t_np * 1e3:10.3f} {t_nb * 1e3:10.3f} {t_np / t_nb:8.2f}x")


if __name__ == "__main__":
    main()
