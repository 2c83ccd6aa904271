"""Time the numpy and numba convolution kernels on decoder-shaped inputs.

Usage: python3 benchmarks/bench_kernels.py [--repeat N]

Both backends are checked for agreement before timing. The numba variants are
warmed up once so compilation is excluded.
"""
import argparse
import time

import numpy as np

from floodlora import kernels
from floodlora._accel import HAS_NUMBA

# (name, input shape, weight shape, stride, padding, transposed)
CASES = [
    ("conv3x3 64->32 @8", (8, 64, 8, 8), (32, 64, 3, 3), 1, 1, False),
    ("conv3x3 32->16 @8", (8, 32, 8, 8), (16, 32, 3, 3), 1, 1, False),
    ("deconv 16->8 @8", (8, 16, 8, 8), (16, 8, 2, 2), 2, 0, True),
    ("deconv 8->8 @32", (8, 8, 32, 32), (8, 8, 2, 2), 2, 0, True),
    ("fusion 16->1 @64", (8, 16, 64, 64), (1, 16, 3, 3), 1, 1, False),
]


def best_of(fn, repeat):
    times = []
    for _ in range(repeat):
        t = time.perf_counter()
        fn()
        times.append(time.perf_counter() - t)
    return min(times)


def bench_case(case, repeat, rng):
    name, x_shape, w_shape, stride, padding, transposed = case
    x = rng.normal(size=x_shape)
    w = rng.normal(size=w_shape)
    if transposed:
        ho = kernels.deconv_output_size(x_shape[2], w_shape[2], stride, padding)
        out_shape = (x_shape[0], w_shape[1], ho, ho)
        fwd = {
            "numpy": lambda: kernels.conv_backward_input_numpy(x, w, out_shape, stride, padding),
            "numba": lambda: kernels.conv_backward_input_numba(x, w, out_shape, stride, padding),
        }
    else:
        fwd = {
            "numpy": lambda: kernels.conv_forward_numpy(x, w, stride, padding),
            "numba": lambda: kernels.conv_forward_numba(x, w, stride, padding),
        }
    ref = fwd["numpy"]()
    row = {"case": name, "numpy": best_of(fwd["numpy"], repeat)}
    if HAS_NUMBA:
        np.testing.assert_allclose(fwd["numba"](), ref, rtol=1e-10, atol=1e-10)
        row["numba"] = best_of(fwd["numba"], repeat)
    return row


def main():
    parser = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    parser.add_argument("--repeat", type=int, default=20)
    args = parser.parse_args()
    rng = np.random.default_rng(0)
    print(f"{'case':22s} {'numpy ms':>10s} {'numba ms':>10s} {'speedup':>8s}")
    for case in CASES:
        row = bench_case(case, args.repeat, rng)
        if "numba" in row:
            print(f"{row['case']:22s} {1e3 * row['numpy']:10.3f} {1e3 * row['numba']:10.3f} "
                  f"{row['numpy'] / row['numba']:8.2f}")
        else:
            print(f"{row['case']:22s} {1e3 * row['numpy']:10.3f} {'n/a':>10s} {'n/a':>8s}")
    if not HAS_NUMBA:
        print("numba unavailable or disabled; only the numpy path was timed")


if __name__ == "__main__":
    main()
