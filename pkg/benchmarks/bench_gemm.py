"""Compare the compiled and pure-Python kernels against float64 BLAS GEMM.

    python benchmarks/bench_gemm.py [--sizes 64,256,1024] [--repeat 5]

For each square size n the script times binary_gemm on n x n operands with
every available backend, numpy's float64 matmul on the unpacked operands,
and (for the conv path) im2col on a small feature map. Results are checked
for exact agreement before any timing is reported.
"""
import argparse
import timeit

import numpy as np

from bnnx import tensors
from bnnx.tensors import ConvGeometry, binary_gemm, im2col, pack_signs


def best_of(fn, repeat):
    number = 1
    while timeit.timeit(fn, number=number) < 0.05:
        number *= 2
    return min(timeit.repeat(fn, number=number, repeat=repeat)) / number


def bench_gemm(n, repeat, backends):
    rng = np.random.default_rng(n)
    a = rng.choice([-1.0, 1.0], (n, n))
    b = rng.choice([-1.0, 1.0], (n, n))
    pa, pbt = pack_signs(a), pack_signs(b.T)
    ref = a @ b
    row = {"float64 BLAS": best_of(lambda: a @ b, repeat)}
    for name, mod in backends.items():
        tensors._kernels = mod
        assert np.array_equal(binary_gemm(pa, pbt), ref), name
        row[f"binary/{name}"] = best_of(lambda: binary_gemm(pa, pbt), repeat)
    return row


def bench_im2col(repeat, backends):
    rng = np.random.default_rng(0)
    x = rng.standard_normal((32, 32, 14, 14))
    g = ConvGeometry(32, 64, 3, 3, 1, 1)
    out = {}
    ref = None
    for name, mod in backends.items():
        tensors._kernels = mod
        cols = im2col(x, g)
        ref = cols if ref is None else ref
        assert np.array_equal(cols, ref), name
        out[f"im2col/{name}"] = best_of(lambda: im2col(x, g), repeat)
    return out


def main():
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--sizes", default="64,256,1024")
    ap.add_argument("--repeat", type=int, default=5)
    args = ap.parse_args()
    backends = tensors.available_backends()
    original = tensors._kernels
    try:
        print(f"backends: {', '.join(backends)} (default: {tensors.BACKEND})")
        for n in (int(s) for s in args.sizes.split(",")):
            row = bench_gemm(n, args.repeat, backends)
            base = row["float64 BLAS"]
            cells = "  ".join(f"{k} {v * 1e3:9.3f} ms ({base / v:5.2f}x)" for k, v in row.items())
            print(f"n={n:5d}  {cells}")
        row = bench_im2col(args.repeat, backends)
        print("im2col 32x32x14x14, 3x3 pad 1:  " + "  ".join(f"{k} {v * 1e3:8.3f} ms" for k, v in row.items()))
    finally:
        tensors._kernels = original


if __name__ == "__main__":
    main()
