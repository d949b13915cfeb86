"""Time the compiled kernels against the numpy fallback.

    python3 benchmarks/bench_kernels.py [--repeat 5]

Prints one line per kernel and shape: best-of-N seconds for each backend,
the speedup, and whether the two outputs are bit-identical.
"""
import argparse
import timeit

import numpy as np

from psprune.kernels import compiled_available, get_backend

CASES = [
    # (N, C, H, W, R, S, stride, pad)
    (64, 16, 16, 16, 3, 3, 1, 1),
    (64, 32, 8, 8, 3, 3, 1, 1),
    (16, 3, 32, 32, 3, 3, 1, 1),
    (64, 16, 16, 16, 3, 3, 2, 1),
]


def _best(fn, repeat):
    return min(timeit.repeat(fn, number=1, repeat=repeat))


def run(repeat):
    rng = np.random.default_rng(0)
    py = get_backend("python")
    cy = get_backend("cython")
    rows = []
    for (N, C, H, W, R, S, st, pd) in CASES:
        x = rng.normal(size=(N, C, H, W))
        tag = f"N{N} C{C} {H}x{W} k{R} s{st}"
        a, b = py.im2col(x, R, S, st, pd), cy.im2col(x, R, S, st, pd)
        rows.append(("im2col", tag, _best(lambda: py.im2col(x, R, S, st, pd), repeat),
                     _best(lambda: cy.im2col(x, R, S, st, pd), repeat), np.array_equal(a, b)))
        cols = rng.normal(size=a.shape)
        a, b = py.col2im(cols, N, C, H, W, R, S, st, pd), cy.col2im(cols, N, C, H, W, R, S, st, pd)
        rows.append(("col2im", tag, _best(lambda: py.col2im(cols, N, C, H, W, R, S, st, pd), repeat),
                     _best(lambda: cy.col2im(cols, N, C, H, W, R, S, st, pd), repeat), np.array_equal(a, b)))
    for shape in [(64, 576), (1152, 64), (4096, 16)]:
        m = rng.normal(size=shape)
        rows.append(("column_sums", f"{shape[0]}x{shape[1]}", _best(lambda: py.column_sums(m), repeat),
                     _best(lambda: cy.column_sums(m), repeat), np.array_equal(py.column_sums(m), cy.column_sums(m))))
    for (n, k, p) in [(16, 144, 64), (32, 288, 256)]:
        a_, b_ = rng.normal(size=(n, k)), rng.normal(size=(k, p))
        rows.append(("matmul_ordered", f"{n}x{k}x{p}", _best(lambda: py.matmul_ordered(a_, b_), repeat),
                     _best(lambda: cy.matmul_ordered(a_, b_), repeat),
                     np.array_equal(py.matmul_ordered(a_, b_), cy.matmul_ordered(a_, b_))))
    return rows


def main():
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--repeat", type=int, default=5)
    args = ap.parse_args()
    if not compiled_available():
        raise SystemExit("compiled extension not built; run `pip install -e . --no-build-isolation` first")
    print(f"{'kernel':<15}{'case':<24}{'python s':>11}{'cython s':>11}{'speedup':>9}  identical")
    for name, tag, tp, tc, same in run(args.repeat):
        print(f"{name:<15}{tag:<24}{tp:>11.5f}{tc:>11.5f}{tp / tc:>8.2f}x  {same}")


if __name__ == "__main__":
    main()
