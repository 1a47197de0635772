"""Compare the numba and pure-numpy implementations of the hot kernels.

Both implementations are imported side by side, so one process times both
regardless of ``MORPHGEN_DISABLE_NUMBA``.  Outputs are checked for agreement
before timing.
"""
import argparse
import time

import numpy as np

from morphgen.kernels import conv, mcubes


def best_of(fn, repeats):
    fn()  # warm-up, includes JIT compilation
    times = []
    for _ in range(repeats):
        start = time.perf_counter()
        fn()
        times.append(time.perf_counter() - start)
    return min(times)


def conv_cases(batch, channels, size):
    rng = np.random.default_rng(0)
    x = rng.standard_normal((batch, channels, size, size, size)).astype(np.float32)
    for k, s, p in ((3, 1, 1), (4, 2, 1)):
        ext = tuple(conv.conv_output_extent(n, k, s, p) for n in x.shape[2:])
        cols = conv._im2col_numpy(x, k, s, p, *ext)
        assert np.array_equal(cols, conv._im2col_numba(x, k, s, p, *ext))
        yield (
            f"im2col k{k} s{s}",
            lambda: conv._im2col_numba(x, k, s, p, *ext),
            lambda: conv._im2col_numpy(x, k, s, p, *ext),
        )
        yield (
            f"col2im k{k} s{s}",
            lambda: conv._col2im_numba(cols, *x.shape, k, s, p, *ext),
            lambda: conv._col2im_numpy(cols, *x.shape, k, s, p, *ext),
        )


def mc_case(size):
    g = np.indices((size, size, size)).astype(np.float64) - (size - 1) / 2
    field = size / 3 - np.sqrt((g**2).sum(0)) + 0.5 * np.random.default_rng(1).standard_normal(g.shape[1:])
    tables = (mcubes.TRI_TABLE, mcubes.TRI_COUNT, mcubes.EDGE_C0, mcubes.EDGE_AXIS, mcubes.CORNER_OFFSETS, mcubes.EDGE_T_EPS)
    a = mcubes._mc_numba(field, 0.0, *tables)
    b = mcubes._mc_numpy(field, 0.0, *tables)
    assert np.array_equal(a[0], b[0]) and np.array_equal(a[1], b[1])
    return (
        f"marching cubes {size}^3",
        lambda: mcubes._mc_numba(field, 0.0, *tables),
        lambda: mcubes._mc_numpy(field, 0.0, *tables),
    )


def main():
    parser = argparse.ArgumentParser(description="numba versus numpy kernel timings")
    parser.add_argument("--batch", type=int, default=2)
    parser.add_argument("--channels", type=int, default=8)
    parser.add_argument("--size", type=int, default=32, help="spatial extent of the convolution input")
    parser.add_argument("--mc-size", type=int, default=64, help="grid extent for marching cubes")
    parser.add_argument("--repeats", type=int, default=5)
    args = parser.parse_args()

    cases = list(conv_cases(args.batch, args.channels, args.size)) + [mc_case(args.mc_size)]
    print(f"{'kernel':<22}{'numba ms':>10}{'numpy ms':>10}{'speed-up':>10}")
    for name, fast, slow in cases:
        t_fast = best_of(fast, args.repeats)
        t_slow = best_of(slow, args.repeats)
        print(f"{name:<22}{1e3 * t_fast:>10.2f}{1e3 * t_slow:>10.2f}{t_slow / t_fast:>9.1f}x")


if __name__ == "__main__":
    main()
