"""im2col / col2im for cubic-kernel 3D convolutions.

Column layout is ``(C * k**3, N * Do * Ho * Wo)``: rows ordered channel-major
then kernel offset (z, y, x), columns ordered batch-major then output voxel in
C order.  Convolution then reduces to one BLAS matmul, and both kernels are
exact adjoints of each other.
"""
import numpy as np

from .._accel import njit, pick, uint64


def conv_output_extent(size, k, stride, padding):
    return (size + 2 * padding - k) // stride + 1


@njit
def _im2col_numba(x, k, s, p, Do, Ho, Wo):
    N, C, D, H, W = x.shape
    K = k * k * k
    P = Do * Ho * Wo
    NP = N * P
    cols = np.zeros(C * K * NP, dtype=x.dtype)
    xf = x.ravel()
    for c in range(C):
        for a in range(k):
            for b in range(k):
                for e in range(k):
                    r0 = (c * K + (a * k + b) * k + e) * NP
                    # output columns whose input x index lies inside [0, W)
                    lo = max(0, (p - e + s - 1) // s)
                    hi = max(lo, min(Wo, (W - 1 + p - e) // s + 1))
                    for n in range(N):
                        for od in range(Do):
                            iz = od * s + a - p
                            if iz < 0 or iz >= D:
                                continue
                            for oh in range(Ho):
                                iy = oh * s + b - p
                                if iy < 0 or iy >= H:
                                    continue
                                # unsigned offsets let the copy loop skip negative-index handling
                                o = uint64(r0 + n * P + (od * Ho + oh) * Wo + lo)
                                src = uint64((((n * C + c) * D + iz) * H + iy) * W + lo * s + e - p)
                                su = uint64(s)
                                for j in range(uint64(hi - lo)):
                                    cols[o + j] = xf[src + j * su]
    return cols.reshape(C * K, NP)


@njit
def _col2im_numba(cols, N, C, D, H, W, k, s, p, Do, Ho, Wo):
    K = k * k * k
    P = Do * Ho * Wo
    x = np.zeros((N, C, D, H, W), dtype=cols.dtype)
    for c in range(C):
        for a in range(k):
            for b in range(k):
                for e in range(k):
                    r = c * K + (a * k + b) * k + e
                    for n in range(N):
                        for od in range(Do):
                            iz = od * s + a - p
                            if iz < 0 or iz >= D:
                                continue
                            for oh in range(Ho):
                                iy = oh * s + b - p
                                if iy < 0 or iy >= H:
                                    continue
                                base = n * P + (od * Ho + oh) * Wo
                                for ow in range(Wo):
                                    ix = ow * s + e - p
                                    if ix >= 0 and ix < W:
                                        x[n, c, iz, iy, ix] += cols[r, base + ow]
    return x


def _window(a, s, n):
    return slice(a, a + s * (n - 1) + 1, s)


def _im2col_numpy(x, k, s, p, Do, Ho, Wo):
    N, C = x.shape[:2]
    if p:
        x = np.pad(x, ((0, 0), (0, 0), (p, p), (p, p), (p, p)))
    cols = np.empty((C, k, k, k, N, Do, Ho, Wo), dtype=x.dtype)
    for a in range(k):
        for b in range(k):
            for e in range(k):
                patch = x[:, :, _window(a, s, Do), _window(b, s, Ho), _window(e, s, Wo)]
                cols[:, a, b, e] = patch.transpose(1, 0, 2, 3, 4)
    return cols.reshape(C * k**3, N * Do * Ho * Wo)


def _col2im_numpy(cols, N, C, D, H, W, k, s, p, Do, Ho, Wo):
    cols = cols.reshape(C, k, k, k, N, Do, Ho, Wo)
    xp = np.zeros((N, C, D + 2 * p, H + 2 * p, W + 2 * p), dtype=cols.dtype)
    for a in range(k):
        for b in range(k):
            for e in range(k):
                xp[:, :, _window(a, s, Do), _window(b, s, Ho), _window(e, s, Wo)] += cols[:, a, b, e].transpose(
                    1, 0, 2, 3, 4
                )
    return np.ascontiguousarray(xp[:, :, p : p + D, p : p + H, p : p + W])


_im2col = pick(_im2col_numba, _im2col_numpy)
_col2im = pick(_col2im_numba, _col2im_numpy)


def im2col(x, k, stride, padding, out_extent=None):
    """Unfold ``x`` (N, C, D, H, W) into convolution columns."""
    if out_extent is None:
        out_extent = tuple(conv_output_extent(n, k, stride, padding) for n in x.shape[2:])
    Do, Ho, Wo = out_extent
    if k == 1 and stride == 1 and padding == 0:
        # pointwise kernels need no unfolding, only a batch/channel swap
        return np.ascontiguousarray(x.transpose(1, 0, 2, 3, 4)).reshape(x.shape[1], -1)
    return _im2col(np.ascontiguousarray(x), k, stride, padding, Do, Ho, Wo)


def col2im(cols, x_shape, k, stride, padding, out_extent=None):
    """Adjoint of :func:`im2col`: scatter-add columns back onto an (N, C, D, H, W) grid."""
    N, C, D, H, W = x_shape
    if out_extent is None:
        out_extent = tuple(conv_output_extent(n, k, stride, padding) for n in (D, H, W))
    Do, Ho, Wo = out_extent
    if k == 1 and stride == 1 and padding == 0:
        return np.ascontiguousarray(cols.reshape(C, N, D, H, W).transpose(1, 0, 2, 3, 4))
    return _col2im(np.ascontiguousarray(cols), N, C, D, H, W, k, stride, padding, Do, Ho, Wo)
