"""Hot inner loops used by the tensor engine and the preprocessing code.

Every kernel exists twice: a numba ``@njit`` version and a pure-numpy
version with identical semantics. Which one the public names resolve to is
decided by :data:`BACKEND`, initialised from the ``MIXSEG_NUMBA`` flag (see
:mod:`mixseg._jit`). Both families stay importable so that tests and the
benchmark can compare them directly.

Array conventions
-----------------
``im2col`` returns a ``(N, Ho, Wo, C, kh, kw)`` array; reshaping it to
``(N*Ho*Wo, C*kh*kw)`` gives the patch matrix used by the convolution.
Inputs to the convolution and pooling kernels are already padded.
"""

import numpy as np

from ._jit import USE_NUMBA, njit

BACKEND = "numba" if USE_NUMBA else "numpy"


# --------------------------------------------------------------------------
# numpy implementations
# --------------------------------------------------------------------------


def _windows(xp, kh, kw, stride, ho, wo):
    view = np.lib.stride_tricks.sliding_window_view(xp, (kh, kw), axis=(2, 3))
    return view[:, :, : (ho - 1) * stride + 1 : stride, : (wo - 1) * stride + 1 : stride]


def im2col_numpy(xp, kh, kw, stride, ho, wo):
    win = _windows(xp, kh, kw, stride, ho, wo)
    return np.ascontiguousarray(win.transpose(0, 2, 3, 1, 4, 5))


def col2im_numpy(cols, hp, wp, stride):
    n, ho, wo, c, kh, kw = cols.shape
    out = np.zeros((n, c, hp, wp), dtype=cols.dtype)
    g = cols.transpose(0, 3, 4, 5, 1, 2)  # n, c, kh, kw, ho, wo
    for i in range(kh):
        for j in range(kw):
            out[:, :, i : i + stride * (ho - 1) + 1 : stride, j : j + stride * (wo - 1) + 1 : stride] += g[:, :, i, j]
    return out


def maxpool_forward_numpy(xp, k, stride, ho, wo):
    n, c, hp, wp = xp.shape
    win = _windows(xp, k, k, stride, ho, wo).reshape(n, c, ho, wo, k * k)
    arg = np.argmax(win, axis=-1)  # first occurrence on ties
    out = np.take_along_axis(win, arg[..., None], axis=-1)[..., 0]
    rows = np.arange(ho)[:, None] * stride + arg // k
    cols = np.arange(wo)[None, :] * stride + arg % k
    return out, (rows * wp + cols).astype(np.int64)


def maxpool_backward_numpy(gout, argidx, hp, wp):
    n, c, ho, wo = gout.shape
    flat = np.zeros((n * c, hp * wp), dtype=gout.dtype)
    idx = argidx.reshape(n * c, ho * wo)
    np.add.at(flat, (np.arange(n * c)[:, None], idx), gout.reshape(n * c, ho * wo))
    return flat.reshape(n, c, hp, wp)


def kmeans_assign_numpy(points, centers):
    d = ((points[:, None, :] - centers[None, :, :]) ** 2).sum(axis=-1)
    return np.argmin(d, axis=1).astype(np.int64)


# --------------------------------------------------------------------------
# numba implementations
# --------------------------------------------------------------------------


@njit
def im2col_numba(xp, kh, kw, stride, ho, wo):
    n, c = xp.shape[0], xp.shape[1]
    out = np.empty((n, ho, wo, c, kh, kw), dtype=xp.dtype)
    for b in range(n):
        for oy in range(ho):
            y0 = oy * stride
            for ox in range(wo):
                x0 = ox * stride
                for ch in range(c):
                    for i in range(kh):
                        for j in range(kw):
                            out[b, oy, ox, ch, i, j] = xp[b, ch, y0 + i, x0 + j]
    return out


@njit
def col2im_numba(cols, hp, wp, stride):
    n, ho, wo, c, kh, kw = cols.shape
    out = np.zeros((n, c, hp, wp), dtype=cols.dtype)
    for b in range(n):
        for oy in range(ho):
            y0 = oy * stride
            for ox in range(wo):
                x0 = ox * stride
                for ch in range(c):
                    for i in range(kh):
                        for j in range(kw):
                            out[b, ch, y0 + i, x0 + j] += cols[b, oy, ox, ch, i, j]
    return out


@njit
def maxpool_forward_numba(xp, k, stride, ho, wo):
    n, c, hp, wp = xp.shape
    out = np.empty((n, c, ho, wo), dtype=xp.dtype)
    arg = np.empty((n, c, ho, wo), dtype=np.int64)
    for b in range(n):
        for ch in range(c):
            for oy in range(ho):
                for ox in range(wo):
                    y0 = oy * stride
                    x0 = ox * stride
                    best = xp[b, ch, y0, x0]
                    bi = y0 * wp + x0
                    for i in range(k):
                        for j in range(k):
                            v = xp[b, ch, y0 + i, x0 + j]
                            if v > best:
                                best = v
                                bi = (y0 + i) * wp + x0 + j
                    out[b, ch, oy, ox] = best
                    arg[b, ch, oy, ox] = bi
    return out, arg


@njit
def maxpool_backward_numba(gout, argidx, hp, wp):
    n, c, ho, wo = gout.shape
    out = np.zeros((n, c, hp * wp), dtype=gout.dtype)
    for b in range(n):
        for ch in range(c):
            for oy in range(ho):
                for ox in range(wo):
                    out[b, ch, argidx[b, ch, oy, ox]] += gout[b, ch, oy, ox]
    return out.reshape((n, c, hp, wp))


@njit
def kmeans_assign_numba(points, centers):
    p = points.shape[0]
    k = centers.shape[0]
    labels = np.empty(p, dtype=np.int64)
    for i in range(p):
        best = np.inf
        bj = 0
        for j in range(k):
            dy = points[i, 0] - centers[j, 0]
            dx = points[i, 1] - centers[j, 1]
            d = dy * dy + dx * dx
            if d < best:
                best = d
                bj = j
        labels[i] = bj
    return labels


_IMPLS = {
    "numpy": {
        "im2col": im2col_numpy,
        "col2im": col2im_numpy,
        "maxpool_forward": maxpool_forward_numpy,
        "maxpool_backward": maxpool_backward_numpy,
        "kmeans_assign": kmeans_assign_numpy,
    },
    "numba": {
        "im2col": im2col_numba,
        "col2im": col2im_numba,
        "maxpool_forward": maxpool_forward_numba,
        "maxpool_backward": maxpool_backward_numba,
        "kmeans_assign": kmeans_assign_numba,
    },
}


def get_kernel(name, backend=None):
    """Return kernel ``name`` for ``backend`` (defaults to :data:`BACKEND`)."""
    return _IMPLS[backend or BACKEND][name]


def im2col(xp, kh, kw, stride, ho, wo):
    return _IMPLS[BACKEND]["im2col"](xp, kh, kw, stride, ho, wo)


def col2im(cols, hp, wp, stride):
    return _IMPLS[BACKEND]["col2im"](cols, hp, wp, stride)


def maxpool_forward(xp, k, stride, ho, wo):
    return _IMPLS[BACKEND]["maxpool_forward"](xp, k, stride, ho, wo)


def maxpool_backward(gout, argidx, hp, wp):
    return _IMPLS[BACKEND]["maxpool_backward"](gout, argidx, hp, wp)


def kmeans_assign(points, centers):
    return _IMPLS[BACKEND]["kmeans_assign"](points, centers)
