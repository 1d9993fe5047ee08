"""Differentiable layer operations needed by the segmentation network.

All image tensors use ``(N, C, H, W)`` layout.
"""

from contextlib import contextmanager

import numpy as np

from . import kernels
from .errors import ConfigError, DimensionError, LabelError
from .tensor import Tensor, as_tensor, make_result

BN_EPS = 1e-5
BN_MOMENTUM = 0.1

# Active piece selections of the piecewise ops, recorded only inside
# ``record_decisions`` (used by the gradient oracle to spot kink crossings).
_decisions = None


@contextmanager
def record_decisions():
    """Collect the ReLU sign patterns and max-pool argmax indices of every call."""
    global _decisions
    outer, _decisions = _decisions, []
    try:
        yield _decisions
    finally:
        _decisions = outer


def _check_4d(x, what):
    if x.ndim != 4:
        raise DimensionError(f"{what} must be 4-D (N, C, H, W), got shape {x.shape}")


def conv_output_size(size, kernel, stride, padding):
    return (size + 2 * padding - kernel) // stride + 1


def conv2d(x, weight, bias=None, stride=1, padding=0):
    """2-D cross-correlation, ``weight`` shaped ``(Cout, Cin, kh, kw)``."""
    _check_4d(x, "conv2d input")
    _check_4d(weight, "conv2d weight")
    if stride < 1 or padding < 0:
        raise ConfigError(f"invalid stride={stride} / padding={padding}")
    n, cin, h, w = x.shape
    cout, wcin, kh, kw = weight.shape
    if wcin != cin:
        raise DimensionError(f"axis 1 (channels): input has {cin}, weight expects {wcin}")
    if kh > h + 2 * padding:
        raise DimensionError(f"axis 2 (height): kernel {kh} exceeds padded height {h + 2 * padding}")
    if kw > w + 2 * padding:
        raise DimensionError(f"axis 3 (width): kernel {kw} exceeds padded width {w + 2 * padding}")
    if bias is not None and bias.shape != (cout,):
        raise DimensionError(f"axis 0 (bias): expected ({cout},), got {bias.shape}")

    ho = conv_output_size(h, kh, stride, padding)
    wo = conv_output_size(w, kw, stride, padding)
    wmat = weight.data.reshape(cout, -1)
    pointwise = kh == 1 and kw == 1 and padding == 0
    if pointwise:
        xs = x.data[:, :, ::stride, ::stride] if stride > 1 else x.data
        cols = np.ascontiguousarray(xs.transpose(0, 2, 3, 1)).reshape(-1, cin)
    else:
        xp = x.data
        if padding:
            xp = np.pad(xp, ((0, 0), (0, 0), (padding, padding), (padding, padding)))
        cols = kernels.im2col(xp, kh, kw, stride, ho, wo).reshape(n * ho * wo, -1)
    out = cols @ wmat.T
    if bias is not None:
        out += bias.data
    out = out.reshape(n, ho, wo, cout).transpose(0, 3, 1, 2)
    out = np.ascontiguousarray(out)

    def backward(g):
        gm = g.transpose(0, 2, 3, 1).reshape(-1, cout)
        gx = gw = gb = None
        if weight.requires_grad:
            gw = (gm.T @ cols).reshape(weight.shape)
        if bias is not None and bias.requires_grad:
            gb = g.sum(axis=(0, 2, 3))
        if x.requires_grad:
            gcols = gm @ wmat
            if pointwise:
                gx_s = gcols.reshape(n, ho, wo, cin).transpose(0, 3, 1, 2)
                if stride > 1:
                    gx = np.zeros(x.shape, dtype=x.dtype)
                    gx[:, :, ::stride, ::stride] = gx_s
                else:
                    gx = np.ascontiguousarray(gx_s)
            else:
                hp, wp = h + 2 * padding, w + 2 * padding
                gxp = kernels.col2im(gcols.reshape(n, ho, wo, cin, kh, kw), hp, wp, stride)
                gx = gxp[:, :, padding : padding + h, padding : padding + w]
        return gx, gw, gb

    parents = (x, weight) if bias is None else (x, weight, bias)
    return make_result(out, parents, backward)


def batchnorm2d(x, gamma, beta, running_mean, running_var, training, eps=BN_EPS, momentum=BN_MOMENTUM):
    """Per-channel batch normalisation.

    In training mode statistics come from the batch (over N, H, W) and the
    ``running_mean`` / ``running_var`` arrays are updated in place by an
    exponential moving average (unbiased variance, as is customary).
    """
    _check_4d(x, "batchnorm2d input")
    c = x.shape[1]
    if gamma.shape != (c,):
        raise DimensionError(f"axis 1 (channels): gamma has shape {gamma.shape}, input has {c} channels")
    if beta.shape != (c,):
        raise DimensionError(f"axis 1 (channels): beta has shape {beta.shape}, input has {c} channels")
    xd = x.data
    if training:
        m = xd.shape[0] * xd.shape[2] * xd.shape[3]
        mean = xd.mean(axis=(0, 2, 3))
        var = xd.var(axis=(0, 2, 3))
        unbiased = var * (m / (m - 1)) if m > 1 else var
        running_mean *= 1.0 - momentum
        running_mean += momentum * mean
        running_var *= 1.0 - momentum
        running_var += momentum * unbiased
    else:
        m = None
        mean = running_mean.astype(xd.dtype, copy=False)
        var = running_var.astype(xd.dtype, copy=False)
    invstd = (1.0 / np.sqrt(var + eps)).astype(xd.dtype)
    xhat = (xd - mean[None, :, None, None]) * invstd[None, :, None, None]
    out = xhat * gamma.data[None, :, None, None] + beta.data[None, :, None, None]

    def backward(g):
        gg = gb = gx = None
        if gamma.requires_grad:
            gg = (g * xhat).sum(axis=(0, 2, 3))
        if beta.requires_grad:
            gb = g.sum(axis=(0, 2, 3))
        if x.requires_grad:
            dxhat = g * gamma.data[None, :, None, None]
            if training:
                s1 = dxhat.sum(axis=(0, 2, 3))[None, :, None, None]
                s2 = (dxhat * xhat).sum(axis=(0, 2, 3))[None, :, None, None]
                gx = (invstd[None, :, None, None] / m) * (m * dxhat - s1 - xhat * s2)
            else:
                gx = dxhat * invstd[None, :, None, None]
        return gx, gg, gb

    return make_result(out.astype(xd.dtype, copy=False), (x, gamma, beta), backward)


def relu(x):
    mask = x.data > 0
    out = np.where(mask, x.data, 0).astype(x.dtype, copy=False)
    if _decisions is not None:
        _decisions.append(mask)

    def backward(g):
        return (g * mask,)

    return make_result(out, (x,), backward)


def max_pool2d(x, kernel, stride, padding=0):
    """Window maxima; ties go to the first element in row-major order."""
    _check_4d(x, "max_pool2d input")
    n, c, h, w = x.shape
    if kernel > h + 2 * padding or kernel > w + 2 * padding:
        raise ConfigError(f"pool kernel {kernel} exceeds padded extent {(h + 2 * padding, w + 2 * padding)}")
    if padding > kernel // 2:
        raise ConfigError(f"padding {padding} must be at most half the kernel {kernel}")
    ho = conv_output_size(h, kernel, stride, padding)
    wo = conv_output_size(w, kernel, stride, padding)
    xp = x.data
    if padding:
        xp = np.pad(xp, ((0, 0), (0, 0), (padding, padding), (padding, padding)), constant_values=-np.inf)
    hp, wp = xp.shape[2], xp.shape[3]
    out, arg = kernels.maxpool_forward(np.ascontiguousarray(xp), kernel, stride, ho, wo)
    if _decisions is not None:
        _decisions.append(arg)

    def backward(g):
        gxp = kernels.maxpool_backward(np.ascontiguousarray(g), arg, hp, wp)
        return (gxp[:, :, padding : padding + h, padding : padding + w],)

    return make_result(out, (x,), backward)


def adaptive_avg_pool2d(x, out_size=(1, 1)):
    """Adaptive average pooling; only the global ``(1, 1)`` case is supported."""
    _check_4d(x, "adaptive_avg_pool2d input")
    if tuple(out_size) != (1, 1):
        raise ConfigError(f"adaptive_avg_pool2d supports out_size=(1, 1) only, got {tuple(out_size)}")
    n, c, h, w = x.shape
    out = x.data.mean(axis=(2, 3), keepdims=True)
    scale = 1.0 / (h * w)

    def backward(g):
        return (np.broadcast_to(g * scale, x.shape).astype(x.dtype),)

    return make_result(out.astype(x.dtype, copy=False), (x,), backward)


def pool2d(x, kind, kernel=None, stride=None, padding=0, out_size=(1, 1)):
    """Dispatch to :func:`max_pool2d` (``kind="max"``) or :func:`adaptive_avg_pool2d`."""
    if kind == "max":
        if kernel is None:
            raise ConfigError("max pooling needs a kernel size")
        return max_pool2d(x, kernel, kernel if stride is None else stride, padding)
    if kind == "adaptive_avg":
        return adaptive_avg_pool2d(x, out_size)
    raise ConfigError(f"unknown pooling kind {kind!r}")


def upsample_nearest(x, size):
    """Nearest-neighbour upsampling to ``size=(H2, W2)``, integer ratios only."""
    _check_4d(x, "upsample_nearest input")
    n, c, h, w = x.shape
    h2, w2 = size
    if h2 < h or w2 < w or h2 % h or w2 % w:
        raise ConfigError(f"upsample from {(h, w)} to {(h2, w2)} needs integer ratios >= 1")
    rh, rw = h2 // h, w2 // w
    out = np.broadcast_to(x.data[:, :, :, None, :, None], (n, c, h, rh, w, rw)).reshape(n, c, h2, w2)

    def backward(g):
        return (g.reshape(n, c, h, rh, w, rw).sum(axis=(3, 5)),)

    return make_result(np.ascontiguousarray(out), (x,), backward)


def flatten(x):
    """``(N, ...) -> (N, prod(...))``."""
    n = x.shape[0]
    shape = x.shape
    out = x.data.reshape(n, -1)

    def backward(g):
        return (g.reshape(shape),)

    return make_result(out, (x,), backward)


def softmax_cross_entropy(logits, targets, class_weights=None, ignore_index=None):
    """Mean (optionally class-weighted) cross-entropy.

    ``logits`` is ``(N, C)`` with targets ``(N,)`` or ``(N, C, H, W)`` with
    targets ``(N, H, W)``. Each item contributes ``w[t] * -log softmax[t]``
    and the sum is divided by the number of non-ignored items, so a weight of
    2 on a single item doubles the loss.
    """
    logits = as_tensor(logits)
    t = np.asarray(targets)
    if logits.ndim == 2:
        n, c = logits.shape
        if t.shape != (n,):
            raise DimensionError(f"axis 0: targets shape {t.shape} does not match logits {logits.shape}")
        z = logits.data
    elif logits.ndim == 4:
        n, c, h, w = logits.shape
        if t.shape != (n, h, w):
            raise DimensionError(f"targets shape {t.shape} does not align with logits H x W {logits.shape}")
        z = logits.data.transpose(0, 2, 3, 1).reshape(-1, c)
    else:
        raise DimensionError(f"logits must be 2-D or 4-D, got shape {logits.shape}")
    t = t.reshape(-1).astype(np.int64)
    valid = np.ones(t.shape, dtype=bool) if ignore_index is None else t != ignore_index
    bad = np.flatnonzero(valid & ((t < 0) | (t >= c)))
    if bad.size:
        raise LabelError(f"target value {t[bad[0]]} at flat index {bad[0]} outside [0, {c})")
    if class_weights is None:
        wvec = np.ones(c, dtype=z.dtype)
    else:
        wvec = np.asarray(class_weights, dtype=z.dtype)
        if wvec.shape != (c,):
            raise DimensionError(f"class_weights has shape {wvec.shape}, expected ({c},)")
    tv = np.where(valid, t, 0)
    zmax = z.max(axis=1, keepdims=True)
    shifted = z - zmax
    lse = np.log(np.exp(shifted).sum(axis=1))
    logp_t = shifted[np.arange(t.size), tv] - lse
    wt = wvec[tv] * valid
    count = int(valid.sum())
    denom = max(count, 1)
    loss = np.asarray(-(wt * logp_t).sum() / denom, dtype=z.dtype)

    def backward(g):
        p = np.exp(shifted - lse[:, None])
        p[np.arange(t.size), tv] -= 1.0
        d = p * (wt / denom)[:, None] * g
        if logits.ndim == 4:
            d = d.reshape(n, h, w, c).transpose(0, 3, 1, 2)
        return (np.ascontiguousarray(d.astype(z.dtype, copy=False)),)

    return make_result(loss, (logits,), backward)


__all__ = [
    "Tensor",
    "adaptive_avg_pool2d",
    "batchnorm2d",
    "conv2d",
    "conv_output_size",
    "flatten",
    "max_pool2d",
    "pool2d",
    "relu",
    "softmax_cross_entropy",
    "upsample_nearest",
]
