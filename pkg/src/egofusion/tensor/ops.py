"""Differentiable operators.

Every function takes/returns :class:`Tensor` and registers a closure that
maps the output gradient to input gradients. Constant operands (plain
numbers or arrays) are wrapped without ``requires_grad``.
"""
from __future__ import annotations

import functools

import numpy as np

from . import kernels
from .core import Tensor, config

_from_op = Tensor._from_op


def _t(x, like=None):
    if isinstance(x, Tensor):
        return x
    dtype = like.dtype if like is not None else config.dtype
    return Tensor(np.asarray(x, dtype=dtype), dtype=dtype)


def _unbroadcast(g, shape):
    if g.shape == shape:
        return g
    ndiff = g.ndim - len(shape)
    if ndiff > 0:
        g = g.sum(axis=tuple(range(ndiff)))
    axes = tuple(i for i, n in enumerate(shape) if n == 1 and g.shape[i] != 1)
    if axes:
        g = g.sum(axis=axes, keepdims=True)
    return g.reshape(shape)


# -- elementwise arithmetic ---------------------------------------------------

def add(a, b):
    a = _t(a, b if isinstance(b, Tensor) else None)
    b = _t(b, a)
    sa, sb = a.shape, b.shape
    return _from_op(a.data + b.data, (a, b),
                    lambda g: (_unbroadcast(g, sa), _unbroadcast(g, sb)), "add")


def sub(a, b):
    a = _t(a, b if isinstance(b, Tensor) else None)
    b = _t(b, a)
    sa, sb = a.shape, b.shape
    return _from_op(a.data - b.data, (a, b),
                    lambda g: (_unbroadcast(g, sa), _unbroadcast(-g, sb)), "sub")


def mul(a, b):
    a = _t(a, b if isinstance(b, Tensor) else None)
    b = _t(b, a)
    ad, bd = a.data, b.data

    def back(g):
        return (_unbroadcast(g * bd, ad.shape) if a.requires_grad else None,
                _unbroadcast(g * ad, bd.shape) if b.requires_grad else None)
    return _from_op(ad * bd, (a, b), back, "mul")


def div(a, b):
    a = _t(a, b if isinstance(b, Tensor) else None)
    b = _t(b, a)
    ad, bd = a.data, b.data
    out = ad / bd

    def back(g):
        return (_unbroadcast(g / bd, ad.shape) if a.requires_grad else None,
                _unbroadcast(-g * out / bd, bd.shape) if b.requires_grad else None)
    return _from_op(out, (a, b), back, "div")


def neg(a):
    return _from_op(-a.data, (a,), lambda g: (-g,), "neg")


def power(a, p):
    if isinstance(p, Tensor):
        raise TypeError("only constant exponents are supported")
    ad = a.data
    return _from_op(ad ** p, (a,), lambda g: (g * p * ad ** (p - 1),), "pow")


def exp(a):
    out = np.exp(a.data)
    return _from_op(out, (a,), lambda g: (g * out,), "exp")


def log(a):
    ad = a.data
    return _from_op(np.log(ad), (a,), lambda g: (g / ad,), "log")


def sqrt(a):
    out = np.sqrt(a.data)
    return _from_op(out, (a,), lambda g: (g * 0.5 / out,), "sqrt")


def abs(a):  # noqa: A001 - mirrors numpy naming
    ad = a.data
    return _from_op(np.abs(ad), (a,), lambda g: (g * np.sign(ad),), "abs")


def sin(a):
    ad = a.data
    return _from_op(np.sin(ad), (a,), lambda g: (g * np.cos(ad),), "sin")


def cos(a):
    ad = a.data
    return _from_op(np.cos(ad), (a,), lambda g: (-g * np.sin(ad),), "cos")


def clamp(a, lo=None, hi=None):
    ad = a.data
    out = np.clip(ad, lo, hi)
    keep = np.ones(ad.shape, dtype=bool)
    if lo is not None:
        keep &= ad >= lo
    if hi is not None:
        keep &= ad <= hi
    return _from_op(out, (a,), lambda g: (g * keep,), "clamp")


def where(mask, a, b):
    """Select ``a`` where the constant boolean ``mask`` holds, else ``b``."""
    mask = np.asarray(mask, dtype=bool)
    a = _t(a, b if isinstance(b, Tensor) else None)
    b = _t(b, a)
    sa, sb = a.shape, b.shape

    def back(g):
        return (_unbroadcast(np.where(mask, g, 0), sa) if a.requires_grad else None,
                _unbroadcast(np.where(mask, 0, g), sb) if b.requires_grad else None)
    return _from_op(np.where(mask, a.data, b.data), (a, b), back, "where")


def minimum(tensors):
    """Elementwise minimum over a set of same-shape tensors.

    The whole gradient goes to the first input attaining the minimum.
    """
    tensors = [_t(x) for x in tensors]
    if not tensors:
        raise ValueError("minimum over an empty set")
    if len(tensors) == 1:
        return tensors[0]
    shape = tensors[0].shape
    for x in tensors[1:]:
        if x.shape != shape:
            raise ValueError(f"shape mismatch {x.shape} vs {shape}")
    stacked = np.stack([x.data for x in tensors])
    idx = np.argmin(stacked, axis=0)
    out = np.take_along_axis(stacked, idx[None], axis=0)[0]

    def back(g):
        return tuple(np.where(idx == k, g, 0) if x.requires_grad else None
                     for k, x in enumerate(tensors))
    return _from_op(out, tuple(tensors), back, "minimum")


# -- reductions and shape ops -------------------------------------------------

def _norm_axis(axis, ndim):
    if axis is None:
        return tuple(range(ndim))
    if isinstance(axis, int):
        axis = (axis,)
    return tuple(a % ndim for a in axis)


def sum(a, axis=None, keepdims=False):  # noqa: A001
    shape = a.shape
    axes = _norm_axis(axis, a.ndim)
    out = a.data.sum(axis=axes, keepdims=keepdims)

    def back(g):
        if not keepdims:
            g = np.expand_dims(g, axes)
        return (np.broadcast_to(g, shape).copy(),)
    return _from_op(np.asarray(out), (a,), back, "sum")


def mean(a, axis=None, keepdims=False):
    axes = _norm_axis(axis, a.ndim)
    n = int(np.prod([a.shape[i] for i in axes])) if axes else 1
    return sum(a, axes, keepdims) * (1.0 / n)


def reshape(a, shape):
    old = a.shape
    return _from_op(a.data.reshape(shape), (a,), lambda g: (g.reshape(old),), "reshape")


def transpose(a, axes=None):
    if axes is None:
        axes = tuple(reversed(range(a.ndim)))
    inv = np.argsort(axes)
    return _from_op(a.data.transpose(axes), (a,), lambda g: (g.transpose(inv),), "transpose")


def getitem(a, idx):
    shape = a.shape

    def back(g):
        out = np.zeros(shape, dtype=g.dtype)
        np.add.at(out, idx, g) if _fancy(idx) else out.__setitem__(idx, g)
        return (out,)
    return _from_op(np.array(a.data[idx]), (a,), back, "getitem")


def _fancy(idx):
    items = idx if isinstance(idx, tuple) else (idx,)
    return any(isinstance(i, (list, np.ndarray)) for i in items)


def concat(tensors, axis=0):
    tensors = [_t(x) for x in tensors]
    sizes = [x.shape[axis] for x in tensors]
    splits = np.cumsum(sizes)[:-1]

    def back(g):
        return tuple(np.split(g, splits, axis=axis))
    return _from_op(np.concatenate([x.data for x in tensors], axis=axis), tuple(tensors), back, "concat")


def stack(tensors, axis=0):
    tensors = [_t(x) for x in tensors]

    def back(g):
        return tuple(np.take(g, k, axis=axis) for k in range(len(tensors)))
    return _from_op(np.stack([x.data for x in tensors], axis=axis), tuple(tensors), back, "stack")


def matmul(a, b):
    a = _t(a, b if isinstance(b, Tensor) else None)
    b = _t(b, a)
    ad, bd = a.data, b.data
    if ad.ndim < 2 or bd.ndim < 2:
        raise ValueError("matmul operands must be at least 2-D")

    def back(g):
        ga = _unbroadcast(g @ np.swapaxes(bd, -1, -2), ad.shape) if a.requires_grad else None
        gb = _unbroadcast(np.swapaxes(ad, -1, -2) @ g, bd.shape) if b.requires_grad else None
        return ga, gb
    return _from_op(ad @ bd, (a, b), back, "matmul")


def _reflect_matrix(n, pad, dtype):
    idx = np.pad(np.arange(n), pad, mode="reflect")
    R = np.zeros((n + 2 * pad, n), dtype=dtype)
    R[np.arange(n + 2 * pad), idx] = 1
    return R


def pad2d(x, pad, mode="reflect"):
    """Pad the two trailing axes by ``pad`` on every side ("reflect" or "constant" zeros)."""
    if pad == 0:
        return x
    H, W = x.shape[-2:]
    if mode == "reflect" and (H <= pad or W <= pad):
        raise ValueError("reflect padding wider than input")
    width = [(0, 0)] * (x.ndim - 2) + [(pad, pad), (pad, pad)]
    out = np.pad(x.data, width, mode=mode)

    def back(g):
        if mode == "constant":
            return (g[..., pad:-pad, pad:-pad].copy(),)
        Rh = _reflect_matrix(H, pad, g.dtype)
        Rw = _reflect_matrix(W, pad, g.dtype)
        return (Rh.T @ g @ Rw,)
    return _from_op(out, (x,), back, "pad2d")


# -- network layers -----------------------------------------------------------

def _conv_out(n, k, stride, pad):
    return (n + 2 * pad - k) // stride + 1


def conv2d(x, weight, bias=None, stride=1, padding=0):
    """2-D cross-correlation over NCHW input with OIHW weight."""
    if x.ndim != 4 or weight.ndim != 4:
        raise ValueError("conv2d expects 4-D input and weight")
    N, C, H, W = x.shape
    O, I, kh, kw = weight.shape
    if C != I:
        raise ValueError(f"input has {C} channels, weight expects {I}")
    Ho, Wo = _conv_out(H, kh, stride, padding), _conv_out(W, kw, stride, padding)
    if Ho < 1 or Wo < 1:
        raise ValueError("kernel larger than padded input")
    cols = kernels.im2col(x.data, kh, kw, stride, padding, 0.0)
    wm = weight.data.reshape(O, -1)
    out = np.matmul(wm, cols)
    if bias is not None:
        out += bias.data[:, None]
    out = out.reshape(N, O, Ho, Wo)
    parents = (x, weight) if bias is None else (x, weight, bias)

    def back(g):
        gm = g.reshape(N, O, Ho * Wo)
        gx = gw = None
        if x.requires_grad:
            gx = kernels.col2im(np.matmul(wm.T, gm), C, H, W, kh, kw, stride, padding)
        if weight.requires_grad:
            gw = np.tensordot(gm, cols, axes=([0, 2], [0, 2])).reshape(weight.shape)
        if bias is None:
            return gx, gw
        return gx, gw, gm.sum(axis=(0, 2))
    return _from_op(out, parents, back, "conv2d")


def max_pool2d(x, kernel=3, stride=2, padding=1):
    N, C, H, W = x.shape
    Ho, Wo = _conv_out(H, kernel, stride, padding), _conv_out(W, kernel, stride, padding)
    cols = kernels.im2col(x.data.reshape(N * C, 1, H, W), kernel, kernel, stride, padding, -np.inf)
    idx = np.argmax(cols, axis=1)
    out = np.take_along_axis(cols, idx[:, None, :], axis=1).reshape(N, C, Ho, Wo)

    def back(g):
        dcols = np.zeros(cols.shape, dtype=g.dtype)
        np.put_along_axis(dcols, idx[:, None, :], g.reshape(N * C, 1, Ho * Wo), axis=1)
        gx = kernels.col2im(dcols, 1, H, W, kernel, kernel, stride, padding)
        return (gx.reshape(N, C, H, W),)
    return _from_op(out, (x,), back, "max_pool2d")


def avg_pool2d(x, kernel=3):
    """Stride-1 box mean without padding."""
    H, W = x.shape[-2:]
    Ho, Wo = H - kernel + 1, W - kernel + 1
    if Ho < 1 or Wo < 1:
        raise ValueError("pool window larger than input")
    xd = x.data
    out = np.zeros(xd.shape[:-2] + (Ho, Wo), dtype=xd.dtype)
    for i in range(kernel):
        for j in range(kernel):
            out += xd[..., i:i + Ho, j:j + Wo]
    scale = 1.0 / (kernel * kernel)
    out *= scale

    def back(g):
        gx = np.zeros(xd.shape, dtype=g.dtype)
        gs = g * scale
        for i in range(kernel):
            for j in range(kernel):
                gx[..., i:i + Ho, j:j + Wo] += gs
        return (gx,)
    return _from_op(out, (x,), back, "avg_pool2d")


def batch_norm2d(x, gamma, beta, running_mean, running_var, training=True,
                 momentum=0.1, eps=1e-5):
    """Per-channel batch normalization over (N, H, W).

    In training mode the running statistics arrays are updated in place.
    """
    if x.ndim != 4:
        raise ValueError("batch_norm2d expects NCHW input")
    N, C, H, W = x.shape
    if gamma.shape != (C,) or beta.shape != (C,):
        raise ValueError(f"input has {C} channels, BN parameters have {gamma.shape[0]}")
    m = N * H * W
    if m == 0:
        raise ValueError("batch_norm2d on an empty batch")
    xd = x.data
    gd = gamma.data.reshape(1, C, 1, 1)
    if training:
        mu = xd.mean(axis=(0, 2, 3), keepdims=True)
        xc = xd - mu
        var = (xc * xc).mean(axis=(0, 2, 3), keepdims=True)
        running_mean *= 1 - momentum
        running_mean += momentum * mu.ravel()
        unbiased = var.ravel() * (m / (m - 1)) if m > 1 else var.ravel()
        running_var *= 1 - momentum
        running_var += momentum * unbiased
    else:
        xc = xd - running_mean.reshape(1, C, 1, 1).astype(xd.dtype)
        var = running_var.reshape(1, C, 1, 1).astype(xd.dtype)
    inv = 1.0 / np.sqrt(var + eps)
    xhat = xc * inv
    out = gd * xhat + beta.data.reshape(1, C, 1, 1)

    def back(g):
        gx = None
        if x.requires_grad:
            dxhat = g * gd
            if training:
                gx = inv * (dxhat - dxhat.mean(axis=(0, 2, 3), keepdims=True)
                            - xhat * (dxhat * xhat).mean(axis=(0, 2, 3), keepdims=True))
            else:
                gx = dxhat * inv
        ggam = (g * xhat).sum(axis=(0, 2, 3)) if gamma.requires_grad else None
        gbeta = g.sum(axis=(0, 2, 3)) if beta.requires_grad else None
        return gx, ggam, gbeta
    return _from_op(out, (x, gamma, beta), back, "batch_norm2d")


def linear(x, weight, bias=None):
    if x.ndim != 2 or weight.ndim != 2 or x.shape[1] != weight.shape[1]:
        raise ValueError(f"linear: input {x.shape} incompatible with weight {weight.shape}")
    out = x @ transpose(weight)
    return out if bias is None else out + bias


# -- activations --------------------------------------------------------------

def relu(x):
    xd = x.data
    pos = xd > 0
    return _from_op(np.where(pos, xd, 0).astype(xd.dtype), (x,), lambda g: (g * pos,), "relu")


def elu(x):
    xd = x.data
    pos = xd > 0
    em1 = np.expm1(np.minimum(xd, 0))
    out = np.where(pos, xd, em1)
    return _from_op(out, (x,), lambda g: (g * np.where(pos, 1, em1 + 1),), "elu")


def sigmoid(x):
    xd = x.data
    e = np.exp(-np.abs(xd))
    out = np.where(xd >= 0, 1 / (1 + e), e / (1 + e)).astype(xd.dtype)
    return _from_op(out, (x,), lambda g: (g * out * (1 - out),), "sigmoid")


def softmax(x, axis=-1):
    if not -x.ndim <= axis < x.ndim:
        raise ValueError(f"softmax axis {axis} out of range for rank {x.ndim}")
    xd = x.data
    e = np.exp(xd - xd.max(axis=axis, keepdims=True))
    out = e / e.sum(axis=axis, keepdims=True)

    def back(g):
        return (out * (g - (g * out).sum(axis=axis, keepdims=True)),)
    return _from_op(out, (x,), back, "softmax")


_ACTIVATIONS = {"relu": relu, "elu": elu, "sigmoid": sigmoid}


def activation(x, kind, axis=-1):
    if kind == "softmax":
        return softmax(x, axis)
    try:
        return _ACTIVATIONS[kind](x)
    except KeyError:
        raise ValueError(f"unknown activation {kind!r}") from None


# -- resampling ---------------------------------------------------------------

def bilinear_sample(x, coords):
    """Sample NCHW ``x`` at (N, H', W', 2) pixel coordinates (x, y).

    Pixel centres sit at integer coordinates. Samples outside
    ``[0, W-1] x [0, H-1]`` are zero; the returned boolean mask marks the
    in-bounds samples.
    """
    if x.ndim != 4 or coords.ndim != 4 or coords.shape[-1] != 2:
        raise ValueError("bilinear_sample expects NCHW input and (N, H, W, 2) coords")
    N, C, H, W = x.shape
    if coords.shape[0] != N:
        raise ValueError("batch size mismatch between input and coords")
    Ho, Wo = coords.shape[1:3]
    # mixed precision promotes, so a float64 warp of a float32 image keeps its coordinates exact
    dt = np.result_type(x.dtype, coords.dtype)
    xd = np.ascontiguousarray(x.data, dtype=dt)
    cd = coords.data.astype(dt, copy=False)
    cx = np.ascontiguousarray(cd[..., 0].reshape(N, Ho * Wo))
    cy = np.ascontiguousarray(cd[..., 1].reshape(N, Ho * Wo))
    out, valid = kernels.bilinear_forward(xd, cx, cy)

    def back(g):
        gx, gcx, gcy = kernels.bilinear_backward(
            xd, cx, cy, np.ascontiguousarray(g.reshape(N, C, Ho * Wo), dtype=dt),
            x.requires_grad, coords.requires_grad)
        if gx is not None:
            gx = gx.astype(x.dtype, copy=False)
        gc = None
        if coords.requires_grad:
            gc = np.stack([gcx, gcy], axis=-1).reshape(coords.shape).astype(coords.dtype)
        return gx, gc
    res = _from_op(out.reshape(N, C, Ho, Wo), (x, coords), back, "bilinear_sample")
    return res, valid.reshape(N, Ho, Wo).astype(bool)


@functools.lru_cache(maxsize=64)
def resize_matrix(n_in, n_out, dtype=np.float64):
    """Row-stochastic (n_out, n_in) matrix of align-corners-false linear interpolation."""
    A = np.zeros((n_out, n_in), dtype=dtype)
    scale = n_in / n_out
    for i in range(n_out):
        src = max((i + 0.5) * scale - 0.5, 0.0)
        i0 = min(int(np.floor(src)), n_in - 1)
        i1 = min(i0 + 1, n_in - 1)
        w = src - i0
        A[i, i0] += 1 - w
        A[i, i1] += w
    A.setflags(write=False)
    return A


def resize_array(x, target_h, target_w):
    """Non-differentiable bilinear resize of the two trailing axes."""
    H, W = x.shape[-2:]
    Ah = resize_matrix(H, target_h, x.dtype.type)
    Aw = resize_matrix(W, target_w, x.dtype.type)
    return Ah @ x @ Aw.T


def upsample_bilinear(x, target_h, target_w):
    H, W = x.shape[-2:]
    if target_h < H or target_w < W:
        raise ValueError(f"upsample target {(target_h, target_w)} smaller than input {(H, W)}")
    if (target_h, target_w) == (H, W):
        return x
    Ah = resize_matrix(H, target_h, x.dtype.type)
    Aw = resize_matrix(W, target_w, x.dtype.type)
    out = Ah @ x.data @ Aw.T
    return _from_op(out, (x,), lambda g: (Ah.T @ g @ Aw,), "upsample_bilinear")


# -- reductions over sets -----------------------------------------------------

def elementwise_reduce(inputs, kind):
    """Dispatch for the small set of n-ary/unary combinators the losses use."""
    inputs = list(inputs)
    if not inputs:
        raise ValueError("elementwise_reduce over an empty set")
    if kind == "add":
        out = inputs[0]
        for x in inputs[1:]:
            out = add(out, x)
        return out
    if kind == "sub":
        a, b = inputs
        return sub(a, b)
    if kind == "mul":
        out = inputs[0]
        for x in inputs[1:]:
            out = mul(out, x)
        return out
    if kind == "abs":
        (a,) = inputs
        return abs(a)
    if kind == "mean":
        out = elementwise_reduce(inputs, "add")
        return out * (1.0 / len(inputs))
    if kind in ("min-over-set", "per-pixel-min"):
        return minimum(inputs)
    raise ValueError(f"unknown reduction {kind!r}")
