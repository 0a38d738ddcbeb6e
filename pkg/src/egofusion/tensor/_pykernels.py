"""Pure-numpy reference kernels.

Same signatures as the compiled ``_ckernels`` module. Used when the
extension is not built or when ``EGOFUSION_PURE_PYTHON=1`` is set.
"""
import numpy as np
from numpy.lib.stride_tricks import as_strided


def _out_size(n, k, stride, pad):
    return (n + 2 * pad - k) // stride + 1


def im2col(x, kh, kw, stride, pad, fill=0.0):
    """(N, C, H, W) -> (N, C*kh*kw, Ho*Wo) patch matrix."""
    x = np.ascontiguousarray(x)
    N, C, H, W = x.shape
    Ho = _out_size(H, kh, stride, pad)
    Wo = _out_size(W, kw, stride, pad)
    if pad:
        xp = np.full((N, C, H + 2 * pad, W + 2 * pad), fill, dtype=x.dtype)
        xp[:, :, pad:pad + H, pad:pad + W] = x
    else:
        xp = x
    sn, sc, sh, sw = xp.strides
    win = as_strided(
        xp,
        shape=(N, C, kh, kw, Ho, Wo),
        strides=(sn, sc, sh, sw, sh * stride, sw * stride),
        writeable=False,
    )
    return win.reshape(N, C * kh * kw, Ho * Wo)


def col2im(cols, C, H, W, kh, kw, stride, pad):
    """Adjoint of :func:`im2col`: scatter-add patches back to (N, C, H, W)."""
    N = cols.shape[0]
    Ho = _out_size(H, kh, stride, pad)
    Wo = _out_size(W, kw, stride, pad)
    cols = cols.reshape(N, C, kh, kw, Ho, Wo)
    xp = np.zeros((N, C, H + 2 * pad, W + 2 * pad), dtype=cols.dtype)
    for i in range(kh):
        for j in range(kw):
            xp[:, :, i:i + stride * Ho:stride, j:j + stride * Wo:stride] += cols[:, :, i, j]
    return xp[:, :, pad:pad + H, pad:pad + W].copy()


def _corners(cx, cy, H, W):
    valid = (cx >= 0) & (cx <= W - 1) & (cy >= 0) & (cy <= H - 1)
    x0 = np.clip(np.floor(cx), 0, max(W - 2, 0)).astype(np.int64)
    y0 = np.clip(np.floor(cy), 0, max(H - 2, 0)).astype(np.int64)
    x1 = np.minimum(x0 + 1, W - 1)
    y1 = np.minimum(y0 + 1, H - 1)
    wx = np.where(valid, cx - x0, 0).astype(cx.dtype)
    wy = np.where(valid, cy - y0, 0).astype(cy.dtype)
    return valid, x0, x1, y0, y1, wx, wy


def bilinear_forward(x, cx, cy):
    """Sample (N, C, H, W) at pixel coords (N, L); returns (N, C, L) and validity (N, L)."""
    N, C, H, W = x.shape
    valid, x0, x1, y0, y1, wx, wy = _corners(cx, cy, H, W)
    flat = x.reshape(N, C, H * W)

    def gather(yy, xx):
        return np.take_along_axis(flat, (yy * W + xx)[:, None, :], axis=2)

    vm = valid.astype(x.dtype)[:, None, :]
    w00 = ((1 - wx) * (1 - wy))[:, None, :]
    w01 = (wx * (1 - wy))[:, None, :]
    w10 = ((1 - wx) * wy)[:, None, :]
    w11 = (wx * wy)[:, None, :]
    out = (gather(y0, x0) * w00 + gather(y0, x1) * w01
           + gather(y1, x0) * w10 + gather(y1, x1) * w11) * vm
    return out, valid.astype(np.uint8)


def bilinear_backward(x, cx, cy, g, need_x=True, need_coords=True):
    """Gradients of :func:`bilinear_forward` w.r.t. x and the coordinates."""
    N, C, H, W = x.shape
    L = cx.shape[1]
    valid, x0, x1, y0, y1, wx, wy = _corners(cx, cy, H, W)
    g = g * valid.astype(g.dtype)[:, None, :]
    gx = gcx = gcy = None
    if need_x:
        base = (np.arange(N * C, dtype=np.int64) * (H * W)).reshape(N, C, 1)
        total = N * C * H * W
        gx = np.zeros(total, dtype=x.dtype)
        for yy, xx, w in ((y0, x0, (1 - wx) * (1 - wy)), (y0, x1, wx * (1 - wy)),
                          (y1, x0, (1 - wx) * wy), (y1, x1, wx * wy)):
            idx = (base + (yy * W + xx)[:, None, :]).ravel()
            gx += np.bincount(idx, weights=(g * w[:, None, :]).ravel(), minlength=total).astype(x.dtype)
        gx = gx.reshape(N, C, H, W)
    if need_coords:
        flat = x.reshape(N, C, H * W)

        def gather(yy, xx):
            return np.take_along_axis(flat, (yy * W + xx)[:, None, :], axis=2)

        v00, v01 = gather(y0, x0), gather(y0, x1)
        v10, v11 = gather(y1, x0), gather(y1, x1)
        wx_ = wx[:, None, :]
        wy_ = wy[:, None, :]
        dx = (v01 - v00) * (1 - wy_) + (v11 - v10) * wy_
        dy = (v10 - v00) * (1 - wx_) + (v11 - v01) * wx_
        gcx = (g * dx).sum(axis=1)
        gcy = (g * dy).sum(axis=1)
        assert gcx.shape == (N, L)
    return gx, gcx, gcy
