# cython: boundscheck=False, wraparound=False, cdivision=True, initializedcheck=False
"""Compiled inner loops for convolution patches and bilinear sampling.

Mirrors ``_pykernels`` exactly; all loops are serial so results are
bit-reproducible.
"""
import numpy as np

from libc.math cimport floor

ctypedef fused real:
    float
    double


cdef inline Py_ssize_t _out_size(Py_ssize_t n, Py_ssize_t k, Py_ssize_t stride, Py_ssize_t pad):
    return (n + 2 * pad - k) // stride + 1


cdef inline void _ow_range(Py_ssize_t j, Py_ssize_t W, Py_ssize_t Wo, Py_ssize_t stride,
                           Py_ssize_t pad, Py_ssize_t *lo, Py_ssize_t *hi) nogil:
    # ow values whose input column ow * stride - pad + j lands inside [0, W)
    cdef Py_ssize_t a = pad - j, b = W - 1 + pad - j
    lo[0] = 0 if a <= 0 else (a + stride - 1) // stride
    hi[0] = 0 if b < 0 else b // stride + 1
    if hi[0] > Wo:
        hi[0] = Wo
    if lo[0] > hi[0]:
        lo[0] = hi[0]


def _im2col(real[:, :, :, ::1] x, real[:, :, ::1] out, int kh, int kw, int stride, int pad, double fill):
    cdef Py_ssize_t N = x.shape[0], C = x.shape[1], H = x.shape[2], W = x.shape[3]
    cdef Py_ssize_t Ho = _out_size(H, kh, stride, pad)
    cdef Py_ssize_t Wo = _out_size(W, kw, stride, pad)
    cdef Py_ssize_t n, c, i, j, oh, ow, ih, row, lo, hi, off
    cdef real f = <real>fill
    cdef real *dst
    cdef const real *src
    with nogil:
        for n in range(N):
            for c in range(C):
                for i in range(kh):
                    for j in range(kw):
                        row = (c * kh + i) * kw + j
                        _ow_range(j, W, Wo, stride, pad, &lo, &hi)
                        off = j - pad
                        for oh in range(Ho):
                            dst = &out[n, row, oh * Wo]
                            ih = oh * stride - pad + i
                            if ih < 0 or ih >= H:
                                for ow in range(Wo):
                                    dst[ow] = f
                                continue
                            src = &x[n, c, ih, 0]
                            for ow in range(lo):
                                dst[ow] = f
                            if stride == 1:
                                for ow in range(lo, hi):
                                    dst[ow] = src[ow + off]
                            else:
                                for ow in range(lo, hi):
                                    dst[ow] = src[ow * stride + off]
                            for ow in range(hi, Wo):
                                dst[ow] = f


def im2col(x, int kh, int kw, int stride, int pad, double fill=0.0):
    x = np.ascontiguousarray(x)
    N, C, H, W = x.shape
    Ho = (H + 2 * pad - kh) // stride + 1
    Wo = (W + 2 * pad - kw) // stride + 1
    out = np.empty((N, C * kh * kw, Ho * Wo), dtype=x.dtype)
    _im2col(x, out, kh, kw, stride, pad, fill)
    return out


def _col2im(real[:, :, ::1] cols, real[:, :, :, ::1] out, int kh, int kw, int stride, int pad):
    cdef Py_ssize_t N = out.shape[0], C = out.shape[1], H = out.shape[2], W = out.shape[3]
    cdef Py_ssize_t Ho = _out_size(H, kh, stride, pad)
    cdef Py_ssize_t Wo = _out_size(W, kw, stride, pad)
    cdef Py_ssize_t n, c, i, j, oh, ow, ih, row, lo, hi, off
    cdef real *dst
    cdef const real *src
    with nogil:
        for n in range(N):
            for c in range(C):
                for i in range(kh):
                    for j in range(kw):
                        row = (c * kh + i) * kw + j
                        _ow_range(j, W, Wo, stride, pad, &lo, &hi)
                        off = j - pad
                        for oh in range(Ho):
                            ih = oh * stride - pad + i
                            if ih < 0 or ih >= H:
                                continue
                            src = &cols[n, row, oh * Wo]
                            dst = &out[n, c, ih, 0]
                            if stride == 1:
                                for ow in range(lo, hi):
                                    dst[ow + off] += src[ow]
                            else:
                                for ow in range(lo, hi):
                                    dst[ow * stride + off] += src[ow]


def col2im(cols, int C, int H, int W, int kh, int kw, int stride, int pad):
    cols = np.ascontiguousarray(cols)
    out = np.zeros((cols.shape[0], C, H, W), dtype=cols.dtype)
    _col2im(cols, out, kh, kw, stride, pad)
    return out


cdef inline bint _setup(real cx, real cy, Py_ssize_t H, Py_ssize_t W,
                        Py_ssize_t* x0, Py_ssize_t* y0, Py_ssize_t* x1, Py_ssize_t* y1,
                        real* wx, real* wy) nogil:
    if not (cx >= 0 and cx <= W - 1 and cy >= 0 and cy <= H - 1):
        return False
    cdef Py_ssize_t xm = W - 2 if W >= 2 else 0
    cdef Py_ssize_t ym = H - 2 if H >= 2 else 0
    x0[0] = <Py_ssize_t>floor(cx)
    y0[0] = <Py_ssize_t>floor(cy)
    if x0[0] > xm:
        x0[0] = xm
    if y0[0] > ym:
        y0[0] = ym
    x1[0] = x0[0] + 1 if x0[0] + 1 < W else W - 1
    y1[0] = y0[0] + 1 if y0[0] + 1 < H else H - 1
    wx[0] = cx - x0[0]
    wy[0] = cy - y0[0]
    return True


def _bilinear_forward(real[:, :, :, ::1] x, real[:, ::1] cx, real[:, ::1] cy,
                      real[:, :, ::1] out, unsigned char[:, ::1] valid):
    cdef Py_ssize_t N = x.shape[0], C = x.shape[1], H = x.shape[2], W = x.shape[3]
    cdef Py_ssize_t L = cx.shape[1]
    cdef Py_ssize_t n, c, k, x0, y0, x1, y1
    cdef real wx, wy
    with nogil:
        for n in range(N):
            for k in range(L):
                if not _setup(cx[n, k], cy[n, k], H, W, &x0, &y0, &x1, &y1, &wx, &wy):
                    valid[n, k] = 0
                    for c in range(C):
                        out[n, c, k] = 0
                    continue
                valid[n, k] = 1
                for c in range(C):
                    out[n, c, k] = (x[n, c, y0, x0] * ((1 - wx) * (1 - wy))
                                    + x[n, c, y0, x1] * (wx * (1 - wy))
                                    + x[n, c, y1, x0] * ((1 - wx) * wy)
                                    + x[n, c, y1, x1] * (wx * wy))


def bilinear_forward(x, cx, cy):
    x = np.ascontiguousarray(x)
    cx = np.ascontiguousarray(cx, dtype=x.dtype)
    cy = np.ascontiguousarray(cy, dtype=x.dtype)
    N, C = x.shape[:2]
    L = cx.shape[1]
    out = np.empty((N, C, L), dtype=x.dtype)
    valid = np.empty((N, L), dtype=np.uint8)
    _bilinear_forward(x, cx, cy, out, valid)
    return out, valid


def _bilinear_backward(real[:, :, :, ::1] x, real[:, ::1] cx, real[:, ::1] cy, real[:, :, ::1] g,
                       real[:, :, :, ::1] gx, real[:, ::1] gcx, real[:, ::1] gcy,
                       bint need_x, bint need_coords):
    cdef Py_ssize_t N = x.shape[0], C = x.shape[1], H = x.shape[2], W = x.shape[3]
    cdef Py_ssize_t L = cx.shape[1]
    cdef Py_ssize_t n, c, k, x0, y0, x1, y1
    cdef real wx, wy, gv, v00, v01, v10, v11, sx, sy
    with nogil:
        for n in range(N):
            for k in range(L):
                if not _setup(cx[n, k], cy[n, k], H, W, &x0, &y0, &x1, &y1, &wx, &wy):
                    if need_coords:
                        gcx[n, k] = 0
                        gcy[n, k] = 0
                    continue
                sx = 0
                sy = 0
                for c in range(C):
                    gv = g[n, c, k]
                    if need_x:
                        gx[n, c, y0, x0] += gv * ((1 - wx) * (1 - wy))
                        gx[n, c, y0, x1] += gv * (wx * (1 - wy))
                        gx[n, c, y1, x0] += gv * ((1 - wx) * wy)
                        gx[n, c, y1, x1] += gv * (wx * wy)
                    if need_coords:
                        v00 = x[n, c, y0, x0]
                        v01 = x[n, c, y0, x1]
                        v10 = x[n, c, y1, x0]
                        v11 = x[n, c, y1, x1]
                        sx = sx + gv * ((v01 - v00) * (1 - wy) + (v11 - v10) * wy)
                        sy = sy + gv * ((v10 - v00) * (1 - wx) + (v11 - v01) * wx)
                if need_coords:
                    gcx[n, k] = sx
                    gcy[n, k] = sy


def bilinear_backward(x, cx, cy, g, need_x=True, need_coords=True):
    x = np.ascontiguousarray(x)
    cx = np.ascontiguousarray(cx, dtype=x.dtype)
    cy = np.ascontiguousarray(cy, dtype=x.dtype)
    g = np.ascontiguousarray(g, dtype=x.dtype)
    N, L = cx.shape
    gx = np.zeros(x.shape, dtype=x.dtype)
    gcx = np.zeros((N, L), dtype=x.dtype)
    gcy = np.zeros((N, L), dtype=x.dtype)
    _bilinear_backward(x, cx, cy, g, gx, gcx, gcy, need_x, need_coords)
    return (gx if need_x else None), (gcx if need_coords else None), (gcy if need_coords else None)
