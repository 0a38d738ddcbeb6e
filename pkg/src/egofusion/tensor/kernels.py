"""Kernel backend selection.

The compiled extension is preferred; set ``EGOFUSION_PURE_PYTHON=1`` to
force the numpy fallback (useful for parity tests and benchmarks).
"""
import os

from . import _pykernels

BACKEND = "python"
_impl = _pykernels

if not os.environ.get("EGOFUSION_PURE_PYTHON"):
    try:
        from . import _ckernels as _impl  # noqa: F811
        BACKEND = "cython"
    except ImportError:
        pass

im2col = _impl.im2col
col2im = _impl.col2im
bilinear_forward = _impl.bilinear_forward
bilinear_backward = _impl.bilinear_backward

__all__ = ["BACKEND", "im2col", "col2im", "bilinear_forward", "bilinear_backward"]
