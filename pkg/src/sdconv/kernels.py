"""Backend selection for the convolution kernels.

The compiled extension is preferred; set ``SDCONV_PURE_PYTHON=1`` to force
the numpy fallback.
"""
import os

from sdconv import _kernels_py as python_backend

try:
    if os.environ.get("SDCONV_PURE_PYTHON", "") not in ("", "0"):
        raise ImportError("pure python backend requested")
    from sdconv import _kernels as compiled_backend
except ImportError:
    compiled_backend = None

_impl = compiled_backend if compiled_backend is not None else python_backend
BACKEND = "compiled" if compiled_backend is not None else "python"


def im2col(xp, kh, kw, stride):
    return _impl.im2col(xp, kh, kw, stride)


def col2im(cols, channels, hp, wp, kh, kw, stride):
    return _impl.col2im(cols, channels, hp, wp, kh, kw, stride)


def sparse_conv2d(xp, weight, bias, stride, groups):
    return _impl.sparse_conv2d(xp, weight, bias, stride, groups)
