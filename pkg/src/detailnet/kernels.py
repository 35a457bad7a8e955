"""Backend selection for the hot loops.

The compiled extension is used when it was built; otherwise the numpy
fallback is used. Set ``DETAILNET_PURE_PYTHON=1`` to force the fallback.
"""

import os

import numpy as np

from . import _fallback

BACKEND = "python"
_impl = _fallback

if os.environ.get("DETAILNET_PURE_PYTHON", "") not in ("1", "true", "yes"):
    try:
        from . import _kernels as _compiled
    except ImportError:  # extension not built
        pass
    else:
        _impl = _compiled
        BACKEND = "cython"


def _as_c(a):
    return a if a.flags.c_contiguous else a.copy(order="C")


def im2col(x, kh, kw, stride, dilation, pad_h, pad_w, oh, ow):
    return _impl.im2col(_as_c(x), kh, kw, stride, dilation, pad_h, pad_w, oh, ow)


def col2im(cols, n, c, h, w, kh, kw, stride, dilation, pad_h, pad_w, oh, ow):
    return _impl.col2im(_as_c(cols), n, c, h, w, kh, kw, stride, dilation, pad_h, pad_w, oh, ow)


def maxpool_forward(x, k, stride, pad, oh, ow):
    return _impl.maxpool_forward(_as_c(x), k, stride, pad, oh, ow)


def maxpool_backward(grad, arg, h, w):
    return _impl.maxpool_backward(_as_c(grad), _as_c(arg), h, w)


def disc_gather(image, radius, max_r):
    image = np.ascontiguousarray(image, dtype=np.float64)
    radius = np.ascontiguousarray(radius, dtype=np.float64)
    return _impl.disc_gather(image, radius, int(max_r))


def available_backends():
    names = ["python"]
    try:
        from . import _kernels  # noqa: F401
    except ImportError:
        return names
    return ["cython"] + names


def use_backend(name):
    """Switch backend at runtime ("cython" or "python"). Returns the previous name."""
    global _impl, BACKEND
    previous = BACKEND
    if name == "python":
        _impl, BACKEND = _fallback, "python"
    elif name == "cython":
        from . import _kernels as _compiled

        _impl, BACKEND = _compiled, "cython"
    else:
        raise ValueError(f"unknown backend {name!r}")
    return previous
