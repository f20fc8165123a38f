"""Hot inner loops with a compiled backend and a numpy fallback.

The Cython extension is used when it was built; otherwise the numpy module
is. ``use_backend`` switches explicitly (tests and the benchmark compare the
two).
"""

import numpy as np

from . import _numpy

try:
    from . import _ckernels
except ImportError:  # extension not built
    _ckernels = None

BACKENDS = {"numpy": _numpy}
if _ckernels is not None:
    BACKENDS["cython"] = _ckernels

_active = "cython" if _ckernels is not None else "numpy"


def backend():
    return _active


def use_backend(name):
    """Select ``"cython"`` or ``"numpy"``; returns the previous name."""
    global _active
    if name not in BACKENDS:
        raise ValueError(f"kernel backend {name!r} unavailable; have {sorted(BACKENDS)}")
    previous, _active = _active, name
    return previous


def _impl():
    return BACKENDS[_active]


def _c(a, dtype=None):
    return np.ascontiguousarray(a, dtype=dtype)


def composite_forward(sigma, rgb, delta):
    dt = sigma.dtype
    return _impl().composite_forward(_c(sigma), _c(rgb, dt), _c(delta, dt))


def composite_backward(sigma, rgb, delta, weights, t_final, g_color, g_tfinal):
    dt = sigma.dtype
    return _impl().composite_backward(
        _c(sigma), _c(rgb, dt), _c(delta, dt), _c(weights, dt), _c(t_final, dt), _c(g_color, dt), _c(g_tfinal, dt)
    )


def sample_pdf(edges, weights, u):
    dt = edges.dtype
    return _impl().sample_pdf(_c(edges), _c(weights, dt), _c(u, np.float64))


def bilinear_sample(image, x, y):
    return _impl().bilinear_sample(_c(image), _c(x, np.float64), _c(y, np.float64))


def im2col(x, kh, kw, stride, pad):
    return _impl().im2col(_c(x), kh, kw, stride, pad)


def col2im(cols, shape, kh, kw, stride, pad):
    B, H, W, C = shape
    return _impl().col2im(_c(cols), B, H, W, C, kh, kw, stride, pad)
