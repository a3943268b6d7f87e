"""Hot inner-loop kernels with a compiled core and a pure-numpy fallback.

The compiled Cython module is preferred when importable; set
``CDSNET_KERNELS=python`` to force the fallback or ``=compiled`` to require
the extension.  Both backends implement the same contracts and the test
suite asserts they agree elementwise.
"""

import os

import numpy as np

from . import pyback

_mode = os.environ.get("CDSNET_KERNELS", "auto")
_fast = None
if _mode in ("auto", "compiled"):
    try:
        from . import _fastcore as _fast
    except ImportError:
        if _mode == "compiled":
            raise
        _fast = None

BACKEND = "compiled" if _fast is not None else "python"


def im2col(x, k, stride, padding):
    """Gather KxK patches of [N,C,H,W] into gemm-ready [C*K*K, N*L] columns."""
    if padding:
        x = np.pad(x, ((0, 0), (0, 0), (padding, padding), (padding, padding)))
    x = np.ascontiguousarray(x)
    if _fast is not None:
        return _fast.im2col(x, k, stride)
    return pyback.im2col(x, k, stride)


def col2im(cols, n, c, h, w, k, stride, padding):
    """Scatter-add columns back to an [N,C,H,W] image (adjoint of im2col)."""
    hp, wp = h + 2 * padding, w + 2 * padding
    cols = np.ascontiguousarray(cols)
    if _fast is not None:
        img = _fast.col2im(cols, n, c, hp, wp, k, stride)
    else:
        img = pyback.col2im(cols, n, c, hp, wp, k, stride)
    if padding:
        img = img[:, :, padding:hp - padding, padding:wp - padding]
    return img


def pool_argmax(score, window, stride):
    """Per-window flat spatial argmax of a real [N,C,H,W] score map.

    Ties resolve to the lowest flat index (window scan order is ascending
    in flat index, so first-maximum semantics give exactly that).
    """
    score = np.ascontiguousarray(score)
    if _fast is not None:
        return _fast.pool_argmax(score, window, stride)
    return pyback.pool_argmax(score, window, stride)


def gtrelu_planes(xr, xi, cr, ci, om, r, chan_stride, channels):
    """Fused forward; returns (yr, yi, saved) or None if no compiled core."""
    if _fast is None:
        return None
    flat = [np.ascontiguousarray(a).reshape(-1) for a in (xr, xi)]
    yr, yi, m, phi, ur, ui = _fast.gtrelu_forward(
        flat[0], flat[1], np.ascontiguousarray(cr), np.ascontiguousarray(ci),
        np.ascontiguousarray(om), float(r), chan_stride, channels)
    return yr, yi, (m, phi, ur, ui, flat[0], flat[1])


def gtrelu_planes_backward(gr, gi, saved, cr, ci, om, r, chan_stride, channels):
    m, phi, ur, ui, xr, xi = saved
    return _fast.gtrelu_backward(
        np.ascontiguousarray(gr).reshape(-1), np.ascontiguousarray(gi).reshape(-1),
        m, phi, ur, ui, xr, xi,
        np.ascontiguousarray(cr), np.ascontiguousarray(ci),
        np.ascontiguousarray(om), float(r), chan_stride, channels)
