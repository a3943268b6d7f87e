"""Real-valued layer primitives for the baseline models and real heads."""

from __future__ import annotations

import numpy as np

from ..autodiff import Var, accumulate
from ..exceptions import ShapeError
from .. import kernels


def real_conv2d(x, w, b=None, stride=1, padding=0, tape=None):
    """Standard real 2-D cross-correlation with optional bias."""
    v = x.value
    squeeze = v.ndim == 3
    xv = v[None] if squeeze else v
    n, c, h, wd = xv.shape
    c_out, c_in, k, _ = w.value.shape
    if c_in != c:
        raise ShapeError(f"kernel expects {c_in} channels, input has {c}")
    cols = kernels.im2col(xv, k, stride, padding)         # [C*K*K, N*L]
    ho = (h + 2 * padding - k) // stride + 1
    wo = (wd + 2 * padding - k) // stride + 1
    wm = w.value.reshape(c_out, -1)
    out_v = (wm @ cols).reshape(c_out, n, ho, wo).transpose(1, 0, 2, 3)
    out_v = np.ascontiguousarray(out_v)
    if b is not None:
        out_v = out_v + b.value[None, :, None, None]
    out = Var(out_v[0] if squeeze else out_v)
    if tape is None:
        return out

    def bwd():
        g = out.grad
        if g is None:
            return
        gv = (g[None] if squeeze else g).transpose(1, 0, 2, 3)
        gv = np.ascontiguousarray(gv).reshape(c_out, -1)     # [C_out, N*L]
        accumulate(w, (gv @ cols.T).reshape(w.value.shape))
        if b is not None:
            accumulate(b, gv.sum(axis=1))
        dcols = wm.T @ gv
        dx = kernels.col2im(dcols, n, c, h, wd, k, stride, padding)
        accumulate(x, dx[0] if squeeze else dx)

    tape.record(bwd)
    return out


def relu(x, tape=None):
    v = x.value
    mask = v > 0
    out = Var(np.where(mask, v, 0.0).astype(v.dtype))
    if tape is None:
        return out

    def bwd():
        g = out.grad
        if g is None:
            return
        accumulate(x, g * mask)

    tape.record(bwd)
    return out


def fc(x, w, b=None, tape=None):
    """Affine map out = x @ W^T + b on [D] or [N,D] inputs."""
    v = x.value
    squeeze = v.ndim == 1
    xv = v[None] if squeeze else v
    out_v = xv @ w.value.T
    if b is not None:
        out_v = out_v + b.value[None, :]
    out = Var(out_v[0] if squeeze else out_v)
    if tape is None:
        return out

    def bwd():
        g = out.grad
        if g is None:
            return
        gv = g[None] if squeeze else g
        accumulate(w, gv.T @ xv)
        if b is not None:
            accumulate(b, gv.sum(axis=0))
        dx = gv @ w.value
        accumulate(x, dx[0] if squeeze else dx)

    tape.record(bwd)
    return out


def avgpool(x, window, stride=None, tape=None):
    """Mean over non-overlapping (or strided) square windows."""
    stride = window if stride is None else stride
    v = x.value
    squeeze = v.ndim == 3
    xv = v[None] if squeeze else v
    n, c, h, w = xv.shape
    ho = (h - window) // stride + 1
    wo = (w - window) // stride + 1
    cols = kernels.im2col(xv.reshape(n * c, 1, h, w), window, stride, 0)
    out_v = cols.mean(axis=0).reshape(n, c, ho, wo)      # cols: [K*K, (N*C)*L]
    out = Var(out_v[0] if squeeze else out_v)
    if tape is None:
        return out

    def bwd():
        g = out.grad
        if g is None:
            return
        gv = (g[None] if squeeze else g).reshape(1, -1)
        scale = 1.0 / (window * window)
        dcols = np.broadcast_to(gv * scale, (window * window, gv.size))
        dx = kernels.col2im(np.ascontiguousarray(dcols), n * c, 1, h, w,
                            window, stride, 0)
        dx = dx.reshape(n, c, h, w)
        accumulate(x, dx[0] if squeeze else dx)

    tape.record(bwd)
    return out
