"""Pure-numpy implementations of the kernel contracts."""

import numpy as np
from numpy.lib.stride_tricks import as_strided


def _patch_view(x, k, stride):
    n, c, h, w = x.shape
    ho = (h - k) // stride + 1
    wo = (w - k) // stride + 1
    sn, sc, sh, sw = x.strides
    return as_strided(
        x,
        shape=(n, c, k, k, ho, wo),
        strides=(sn, sc, sh, sw, sh * stride, sw * stride),
        writeable=False,
    )


def im2col(x, k, stride):
    """Gather patches into gemm-ready columns [C*K*K, N*L]."""
    n, c = x.shape[:2]
    view = _patch_view(x, k, stride)                  # [N,C,k,k,ho,wo]
    ho, wo = view.shape[4], view.shape[5]
    cols = view.transpose(1, 2, 3, 0, 4, 5)           # [C,k,k,N,ho,wo]
    return np.ascontiguousarray(cols).reshape(c * k * k, n * ho * wo)


def col2im(cols, n, c, h, w, k, stride):
    """Adjoint of im2col: scatter-add columns back onto [N,C,H,W]."""
    ho = (h - k) // stride + 1
    wo = (w - k) // stride + 1
    img = np.zeros((n, c, h, w), cols.dtype)
    patches = cols.reshape(c, k, k, n, ho, wo).transpose(3, 0, 1, 2, 4, 5)
    for u in range(k):
        for v in range(k):
            img[:, :, u:u + ho * stride:stride, v:v + wo * stride:stride] += \
                patches[:, :, u, v]
    return img


def pool_argmax(score, window, stride):
    n, c, h, w = score.shape
    view = _patch_view(score, window, stride)          # [N,C,k,k,ho,wo]
    ho, wo = view.shape[4], view.shape[5]
    flat = np.ascontiguousarray(view.transpose(0, 1, 4, 5, 2, 3)).reshape(
        n, c, ho, wo, window * window)
    local = flat.argmax(axis=4)                        # first max = lowest (u,v)
    u, v = np.divmod(local, window)
    base_i = np.arange(ho)[None, None, :, None] * stride
    base_j = np.arange(wo)[None, None, None, :] * stride
    return ((base_i + u) * w + (base_j + v)).astype(np.int64)
