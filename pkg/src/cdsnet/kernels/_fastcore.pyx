# cython: boundscheck=False, wraparound=False, cdivision=True, language_level=3
"""Compiled patch-gather/scatter, pooling, and fused polar-form kernels."""

from libc.math cimport atan2, atan2f, cos, cosf, hypot, hypotf, sin, sinf

import numpy as np
cimport numpy as cnp

cnp.import_array()

ctypedef fused real_t:
    float
    double


def im2col(real_t[:, :, :, ::1] x, Py_ssize_t k, Py_ssize_t stride):
    """Columns laid out [C*K*K, N*L] so one gemm covers the whole batch."""
    cdef Py_ssize_t n = x.shape[0], c = x.shape[1], h = x.shape[2], w = x.shape[3]
    cdef Py_ssize_t ho = (h - k) // stride + 1
    cdef Py_ssize_t wo = (w - k) // stride + 1
    cdef Py_ssize_t L = ho * wo
    if real_t is float:
        out_arr = np.empty((c * k * k, n * L), dtype=np.float32)
    else:
        out_arr = np.empty((c * k * k, n * L), dtype=np.float64)
    cdef real_t[:, ::1] out = out_arr
    cdef Py_ssize_t ni, ci, u, v, i, j, row, base
    with nogil:
        for ci in range(c):
            for u in range(k):
                for v in range(k):
                    row = (ci * k + u) * k + v
                    for ni in range(n):
                        base = ni * L
                        for i in range(ho):
                            for j in range(wo):
                                out[row, base + i * wo + j] = \
                                    x[ni, ci, i * stride + u, j * stride + v]
    return out_arr


def col2im(real_t[:, ::1] cols, Py_ssize_t n, Py_ssize_t c, Py_ssize_t h,
           Py_ssize_t w, Py_ssize_t k, Py_ssize_t stride):
    cdef Py_ssize_t ho = (h - k) // stride + 1
    cdef Py_ssize_t wo = (w - k) // stride + 1
    cdef Py_ssize_t L = ho * wo
    if real_t is float:
        img_arr = np.zeros((n, c, h, w), dtype=np.float32)
    else:
        img_arr = np.zeros((n, c, h, w), dtype=np.float64)
    cdef real_t[:, :, :, ::1] img = img_arr
    cdef Py_ssize_t ni, ci, u, v, i, j, row, base
    with nogil:
        for ci in range(c):
            for u in range(k):
                for v in range(k):
                    row = (ci * k + u) * k + v
                    for ni in range(n):
                        base = ni * L
                        for i in range(ho):
                            for j in range(wo):
                                img[ni, ci, i * stride + u, j * stride + v] += \
                                    cols[row, base + i * wo + j]
    return img_arr


def pool_argmax(real_t[:, :, :, ::1] score, Py_ssize_t window, Py_ssize_t stride):
    cdef Py_ssize_t n = score.shape[0], c = score.shape[1]
    cdef Py_ssize_t h = score.shape[2], w = score.shape[3]
    cdef Py_ssize_t ho = (h - window) // stride + 1
    cdef Py_ssize_t wo = (w - window) // stride + 1
    idx_arr = np.empty((n, c, ho, wo), dtype=np.int64)
    cdef cnp.int64_t[:, :, :, ::1] idx = idx_arr
    cdef Py_ssize_t ni, ci, i, j, u, v, bi, bj
    cdef real_t best
    cdef Py_ssize_t best_flat
    with nogil:
        for ni in range(n):
            for ci in range(c):
                for i in range(ho):
                    for j in range(wo):
                        bi = i * stride
                        bj = j * stride
                        best = score[ni, ci, bi, bj]
                        best_flat = bi * w + bj
                        for u in range(window):
                            for v in range(window):
                                # strict > keeps the lowest flat index on ties
                                if score[ni, ci, bi + u, bj + v] > best:
                                    best = score[ni, ci, bi + u, bj + v]
                                    best_flat = (bi + u) * w + (bj + v)
                        idx[ni, ci, i, j] = best_flat
    return idx_arr


def gtrelu_forward(real_t[::1] xr, real_t[::1] xi, real_t[::1] cr, real_t[::1] ci,
                   real_t[::1] om, double r, Py_ssize_t chan_stride,
                   Py_ssize_t channels):
    """Fused y = max(r,|c*x|) * exp(i*om*max(angle(c*x),0)) over flat planes.

    Elements are grouped per channel in blocks of ``chan_stride``; the layout
    is [..,C,H,W] flattened with H*W = chan_stride.  Returns the output
    planes plus the intermediates the backward pass needs.
    """
    cdef Py_ssize_t total = xr.shape[0]
    if real_t is float:
        yr_a = np.empty(total, np.float32); yi_a = np.empty(total, np.float32)
        m_a = np.empty(total, np.float32); phi_a = np.empty(total, np.float32)
        ur_a = np.empty(total, np.float32); ui_a = np.empty(total, np.float32)
    else:
        yr_a = np.empty(total, np.float64); yi_a = np.empty(total, np.float64)
        m_a = np.empty(total, np.float64); phi_a = np.empty(total, np.float64)
        ur_a = np.empty(total, np.float64); ui_a = np.empty(total, np.float64)
    cdef real_t[::1] yr = yr_a, yi = yi_a, m = m_a, phi = phi_a, ur = ur_a, ui = ui_a
    cdef Py_ssize_t idx, ch
    cdef real_t a, b, mg, ph, amp, psi
    with nogil:
        for idx in range(total):
            ch = (idx // chan_stride) % channels
            a = cr[ch] * xr[idx] - ci[ch] * xi[idx]
            b = cr[ch] * xi[idx] + ci[ch] * xr[idx]
            ur[idx] = a
            ui[idx] = b
            if real_t is float:
                mg = hypotf(a, b)
                ph = atan2f(b, a) if mg > 0 else 0.0
            else:
                mg = hypot(a, b)
                ph = atan2(b, a) if mg > 0 else 0.0
            m[idx] = mg
            phi[idx] = ph
            amp = mg if mg > r else <real_t> r
            psi = om[ch] * ph if ph > 0 else 0.0
            if real_t is float:
                yr[idx] = amp * cosf(psi)
                yi[idx] = amp * sinf(psi)
            else:
                yr[idx] = amp * cos(psi)
                yi[idx] = amp * sin(psi)
    return yr_a, yi_a, m_a, phi_a, ur_a, ui_a


def gtrelu_backward(real_t[::1] gr, real_t[::1] gi, real_t[::1] m, real_t[::1] phi,
                    real_t[::1] ur, real_t[::1] ui, real_t[::1] xr, real_t[::1] xi,
                    real_t[::1] cr, real_t[::1] ci, real_t[::1] om, double r,
                    Py_ssize_t chan_stride, Py_ssize_t channels):
    cdef Py_ssize_t total = gr.shape[0]
    if real_t is float:
        dxr_a = np.empty(total, np.float32); dxi_a = np.empty(total, np.float32)
        dcr_a = np.zeros(channels, np.float32); dci_a = np.zeros(channels, np.float32)
        dom_a = np.zeros(channels, np.float32)
    else:
        dxr_a = np.empty(total, np.float64); dxi_a = np.empty(total, np.float64)
        dcr_a = np.zeros(channels, np.float64); dci_a = np.zeros(channels, np.float64)
        dom_a = np.zeros(channels, np.float64)
    cdef real_t[::1] dxr = dxr_a, dxi = dxi_a, dcr = dcr_a, dci = dci_a, dom = dom_a
    cdef Py_ssize_t idx, ch
    cdef real_t psi, cp, sp, d_amp, d_psi, d_m, d_phi, dur, dui, mg
    with nogil:
        for idx in range(total):
            ch = (idx // chan_stride) % channels
            psi = om[ch] * phi[idx] if phi[idx] > 0 else 0.0
            if real_t is float:
                cp = cosf(psi); sp = sinf(psi)
            else:
                cp = cos(psi); sp = sin(psi)
            mg = m[idx]
            d_amp = gr[idx] * cp + gi[idx] * sp
            d_psi = (mg if mg > r else <real_t> r) * (gi[idx] * cp - gr[idx] * sp)
            d_m = d_amp if mg > r else 0.0
            d_phi = d_psi * om[ch] if phi[idx] > 0 else 0.0
            if phi[idx] > 0:
                dom[ch] += d_psi * phi[idx]
            if mg > 0:
                dur = d_m * ur[idx] / mg - d_phi * ui[idx] / (mg * mg)
                dui = d_m * ui[idx] / mg + d_phi * ur[idx] / (mg * mg)
            else:
                dur = 0.0
                dui = 0.0
            dcr[ch] += dur * xr[idx] + dui * xi[idx]
            dci[ch] += dui * xr[idx] - dur * xi[idx]
            dxr[idx] = dur * cr[ch] + dui * ci[ch]
            dxi[idx] = dui * cr[ch] - dur * ci[ch]
    return dxr_a, dxi_a, dcr_a, dci_a, dom_a
