"""Differentiable primitives: forward math plus hand-written backward rules.

Every function takes ``Var`` inputs and an optional ``Tape``; with a tape the
function appends a closure that routes output cotangents to input/parameter
cotangents.  Complex cotangents follow the real-pair convention of
``cdsnet.autodiff``.
"""

from __future__ import annotations

import numpy as np

from ..autodiff import Var, accumulate
from ..ctensor import ComplexTensor, _conv_planes
from ..exceptions import ShapeError
from .. import kernels

MAG_FLOOR = 1e-12  # magnitude floor before logs / phase normalization


def _unbroadcast(g, shape):
    """Sum a gradient back down to ``shape`` after numpy broadcasting."""
    extra = g.ndim - len(shape)
    if extra:
        g = g.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, (gs, s) in enumerate(zip(g.shape, shape)) if s == 1 and gs != 1)
    if axes:
        g = g.sum(axis=axes, keepdims=True)
    return g


def _zero_grad_like(value):
    if isinstance(value, ComplexTensor):
        return ComplexTensor(np.zeros_like(value.re), np.zeros_like(value.im))
    return np.zeros_like(value)


# -- complex linear maps ------------------------------------------------------


def cconv2d(x, w, stride=1, padding=0, groups=1, method="gauss", tape=None):
    """Bias-free complex convolution of Var ``x`` by Parameter ``w``."""
    z = x.value
    squeeze = z.ndim == 3
    a = z.re[None] if squeeze else z.re
    b = z.im[None] if squeeze else z.im
    out_re, out_im, (cols_a, cols_b) = _conv_planes(
        a, b, w.value.re, w.value.im, stride, padding, groups, method)
    if squeeze:
        out = Var(ComplexTensor(out_re[0], out_im[0]))
    else:
        out = Var(ComplexTensor(out_re, out_im))
    if tape is None:
        return out

    n, c, h, wd = a.shape
    c_out = w.value.shape[0]
    k = w.value.shape[2]
    ho, wo = out_re.shape[-2], out_re.shape[-1]
    cg_kk = (c // groups) * k * k
    cog = c_out // groups
    nl = n * ho * wo

    def bwd():
        g = out.grad
        if g is None:
            return
        gre = g.re[None] if squeeze else g.re
        gim = g.im[None] if squeeze else g.im
        # to [G, C_out/G, N*L] matching the gemm-ready column layout
        gre = np.ascontiguousarray(gre.transpose(1, 0, 2, 3)).reshape(groups, cog, nl)
        gim = np.ascontiguousarray(gim.transpose(1, 0, 2, 3)).reshape(groups, cog, nl)
        ca = cols_a.reshape(groups, cg_kk, nl)
        cb = cols_b.reshape(groups, cg_kk, nl)
        wx = w.value.re.reshape(groups, cog, cg_kk)
        wy = w.value.im.reshape(groups, cog, cg_kk)
        cat = ca.transpose(0, 2, 1)
        cbt = cb.transpose(0, 2, 1)
        dwx = np.matmul(gre, cat) + np.matmul(gim, cbt)
        dwy = np.matmul(gim, cat) - np.matmul(gre, cbt)
        accumulate(w, ComplexTensor(dwx.reshape(w.value.shape),
                                    dwy.reshape(w.value.shape)))
        wxt = wx.transpose(0, 2, 1)
        wyt = wy.transpose(0, 2, 1)
        dca = (np.matmul(wxt, gre) + np.matmul(wyt, gim)).reshape(-1, nl)
        dcb = (np.matmul(wxt, gim) - np.matmul(wyt, gre)).reshape(-1, nl)
        da = kernels.col2im(dca, n, c, h, wd, k, stride, padding)
        db = kernels.col2im(dcb, n, c, h, wd, k, stride, padding)
        if squeeze:
            da, db = da[0], db[0]
        accumulate(x, ComplexTensor(da, db))

    tape.record(bwd)
    return out


def cfc(x, w, tape=None):
    """Complex fully-connected map: out = x @ W^T, bias free."""
    xv = x.value
    squeeze = xv.ndim == 1
    xr = xv.re[None] if squeeze else xv.re
    xi = xv.im[None] if squeeze else xv.im
    wr, wi = w.value.re, w.value.im
    out_re = xr @ wr.T - xi @ wi.T
    out_im = xr @ wi.T + xi @ wr.T
    if squeeze:
        out = Var(ComplexTensor(out_re[0], out_im[0]))
    else:
        out = Var(ComplexTensor(out_re, out_im))
    if tape is None:
        return out

    def bwd():
        g = out.grad
        if g is None:
            return
        gre = g.re[None] if squeeze else g.re
        gim = g.im[None] if squeeze else g.im
        dwr = gre.T @ xr + gim.T @ xi
        dwi = gim.T @ xr - gre.T @ xi
        accumulate(w, ComplexTensor(dwr, dwi))
        dxr = gre @ wr + gim @ wi
        dxi = gim @ wr - gre @ wi
        if squeeze:
            dxr, dxi = dxr[0], dxi[0]
        accumulate(x, ComplexTensor(dxr, dxi))

    tape.record(bwd)
    return out


def cbias(x, b, tape=None):
    """Add a per-channel complex bias (channel axis -3, or -1 for vectors)."""
    xv = x.value
    if xv.ndim >= 3:
        shape = (-1,) + (1,) * 2
        br, bi = b.value.re.reshape(shape), b.value.im.reshape(shape)
    else:
        br, bi = b.value.re, b.value.im
    out = Var(ComplexTensor(xv.re + br, xv.im + bi))
    if tape is None:
        return out

    def bwd():
        g = out.grad
        if g is None:
            return
        accumulate(x, g)
        gb_re = _unbroadcast(g.re, br.shape).reshape(b.value.shape)
        gb_im = _unbroadcast(g.im, bi.shape).reshape(b.value.shape)
        accumulate(b, ComplexTensor(gb_re, gb_im))

    tape.record(bwd)
    return out


# -- elementwise complex ops --------------------------------------------------


def cmul(x, y, tape=None):
    """Elementwise complex product with numpy broadcasting."""
    a, b = x.value, y.value
    out = Var(ComplexTensor(a.re * b.re - a.im * b.im, a.re * b.im + a.im * b.re))
    if tape is None:
        return out

    def bwd():
        g = out.grad
        if g is None:
            return
        dxr = g.re * b.re + g.im * b.im
        dxi = g.im * b.re - g.re * b.im
        accumulate(x, ComplexTensor(_unbroadcast(dxr, a.shape), _unbroadcast(dxi, a.shape)))
        dyr = g.re * a.re + g.im * a.im
        dyi = g.im * a.re - g.re * a.im
        accumulate(y, ComplexTensor(_unbroadcast(dyr, b.shape), _unbroadcast(dyi, b.shape)))

    tape.record(bwd)
    return out


def conj(x, tape=None):
    out = Var(ComplexTensor(x.value.re.copy(), -x.value.im))
    if tape is None:
        return out

    def bwd():
        g = out.grad
        if g is None:
            return
        accumulate(x, ComplexTensor(g.re, -g.im))

    tape.record(bwd)
    return out


def channel_mean(x, tape=None):
    """Mean over the channel axis (-3), keeping the dim."""
    v = x.value
    c = v.shape[-3]
    out = Var(ComplexTensor(v.re.mean(axis=-3, keepdims=True),
                            v.im.mean(axis=-3, keepdims=True)))
    if tape is None:
        return out

    def bwd():
        g = out.grad
        if g is None:
            return
        scale = 1.0 / c
        accumulate(x, ComplexTensor(
            np.broadcast_to(g.re * scale, v.shape).copy(),
            np.broadcast_to(g.im * scale, v.shape).copy()))

    tape.record(bwd)
    return out


def vector_mean(x, tape=None):
    """Mean over the last axis of a complex vector [.., D] -> [.., 1]."""
    v = x.value
    d = v.shape[-1]
    out = Var(ComplexTensor(v.re.mean(axis=-1, keepdims=True),
                            v.im.mean(axis=-1, keepdims=True)))
    if tape is None:
        return out

    def bwd():
        g = out.grad
        if g is None:
            return
        scale = 1.0 / d
        accumulate(x, ComplexTensor(
            np.broadcast_to(g.re * scale, v.shape).copy(),
            np.broadcast_to(g.im * scale, v.shape).copy()))

    tape.record(bwd)
    return out


def unit_phase(x, floor=MAG_FLOOR, tape=None):
    """x / max(|x|, floor): keeps phase, flattens magnitude to ~1."""
    v = x.value
    mag = np.hypot(v.re, v.im)
    above = mag > floor
    mf = np.where(above, mag, floor)
    out = Var(ComplexTensor(v.re / mf, v.im / mf))
    if tape is None:
        return out

    def bwd():
        g = out.grad
        if g is None:
            return
        m3 = mf * mf * mf
        # tangent projection: only the component orthogonal to x survives
        t = g.re * v.im - g.im * v.re
        dre = np.where(above, v.im * t / m3, g.re / floor)
        dim = np.where(above, -v.re * t / m3, g.im / floor)
        accumulate(x, ComplexTensor(dre, dim))

    tape.record(bwd)
    return out


def crelu(x, tape=None):
    """ReLU applied independently to the real and imaginary planes."""
    v = x.value
    mr = v.re > 0
    mi = v.im > 0
    out = Var(ComplexTensor(np.where(mr, v.re, 0.0).astype(v.dtype),
                            np.where(mi, v.im, 0.0).astype(v.dtype)))
    if tape is None:
        return out

    def bwd():
        g = out.grad
        if g is None:
            return
        accumulate(x, ComplexTensor(g.re * mr, g.im * mi))

    tape.record(bwd)
    return out


def gtrelu(x, c, omega, r, tape=None):
    """Generalized tangent ReLU.

    Per element with the channel's learned complex scale c and phase scale
    omega: y = max(r, |c*x|) * exp(i * omega * max(angle(c*x), 0)).
    """
    v = x.value
    if v.ndim < 3:
        raise ShapeError("gtrelu expects [..,C,H,W]")
    channels = v.shape[-3]
    hw = v.shape[-2] * v.shape[-1]
    fused = kernels.gtrelu_planes(v.re, v.im, c.value.re, c.value.im,
                                  omega.value, r, hw, channels)
    if fused is not None:
        yr, yi, saved = fused
        out = Var(ComplexTensor(yr.reshape(v.shape), yi.reshape(v.shape)))
        if tape is None:
            return out

        def bwd_fused():
            g = out.grad
            if g is None:
                return
            dxr, dxi, dcr, dci, dom = kernels.gtrelu_planes_backward(
                g.re, g.im, saved, c.value.re, c.value.im, omega.value, r,
                hw, channels)
            accumulate(omega, dom)
            accumulate(c, ComplexTensor(dcr, dci))
            accumulate(x, ComplexTensor(dxr.reshape(v.shape), dxi.reshape(v.shape)))

        tape.record(bwd_fused)
        return out

    bshape = (-1, 1, 1)
    cr = c.value.re.reshape(bshape)
    ci = c.value.im.reshape(bshape)
    om = omega.value.reshape(bshape)
    ur = cr * v.re - ci * v.im
    ui = cr * v.im + ci * v.re
    m = np.hypot(ur, ui)
    phi = np.where(m == 0, 0.0, np.arctan2(ui, ur))
    over = m > r
    amp = np.where(over, m, r).astype(v.dtype)
    pos = phi > 0
    psi = om * np.where(pos, phi, 0.0)
    cp, sp = np.cos(psi), np.sin(psi)
    out = Var(ComplexTensor(amp * cp, amp * sp))
    if tape is None:
        return out

    def bwd():
        g = out.grad
        if g is None:
            return
        d_amp = g.re * cp + g.im * sp
        d_psi = amp * (g.im * cp - g.re * sp)
        safe_m = np.where(m == 0, 1.0, m)
        d_m = np.where(over, d_amp, 0.0)
        d_phi = np.where(pos, d_psi * om, 0.0)
        d_om = np.where(pos, d_psi * phi, 0.0)
        dur = np.where(m == 0, 0.0, d_m * ur / safe_m - d_phi * ui / (safe_m * safe_m))
        dui = np.where(m == 0, 0.0, d_m * ui / safe_m + d_phi * ur / (safe_m * safe_m))
        sum_axes = tuple(i for i in range(v.ndim) if i != v.ndim - 3)
        accumulate(omega, d_om.sum(axis=sum_axes).reshape(omega.value.shape))
        dcr = (dur * v.re + dui * v.im).sum(axis=sum_axes).reshape(c.value.re.shape)
        dci = (dui * v.re - dur * v.im).sum(axis=sum_axes).reshape(c.value.im.shape)
        accumulate(c, ComplexTensor(dcr, dci))
        dxr = dur * cr + dui * ci
        dxi = dui * cr - dur * ci
        accumulate(x, ComplexTensor(dxr, dxi))

    tape.record(bwd)
    return out


# -- pooling ------------------------------------------------------------------


def eq_maxpool(x, window, stride=None, tape=None):
    """Select, per window, the complex value with maximal magnitude."""
    stride = window if stride is None else stride
    v = x.value
    squeeze = v.ndim == 3
    re = v.re[None] if squeeze else v.re
    im = v.im[None] if squeeze else v.im
    n, c, h, w = re.shape
    if window > h or window > w:
        raise ShapeError(f"window {window} exceeds spatial dims {h}x{w}")
    score = re * re + im * im  # argmax of |z| equals argmax of |z|^2
    idx = kernels.pool_argmax(score, window, stride)
    flat_idx = idx.reshape(n, c, -1)
    out_re = np.take_along_axis(re.reshape(n, c, -1), flat_idx, axis=2).reshape(idx.shape)
    out_im = np.take_along_axis(im.reshape(n, c, -1), flat_idx, axis=2).reshape(idx.shape)
    if squeeze:
        out = Var(ComplexTensor(out_re[0], out_im[0]))
    else:
        out = Var(ComplexTensor(out_re, out_im))
    if tape is None:
        return out, idx

    def bwd():
        g = out.grad
        if g is None:
            return
        gre = g.re[None] if squeeze else g.re
        gim = g.im[None] if squeeze else g.im
        dre = np.zeros((n, c, h * w), v.dtype)
        dim = np.zeros((n, c, h * w), v.dtype)
        np.add.at(dre, (np.arange(n)[:, None, None], np.arange(c)[None, :, None], flat_idx),
                  gre.reshape(n, c, -1))
        np.add.at(dim, (np.arange(n)[:, None, None], np.arange(c)[None, :, None], flat_idx),
                  gim.reshape(n, c, -1))
        dre = dre.reshape(n, c, h, w)
        dim = dim.reshape(n, c, h, w)
        if squeeze:
            dre, dim = dre[0], dim[0]
        accumulate(x, ComplexTensor(dre, dim))

    tape.record(bwd)
    return out, idx


# -- batch normalization ------------------------------------------------------


def eq_batchnorm(x, gamma, beta, state, train, tape=None):
    """Batch normalization on magnitudes only; phases pass straight through.

    The normalizing denominator is max(std, eps) rather than sqrt(var+eps):
    with the flooring form, positive rescaling of the batch is exactly
    invariant whenever the batch std stays above eps.
    """
    v = x.value
    if v.ndim != 4:
        raise ShapeError("eq_batchnorm expects [N,C,H,W]")
    n, c, h, w = v.shape
    mag = np.hypot(v.re, v.im)
    above = mag > MAG_FLOOR
    mf = np.where(above, mag, MAG_FLOOR)
    ur = v.re / mf
    ui = v.im / mf
    axes = (0, 2, 3)
    if train:
        if n * h * w < 2:
            raise ShapeError("train-mode batch norm needs at least 2 values per channel")
        mu = mf.mean(axis=axes)
        var = ((mf - mu[None, :, None, None]) ** 2).mean(axis=axes)
        state.update(mu, var)
    else:
        mu, var = state.stats_for_eval()
        mu = mu.astype(v.dtype)
        var = var.astype(v.dtype)
    sigma = np.sqrt(var)
    lifted = sigma > state.eps
    denom = np.where(lifted, sigma, state.eps)
    mu_b = mu[None, :, None, None]
    den_b = denom[None, :, None, None]
    mhat = (mf - mu_b) / den_b
    gb = gamma.value[None, :, None, None]
    bb = beta.value[None, :, None, None]
    hmap = gb * mhat + bb
    out = Var(ComplexTensor(hmap * ur, hmap * ui))
    if tape is None:
        return out

    def bwd():
        g = out.grad
        if g is None:
            return
        dh = g.re * ur + g.im * ui
        dur = g.re * hmap
        dui = g.im * hmap
        accumulate(gamma, (dh * mhat).sum(axis=axes))
        accumulate(beta, dh.sum(axis=axes))
        dmhat = dh * gb
        if train:
            mean_d = dmhat.mean(axis=axes)[None, :, None, None]
            mean_dx = (dmhat * mhat).mean(axis=axes)[None, :, None, None]
            lift_b = lifted[None, :, None, None]
            dmf = (dmhat - mean_d - np.where(lift_b, mhat * mean_dx, 0.0)) / den_b
        else:
            dmf = dmhat / den_b
        # unit-phase quotient contributes the tangent-projection terms
        t = dur * v.re + dui * v.im
        m3 = mf * mf * mf
        dxr = np.where(above, dur / mf - v.re * t / m3 + dmf * v.re / mf, dur / MAG_FLOOR)
        dxi = np.where(above, dui / mf - v.im * t / m3 + dmf * v.im / mf, dui / MAG_FLOOR)
        accumulate(x, ComplexTensor(dxr, dxi))

    tape.record(bwd)
    return out


# -- pairwise invariant ops ---------------------------------------------------


def div_pair(z1, z2, eps=1e-7, tape=None):
    """|z1|/(|z2|+eps) * exp(i(angle z1 - angle z2)); broadcasts z2."""
    a, b = z1.value, z2.value
    m1 = np.hypot(a.re, a.im)
    m2 = np.hypot(b.re, b.im)
    p1 = np.where(m1 == 0, 0.0, np.arctan2(a.im, a.re))
    p2 = np.where(m2 == 0, 0.0, np.arctan2(b.im, b.re))
    ratio = m1 / (m2 + eps)
    theta = p1 - p2
    ct, st = np.cos(theta), np.sin(theta)
    out = Var(ComplexTensor((ratio * ct).astype(a.dtype), (ratio * st).astype(a.dtype)))
    if tape is None:
        return out

    def bwd():
        g = out.grad
        if g is None:
            return
        dr = g.re * ct + g.im * st
        dth = ratio * (g.im * ct - g.re * st)
        s1 = np.where(m1 == 0, 1.0, m1)
        s2 = np.where(m2 == 0, 1.0, m2)
        dm1 = dr / (m2 + eps)
        dm2 = -dr * ratio / (m2 + eps)
        da_r = np.where(m1 == 0, 0.0, dm1 * a.re / s1 - dth * a.im / (s1 * s1))
        da_i = np.where(m1 == 0, 0.0, dm1 * a.im / s1 + dth * a.re / (s1 * s1))
        db_r = np.where(m2 == 0, 0.0, dm2 * b.re / s2 + dth * b.im / (s2 * s2))
        db_i = np.where(m2 == 0, 0.0, dm2 * b.im / s2 - dth * b.re / (s2 * s2))
        accumulate(z1, ComplexTensor(_unbroadcast(da_r, a.shape), _unbroadcast(da_i, a.shape)))
        accumulate(z2, ComplexTensor(_unbroadcast(db_r, b.shape), _unbroadcast(db_i, b.shape)))

    tape.record(bwd)
    return out


def conj_pair(z1, z2, tape=None):
    """z1 * conj(z2); phase-offset invariant, |s|^2-equivariant in magnitude."""
    a, b = z1.value, z2.value
    out = Var(ComplexTensor(a.re * b.re + a.im * b.im, a.im * b.re - a.re * b.im))
    if tape is None:
        return out

    def bwd():
        g = out.grad
        if g is None:
            return
        # d z1 = g * z2 ; d z2 = conj(g) * z1
        da_r = g.re * b.re - g.im * b.im
        da_i = g.re * b.im + g.im * b.re
        db_r = g.re * a.re + g.im * a.im
        db_i = g.re * a.im - g.im * a.re
        accumulate(z1, ComplexTensor(_unbroadcast(da_r, a.shape), _unbroadcast(da_i, a.shape)))
        accumulate(z2, ComplexTensor(_unbroadcast(db_r, b.shape), _unbroadcast(db_i, b.shape)))

    tape.record(bwd)
    return out


# -- distances and prototype logits -------------------------------------------


def wrap_angle(delta):
    """Wrap angle differences onto the principal branch (-pi, pi]."""
    wrapped = np.mod(delta + np.pi, 2 * np.pi) - np.pi
    return np.where(wrapped == -np.pi, np.pi, wrapped)


def arcdist(a, b):
    """Geodesic distance on the circle: min(|a-b|, 2pi-|a-b|)."""
    return np.abs(wrap_angle(np.asarray(a) - np.asarray(b)))


def manifold_distance(z1, z2, floor=MAG_FLOOR):
    """Log-magnitude/phase metric between complex scalars or arrays."""
    m1 = np.maximum(np.hypot(np.real(z1), np.imag(z1)), floor)
    m2 = np.maximum(np.hypot(np.real(z2), np.imag(z2)), floor)
    p1 = np.arctan2(np.imag(z1), np.real(z1))
    p2 = np.arctan2(np.imag(z2), np.real(z2))
    return np.sqrt((np.log(m1) - np.log(m2)) ** 2 + arcdist(p1, p2) ** 2)


def prototype_logits(f, protos, log_alpha, metric="euclidean", invariant=False,
                     tape=None, floor=MAG_FLOOR):
    """Logits as negative scaled distances to per-class prototypes.

    ``f`` is [D] or [N,D]; ``protos`` holds [K,D] complex prototypes.  The
    invariant variant multiplies prototypes by the mean of f over the
    embedding dimension before measuring distances.
    """
    fv = f.value
    squeeze = fv.ndim == 1
    fr = fv.re[None] if squeeze else fv.re    # [N,D]
    fi = fv.im[None] if squeeze else fv.im
    pr = protos.value.re                       # [K,D]
    pi_ = protos.value.im
    n, d = fr.shape
    k = pr.shape[0]
    alpha = float(np.exp(log_alpha.value))

    if invariant:
        mr = fr.mean(axis=1)                   # [N]
        mi = fi.mean(axis=1)
        qr = pr[None] * mr[:, None, None] - pi_[None] * mi[:, None, None]
        qi = pr[None] * mi[:, None, None] + pi_[None] * mr[:, None, None]
    else:
        qr = np.broadcast_to(pr[None], (n, k, d))
        qi = np.broadcast_to(pi_[None], (n, k, d))

    fr_b = fr[:, None, :]
    fi_b = fi[:, None, :]
    if metric == "euclidean":
        dr = fr_b - qr
        di = fi_b - qi
        dist = np.sqrt((dr * dr + di * di).sum(axis=2))     # [N,K]
    elif metric == "manifold":
        m_f = np.maximum(np.hypot(fr_b, fi_b), floor)
        m_q = np.maximum(np.hypot(qr, qi), floor)
        p_f = np.arctan2(fi_b, fr_b)
        p_q = np.arctan2(qi, qr)
        e = np.log(m_f) - np.log(m_q)
        wda = wrap_angle(p_f - p_q)
        dist = np.sqrt((e * e + wda * wda).sum(axis=2))
    else:
        raise ValueError(f"unknown metric {metric!r}")
    logits = -alpha * dist
    out = Var(logits[0] if squeeze else logits)
    if tape is None:
        return out

    def bwd():
        g = out.grad
        if g is None:
            return
        gl = g[None] if squeeze else g                     # [N,K]
        accumulate(log_alpha, np.asarray((gl * logits).sum()))
        safe = np.where(dist == 0, 1.0, dist)
        dd = np.where(dist == 0, 0.0, -alpha * gl)          # dL/d dist
        if metric == "euclidean":
            coef = (dd / safe)[:, :, None]
            dfr = (coef * dr).sum(axis=1)
            dfi = (coef * di).sum(axis=1)
            dqr = -(coef * dr)
            dqi = -(coef * di)
        else:
            coef = (dd / safe)[:, :, None]
            de = coef * e
            dw = coef * wda
            m_f2 = m_f * m_f
            m_q2 = m_q * m_q
            dfr = (de * fr_b / m_f2 - dw * fi_b / m_f2).sum(axis=1)
            dfi = (de * fi_b / m_f2 + dw * fr_b / m_f2).sum(axis=1)
            dqr = -de * qr / m_q2 + dw * qi / m_q2
            dqi = -de * qi / m_q2 - dw * qr / m_q2
        if invariant:
            # q = p * m: route dq into prototypes and the mean scalar
            dpr = (dqr * mr[:, None, None] + dqi * mi[:, None, None]).sum(axis=0)
            dpi = (dqi * mr[:, None, None] - dqr * mi[:, None, None]).sum(axis=0)
            dmr = (dqr * pr[None] + dqi * pi_[None]).sum(axis=(1, 2))
            dmi = (dqi * pr[None] - dqr * pi_[None]).sum(axis=(1, 2))
            dfr = dfr + dmr[:, None] / d
            dfi = dfi + dmi[:, None] / d
        else:
            dpr = dqr.sum(axis=0)
            dpi = dqi.sum(axis=0)
        accumulate(protos, ComplexTensor(dpr, dpi))
        if squeeze:
            accumulate(f, ComplexTensor(dfr[0], dfi[0]))
        else:
            accumulate(f, ComplexTensor(dfr, dfi))

    tape.record(bwd)
    return out


# -- complex <-> real conversions ----------------------------------------------


def complex_to_real(x, floor=MAG_FLOOR, tape=None):
    """Per input channel, emit (log magnitude, sin phase, cos phase) channels."""
    v = x.value
    if v.ndim < 3:
        raise ShapeError("complex_to_real expects [..,C,H,W]")
    mag = np.hypot(v.re, v.im)
    above = mag > floor
    mf = np.where(above, mag, floor)
    zero = mag == 0
    lg = np.log(mf)
    s = np.where(zero, 0.0, v.im / mf)
    c_ = np.where(zero, 1.0, v.re / mf)
    stacked = np.stack([lg, s, c_], axis=-3)          # [..,C,3,H,W]
    shp = list(v.shape)
    cax = len(shp) - 3
    merged = stacked.reshape(shp[:cax] + [3 * shp[cax]] + shp[cax + 1:])
    out = Var(merged.astype(v.dtype))
    if tape is None:
        return out

    def bwd():
        g = out.grad
        if g is None:
            return
        gs = g.reshape(shp[:cax] + [shp[cax], 3] + shp[cax + 1:])
        g_lg = np.take(gs, 0, axis=cax + 1)
        g_s = np.take(gs, 1, axis=cax + 1)
        g_c = np.take(gs, 2, axis=cax + 1)
        m3 = mf * mf * mf
        live = ~zero
        dre = np.where(above, g_lg * v.re / (mf * mf), 0.0)
        dim = np.where(above, g_lg * v.im / (mf * mf), 0.0)
        dre = dre + np.where(live, -g_s * v.im * v.re / m3 + g_c * v.im * v.im / m3, 0.0)
        dim = dim + np.where(live, g_s * v.re * v.re / m3 - g_c * v.re * v.im / m3, 0.0)
        accumulate(x, ComplexTensor(dre, dim))

    tape.record(bwd)
    return out


def stack_reim(x, tape=None):
    """Interleave planes into real channels: channel 2c = re_c, 2c+1 = im_c."""
    v = x.value
    if v.ndim < 3:
        raise ShapeError("stack_reim expects [..,C,H,W]")
    stacked = np.stack([v.re, v.im], axis=-3)         # [..,C,2,H,W]
    shp = list(v.shape)
    cax = len(shp) - 3
    merged = stacked.reshape(shp[:cax] + [2 * shp[cax]] + shp[cax + 1:])
    out = Var(np.ascontiguousarray(merged))
    if tape is None:
        return out

    def bwd():
        g = out.grad
        if g is None:
            return
        gs = g.reshape(shp[:cax] + [shp[cax], 2] + shp[cax + 1:])
        accumulate(x, ComplexTensor(np.ascontiguousarray(np.take(gs, 0, axis=cax + 1)),
                                    np.ascontiguousarray(np.take(gs, 1, axis=cax + 1))))

    tape.record(bwd)
    return out


def creshape(x, shape, tape=None):
    """Reshape a complex Var; backward restores the original shape."""
    v = x.value
    out = Var(ComplexTensor(v.re.reshape(shape), v.im.reshape(shape)))
    if tape is None:
        return out

    def bwd():
        g = out.grad
        if g is None:
            return
        accumulate(x, ComplexTensor(g.re.reshape(v.shape), g.im.reshape(v.shape)))

    tape.record(bwd)
    return out


def flatten(x, tape=None):
    """Collapse all but the batch axis; works for complex and real values."""
    v = x.value
    if isinstance(v, ComplexTensor):
        if v.ndim == 3:
            out = Var(ComplexTensor(v.re.reshape(-1), v.im.reshape(-1)))
        else:
            out = Var(ComplexTensor(v.re.reshape(v.shape[0], -1),
                                    v.im.reshape(v.shape[0], -1)))
    else:
        out = Var(v.reshape(-1) if v.ndim == 3 else v.reshape(v.shape[0], -1))
    if tape is None:
        return out

    def bwd():
        g = out.grad
        if g is None:
            return
        if isinstance(v, ComplexTensor):
            accumulate(x, ComplexTensor(g.re.reshape(v.shape), g.im.reshape(v.shape)))
        else:
            accumulate(x, g.reshape(v.shape))

    tape.record(bwd)
    return out


# -- scalar loss probes ---------------------------------------------------------


def probe_loss(out, probe, tape=None):
    """Fixed random linear functional of the output; fills ``probe`` once."""
    v = out.value
    if not probe:
        prng = np.random.default_rng(12345)
        if isinstance(v, ComplexTensor):
            probe["re"] = prng.standard_normal(v.shape)
            probe["im"] = prng.standard_normal(v.shape)
        else:
            probe["w"] = prng.standard_normal(v.shape)
    if isinstance(v, ComplexTensor):
        val = float((probe["re"] * v.re).sum() + (probe["im"] * v.im).sum())
    else:
        val = float((probe["w"] * v).sum())
    loss = Var(val)
    if tape is None:
        return loss

    def bwd():
        g = loss.grad
        if g is None:
            return
        if isinstance(v, ComplexTensor):
            accumulate(out, ComplexTensor((g * probe["re"]).astype(v.dtype),
                                          (g * probe["im"]).astype(v.dtype)))
        else:
            accumulate(out, (g * probe["w"]).astype(v.dtype))

    tape.record(bwd)
    return loss


def real_part_sum(out, tape=None):
    """Sum of the real plane as a scalar loss."""
    v = out.value
    loss = Var(float(v.re.sum()))
    if tape is None:
        return loss

    def bwd():
        g = loss.grad
        if g is None:
            return
        accumulate(out, ComplexTensor(np.full_like(v.re, g), np.zeros_like(v.im)))

    tape.record(bwd)
    return loss


def sqmag_loss(out, tape=None):
    """Sum of squared magnitudes as a scalar loss."""
    v = out.value
    loss = Var(float((v.re * v.re + v.im * v.im).sum()))
    if tape is None:
        return loss

    def bwd():
        g = loss.grad
        if g is None:
            return
        accumulate(out, ComplexTensor(2.0 * g * v.re, 2.0 * g * v.im))

    tape.record(bwd)
    return loss
