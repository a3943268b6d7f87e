"""Weighted Fréchet mean under the log-magnitude/phase metric.

The magnitude of the minimizer has a closed form (the weighted sum of log
magnitudes); the phase minimizes a weighted sum of squared circle distances
and is found numerically.  ``wfm_layer`` is the scalar reference used by the
decomposability checks; ``wfm_conv2d`` is the differentiable convolution-like
layer built on the weighted-average form over the (log mag, sin, cos)
encoding.
"""

from __future__ import annotations

import math

import numpy as np

from ..autodiff import Var, accumulate
from ..ctensor import ComplexScalar, ComplexTensor
from ..exceptions import ParameterError, ShapeError
from .. import kernels
from .functional import MAG_FLOOR, arcdist

GOLDEN = (math.sqrt(5.0) - 1.0) / 2.0


def circle_objective(phases, weights, theta):
    return float(sum(w * arcdist(p, theta) ** 2 for p, w in zip(phases, weights)))


def minimize_circle(phases, weights, grid=1024, refine_iters=60):
    """Grid search over the circle plus golden-section refinement."""
    thetas = np.linspace(-math.pi, math.pi, grid, endpoint=False)
    vals = np.array([circle_objective(phases, weights, t) for t in thetas])
    k = int(vals.argmin())
    span = 2 * math.pi / grid
    lo, hi = thetas[k] - span, thetas[k] + span
    a, b = lo, hi
    c = b - GOLDEN * (b - a)
    d = a + GOLDEN * (b - a)
    fc = circle_objective(phases, weights, c)
    fd = circle_objective(phases, weights, d)
    for _ in range(refine_iters):
        if fc < fd:
            b, d, fd = d, c, fc
            c = b - GOLDEN * (b - a)
            fc = circle_objective(phases, weights, c)
        else:
            a, c, fc = c, d, fd
            d = a + GOLDEN * (b - a)
            fd = circle_objective(phases, weights, d)
    theta = (a + b) / 2
    return float(theta), circle_objective(phases, weights, theta)


def wfm_layer(z_set, weights, floor=MAG_FLOOR):
    """Fréchet mean of complex scalars: closed-form magnitude, numeric phase.

    Weights must lie in (0,1] and sum to 1.
    """
    weights = np.asarray(weights, np.float64)
    if len(z_set) != weights.size:
        raise ParameterError("one weight per point required")
    if np.any(weights <= 0) or np.any(weights > 1) or abs(weights.sum() - 1.0) > 1e-9:
        raise ParameterError("weights must be in (0,1] and sum to 1")
    mags = [max(s.mag() if isinstance(s, ComplexScalar) else abs(s), floor) for s in z_set]
    phases = [s.phase() if isinstance(s, ComplexScalar) else math.atan2(s.imag, s.real)
              for s in z_set]
    log_mag = float(sum(w * math.log(m) for w, m in zip(weights, mags)))
    theta, _ = minimize_circle(phases, weights)
    mag = math.exp(log_mag)
    return ComplexScalar(mag * math.cos(theta), mag * math.sin(theta))


def wfm_conv2d(x, theta, k, stride=1, padding=0, tape=None, floor=MAG_FLOOR):
    """Convolution-like Fréchet averaging over KxK windows.

    ``theta`` is a real parameter [C_out, C_in*K*K]; softmax over the last
    axis yields positive weights summing to one, so the constraint holds by
    construction.  Magnitudes combine via the closed form; the phase is the
    weighted circular mean of the window phases.
    """
    v = x.value
    squeeze = v.ndim == 3
    re = v.re[None] if squeeze else v.re
    im = v.im[None] if squeeze else v.im
    n, c, h, w = re.shape
    c_out = theta.value.shape[0]
    if theta.value.shape[1] != c * k * k:
        raise ShapeError("theta shape does not match window size")
    t = theta.value
    t_shift = t - t.max(axis=1, keepdims=True)
    ew = np.exp(t_shift)
    wgt = ew / ew.sum(axis=1, keepdims=True)              # [C_out, M]

    mag = np.hypot(re, im)
    above = mag > floor
    mf = np.where(above, mag, floor)
    lg = np.log(mf)
    sn = im / mf
    cs = re / mf

    cols_l = kernels.im2col(lg, k, stride, padding)       # [M, N*L]
    cols_s = kernels.im2col(sn, k, stride, padding)
    cols_c = kernels.im2col(cs, k, stride, padding)
    ho = (h + 2 * padding - k) // stride + 1
    wo = (w + 2 * padding - k) // stride + 1
    lm = wgt @ cols_l                                     # [C_out, N*L]
    s_ = wgt @ cols_s
    c_ = wgt @ cols_c
    amp = np.exp(lm)
    norm = np.hypot(s_, c_)
    safe = np.where(norm == 0, 1.0, norm)
    out_re = np.ascontiguousarray(
        (amp * c_ / safe).reshape(c_out, n, ho, wo).transpose(1, 0, 2, 3))
    out_im = np.ascontiguousarray(
        (amp * s_ / safe).reshape(c_out, n, ho, wo).transpose(1, 0, 2, 3))
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
        gre = (g.re[None] if squeeze else g.re).transpose(1, 0, 2, 3)
        gre = np.ascontiguousarray(gre).reshape(c_out, -1)
        gim = (g.im[None] if squeeze else g.im).transpose(1, 0, 2, 3)
        gim = np.ascontiguousarray(gim).reshape(c_out, -1)
        d_amp = gre * (c_ / safe) + gim * (s_ / safe)
        d_lm = d_amp * amp
        n3 = safe * safe * safe
        # d(c_/norm)/dc_ = s_^2/norm^3 ; d(c_/norm)/ds_ = -c_ s_/norm^3
        # d(s_/norm)/ds_ = c_^2/norm^3 ; d(s_/norm)/dc_ = -c_ s_/norm^3
        d_c = np.where(norm == 0, 0.0,
                       amp * (gre * s_ * s_ - gim * c_ * s_) / n3)
        d_s = np.where(norm == 0, 0.0,
                       amp * (gim * c_ * c_ - gre * c_ * s_) / n3)
        d_theta = np.zeros_like(t)
        for cols, dout in ((cols_l, d_lm), (cols_s, d_s), (cols_c, d_c)):
            dw = dout @ cols.T
            d_theta += wgt * (dw - (wgt * dw).sum(axis=1, keepdims=True))
        accumulate(theta, d_theta)
        d_lg = kernels.col2im(wgt.T @ d_lm, n, c, h, w, k, stride, padding)
        d_sn = kernels.col2im(wgt.T @ d_s, n, c, h, w, k, stride, padding)
        d_cs = kernels.col2im(wgt.T @ d_c, n, c, h, w, k, stride, padding)
        m2 = mf * mf
        m3 = m2 * mf
        dre = np.where(above, d_lg * re / m2 - d_sn * im * re / m3 + d_cs * im * im / m3, 0.0)
        dim = np.where(above, d_lg * im / m2 + d_sn * re * re / m3 - d_cs * re * im / m3, 0.0)
        if squeeze:
            accumulate(x, ComplexTensor(dre[0], dim[0]))
        else:
            accumulate(x, ComplexTensor(dre, dim))

    tape.record(bwd)
    return out


def mdist_transform(x, floor=MAG_FLOOR, tape=None):
    """Manifold distance of each channel to the channel-mean feature.

    Produces a real [.,C,H,W] map that is invariant to complex scaling of
    the input (both arguments scale together).
    """
    v = x.value
    if v.ndim < 3:
        raise ShapeError("mdist_transform expects [..,C,H,W]")
    c = v.shape[-3]
    mr = v.re.mean(axis=-3, keepdims=True)
    mi = v.im.mean(axis=-3, keepdims=True)
    mag = np.maximum(np.hypot(v.re, v.im), floor)
    mmag = np.maximum(np.hypot(mr, mi), floor)
    ph = np.arctan2(v.im, v.re)
    mph = np.arctan2(mi, mr)
    e = np.log(mag) - np.log(mmag)
    delta = np.mod(ph - mph + np.pi, 2 * np.pi) - np.pi
    delta = np.where(delta == -np.pi, np.pi, delta)
    dist = np.sqrt(e * e + delta * delta)
    out = Var(dist.astype(v.dtype))
    if tape is None:
        return out

    def bwd():
        g = out.grad
        if g is None:
            return
        safe = np.where(dist == 0, 1.0, dist)
        de = np.where(dist == 0, 0.0, g * e / safe)
        dw = np.where(dist == 0, 0.0, g * delta / safe)
        m2 = mag * mag
        dre = de * v.re / m2 - dw * v.im / m2
        dim = de * v.im / m2 + dw * v.re / m2
        dm_l = -de.sum(axis=-3, keepdims=True)
        dm_p = -dw.sum(axis=-3, keepdims=True)
        mm2 = mmag * mmag
        dmr = dm_l * mr / mm2 - dm_p * mi / mm2
        dmi = dm_l * mi / mm2 + dm_p * mr / mm2
        dre = dre + dmr / c
        dim = dim + dmi / c
        accumulate(x, ComplexTensor(dre, dim))

    tape.record(bwd)
    return out
