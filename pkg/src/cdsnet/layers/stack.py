"""Layer objects: parameters, forward composition, and gradcheck hooks.

Each layer exposes ``parameters()``, ``forward(x, tape, train)``, a JSON-able
``config()``, and two gradient-checker hooks: ``check_input`` draws a sensible
random input and ``kink_free`` vetoes draws too close to non-differentiable
loci (ReLU edges, phase branch cuts, pooling ties).
"""

from __future__ import annotations

import math

import numpy as np

from ..autodiff import Parameter, Var
from ..ctensor import ComplexTensor, make_tensor
from ..exceptions import ShapeError
from .. import kernels
from . import functional as F
from . import realops as R
from . import wfm as W


def lift_magnitudes(t, lift=0.3):
    """Push every element's magnitude up to at least ``lift``, keeping phase."""
    mag = np.hypot(t.re, t.im)
    scale = np.where(mag < lift, lift / np.maximum(mag, 1e-30), 1.0)
    return ComplexTensor(t.re * scale, t.im * scale)


def _phase_margin(re, im):
    """Distance of every phase from the ReLU kink at 0 and the cut at pi."""
    phi = np.arctan2(im, re)
    return float(min(np.abs(phi).min(), (np.pi - np.abs(phi)).min()))


class Layer:
    kind = "layer"

    def parameters(self):
        return []

    def param_count(self):
        """Number of parameters, counting a complex entry once."""
        total = 0
        for p in self.parameters():
            total += p.value.size if hasattr(p.value, "size") else 1
        return total

    def hyper(self):
        return {}

    def config(self):
        return {"kind": self.kind, "hyper": self.hyper()}

    def forward(self, x, tape=None, train=False):
        raise NotImplementedError

    def check_input(self, rng):
        raise NotImplementedError

    def kink_free(self, x):
        return True

    def kink_margin(self, x):
        """Smallest distance to a non-differentiable locus for input x."""
        return math.inf


# -- complex linear layers ----------------------------------------------------


class Econv(Layer):
    """Bias-free complex convolution; linear, hence scale equivariant.

    There is deliberately no bias field: an affine map would break
    equivariance, so the layer cannot even represent one.
    """

    kind = "econv"

    def __init__(self, c_in, c_out, k, stride=1, padding=0, groups=1, rng=None,
                 precision="fp64", method="gauss", init="gaussian"):
        self.c_in, self.c_out, self.k = c_in, c_out, k
        self.stride, self.padding, self.groups = stride, padding, groups
        self.method = method
        fan_in = (c_in // groups) * k * k
        if init == "avg":
            w = make_tensor([c_out, c_in // groups, k, k], precision, "ones")
            w = ComplexTensor(w.re / (k * k), w.im)
        else:
            std = 1.0 / math.sqrt(2.0 * fan_in)
            w = make_tensor([c_out, c_in // groups, k, k], precision, "gaussian",
                            rng, 0.0, std)
        self.weight = Parameter("weight", w)

    def parameters(self):
        return [self.weight]

    def hyper(self):
        return {"c_in": self.c_in, "c_out": self.c_out, "k": self.k,
                "stride": self.stride, "padding": self.padding,
                "groups": self.groups, "method": self.method}

    def forward(self, x, tape=None, train=False):
        return F.cconv2d(x, self.weight, self.stride, self.padding,
                         self.groups, self.method, tape)

    def check_input(self, rng):
        return make_tensor([self.c_in, 5, 5], self.weight.value.precision,
                           "gaussian", rng)


class ComplexConv(Layer):
    """Complex convolution with a per-channel bias (baseline flavor)."""

    kind = "complex_conv"

    def __init__(self, c_in, c_out, k, stride=1, padding=0, groups=1, rng=None,
                 precision="fp64", init="gaussian"):
        self.conv = Econv(c_in, c_out, k, stride, padding, groups, rng,
                          precision, init=init)
        self.bias = Parameter("bias", ComplexTensor.zeros([c_out], precision))

    def parameters(self):
        return [self.conv.weight, self.bias]

    def hyper(self):
        h = self.conv.hyper()
        h.pop("method")
        return h

    def forward(self, x, tape=None, train=False):
        out = self.conv.forward(x, tape, train)
        return F.cbias(out, self.bias, tape)

    def check_input(self, rng):
        return self.conv.check_input(rng)


class ComplexFC(Layer):
    """Bias-free complex linear map on embedding vectors (equivariant FC)."""

    kind = "complex_fc"

    def __init__(self, d_in, d_out, rng=None, precision="fp64"):
        self.d_in, self.d_out = d_in, d_out
        std = 1.0 / math.sqrt(2.0 * d_in)
        self.weight = Parameter("weight", make_tensor([d_out, d_in], precision,
                                                      "gaussian", rng, 0.0, std))

    def parameters(self):
        return [self.weight]

    def hyper(self):
        return {"d_in": self.d_in, "d_out": self.d_out}

    def forward(self, x, tape=None, train=False):
        return F.cfc(x, self.weight, tape)

    def check_input(self, rng):
        return make_tensor([2, self.d_in], self.weight.value.precision, "gaussian", rng)


# -- non-linearities ----------------------------------------------------------


class CReLU(Layer):
    """ReLU on the real and imaginary planes independently."""

    kind = "crelu"

    def forward(self, x, tape=None, train=False):
        return F.crelu(x, tape)

    def check_input(self, rng):
        return make_tensor([3, 4, 4], "fp64", "gaussian", rng)

    def kink_free(self, x):
        return self.kink_margin(x) > 1e-2

    def kink_margin(self, x):
        return float(min(np.abs(x.re).min(), np.abs(x.im).min()))


class GTReLU(Layer):
    """Generalized tangent ReLU with learned per-channel scales.

    r is a fixed hyperparameter; c (complex) and omega (real) are learned,
    one per input channel.  r = 0 reduces to the phase-only form, which is
    positively homogeneous in magnitude.
    """

    kind = "gtrelu"

    def __init__(self, channels, r=0.0, precision="fp64"):
        self.channels = channels
        self.r = float(r)
        ones = make_tensor([channels], precision, "ones")
        self.c = Parameter("c", ones)
        self.omega = Parameter("omega", np.ones(channels, ones.dtype))

    def parameters(self):
        return [self.c, self.omega]

    def hyper(self):
        return {"channels": self.channels, "r": self.r}

    def forward(self, x, tape=None, train=False):
        return F.gtrelu(x, self.c, self.omega, self.r, tape)

    def check_input(self, rng):
        t = make_tensor([self.channels, 3, 3], self.c.value.precision, "gaussian", rng)
        return lift_magnitudes(t)

    def _scaled(self, x):
        cr = self.c.value.re.reshape(-1, 1, 1)
        ci = self.c.value.im.reshape(-1, 1, 1)
        return cr * x.re - ci * x.im, cr * x.im + ci * x.re

    def kink_free(self, x):
        return self.kink_margin(x) > 0.04

    def kink_margin(self, x):
        ur, ui = self._scaled(x)
        mag = np.hypot(ur, ui)
        margin = _phase_margin(ur, ui)
        if self.r > 0:
            margin = min(margin, float(np.abs(mag - self.r).min()))
        return min(margin, float(mag.min()))


class EquivariantWrap(Layer):
    """Equivariant version of a pointwise non-linearity.

    Cancels the per-pixel mean phase, applies the wrapped non-linearity, and
    restores the phase; equivariant in phase always, and in magnitude too
    when the inner non-linearity is positively homogeneous.
    """

    kind = "eq_wrap"

    def __init__(self, inner, floor=F.MAG_FLOOR):
        self.inner = inner
        self.floor = floor
        self.kind = f"eq_wrap_{inner.kind}"

    def parameters(self):
        return self.inner.parameters()

    def hyper(self):
        return {"inner": self.inner.config(), "floor": self.floor}

    def forward(self, x, tape=None, train=False):
        m = F.channel_mean(x, tape)
        mhat = F.unit_phase(m, self.floor, tape)
        g = F.cmul(x, F.conj(mhat, tape), tape)
        h = self.inner.forward(g, tape, train)
        return F.cmul(h, mhat, tape)

    def check_input(self, rng):
        return self.inner.check_input(rng)

    def _parts(self, x):
        mr = x.re.mean(axis=-3, keepdims=True)
        mi = x.im.mean(axis=-3, keepdims=True)
        mmag = np.maximum(np.hypot(mr, mi), self.floor)
        gr = (x.re * mr + x.im * mi) / mmag
        gi = (x.im * mr - x.re * mi) / mmag
        return mr, mi, ComplexTensor(gr, gi)

    def kink_free(self, x):
        mr, mi, g = self._parts(x)
        if np.hypot(mr, mi).min() < 1e-3:
            return False
        return self.inner.kink_free(g)

    def kink_margin(self, x):
        mr, mi, g = self._parts(x)
        return min(float(np.hypot(mr, mi).min()), self.inner.kink_margin(g))


# -- pooling and normalization ------------------------------------------------


class EqMaxPool(Layer):
    """Per-window selection of the highest-magnitude complex value."""

    kind = "eq_maxpool"

    def __init__(self, window, stride=None):
        self.window = window
        self.stride = window if stride is None else stride

    def hyper(self):
        return {"window": self.window, "stride": self.stride}

    def forward(self, x, tape=None, train=False):
        if tape is None:
            out, _ = F.eq_maxpool(x, self.window, self.stride, None)
            return out
        out, _ = F.eq_maxpool(x, self.window, self.stride, tape)
        return out

    def check_input(self, rng):
        return make_tensor([2, 4, 4], "fp64", "gaussian", rng)

    def selection_margin(self, x):
        """Relative gap between the best and second-best window magnitudes."""
        re = x.re[None] if x.ndim == 3 else x.re
        im = x.im[None] if x.ndim == 3 else x.im
        n, c, h, w = re.shape
        score = np.hypot(re, im)
        idx = kernels.pool_argmax(score * score, self.window, self.stride)
        flat = score.reshape(n, c, -1)
        fidx = idx.reshape(n, c, -1)
        best = np.take_along_axis(flat, fidx, axis=2)
        masked = flat.copy()
        np.put_along_axis(masked, fidx, -np.inf, axis=2)
        idx2 = kernels.pool_argmax(
            np.where(np.isneginf(masked), -1.0, masked).reshape(n, c, h, w) ** 2,
            self.window, self.stride)
        second = np.take_along_axis(np.where(np.isneginf(masked), 0.0, masked),
                                    idx2.reshape(n, c, -1), axis=2)
        gap = (best - second) / np.maximum(best, 1e-30)
        return float(gap.min())

    def kink_free(self, x):
        return self.selection_margin(x) > 0.01

    def kink_margin(self, x):
        return self.selection_margin(x)


class BatchNormState:
    """Running magnitude statistics with momentum updates."""

    def __init__(self, channels, momentum=0.1, eps=1e-5, dtype=np.float64):
        self.momentum = momentum
        self.eps = eps
        self.running_mean = np.zeros(channels, dtype)
        self.running_var = np.ones(channels, dtype)
        self.seen = False

    def update(self, mu, var):
        m = self.momentum
        self.running_mean = (1 - m) * self.running_mean + m * mu
        self.running_var = (1 - m) * self.running_var + m * var
        self.seen = True

    def stats_for_eval(self):
        if not self.seen:
            import logging
            logging.getLogger(__name__).warning(
                "eval-mode batch norm before any training step: using init stats")
        return self.running_mean, self.running_var


class EqBatchNorm(Layer):
    """Batch normalization on feature magnitudes; phases untouched."""

    kind = "eq_batchnorm"

    def __init__(self, channels, momentum=0.1, eps=1e-5, precision="fp64"):
        self.channels = channels
        dtype = np.float32 if precision == "fp32" else np.float64
        self.gamma = Parameter("gamma", np.ones(channels, dtype))
        self.beta = Parameter("beta", np.zeros(channels, dtype))
        self.state = BatchNormState(channels, momentum, eps, dtype)

    def parameters(self):
        return [self.gamma, self.beta]

    def hyper(self):
        return {"channels": self.channels, "momentum": self.state.momentum,
                "eps": self.state.eps}

    def forward(self, x, tape=None, train=False):
        if isinstance(x.value, ComplexTensor) and x.value.ndim in (1, 2):
            shape = x.value.shape
            n, d = (1, shape[0]) if x.value.ndim == 1 else shape
            x4 = F.creshape(x, (n, d, 1, 1), tape)
            out = F.eq_batchnorm(x4, self.gamma, self.beta, self.state, train, tape)
            return F.creshape(out, shape, tape)
        return F.eq_batchnorm(x, self.gamma, self.beta, self.state, train, tape)

    def check_input(self, rng):
        precision = "fp32" if self.gamma.value.dtype == np.float32 else "fp64"
        t = make_tensor([2, self.channels, 3, 3], precision, "gaussian", rng)
        return lift_magnitudes(t, 0.5)

    def kink_free(self, x):
        return self.kink_margin(x) > 0.1

    def kink_margin(self, x):
        mag = np.hypot(x.re, x.im)
        sigma = mag.std(axis=(0, 2, 3)) if x.ndim == 4 else mag.std()
        if np.min(sigma) < 10 * self.state.eps:
            return 0.0
        return float(mag.min())


# -- pairwise invariant layers --------------------------------------------------


class DivisionLayer(Layer):
    """Divide every channel by an internally derived reference channel.

    The reference is a bias-free KxK complex convolution of the input down to
    one channel, so the whole layer is a quotient of two equivariant maps and
    is invariant to complex scaling (up to the denominator offset eps).
    """

    kind = "division"

    def __init__(self, channels, k=3, eps=1e-7, rng=None, precision="fp64"):
        self.channels = channels
        self.eps = eps
        self.ref = Econv(channels, 1, k, stride=1, padding=k // 2, rng=rng,
                         precision=precision)

    def parameters(self):
        return [self.ref.weight]

    def hyper(self):
        return {"channels": self.channels, "k": self.ref.k, "eps": self.eps}

    def forward(self, x, tape=None, train=False):
        ref = self.ref.forward(x, tape, train)
        return F.div_pair(x, ref, self.eps, tape)

    def reference_map(self, x_value):
        from ..ctensor import conv2d
        return conv2d(x_value, self.ref.weight.value, 1, self.ref.k // 2,
                      method="gauss")

    def check_input(self, rng):
        t = make_tensor([self.channels, 4, 4],
                        self.ref.weight.value.precision, "gaussian", rng)
        return lift_magnitudes(t)

    def kink_free(self, x):
        return self.kink_margin(x) > 0.05

    def kink_margin(self, x):
        ref = self.reference_map(x)
        return float(min(np.hypot(x.re, x.im).min(), np.hypot(ref.re, ref.im).min()))


class ConjugateLayer(Layer):
    """Multiply every channel by the conjugate of an internal reference."""

    kind = "conjugate"

    def __init__(self, channels, k=1, rng=None, precision="fp64"):
        self.channels = channels
        self.ref = Econv(channels, 1, k, stride=1, padding=k // 2, rng=rng,
                         precision=precision)

    def parameters(self):
        return [self.ref.weight]

    def hyper(self):
        return {"channels": self.channels, "k": self.ref.k}

    def forward(self, x, tape=None, train=False):
        ref = self.ref.forward(x, tape, train)
        return F.conj_pair(x, ref, tape)

    def check_input(self, rng):
        return make_tensor([self.channels, 4, 4],
                           self.ref.weight.value.precision, "gaussian", rng)


# -- heads and conversions ------------------------------------------------------


class PrototypeHead(Layer):
    """Classifier logits as negative scaled distances to class prototypes."""

    kind = "prototype"

    def __init__(self, num_classes, emb_dim, metric="euclidean", invariant=False,
                 rng=None, precision="fp64"):
        self.num_classes = num_classes
        self.emb_dim = emb_dim
        self.metric = metric
        self.invariant = invariant
        raw = make_tensor([num_classes, emb_dim], precision, "gaussian", rng)
        mag = np.maximum(np.hypot(raw.re, raw.im), 1e-12)
        self.prototypes = Parameter("prototypes", ComplexTensor(raw.re / mag, raw.im / mag))
        self.log_alpha = Parameter("log_alpha", np.zeros((), raw.dtype))

    def parameters(self):
        return [self.prototypes, self.log_alpha]

    def hyper(self):
        return {"num_classes": self.num_classes, "emb_dim": self.emb_dim,
                "metric": self.metric, "invariant": self.invariant}

    def forward(self, x, tape=None, train=False):
        return F.prototype_logits(x, self.prototypes, self.log_alpha,
                                  self.metric, self.invariant, tape)

    def check_input(self, rng):
        t = make_tensor([2, self.emb_dim], self.prototypes.value.precision,
                        "gaussian", rng)
        return lift_magnitudes(t)

    def kink_free(self, x):
        return self.kink_margin(x) > 0.05

    def kink_margin(self, x):
        fr = x.re[None] if x.ndim == 1 else x.re
        fi = x.im[None] if x.ndim == 1 else x.im
        pr, pi_ = self.prototypes.value.re, self.prototypes.value.im
        if self.invariant:
            mr = fr.mean(axis=1)[:, None, None]
            mi = fi.mean(axis=1)[:, None, None]
            if np.hypot(mr, mi).min() < 0.05:
                return 0.0
            qr = pr[None] * mr - pi_[None] * mi
            qi = pr[None] * mi + pi_[None] * mr
        else:
            qr, qi = pr[None], pi_[None]
        dr = fr[:, None, :] - qr
        di = fi[:, None, :] - qi
        dist = np.sqrt((dr * dr + di * di).sum(axis=2))
        margin = float(dist.min())
        if self.metric == "manifold":
            margin = min(margin, float(np.hypot(fr, fi).min()),
                         float(np.hypot(qr, qi).min()))
            dphi = np.arctan2(fi[:, None, :], fr[:, None, :]) - np.arctan2(qi, qr)
            wrapped = np.abs(F.wrap_angle(dphi))
            margin = min(margin, float((np.pi - wrapped).min()))
        return margin


class ComplexToReal(Layer):
    """(log magnitude, sin phase, cos phase) real channels per complex channel."""

    kind = "complex_to_real"

    def __init__(self, floor=F.MAG_FLOOR):
        self.floor = floor

    def hyper(self):
        return {"floor": self.floor}

    def forward(self, x, tape=None, train=False):
        return F.complex_to_real(x, self.floor, tape)

    def check_input(self, rng):
        return lift_magnitudes(make_tensor([2, 3, 3], "fp64", "gaussian", rng))

    def kink_free(self, x):
        return self.kink_margin(x) > 0.05

    def kink_margin(self, x):
        return float(np.hypot(x.re, x.im).min())


class StackReIm(Layer):
    """Complex [C,..] to real [2C,..] by interleaving re/im per channel."""

    kind = "stack_reim"

    def forward(self, x, tape=None, train=False):
        return F.stack_reim(x, tape)

    def check_input(self, rng):
        return make_tensor([2, 3, 3], "fp64", "gaussian", rng)


class Flatten(Layer):
    kind = "flatten"

    def forward(self, x, tape=None, train=False):
        return F.flatten(x, tape)

    def check_input(self, rng):
        return make_tensor([2, 2, 2], "fp64", "gaussian", rng)


# -- real-valued suite ----------------------------------------------------------


class RealConv(Layer):
    kind = "real_conv"

    def __init__(self, c_in, c_out, k, stride=1, padding=0, bias=True, rng=None,
                 precision="fp64"):
        self.c_in, self.c_out, self.k = c_in, c_out, k
        self.stride, self.padding = stride, padding
        dtype = np.float32 if precision == "fp32" else np.float64
        std = math.sqrt(2.0 / (c_in * k * k))
        w = (rng.normal((c_out, c_in, k, k), 0.0, std, precision) if rng is not None
             else np.zeros((c_out, c_in, k, k), dtype))
        self.weight = Parameter("weight", np.asarray(w, dtype))
        self.bias = Parameter("bias", np.zeros(c_out, dtype)) if bias else None

    def parameters(self):
        return [self.weight] + ([self.bias] if self.bias is not None else [])

    def hyper(self):
        return {"c_in": self.c_in, "c_out": self.c_out, "k": self.k,
                "stride": self.stride, "padding": self.padding,
                "bias": self.bias is not None}

    def forward(self, x, tape=None, train=False):
        return R.real_conv2d(x, self.weight, self.bias, self.stride, self.padding, tape)

    def check_input(self, rng):
        return rng.normal((self.c_in, 5, 5))


class RealReLU(Layer):
    kind = "real_relu"

    def forward(self, x, tape=None, train=False):
        return R.relu(x, tape)

    def check_input(self, rng):
        return rng.normal((3, 4, 4))

    def kink_free(self, x):
        return self.kink_margin(x) > 1e-2

    def kink_margin(self, x):
        return float(np.abs(x).min())


class RealFC(Layer):
    kind = "real_fc"

    def __init__(self, d_in, d_out, bias=True, rng=None, precision="fp64"):
        self.d_in, self.d_out = d_in, d_out
        dtype = np.float32 if precision == "fp32" else np.float64
        std = 1.0 / math.sqrt(d_in)
        w = (rng.normal((d_out, d_in), 0.0, std, precision) if rng is not None
             else np.zeros((d_out, d_in), dtype))
        self.weight = Parameter("weight", np.asarray(w, dtype))
        self.bias = Parameter("bias", np.zeros(d_out, dtype)) if bias else None

    def parameters(self):
        return [self.weight] + ([self.bias] if self.bias is not None else [])

    def hyper(self):
        return {"d_in": self.d_in, "d_out": self.d_out, "bias": self.bias is not None}

    def forward(self, x, tape=None, train=False):
        return R.fc(x, self.weight, self.bias, tape)

    def check_input(self, rng):
        return rng.normal((2, self.d_in))


class RealAvgPool(Layer):
    kind = "real_avgpool"

    def __init__(self, window, stride=None):
        self.window = window
        self.stride = window if stride is None else stride

    def hyper(self):
        return {"window": self.window, "stride": self.stride}

    def forward(self, x, tape=None, train=False):
        return R.avgpool(x, self.window, self.stride, tape)

    def check_input(self, rng):
        return rng.normal((2, 4, 4))


# -- Fréchet-mean layers ----------------------------------------------------------


class WFMConv(Layer):
    """Fréchet-mean 'convolution' with positive window weights summing to 1."""

    kind = "wfm_conv"

    def __init__(self, c_in, c_out, k, stride=1, padding=0, rng=None, precision="fp64"):
        self.c_in, self.c_out, self.k = c_in, c_out, k
        self.stride, self.padding = stride, padding
        dtype = np.float32 if precision == "fp32" else np.float64
        theta = (rng.normal((c_out, c_in * k * k), 0.0, 0.1, precision)
                 if rng is not None else np.zeros((c_out, c_in * k * k), dtype))
        self.theta = Parameter("theta", np.asarray(theta, dtype))

    def parameters(self):
        return [self.theta]

    def hyper(self):
        return {"c_in": self.c_in, "c_out": self.c_out, "k": self.k,
                "stride": self.stride, "padding": self.padding}

    def forward(self, x, tape=None, train=False):
        return W.wfm_conv2d(x, self.theta, self.k, self.stride, self.padding, tape)

    def check_input(self, rng):
        t = make_tensor([self.c_in, 4, 4], "fp64", "gaussian", rng)
        return lift_magnitudes(t)

    def kink_free(self, x):
        return self.kink_margin(x) > 0.05

    def kink_margin(self, x):
        out = W.wfm_conv2d(Var(x), self.theta, self.k, self.stride, self.padding)
        resultant = np.hypot(out.value.re, out.value.im)
        return float(min(np.hypot(x.re, x.im).min(), resultant.min()))


class MDistTransform(Layer):
    """Real-valued manifold distances of channels to their mean feature."""

    kind = "mdist_transform"

    def forward(self, x, tape=None, train=False):
        return W.mdist_transform(x, tape=tape)

    def check_input(self, rng):
        return lift_magnitudes(make_tensor([3, 3, 3], "fp64", "gaussian", rng))

    def kink_free(self, x):
        return self.kink_margin(x) > 0.02

    def kink_margin(self, x):
        mr = x.re.mean(axis=-3, keepdims=True)
        mi = x.im.mean(axis=-3, keepdims=True)
        mmag = np.hypot(mr, mi)
        if mmag.min() < 0.05:
            return 0.0
        dist = W.mdist_transform(Var(x)).value
        dphi = np.arctan2(x.im, x.re) - np.arctan2(mi, mr)
        wrapped = np.abs(F.wrap_angle(dphi))
        return float(min(dist.min(), (np.pi - wrapped).min(),
                         np.hypot(x.re, x.im).min()))
