"""Complex tensor storage and arithmetic.

A ``ComplexTensor`` keeps separate contiguous real and imaginary planes
(planar layout, row major).  All heavy operations work directly on the
planes so that real-valued BLAS and the compiled patch kernels can be used;
interleaved complex dtypes are deliberately not used anywhere.

Tensors are treated as immutable values: every operation returns a new
tensor, and the only sanctioned mutation path is a ``Parameter`` replacing
its value during an optimizer step.
"""

from __future__ import annotations

import json
import math
import struct
from dataclasses import dataclass

import numpy as np

from .exceptions import FormatError, PrecisionError, ShapeError
from . import kernels

_DTYPES = {"fp32": np.float32, "fp64": np.float64}
_PRECISIONS = {np.dtype(np.float32): "fp32", np.dtype(np.float64): "fp64"}


def _as_plane(arr, name):
    arr = np.asarray(arr)
    if arr.dtype not in _PRECISIONS:
        raise PrecisionError(f"{name} plane must be float32 or float64, got {arr.dtype}")
    return np.ascontiguousarray(arr)


class ComplexTensor:
    """N-dimensional complex array stored as (re, im) float planes."""

    __slots__ = ("re", "im")

    def __init__(self, re, im):
        re = _as_plane(re, "re")
        im = _as_plane(im, "im")
        if re.shape != im.shape:
            raise ShapeError(f"re/im shape mismatch: {re.shape} vs {im.shape}")
        if re.dtype != im.dtype:
            raise PrecisionError(f"re/im precision mismatch: {re.dtype} vs {im.dtype}")
        self.re = re
        self.im = im

    # -- metadata -------------------------------------------------------

    @property
    def shape(self):
        return self.re.shape

    @property
    def ndim(self):
        return self.re.ndim

    @property
    def size(self):
        return self.re.size

    @property
    def dtype(self):
        return self.re.dtype

    @property
    def precision(self):
        return _PRECISIONS[self.re.dtype]

    def __repr__(self):
        return f"ComplexTensor(shape={self.shape}, precision={self.precision})"

    # -- constructors ---------------------------------------------------

    @classmethod
    def zeros(cls, shape, precision="fp64"):
        dt = _DTYPES[precision]
        return cls(np.zeros(shape, dt), np.zeros(shape, dt))

    @classmethod
    def from_complex(cls, arr, precision="fp64"):
        arr = np.asarray(arr)
        dt = _DTYPES[precision]
        return cls(np.real(arr).astype(dt), np.imag(arr).astype(dt))

    @classmethod
    def from_polar(cls, mag, phase, precision="fp64"):
        dt = _DTYPES[precision]
        mag = np.asarray(mag, dt)
        phase = np.asarray(phase, dt)
        return cls(mag * np.cos(phase), mag * np.sin(phase))

    def to_complex(self):
        return self.re.astype(np.complex128) + 1j * self.im.astype(np.complex128)

    def copy(self):
        return ComplexTensor(self.re.copy(), self.im.copy())

    def astype(self, precision):
        dt = _DTYPES[precision]
        return ComplexTensor(self.re.astype(dt), self.im.astype(dt))

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return ComplexTensor(self.re.reshape(shape), self.im.reshape(shape))

    # -- arithmetic -----------------------------------------------------

    def _coerce(self, other):
        if isinstance(other, ComplexTensor):
            if other.dtype != self.dtype:
                raise PrecisionError(
                    f"mixed precisions {self.precision}/{other.precision}; cast explicitly"
                )
            return other.re, other.im
        if isinstance(other, ComplexScalar):
            return self.dtype.type(other.re), self.dtype.type(other.im)
        if isinstance(other, (int, float)):
            return self.dtype.type(other), self.dtype.type(0)
        raise TypeError(f"unsupported operand {type(other)!r}")

    def __add__(self, other):
        bre, bim = self._coerce(other)
        return ComplexTensor(self.re + bre, self.im + bim)

    def __sub__(self, other):
        bre, bim = self._coerce(other)
        return ComplexTensor(self.re - bre, self.im - bim)

    def __mul__(self, other):
        bre, bim = self._coerce(other)
        return ComplexTensor(self.re * bre - self.im * bim,
                             self.re * bim + self.im * bre)

    __radd__ = __add__
    __rmul__ = __mul__

    def __neg__(self):
        return ComplexTensor(-self.re, -self.im)

    def conj(self):
        return ComplexTensor(self.re.copy(), -self.im)

    def abs(self):
        return np.hypot(self.re, self.im)

    def angle(self):
        mag = self.abs()
        phase = np.arctan2(self.im, self.re)
        # phase of an exact zero is 0 by convention (atan2(0,-0) would give pi)
        return np.where(mag == 0, self.dtype.type(0), phase).astype(self.dtype)

    def scale(self, s):
        """Multiply every entry by a complex scalar."""
        return self * s


@dataclass(frozen=True)
class ComplexScalar:
    """A single complex value; polar form recoverable via mag()/phase()."""

    re: float
    im: float = 0.0

    @classmethod
    def from_polar(cls, mag, phase):
        return cls(mag * math.cos(phase), mag * math.sin(phase))

    def mag(self):
        return math.hypot(self.re, self.im)

    def phase(self):
        if self.re == 0.0 and self.im == 0.0:
            return 0.0
        return math.atan2(self.im, self.re)

    def conj(self):
        return ComplexScalar(self.re, -self.im)

    def __mul__(self, other):
        if isinstance(other, ComplexScalar):
            return ComplexScalar(self.re * other.re - self.im * other.im,
                                 self.re * other.im + self.im * other.re)
        if isinstance(other, (int, float)):
            return ComplexScalar(self.re * other, self.im * other)
        return NotImplemented

    __rmul__ = __mul__


class Rng:
    """Deterministic counter-based random stream.

    Backed by the Philox bit generator, which is platform independent and
    keyed rather than stateful, so parallel draws from distinct streams are
    order independent.
    """

    def __init__(self, seed, stream=0):
        self.seed = int(seed)
        self.stream = int(stream)
        self._gen = np.random.Generator(
            np.random.Philox(key=[self.seed & 0xFFFFFFFFFFFFFFFF,
                                  self.stream & 0xFFFFFFFFFFFFFFFF]))

    def split(self, stream):
        """Independent stream derived from the same seed."""
        return Rng(self.seed, stream)

    def normal(self, shape, mean=0.0, std=1.0, precision="fp64"):
        out = self._gen.standard_normal(shape, dtype=np.float64)
        return (mean + std * out).astype(_DTYPES[precision])

    def uniform(self, shape, low=0.0, high=1.0, precision="fp64"):
        out = self._gen.random(shape, dtype=np.float64)
        return (low + (high - low) * out).astype(_DTYPES[precision])

    def integers(self, low, high, shape=None):
        return self._gen.integers(low, high, size=shape)

    def permutation(self, n):
        return self._gen.permutation(n)


# -- module-level operations ------------------------------------------------


def make_tensor(shape, precision="fp64", fill="zeros", rng=None, mean=0.0, std=1.0):
    """Allocate and fill a tensor.

    ``fill`` is "zeros", "ones", or "gaussian"; gaussian fills the real and
    imaginary planes independently from ``rng``.
    """
    shape = tuple(int(d) for d in shape)
    if len(shape) == 0 or any(d < 1 for d in shape):
        raise ShapeError(f"invalid shape {shape}: all dimensions must be >= 1")
    dt = _DTYPES[precision]
    if fill == "zeros":
        return ComplexTensor.zeros(shape, precision)
    if fill == "ones":
        return ComplexTensor(np.ones(shape, dt), np.zeros(shape, dt))
    if fill == "gaussian":
        if rng is None:
            raise ValueError("gaussian fill requires an Rng")
        planes = rng.normal((2,) + shape, mean, std, precision)
        return ComplexTensor(planes[0], planes[1])
    raise ValueError(f"unknown fill {fill!r}")


def complex_elementwise(a, b, op, eps=0.0):
    """Elementwise complex arithmetic; ``b`` may broadcast per channel.

    Division uses the polar form with a magnitude offset ``eps`` in the
    denominator, matching the division layer's contract.
    """
    if not isinstance(b, ComplexTensor):
        b = ComplexTensor.from_complex(np.asarray(b), a.precision)
    if a.dtype != b.dtype:
        raise PrecisionError("operands must share precision")
    try:
        np.broadcast_shapes(a.shape, b.shape)
    except ValueError as exc:
        raise ShapeError(f"incompatible shapes {a.shape} vs {b.shape}") from exc
    if op == "add":
        return a + b
    if op == "sub":
        return a - b
    if op == "mul":
        return a * b
    if op == "div":
        mag2 = np.hypot(b.re, b.im)
        denom = mag2 + a.dtype.type(eps)
        ratio = np.hypot(a.re, a.im) / denom
        phase = np.arctan2(a.im, a.re) - np.arctan2(b.im, b.re)
        re = ratio * np.cos(phase)
        im = ratio * np.sin(phase)
        return ComplexTensor(re.astype(a.dtype), im.astype(a.dtype))
    raise ValueError(f"unknown op {op!r}")


def magnitude_phase(z):
    """Magnitude and principal-branch phase planes; phase(0) = 0."""
    return z.abs(), z.angle()


def channel_mean(f):
    """Mean over the channel axis (axis -3), keeping the channel dim."""
    if f.ndim < 3:
        raise ShapeError(f"need [..,C,H,W], got shape {f.shape}")
    return ComplexTensor(f.re.mean(axis=-3, keepdims=True),
                         f.im.mean(axis=-3, keepdims=True))


def conv2d(z, w, stride=1, padding=0, groups=1, method="gauss"):
    """2-D complex cross-correlation of ``z`` by kernel bank ``w``, bias free.

    ``z`` is [C,H,W] or [N,C,H,W]; ``w`` is [C_out, C_in/groups, K, K].
    ``method`` selects the four-multiply expansion ("direct") or the
    three-multiply product ("gauss"); both produce the same values up to
    floating error.
    """
    squeeze = z.ndim == 3
    a = z.re[None] if squeeze else z.re
    b = z.im[None] if squeeze else z.im
    out_re, out_im, _ = _conv_planes(a, b, w.re, w.im, stride, padding, groups, method)
    if squeeze:
        out_re, out_im = out_re[0], out_im[0]
    return ComplexTensor(out_re, out_im)


def _conv_geometry(x_shape, w_shape, stride, padding, groups):
    n, c, h, wdt = x_shape
    c_out, c_in_g, kh, kw = w_shape
    if kh != kw:
        raise ShapeError("square kernels only")
    if c % groups or c_out % groups:
        raise ShapeError(f"channels {c}->{c_out} not divisible by groups={groups}")
    if c_in_g != c // groups:
        raise ShapeError(f"kernel expects {c_in_g} in-channels/group, input has {c // groups}")
    hp, wp = h + 2 * padding, wdt + 2 * padding
    if hp < kh or wp < kw:
        raise ShapeError(f"kernel {kh}x{kw} larger than padded input {hp}x{wp}")
    ho = (hp - kh) // stride + 1
    wo = (wp - kw) // stride + 1
    return n, c, c_out, kh, ho, wo


def _conv_planes(a, b, x_plane, y_plane, stride, padding, groups, method):
    """Complex convolution on raw planes; returns (re, im, saved-cols).

    Columns are [C*K*K, N*L], so each group is one gemm over the whole
    batch; channel rows are contiguous per group by construction.
    """
    n, c, c_out, k, ho, wo = _conv_geometry(a.shape, x_plane.shape, stride, padding, groups)
    cols_a = kernels.im2col(a, k, stride, padding)   # [C*K*K, N*L]
    cols_b = kernels.im2col(b, k, stride, padding)
    nl = n * ho * wo
    cog = c_out // groups
    ca = cols_a.reshape(groups, (c // groups) * k * k, nl)
    cb = cols_b.reshape(groups, (c // groups) * k * k, nl)
    wx = x_plane.reshape(groups, cog, -1)
    wy = y_plane.reshape(groups, cog, -1)
    if method == "direct":
        out_re = np.matmul(wx, ca) - np.matmul(wy, cb)
        out_im = np.matmul(wx, cb) + np.matmul(wy, ca)
    elif method == "gauss":
        t1 = np.matmul(wx, ca)
        t2 = np.matmul(wy, cb)
        t3 = np.matmul(wx + wy, ca + cb)
        out_re = t1 - t2
        out_im = t3 - t1 - t2
    else:
        raise ValueError(f"unknown method {method!r}")
    out_re = out_re.reshape(c_out, n, ho, wo).transpose(1, 0, 2, 3)
    out_im = out_im.reshape(c_out, n, ho, wo).transpose(1, 0, 2, 3)
    return np.ascontiguousarray(out_re), np.ascontiguousarray(out_im), (cols_a, cols_b)


def conv2d_reference(z, w, stride=1, padding=0, groups=1):
    """Nested-loop complex convolution, kept as the independent oracle."""
    a = z.re[None] if z.ndim == 3 else z.re
    b = z.im[None] if z.ndim == 3 else z.im
    n, c, c_out, k, ho, wo = _conv_geometry(a.shape, w.re.shape, stride, padding, groups)
    cg = c // groups
    og = c_out // groups
    ap = np.pad(a, ((0, 0), (0, 0), (padding, padding), (padding, padding)))
    bp = np.pad(b, ((0, 0), (0, 0), (padding, padding), (padding, padding)))
    out_re = np.zeros((n, c_out, ho, wo), a.dtype)
    out_im = np.zeros((n, c_out, ho, wo), a.dtype)
    for ni in range(n):
        for oc in range(c_out):
            g = oc // og
            for i in range(ho):
                for j in range(wo):
                    acc_re = 0.0
                    acc_im = 0.0
                    for ic in range(cg):
                        for u in range(k):
                            for v in range(k):
                                ar = ap[ni, g * cg + ic, i * stride + u, j * stride + v]
                                br = bp[ni, g * cg + ic, i * stride + u, j * stride + v]
                                xr = w.re[oc, ic, u, v]
                                yr = w.im[oc, ic, u, v]
                                acc_re += ar * xr - br * yr
                                acc_im += ar * yr + br * xr
                    out_re[ni, oc, i, j] = acc_re
                    out_im[ni, oc, i, j] = acc_im
    if z.ndim == 3:
        out_re, out_im = out_re[0], out_im[0]
    return ComplexTensor(out_re, out_im)


# -- serialization ------------------------------------------------------------

MAGIC = b"CDS1"


def tensor_to_bytes(t):
    """Container bytes: magic, length-prefixed JSON descriptor, re then im."""
    desc = json.dumps({"shape": list(t.shape), "precision": t.precision,
                       "layout": "planar"}).encode()
    le = "<f4" if t.precision == "fp32" else "<f8"
    body = t.re.astype(le).tobytes() + t.im.astype(le).tobytes()
    return MAGIC + struct.pack("<I", len(desc)) + desc + body


def tensor_from_bytes(buf, offset=0):
    """Parse one tensor; returns (tensor, next offset)."""
    if buf[offset:offset + 4] != MAGIC:
        raise FormatError("bad magic: not a CDS1 tensor")
    (dlen,) = struct.unpack_from("<I", buf, offset + 4)
    dstart = offset + 8
    try:
        desc = json.loads(buf[dstart:dstart + dlen].decode())
        shape = tuple(int(d) for d in desc["shape"])
        precision = desc["precision"]
        if desc.get("layout") != "planar" or precision not in _DTYPES:
            raise KeyError("layout/precision")
    except (KeyError, ValueError, UnicodeDecodeError) as exc:
        raise FormatError(f"bad tensor descriptor: {exc}") from exc
    itemsize = 4 if precision == "fp32" else 8
    count = int(np.prod(shape))
    bstart = dstart + dlen
    nbytes = count * itemsize
    if len(buf) < bstart + 2 * nbytes:
        raise FormatError("truncated tensor payload")
    le = "<f4" if precision == "fp32" else "<f8"
    re = np.frombuffer(buf, le, count, bstart).reshape(shape)
    im = np.frombuffer(buf, le, count, bstart + nbytes).reshape(shape)
    dt = _DTYPES[precision]
    return ComplexTensor(re.astype(dt), im.astype(dt)), bstart + 2 * nbytes


def save_tensor(path, t):
    with open(path, "wb") as fh:
        fh.write(tensor_to_bytes(t))


def load_tensor(path):
    with open(path, "rb") as fh:
        t, _ = tensor_from_bytes(fh.read())
    return t
