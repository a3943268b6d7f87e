"""Complex-valued color encodings, complex-scaling augmentation, and the
phase-normalization preprocessing baseline."""

from __future__ import annotations

import logging
import math
from dataclasses import dataclass

import numpy as np

from .ctensor import ComplexScalar, ComplexTensor, Rng
from .exceptions import FormatError, ShapeError

log = logging.getLogger(__name__)

# sRGB <-> XYZ under D65 with the standard primaries
_RGB_TO_XYZ = np.array([
    [0.4124564, 0.3575761, 0.1804375],
    [0.2126729, 0.7151522, 0.0721750],
    [0.0193339, 0.1191920, 0.9503041],
])
_XYZ_TO_RGB = np.linalg.inv(_RGB_TO_XYZ)
_WHITE = np.array([0.95047, 1.0, 1.08883])
_DELTA = 6.0 / 29.0

# channel scalings keep encoded magnitudes O(1)
L_SCALE = 100.0
AB_SCALE = 128.0

ENCODINGS = ("rgb_as_real", "sliding", "lab_complex")


@dataclass
class EncodedImage:
    tensor: ComplexTensor
    encoding: str


def _check_rgb(rgb):
    rgb = np.asarray(rgb, np.float64)
    if rgb.ndim != 3 or rgb.shape[0] != 3:
        raise ShapeError(f"expected [3,H,W], got {rgb.shape}")
    if rgb.min() < 0.0 or rgb.max() > 1.0:
        log.warning("RGB values outside [0,1]; clamping")
        rgb = np.clip(rgb, 0.0, 1.0)
    return rgb


def rgb_as_real(rgb, precision="fp64"):
    """Three complex channels with zero imaginary part."""
    rgb = _check_rgb(rgb)
    t = ComplexTensor(rgb, np.zeros_like(rgb)).astype(precision)
    return EncodedImage(t, "rgb_as_real")


def rgb_to_sliding(rgb, precision="fp64"):
    """Two complex channels pairing adjacent color planes: [R+iG, G+iB]."""
    rgb = _check_rgb(rgb)
    re = np.stack([rgb[0], rgb[1]])
    im = np.stack([rgb[1], rgb[2]])
    return EncodedImage(ComplexTensor(re, im).astype(precision), "sliding")


def _srgb_to_linear(c):
    return np.where(c <= 0.04045, c / 12.92, ((c + 0.055) / 1.055) ** 2.4)


def _linear_to_srgb(c):
    c = np.clip(c, 0.0, None)
    return np.where(c <= 0.0031308, 12.92 * c, 1.055 * c ** (1 / 2.4) - 0.055)


def _lab_f(t):
    return np.where(t > _DELTA ** 3, np.cbrt(t), t / (3 * _DELTA ** 2) + 4.0 / 29.0)


def _lab_f_inv(t):
    return np.where(t > _DELTA, t ** 3, 3 * _DELTA ** 2 * (t - 4.0 / 29.0))


def rgb_to_lab(rgb):
    """sRGB in [0,1] to CIELAB planes (L in [0,100], a/b roughly [-128,128])."""
    lin = _srgb_to_linear(np.asarray(rgb, np.float64))
    xyz = np.einsum("ij,jhw->ihw", _RGB_TO_XYZ, lin)
    fx = _lab_f(xyz[0] / _WHITE[0])
    fy = _lab_f(xyz[1] / _WHITE[1])
    fz = _lab_f(xyz[2] / _WHITE[2])
    L = 116.0 * fy - 16.0
    a = 500.0 * (fx - fy)
    b = 200.0 * (fy - fz)
    return np.stack([L, a, b])


def lab_to_rgb(lab):
    L, a, b = lab[0], lab[1], lab[2]
    fy = (L + 16.0) / 116.0
    fx = fy + a / 500.0
    fz = fy - b / 200.0
    xyz = np.stack([_lab_f_inv(fx) * _WHITE[0],
                    _lab_f_inv(fy) * _WHITE[1],
                    _lab_f_inv(fz) * _WHITE[2]])
    lin = np.einsum("ij,jhw->ihw", _XYZ_TO_RGB, xyz)
    return np.clip(_linear_to_srgb(lin), 0.0, 1.0)


def rgb_to_lab_complex(rgb, precision="fp64"):
    """Luminance as a pure-real channel, chromaticity as a complex channel.

    Channel 0 is L*/100 + 0i; channel 1 is (a* + i b*)/128.
    """
    rgb = _check_rgb(rgb)
    lab = rgb_to_lab(rgb)
    re = np.stack([lab[0] / L_SCALE, lab[1] / AB_SCALE])
    im = np.stack([np.zeros_like(lab[0]), lab[2] / AB_SCALE])
    return EncodedImage(ComplexTensor(re, im).astype(precision), "lab_complex")


def lab_complex_to_rgb(enc):
    """Inverse of the LAB encoding; out-of-gamut values clamp to [0,1]."""
    if enc.encoding != "lab_complex":
        raise FormatError(f"expected lab_complex encoding, got {enc.encoding!r}")
    t = enc.tensor
    lab = np.stack([t.re[0] * L_SCALE, t.re[1] * AB_SCALE, t.im[1] * AB_SCALE])
    return lab_to_rgb(lab)


def encode_rgb(rgb, encoding, precision="fp64"):
    if encoding == "rgb_as_real":
        return rgb_as_real(rgb, precision)
    if encoding == "sliding":
        return rgb_to_sliding(rgb, precision)
    if encoding in ("lab", "lab_complex"):
        return rgb_to_lab_complex(rgb, precision)
    raise FormatError(f"unknown encoding {encoding!r}")


# -- complex scaling -------------------------------------------------------------


@dataclass(frozen=True)
class ScaleRange:
    """Sampling ranges for a random complex scale."""

    phase_max: float = math.pi
    log_mag_low: float = 0.0
    log_mag_high: float = 0.0

    def sample(self, rng):
        phase = float(rng.uniform((), -self.phase_max, self.phase_max))
        logm = float(rng.uniform((), self.log_mag_low, self.log_mag_high))
        return ComplexScalar.from_polar(math.exp(logm), phase)


def complex_scale_transform(enc, s, rng=None):
    """Multiply all channels by one complex scalar (or a sampled one)."""
    if isinstance(s, ScaleRange):
        if rng is None:
            raise ValueError("sampling a scale range requires an Rng")
        s = s.sample(rng)
    return EncodedImage(enc.tensor * s, enc.encoding)


def phase_normalize(enc):
    """Cancel the circular-mean phase of the nonzero pixel values."""
    t = enc.tensor
    mag = np.hypot(t.re, t.im)
    nz = mag > 0
    if not np.any(nz):
        return EncodedImage(t.copy(), enc.encoding)
    ure = np.where(nz, t.re / np.where(nz, mag, 1.0), 0.0)
    uim = np.where(nz, t.im / np.where(nz, mag, 1.0), 0.0)
    phi = math.atan2(uim.sum(), ure.sum())
    s = ComplexScalar.from_polar(1.0, -phi)
    return EncodedImage(t * s, enc.encoding)


# -- PPM (P6, 8-bit) --------------------------------------------------------------


def read_ppm(path):
    """Binary PPM to float RGB [3,H,W] in [0,1]."""
    with open(path, "rb") as fh:
        data = fh.read()
    if not data.startswith(b"P6"):
        raise FormatError("not a binary (P6) PPM file")
    fields = []
    pos = 2
    while len(fields) < 3:
        while pos < len(data) and data[pos:pos + 1].isspace():
            pos += 1
        if data[pos:pos + 1] == b"#":
            while pos < len(data) and data[pos] != 0x0A:
                pos += 1
            continue
        start = pos
        while pos < len(data) and not data[pos:pos + 1].isspace():
            pos += 1
        fields.append(int(data[start:pos]))
    pos += 1  # single whitespace after maxval
    w, h, maxval = fields
    if maxval != 255:
        raise FormatError(f"only 8-bit PPM supported, maxval={maxval}")
    need = w * h * 3
    raw = np.frombuffer(data, np.uint8, need, pos)
    if raw.size != need:
        raise FormatError("truncated PPM payload")
    img = raw.reshape(h, w, 3).transpose(2, 0, 1)
    return img.astype(np.float64) / 255.0


def write_ppm(path, rgb):
    rgb = np.clip(np.asarray(rgb, np.float64), 0.0, 1.0)
    if rgb.ndim != 3 or rgb.shape[0] != 3:
        raise ShapeError(f"expected [3,H,W], got {rgb.shape}")
    h, w = rgb.shape[1], rgb.shape[2]
    payload = np.round(rgb * 255.0).astype(np.uint8).transpose(1, 2, 0).tobytes()
    with open(path, "wb") as fh:
        fh.write(f"P6\n{w} {h}\n255\n".encode())
        fh.write(payload)
