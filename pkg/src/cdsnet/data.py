"""Dataset ingestion (CIFAR binary format), a synthetic complex-valued
dataset, deterministic splitting, and batching."""

from __future__ import annotations

import math
import os
from dataclasses import dataclass

import numpy as np

from .ctensor import ComplexTensor, Rng
from .exceptions import FormatError

CIFAR10_RECORD = 3073   # 1 label byte + 3*1024 pixel bytes
CIFAR100_RECORD = 3074  # coarse + fine label bytes + pixels


@dataclass
class LabeledBatch:
    inputs: ComplexTensor       # [N,C,H,W]
    labels: np.ndarray          # int64 [N]
    encoding: str


class DatasetHandle:
    """Encoded split tensors with seed-deterministic iteration.

    ``batches(split, batch_size, epoch)`` reshuffles per epoch with a
    counter-based stream keyed on (seed, epoch), so iteration order is a
    pure function of those values; the final partial batch is retained.
    """

    def __init__(self, splits, encoding, seed, num_classes):
        self._splits = splits   # name -> (re[N,C,H,W], im[N,C,H,W], labels[N])
        self.encoding = encoding
        self.seed = seed
        self.num_classes = num_classes

    def size(self, split):
        return self._splits[split][2].size

    @property
    def splits(self):
        return sorted(self._splits)

    def subset(self, split, count):
        """New handle whose ``split`` keeps only the first ``count`` items."""
        re, im, labels = self._splits[split]
        splits = dict(self._splits)
        splits[split] = (re[:count], im[:count], labels[:count])
        return DatasetHandle(splits, self.encoding, self.seed, self.num_classes)

    def tensors(self, split):
        re, im, labels = self._splits[split]
        return ComplexTensor(re, im), labels

    def batches(self, split, batch_size, epoch):
        if batch_size < 1:
            raise ValueError("batch_size must be >= 1")
        re, im, labels = self._splits[split]
        n = labels.size
        order = Rng(self.seed, stream=(epoch << 8) + 1).permutation(n)
        for start in range(0, n, batch_size):
            idx = order[start:start + batch_size]
            yield LabeledBatch(ComplexTensor(re[idx], im[idx]), labels[idx],
                               self.encoding)

    def eval_batches(self, split, batch_size):
        """Deterministic, unshuffled batches for evaluation."""
        re, im, labels = self._splits[split]
        n = labels.size
        for start in range(0, n, batch_size):
            sl = slice(start, start + batch_size)
            yield LabeledBatch(ComplexTensor(re[sl], im[sl]), labels[sl],
                               self.encoding)


def _encode_images(rgb_batch, encoding, precision):
    """[N,3,H,W] float RGB -> stacked encoded planes (vectorized over N)."""
    from . import encodings as E

    dt = np.float32 if precision == "fp32" else np.float64
    rgb = np.clip(np.asarray(rgb_batch, np.float64), 0.0, 1.0)
    if encoding == "rgb_as_real":
        return rgb.astype(dt), np.zeros_like(rgb, dt)
    if encoding == "sliding":
        re = np.stack([rgb[:, 0], rgb[:, 1]], axis=1)
        im = np.stack([rgb[:, 1], rgb[:, 2]], axis=1)
        return re.astype(dt), im.astype(dt)
    if encoding in ("lab", "lab_complex"):
        lin = E._srgb_to_linear(rgb)
        xyz = np.einsum("ij,njhw->nihw", E._RGB_TO_XYZ, lin)
        fx = E._lab_f(xyz[:, 0] / E._WHITE[0])
        fy = E._lab_f(xyz[:, 1] / E._WHITE[1])
        fz = E._lab_f(xyz[:, 2] / E._WHITE[2])
        L = 116.0 * fy - 16.0
        a = 500.0 * (fx - fy)
        b = 200.0 * (fy - fz)
        re = np.stack([L / E.L_SCALE, a / E.AB_SCALE], axis=1)
        im = np.stack([np.zeros_like(L), b / E.AB_SCALE], axis=1)
        return re.astype(dt), im.astype(dt)
    raise FormatError(f"unknown encoding {encoding!r}")


def _read_cifar_file(path, record, label_bytes):
    size = os.path.getsize(path)
    if size % record != 0:
        raise FormatError(f"{path}: size {size} not a multiple of {record}")
    raw = np.fromfile(path, np.uint8).reshape(-1, record)
    labels = raw[:, label_bytes - 1].astype(np.int64)  # fine label for CIFAR-100
    pixels = raw[:, label_bytes:].reshape(-1, 3, 32, 32).astype(np.float64) / 255.0
    return pixels, labels


def load_cifar10_bin(directory, encoding="rgb_as_real", precision="fp32", seed=0,
                     num_classes=10):
    """Parse data_batch_{1..5}.bin and test_batch.bin.

    Train split is the first 45000 records; validation is the last 5000 of
    batch 5.  Pixel bytes scale to [0,1] exactly as b/255.
    """
    train_px, train_lb = [], []
    for i in range(1, 6):
        px, lb = _read_cifar_file(os.path.join(directory, f"data_batch_{i}.bin"),
                                  CIFAR10_RECORD, 1)
        train_px.append(px)
        train_lb.append(lb)
    test_px, test_lb = _read_cifar_file(os.path.join(directory, "test_batch.bin"),
                                        CIFAR10_RECORD, 1)
    px = np.concatenate(train_px)
    lb = np.concatenate(train_lb)
    if lb.max() > 9 or test_lb.max() > 9:
        raise FormatError("label byte exceeds 9 in a CIFAR-10 file")
    splits = {}
    for name, p, l in (("train", px[:45000], lb[:45000]),
                       ("val", px[45000:], lb[45000:]),
                       ("test", test_px, test_lb)):
        re, im = _encode_images(p, encoding, precision)
        splits[name] = (re, im, l)
    return DatasetHandle(splits, encoding, seed, num_classes)


def load_cifar100_bin(directory, encoding="rgb_as_real", precision="fp32", seed=0):
    """Same record layout with coarse+fine label bytes; fine labels are used."""
    px, lb = _read_cifar_file(os.path.join(directory, "train.bin"),
                              CIFAR100_RECORD, 2)
    test_px, test_lb = _read_cifar_file(os.path.join(directory, "test.bin"),
                                        CIFAR100_RECORD, 2)
    if lb.max() > 99 or test_lb.max() > 99:
        raise FormatError("fine label byte exceeds 99 in a CIFAR-100 file")
    splits = {}
    for name, p, l in (("train", px[:45000], lb[:45000]),
                       ("val", px[45000:], lb[45000:]),
                       ("test", test_px, test_lb)):
        re, im = _encode_images(p, encoding, precision)
        splits[name] = (re, im, l)
    return DatasetHandle(splits, encoding, seed, 100)


# -- synthetic complex dataset -----------------------------------------------------


def synth_complex_dataset(rng, classes=10, per_class=100, size=32, channels=2,
                          noise_sigma=0.1, precision="fp32",
                          split_fracs=(0.8, 0.1, 0.1)):
    """Classes are random complex spatial templates; samples are global
    complex rescalings of the template plus complex Gaussian noise.

    The global scale has uniform phase and log-magnitude uniform in
    [-0.5, 0.5], so class identity is only recoverable through
    scale-invariant structure.
    """
    if per_class < 1:
        raise ValueError("per_class must be >= 1")
    templates = rng.normal((classes, 2, channels, size, size), 0.0, 1.0)
    all_re, all_im, all_lb = [], [], []
    for cls in range(classes):
        t_re, t_im = templates[cls, 0], templates[cls, 1]
        phases = rng.uniform((per_class,), -math.pi, math.pi)
        logmags = rng.uniform((per_class,), -0.5, 0.5)
        noise = rng.normal((per_class, 2, channels, size, size), 0.0, noise_sigma)
        mags = np.exp(logmags)
        sre = (mags * np.cos(phases))[:, None, None, None]
        sim = (mags * np.sin(phases))[:, None, None, None]
        re = sre * t_re[None] - sim * t_im[None] + noise[:, 0]
        im = sre * t_im[None] + sim * t_re[None] + noise[:, 1]
        all_re.append(re)
        all_im.append(im)
        all_lb.append(np.full(per_class, cls, np.int64))
    re = np.concatenate(all_re)
    im = np.concatenate(all_im)
    lb = np.concatenate(all_lb)

    # deterministic interleave so every split is class balanced
    order = Rng(rng.seed, stream=977).permutation(lb.size)
    re, im, lb = re[order], im[order], lb[order]
    n = lb.size
    n_train = int(round(split_fracs[0] * n))
    n_val = int(round(split_fracs[1] * n))
    dt = np.float32 if precision == "fp32" else np.float64
    splits = {
        "train": (re[:n_train].astype(dt), im[:n_train].astype(dt), lb[:n_train]),
        "val": (re[n_train:n_train + n_val].astype(dt),
                im[n_train:n_train + n_val].astype(dt), lb[n_train:n_train + n_val]),
        "test": (re[n_train + n_val:].astype(dt), im[n_train + n_val:].astype(dt),
                 lb[n_train + n_val:]),
    }
    handle = DatasetHandle(splits, "synthetic", rng.seed, classes)
    handle.templates = ComplexTensor(templates[:, 0].astype(dt),
                                     templates[:, 1].astype(dt))
    return handle


# -- CIFAR-format stand-in generator -------------------------------------------------


def synthesize_cifar10_files(directory, seed=0, blur_passes=6, noise=0.06):
    """Write a synthetic dataset in the exact CIFAR-10 binary layout.

    Ten smooth random RGB class templates plus per-sample noise; useful as a
    documented stand-in when the real archive isn't on disk.  Files are
    byte-compatible with ``load_cifar10_bin``.
    """
    os.makedirs(directory, exist_ok=True)
    rng = Rng(seed, stream=31)
    templates = rng.uniform((10, 3, 32, 32), 0.15, 0.85)
    for _ in range(blur_passes):
        templates = (templates
                     + np.roll(templates, 1, axis=2) + np.roll(templates, -1, axis=2)
                     + np.roll(templates, 1, axis=3) + np.roll(templates, -1, axis=3)) / 5.0

    def write_split(path, count, stream):
        srng = Rng(seed, stream=stream)
        labels = srng.integers(0, 10, (count,)).astype(np.uint8)
        jitter = srng.normal((count, 3, 32, 32), 0.0, noise)
        imgs = np.clip(templates[labels] + jitter, 0.0, 1.0)
        pixels = np.round(imgs * 255.0).astype(np.uint8).reshape(count, 3072)
        rec = np.concatenate([labels[:, None], pixels], axis=1)
        rec.tofile(path)

    for i in range(1, 6):
        write_split(os.path.join(directory, f"data_batch_{i}.bin"), 10000, 100 + i)
    write_split(os.path.join(directory, "test_batch.bin"), 10000, 200)
    return directory
