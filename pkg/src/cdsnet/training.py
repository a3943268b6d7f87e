"""Loss, optimizers, the training loop, and checkpoint persistence."""

from __future__ import annotations

import csv
import hashlib
import io
import json
import logging
import struct
from dataclasses import dataclass, field

import numpy as np

from .autodiff import Tape, Var, accumulate
from .ctensor import ComplexTensor, MAGIC, tensor_from_bytes, tensor_to_bytes
from .exceptions import (
    CheckpointCorruptError,
    CheckpointMismatchError,
    EvaluationError,
)

log = logging.getLogger(__name__)


# -- loss ----------------------------------------------------------------------


def cross_entropy_logits(logits, labels, tape=None):
    """Mean negative log softmax probability of the labels.

    ``logits`` is a Var holding [N,K] (or [K]); stabilized by max
    subtraction.
    """
    v = logits.value
    squeeze = v.ndim == 1
    z = v[None] if squeeze else v
    if not np.all(np.isfinite(z)):
        raise EvaluationError("non-finite logits in cross entropy")
    labels = np.asarray(labels, np.int64).reshape(-1)
    n, k = z.shape
    shifted = z - z.max(axis=1, keepdims=True)
    logsumexp = np.log(np.exp(shifted).sum(axis=1))
    picked = shifted[np.arange(n), labels]
    loss = Var(float((logsumexp - picked).mean()))
    if tape is None:
        return loss

    def bwd():
        g = loss.grad
        if g is None:
            return
        soft = np.exp(shifted)
        soft /= soft.sum(axis=1, keepdims=True)
        soft[np.arange(n), labels] -= 1.0
        grad = (g / n) * soft
        accumulate(logits, (grad[0] if squeeze else grad).astype(v.dtype))

    tape.record(bwd)
    return loss


# -- optimizers ------------------------------------------------------------------


def _planes_of(value):
    if isinstance(value, ComplexTensor):
        return [value.re, value.im]
    return [np.asarray(value)]


def _rebuild(value, planes):
    if isinstance(value, ComplexTensor):
        return ComplexTensor(planes[0], planes[1])
    return planes[0]


def _grads_finite(params):
    for p in params:
        if p.grad is None:
            continue
        for gpl in _planes_of(p.grad):
            if not np.all(np.isfinite(gpl)):
                return False
    return True


class AdamW:
    """Adam with decoupled weight decay on every real coordinate.

    Complex parameters decay in both coordinates, i.e. the modulus shrinks
    toward zero.  The decay multiplies the parameter before the moment
    update is applied.
    """

    def __init__(self, params, lr=1e-3, betas=(0.99, 0.999), eps=1e-8,
                 weight_decay=0.1):
        self.params = list(params)
        self.lr = lr
        self.betas = betas
        self.eps = eps
        self.weight_decay = weight_decay
        self.step_count = 0
        self.moments = [
            [(np.zeros_like(pl), np.zeros_like(pl)) for pl in _planes_of(p.value)]
            for p in self.params
        ]

    def step(self):
        """Apply one update; returns False (and skips) on non-finite grads."""
        if not _grads_finite(self.params):
            log.warning("optimizer step aborted: non-finite gradient")
            return False
        self.step_count += 1
        b1, b2 = self.betas
        c1 = 1.0 - b1 ** self.step_count
        c2 = 1.0 - b2 ** self.step_count
        for p, moms in zip(self.params, self.moments):
            gplanes = (_planes_of(p.grad) if p.grad is not None
                       else [np.zeros_like(pl) for pl in _planes_of(p.value)])
            new_planes = []
            for (pl, g, (m, v)) in zip(_planes_of(p.value), gplanes, moms):
                decayed = pl * (1.0 - self.lr * self.weight_decay)
                m[...] = b1 * m + (1 - b1) * g
                v[...] = b2 * v + (1 - b2) * g * g
                mhat = m / c1
                vhat = v / c2
                new_planes.append((decayed - self.lr * mhat / (np.sqrt(vhat) + self.eps))
                                  .astype(pl.dtype))
            p.value = _rebuild(p.value, new_planes)
        return True

    def state_dict(self):
        return {"step": self.step_count, "lr": self.lr, "betas": list(self.betas),
                "eps": self.eps, "weight_decay": self.weight_decay}


class SGD:
    """Plain SGD with optional momentum."""

    def __init__(self, params, lr=0.1, momentum=0.0):
        self.params = list(params)
        self.lr = lr
        self.momentum = momentum
        self.step_count = 0
        self.velocity = [
            [np.zeros_like(pl) for pl in _planes_of(p.value)] for p in self.params
        ]

    def step(self):
        if not _grads_finite(self.params):
            log.warning("optimizer step aborted: non-finite gradient")
            return False
        self.step_count += 1
        for p, vel in zip(self.params, self.velocity):
            gplanes = (_planes_of(p.grad) if p.grad is not None
                       else [np.zeros_like(pl) for pl in _planes_of(p.value)])
            new_planes = []
            for pl, g, v in zip(_planes_of(p.value), gplanes, vel):
                if self.momentum:
                    v[...] = self.momentum * v + g
                    upd = v
                else:
                    upd = g
                new_planes.append((pl - self.lr * upd).astype(pl.dtype))
            p.value = _rebuild(p.value, new_planes)
        return True

    def state_dict(self):
        return {"step": self.step_count, "lr": self.lr, "momentum": self.momentum}


def make_optimizer(params, algo="adamw", **kw):
    if algo == "adamw":
        return AdamW(params, **kw)
    if algo == "sgd":
        return SGD(params, **kw)
    raise ValueError(f"unknown optimizer {algo!r}")


def optimizer_step(params, grads, state, algo="adamw"):
    """One-shot functional form: assigns grads then steps ``state``."""
    for p, g in zip(params, grads):
        p.grad = g
    return state.step()


# -- metrics ---------------------------------------------------------------------


@dataclass
class MetricRecord:
    step: int
    split: str
    metric: str
    value: float


def write_metrics_csv(path, records):
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["step", "split", "metric", "value"])
        for r in records:
            writer.writerow([r.step, r.split, r.metric, f"{r.value:.10g}"])


def metrics_digest(records):
    h = hashlib.sha256()
    for r in records:
        h.update(f"{r.step},{r.split},{r.metric},{r.value:.10g}\n".encode())
    return h.hexdigest()


# -- checkpoints -------------------------------------------------------------------


@dataclass
class Checkpoint:
    config: dict
    params: dict            # name -> ComplexTensor (real stored with zero im)
    param_kinds: dict       # name -> "complex" | "real"
    step: int
    metric_digest: str
    optimizer: dict = field(default_factory=dict)
    norm_stats: dict = field(default_factory=dict)

    @classmethod
    def capture(cls, model, step=0, records=(), optimizer=None):
        params = {}
        kinds = {}
        for p in model.parameters():
            if isinstance(p.value, ComplexTensor):
                params[p.name] = p.value.copy()
                kinds[p.name] = "complex"
            else:
                arr = np.atleast_1d(np.asarray(p.value))
                params[p.name] = ComplexTensor(arr.copy(), np.zeros_like(arr))
                kinds[p.name] = "real"
        stats = {}
        for name, st in model.norm_states():
            stats[name] = {"running_mean": st.running_mean.tolist(),
                           "running_var": st.running_var.tolist(),
                           "seen": st.seen}
        return cls(config=model.config(), params=params, param_kinds=kinds,
                   step=step, metric_digest=metrics_digest(records),
                   optimizer=optimizer.state_dict() if optimizer else {},
                   norm_stats=stats)

    def restore(self, model):
        if model.config() != self.config:
            raise CheckpointMismatchError("checkpoint does not match model config")
        for p in model.parameters():
            stored = self.params[p.name]
            if self.param_kinds[p.name] == "complex":
                p.value = stored.copy()
            else:
                arr = stored.re.copy()
                p.value = arr.reshape(np.asarray(p.value).shape)
        for name, st in model.norm_states():
            if name in self.norm_stats:
                blob = self.norm_stats[name]
                st.running_mean = np.asarray(blob["running_mean"],
                                             st.running_mean.dtype)
                st.running_var = np.asarray(blob["running_var"],
                                            st.running_var.dtype)
                st.seen = bool(blob["seen"])


def save_checkpoint(path, ckpt):
    """Container: magic, manifest JSON, tensor blocks, sha256 trailer."""
    names = sorted(ckpt.params)
    manifest = json.dumps({
        "kind": "checkpoint",
        "config": ckpt.config,
        "step": ckpt.step,
        "metric_digest": ckpt.metric_digest,
        "optimizer": ckpt.optimizer,
        "norm_stats": ckpt.norm_stats,
        "params": names,
        "param_kinds": [ckpt.param_kinds[n] for n in names],
    }).encode()
    buf = io.BytesIO()
    buf.write(MAGIC)
    buf.write(struct.pack("<I", len(manifest)))
    buf.write(manifest)
    for name in names:
        buf.write(tensor_to_bytes(ckpt.params[name]))
    body = buf.getvalue()
    with open(path, "wb") as fh:
        fh.write(body)
        fh.write(hashlib.sha256(body).digest())


def load_checkpoint(path):
    with open(path, "rb") as fh:
        blob = fh.read()
    if len(blob) < 40 or blob[:4] != MAGIC:
        raise CheckpointCorruptError("not a checkpoint container")
    body, digest = blob[:-32], blob[-32:]
    if hashlib.sha256(body).digest() != digest:
        raise CheckpointCorruptError("checkpoint checksum mismatch (truncated or corrupt)")
    (mlen,) = struct.unpack_from("<I", body, 4)
    manifest = json.loads(body[8:8 + mlen].decode())
    offset = 8 + mlen
    params = {}
    for name in manifest["params"]:
        t, offset = tensor_from_bytes(body, offset)
        params[name] = t
    return Checkpoint(config=manifest["config"], params=params,
                      param_kinds=dict(zip(manifest["params"],
                                           manifest["param_kinds"])),
                      step=manifest["step"],
                      metric_digest=manifest["metric_digest"],
                      optimizer=manifest.get("optimizer", {}),
                      norm_stats=manifest.get("norm_stats", {}))


# -- training loop ------------------------------------------------------------------


@dataclass
class TrainResult:
    checkpoint: Checkpoint
    records: list
    best_val_accuracy: float
    diverged: bool = False


def evaluate_split(model, handle, split, batch_size=256, train_mode=False):
    """Top-1 accuracy over a split in deterministic order."""
    correct = 0
    total = 0
    for batch in handle.eval_batches(split, batch_size):
        logits = model.logits(batch.inputs, train=train_mode)
        pred = logits.argmax(axis=1)
        correct += int((pred == batch.labels).sum())
        total += batch.labels.size
    return correct / max(total, 1)


def train_loop(model, handle, steps, batch_size=256, lr=1e-3, betas=(0.99, 0.999),
               weight_decay=0.1, algo="adamw", validate_every=1000,
               val_batch_size=256, on_record=None):
    """Step-based training with periodic validation and best-model retention.

    Returns the checkpoint with the best validation accuracy (strictly
    greater replaces, ties keep the earlier one); aborts on a non-finite
    loss and returns the last good checkpoint.
    """
    params = model.parameters()
    if algo == "adamw":
        opt = AdamW(params, lr=lr, betas=betas, weight_decay=weight_decay)
    else:
        opt = SGD(params, lr=lr, momentum=0.9)
    records = []
    best_acc = -1.0
    best_ckpt = Checkpoint.capture(model, 0, records, opt)
    if steps == 0:
        return TrainResult(best_ckpt, records, best_acc)

    step = 0
    epoch = 0
    diverged = False
    while step < steps and not diverged:
        for batch in handle.batches("train", batch_size, epoch):
            model.zero_grad()
            tape = Tape()
            out = model.forward(Var(batch.inputs), tape=tape, train=True)
            try:
                loss = cross_entropy_logits(out, batch.labels, tape=tape)
            except EvaluationError:
                log.warning("loss diverged at step %d; keeping last checkpoint", step)
                diverged = True
                break
            tape.backward(loss)
            if not opt.step():
                diverged = True
                break
            step += 1
            records.append(MetricRecord(step, "train", "loss", loss.value))
            if validate_every and step % validate_every == 0:
                acc = evaluate_split(model, handle, "val", val_batch_size)
                records.append(MetricRecord(step, "val", "accuracy", acc))
                if on_record is not None:
                    on_record(records[-1])
                if acc > best_acc:
                    best_acc = acc
                    best_ckpt = Checkpoint.capture(model, step, records, opt)
            if step >= steps:
                break
        epoch += 1

    if validate_every and (steps % validate_every or best_acc < 0) and not diverged:
        acc = evaluate_split(model, handle, "val", val_batch_size)
        records.append(MetricRecord(step, "val", "accuracy", acc))
        if acc > best_acc:
            best_acc = acc
            best_ckpt = Checkpoint.capture(model, step, records, opt)
    return TrainResult(best_ckpt, records, best_acc, diverged)
