"""Reverse-mode differentiation over recorded operation chains.

Every complex quantity is differentiated as a pair of real coordinates: a
cotangent for a ``ComplexTensor`` value is another ``ComplexTensor`` whose
``re``/``im`` planes hold d(loss)/d(re) and d(loss)/d(im).  (The Wirtinger
derivative d/dz̄ of a real loss is ½(d/d re + i·d/d im) of these.)

A ``Tape`` is a Wengert list: ops append a closure during the forward pass
and ``backward`` replays the closures in exact reverse order, accumulating
cotangents additively at every variable, so value fan-out needs no special
handling.
"""

from __future__ import annotations

import csv
from dataclasses import dataclass, field

import numpy as np

from .ctensor import ComplexTensor
from .exceptions import EvaluationError, TapeStateError

GRAD_FLOOR = 1e-6  # relative-error denominator floor


class Var:
    """A value on the tape together with its accumulated cotangent."""

    __slots__ = ("value", "grad")

    def __init__(self, value):
        self.value = value
        self.grad = None


class Parameter(Var):
    """A named learnable leaf; its cotangent persists across tapes."""

    __slots__ = ("name",)

    def __init__(self, name, value):
        super().__init__(value)
        self.name = name

    def zero_grad(self):
        self.grad = None

    def __repr__(self):
        shape = getattr(self.value, "shape", ())
        return f"Parameter({self.name!r}, shape={tuple(shape)})"


def accumulate(var, g):
    """Add cotangent ``g`` into ``var``; shapes must already match."""
    if var.grad is None:
        var.grad = g
    elif isinstance(g, ComplexTensor):
        var.grad = ComplexTensor(var.grad.re + g.re, var.grad.im + g.im)
    else:
        var.grad = var.grad + g


class Tape:
    """Ordered record of executed operations."""

    def __init__(self):
        self._records = []

    def record(self, fn):
        self._records.append(fn)

    def __len__(self):
        return len(self._records)

    def backward(self, loss, cotangent=1.0):
        """Propagate from a real scalar loss back to every recorded input."""
        if not self._records:
            raise TapeStateError("backward called before any forward was recorded")
        loss.grad = float(cotangent) if loss.grad is None else loss.grad + float(cotangent)
        for fn in reversed(self._records):
            fn()


def backward(tape, loss, cotangent=1.0):
    tape.backward(loss, cotangent)


# -- numeric gradients --------------------------------------------------------


def _planes(value):
    """Real coordinate planes of a parameter value, in a fixed order."""
    if isinstance(value, ComplexTensor):
        return [("re", value.re), ("im", value.im)]
    return [("", np.asarray(value))]


def finite_diff_grad(f, params, h=1e-5):
    """Central-difference gradient of scalar ``f()`` w.r.t. each parameter.

    Returns a dict: param name -> list of (plane label, gradient array).
    Parameters are perturbed in place and restored.
    """
    if h <= 0:
        raise ValueError("h must be positive")
    out = {}
    for p in params:
        grads = []
        for label, plane in _planes(p.value):
            flat = plane.reshape(-1)
            g = np.zeros(flat.size, np.float64)
            for i in range(flat.size):
                orig = flat[i]
                flat[i] = orig + h
                fp = f()
                flat[i] = orig - h
                fm = f()
                flat[i] = orig
                if not (np.isfinite(fp) and np.isfinite(fm)):
                    raise EvaluationError(f"non-finite value while perturbing {p.name}")
                g[i] = (fp - fm) / (2.0 * h)
            grads.append((label, g.reshape(plane.shape)))
        out[p.name] = grads
    return out


def finite_diff_sampled(f, params, coords, h=1e-5):
    """Central differences at chosen coordinates only.

    ``coords`` maps param name -> list of (plane index, flat index); used to
    keep whole-model checks tractable.
    """
    out = {}
    for p in params:
        picks = coords.get(p.name, [])
        planes = _planes(p.value)
        vals = []
        for pi, fi in picks:
            flat = planes[pi][1].reshape(-1)
            orig = flat[fi]
            flat[fi] = orig + h
            fp = f()
            flat[fi] = orig - h
            fm = f()
            flat[fi] = orig
            if not (np.isfinite(fp) and np.isfinite(fm)):
                raise EvaluationError(f"non-finite value while perturbing {p.name}")
            vals.append((fp - fm) / (2.0 * h))
        out[p.name] = vals
    return out


# -- gradient checker ---------------------------------------------------------


@dataclass
class GradEntry:
    param: str
    max_rel_err: float
    max_abs_err: float
    worst_coordinate: str


@dataclass
class GradReport:
    layer: str
    seed: int
    tolerance: float
    entries: list[GradEntry] = field(default_factory=list)
    status: str = "pass"  # pass | fail | inconclusive

    @property
    def max_rel_err(self):
        return max((e.max_rel_err for e in self.entries), default=0.0)

    @property
    def worst_coordinate(self):
        if not self.entries:
            return ""
        worst = max(self.entries, key=lambda e: e.max_rel_err)
        return f"{worst.param}:{worst.worst_coordinate}"

    @property
    def passed(self):
        return self.status == "pass"


def _rel_err(a, n):
    return abs(a - n) / max(abs(a), abs(n), GRAD_FLOOR)


def _grad_planes(grad, value):
    if isinstance(value, ComplexTensor):
        if grad is None:
            z = np.zeros_like(value.re)
            return [z, np.zeros_like(value.im)]
        return [grad.re, grad.im]
    if grad is None:
        return [np.zeros_like(np.asarray(value, np.float64))]
    return [np.asarray(grad, np.float64)]


def gradcheck(layer, rng, tolerance=1e-4, h=1e-5, max_retries=100):
    """Compare a layer's analytic backward against central differences.

    The test point is sampled away from non-differentiable loci via the
    layer's ``kink_free`` predicate; if no admissible point is found within
    ``max_retries`` draws the report is marked inconclusive rather than
    failed.
    """
    from . import layers  # late import: layers depends on this module

    if isinstance(layer, str):
        layer = layers.make_layer(layer, rng)
    x_val = None
    for _ in range(max_retries):
        cand = layer.check_input(rng)
        if layer.kink_free(cand):
            x_val = cand
            break
    report = GradReport(layer=layer.kind, seed=rng.seed, tolerance=tolerance)
    if x_val is None:
        report.status = "inconclusive"
        return report

    x = Parameter("input", x_val)
    params = [x] + list(layer.parameters())
    probe = {}

    for p in params:
        p.zero_grad()
    tape = Tape()
    out = layer.forward(x, tape=tape, train=True)
    loss = layers.probe_loss(out, probe, tape=tape)
    tape.backward(loss)

    numeric = finite_diff_grad(lambda: float(
        layers.probe_loss(layer.forward(Var(x.value), tape=None, train=True), probe).value
    ), params, h=h)

    for p in params:
        analytic = _grad_planes(p.grad, p.value)
        worst_rel, worst_abs, worst_coord = 0.0, 0.0, "-"
        for pi, (label, num) in enumerate(numeric[p.name]):
            a = analytic[pi].reshape(-1)
            n = num.reshape(-1)
            for i in range(n.size):
                rel = _rel_err(a[i], n[i])
                if rel > worst_rel:
                    worst_rel = rel
                    worst_abs = abs(a[i] - n[i])
                    worst_coord = f"{label}[{i}]" if label else f"[{i}]"
        report.entries.append(GradEntry(p.name, worst_rel, worst_abs, worst_coord))
    if report.max_rel_err > tolerance:
        report.status = "fail"
    return report


def write_gradcheck_csv(path, reports):
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["layer", "seed", "max_rel_err", "worst_coordinate", "status"])
        for r in reports:
            writer.writerow([r.layer, r.seed, f"{r.max_rel_err:.3e}",
                             r.worst_coordinate, r.status])
