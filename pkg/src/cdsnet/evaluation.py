"""Accuracy, robustness sweeps, bias-variance decomposition, and the
Fréchet-mean decomposability check."""

from __future__ import annotations

import csv
import math
from dataclasses import dataclass, field

import numpy as np

from .ctensor import ComplexScalar, ComplexTensor, Rng
from .encodings import ScaleRange
from .layers import arcdist
from .layers.wfm import minimize_circle


def evaluate_accuracy(model, handle, split="test", batch_size=256, train_mode=False):
    """Top-1 accuracy in deterministic order; argmax ties pick the lowest index."""
    correct = 0
    total = 0
    for batch in handle.eval_batches(split, batch_size):
        logits = model.logits(batch.inputs, train=train_mode)
        pred = logits.argmax(axis=1)
        correct += int((pred == batch.labels).sum())
        total += batch.labels.size
    return correct / max(total, 1)


# -- robustness ------------------------------------------------------------------


@dataclass
class RobustnessPoint:
    phase_max: float
    log_mag_low: float
    log_mag_high: float
    mean_accuracy: float
    std_accuracy: float
    draws: int


@dataclass
class RobustnessCurve:
    model: str
    points: list = field(default_factory=list)

    def write_csv(self, path):
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["model", "phase_max", "log_mag_low", "log_mag_high",
                        "mean_accuracy", "std_accuracy", "draws"])
            for p in self.points:
                w.writerow([self.model, f"{p.phase_max:.6g}", f"{p.log_mag_low:.6g}",
                            f"{p.log_mag_high:.6g}", f"{p.mean_accuracy:.6f}",
                            f"{p.std_accuracy:.6f}", p.draws])


DEFAULT_RANGES = tuple(ScaleRange(phase_max=t) for t in
                       (0.0, math.pi / 8, math.pi / 4, math.pi / 2, math.pi))


def _scaled_batch_inputs(batch, rng, srange):
    """Apply an independent random scale to every image in the batch."""
    n = batch.labels.size
    phases = rng.uniform((n,), -srange.phase_max, srange.phase_max)
    logm = rng.uniform((n,), srange.log_mag_low, srange.log_mag_high)
    mags = np.exp(logm)
    sre = (mags * np.cos(phases))[:, None, None, None].astype(batch.inputs.dtype)
    sim = (mags * np.sin(phases))[:, None, None, None].astype(batch.inputs.dtype)
    re, im = batch.inputs.re, batch.inputs.im
    return ComplexTensor(re * sre - im * sim, re * sim + im * sre)


def robustness_sweep(model, handle, split="test", ranges=DEFAULT_RANGES, draws=10,
                     rng=None, batch_size=256, train_mode=False):
    """Accuracy under per-image random complex scaling, per range."""
    rng = rng if rng is not None else Rng(0)
    if not ranges:
        raise ValueError("ranges must be nonempty")
    curve = RobustnessCurve(model=model.name)
    for r_i, srange in enumerate(ranges):
        accs = []
        for d in range(draws):
            draw_rng = Rng(rng.seed, stream=(r_i << 16) + d + 7)
            correct = 0
            total = 0
            for batch in handle.eval_batches(split, batch_size):
                if srange.phase_max == 0.0 and srange.log_mag_low == 0.0 \
                        and srange.log_mag_high == 0.0:
                    inputs = batch.inputs
                else:
                    inputs = _scaled_batch_inputs(batch, draw_rng, srange)
                pred = model.logits(inputs, train=train_mode).argmax(axis=1)
                correct += int((pred == batch.labels).sum())
                total += batch.labels.size
            accs.append(correct / max(total, 1))
        accs = np.asarray(accs)
        curve.points.append(RobustnessPoint(
            srange.phase_max, srange.log_mag_low, srange.log_mag_high,
            float(accs.mean()), float(accs.std()), draws))
    return curve


# -- bias / variance ----------------------------------------------------------------


@dataclass
class BiasVarianceTable:
    per_class_bias: np.ndarray
    per_class_variance: np.ndarray
    overall_bias: float
    overall_variance: float
    replicas: int

    def write_csv(self, path):
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["class", "bias", "variance"])
            for i, (b, v) in enumerate(zip(self.per_class_bias, self.per_class_variance)):
                w.writerow([i, f"{b:.6f}", f"{v:.6f}"])
            w.writerow(["overall", f"{self.overall_bias:.6f}",
                        f"{self.overall_variance:.6f}"])


def modal_prediction(preds):
    """Mode over replicas per instance; ties resolve to the smallest class."""
    preds = np.asarray(preds)
    n_rep, n = preds.shape
    k = int(preds.max()) + 1
    counts = np.zeros((n, k), np.int64)
    for r in range(n_rep):
        counts[np.arange(n), preds[r]] += 1
    return counts.argmax(axis=1)


def bias_variance_from_predictions(preds, truth, num_classes):
    """0-1 bias/variance given replica predictions [n_rep, N]."""
    preds = np.asarray(preds)
    truth = np.asarray(truth)
    n_rep = preds.shape[0]
    mode = modal_prediction(preds)
    bias_i = (mode != truth).astype(np.float64)
    var_i = (preds != mode[None, :]).mean(axis=0)
    per_class_b = np.zeros(num_classes)
    per_class_v = np.zeros(num_classes)
    for cls in range(num_classes):
        mask = truth == cls
        if mask.any():
            per_class_b[cls] = bias_i[mask].mean()
            per_class_v[cls] = var_i[mask].mean()
    return BiasVarianceTable(per_class_b, per_class_v,
                             float(bias_i.mean()), float(var_i.mean()), n_rep)


def bias_variance(models, handle, split="test", batch_size=256):
    """Decompose 0-1 error over n trained replicas."""
    if len(models) < 2:
        raise ValueError("need at least 2 replicas")
    preds = []
    truth = None
    for model in models:
        model_preds = []
        labels = []
        for batch in handle.eval_batches(split, batch_size):
            model_preds.append(model.logits(batch.inputs).argmax(axis=1))
            labels.append(batch.labels)
        preds.append(np.concatenate(model_preds))
        truth = np.concatenate(labels)
    return bias_variance_from_predictions(np.stack(preds), truth, handle.num_classes)


# -- Fréchet-mean decomposability -----------------------------------------------------


@dataclass
class WfmTrial:
    closed_form_log_mag: float
    bruteforce_log_mag: float
    joint_log_mag: float
    joint_phase: float
    phase_1d: float
    separated: bool


@dataclass
class WfmReport:
    trials: list = field(default_factory=list)

    @property
    def max_log_mag_gap(self):
        return max(abs(t.closed_form_log_mag - t.bruteforce_log_mag)
                   for t in self.trials)

    @property
    def all_separated(self):
        return all(t.separated for t in self.trials)


def _wfm_objective(log_mags, phases, weights, r, theta):
    return float(np.sum(weights * ((log_mags - r) ** 2 + arcdist(phases, theta) ** 2)))


def wfm_decomposability_check(rng, trials=100, grid_r=400, grid_theta=400,
                              tol=1e-3):
    """Verify the joint Fréchet objective separates into its two 1-D problems.

    For random point sets, brute-force the 2-D (log magnitude, phase) grid,
    refine, and compare the optimal log magnitude against the closed form
    (the weighted sum of log magnitudes).
    """
    report = WfmReport()
    for t_i in range(trials):
        trng = Rng(rng.seed, stream=5000 + t_i)
        k = int(trng.integers(2, 6, ()))
        raw = trng.uniform((k,), 0.05, 1.0)
        weights = raw / raw.sum()
        log_mags = trng.uniform((k,), -2.0, 2.0)
        phases = trng.uniform((k,), -math.pi, math.pi)

        closed = float(np.sum(weights * log_mags))

        # independent 1-D solves
        r_lo, r_hi = log_mags.min() - 0.5, log_mags.max() + 0.5
        rs = np.linspace(r_lo, r_hi, grid_r)
        r_star = float(rs[np.array([np.sum(weights * (log_mags - r) ** 2)
                                    for r in rs]).argmin()])
        span = (r_hi - r_lo) / grid_r
        for _ in range(30):  # bisect refinement on the 1-D quadratic
            cand = np.linspace(r_star - span, r_star + span, 9)
            vals = [np.sum(weights * (log_mags - r) ** 2) for r in cand]
            r_star = float(cand[int(np.argmin(vals))])
            span /= 4.0
        theta_star, _ = minimize_circle(phases, weights)

        # joint 2-D brute force over the full (r, theta) objective
        thetas = np.linspace(-math.pi, math.pi, grid_theta, endpoint=False)
        terms = (weights[None, None, :]
                 * ((log_mags[None, None, :] - rs[:, None, None]) ** 2
                    + arcdist(phases[None, None, :], thetas[None, :, None]) ** 2))
        joint = terms.sum(axis=2)
        bi, bj = divmod(int(joint.argmin()), grid_theta)
        joint_r, joint_theta = float(rs[bi]), float(thetas[bj])

        r_spacing = rs[1] - rs[0]
        t_spacing = thetas[1] - thetas[0]
        separated = (abs(joint_r - r_star) <= r_spacing + tol
                     and arcdist(joint_theta, theta_star) <= t_spacing + tol)
        report.trials.append(WfmTrial(
            closed_form_log_mag=closed,
            bruteforce_log_mag=r_star,
            joint_log_mag=joint_r,
            joint_phase=joint_theta,
            phase_1d=theta_star,
            separated=bool(separated),
        ))
    return report
