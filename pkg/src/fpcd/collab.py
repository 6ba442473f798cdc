"""Collaborative learning: teacher-confidence gate, epoch schedule and the
combined objective."""

from __future__ import annotations

import csv
from dataclasses import dataclass

import numpy as np

from .tensor import NonFiniteError, Tensor, mean, mul, take


@dataclass(frozen=True)
class DistillSchedule:
    gamma: float = 0.9
    alpha: float = 0.1
    lam: float = 0.8
    n1: int = 18
    n2: int = 42

    def __post_init__(self):
        if not 0 < self.alpha < self.gamma <= 1:
            raise ValueError(f"schedule needs 0 < alpha < gamma <= 1, got {self.alpha}, {self.gamma}")
        if not 0 < self.lam < 1:
            raise ValueError(f"schedule needs 0 < lambda < 1, got {self.lam}")
        if not self.n1 < self.n2:
            raise ValueError(f"schedule needs N1 < N2, got {self.n1}, {self.n2}")

    @classmethod
    def for_epochs(cls, epochs, gamma=0.9, alpha=0.1, lam=0.8):
        """N1 and N2 at 30% and 70% of the run."""
        n1 = max(1, round(0.3 * epochs))
        n2 = max(n1 + 1, round(0.7 * epochs))
        return cls(gamma, alpha, lam, n1, n2)


def schedule_weight(n, schedule, p_gate=1.0):
    """f(n): constant, then exponential decay, then a small floor."""
    if n < 1:
        raise ValueError(f"epochs count from 1, got {n}")
    if n <= schedule.n1:
        return schedule.gamma * p_gate
    if n <= schedule.n2:
        return (schedule.lam ** (n - schedule.n1) + schedule.alpha) * p_gate
    return schedule.alpha * p_gate


def gate(c_t, theta):
    return 1 if c_t > theta else 0


@dataclass
class ConfidenceProfile:
    edges: np.ndarray
    true_counts: np.ndarray
    false_counts: np.ndarray
    theta: float

    @property
    def centers(self):
        return 0.5 * (self.edges[:-1] + self.edges[1:])

    @property
    def posterior(self):
        total = self.true_counts + self.false_counts
        with np.errstate(invalid="ignore", divide="ignore"):
            return np.where(total > 0, self.true_counts / np.maximum(total, 1), np.nan)

    def gates(self, confidences):
        return (np.asarray(confidences) > self.theta).astype(np.int64)

    def write_csv(self, path):
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["bin_center", "true_count", "false_count", "posterior"])
            for c, t, f, p in zip(self.centers, self.true_counts, self.false_counts, self.posterior):
                w.writerow([f"{c:.6f}", int(t), int(f), "" if np.isnan(p) else f"{p:.6f}"])
            w.writerow(["theta", f"{self.theta:.6f}", "", ""])


def confidences(logits):
    z = np.asarray(logits, dtype=np.float64)
    z = np.exp(z - z.max(axis=1, keepdims=True))
    p = z / z.sum(axis=1, keepdims=True)
    return p.max(axis=1), p.argmax(axis=1)


def threshold_from_counts(edges, true_counts, false_counts):
    """Confidence at which the correctness fraction first reaches 0.5.

    Returns the lower edge of the first populated bin whose fraction is
    >= 0.5, so that every sample of that bin and above passes ``c > theta``.
    Empty bins carry no evidence and are skipped.  No qualifying bin gives
    1.0 (gate everything off); every populated bin qualifying gives 0.0.
    """
    total = true_counts + false_counts
    populated = total > 0
    qualifies = populated & (2 * true_counts >= total)
    if not qualifies.any():
        return 1.0
    if qualifies[populated].all():
        return 0.0
    return float(edges[np.argmax(qualifies)])


def build_confidence_profile(teacher_logits, labels, bins=50):
    logits = teacher_logits.data if isinstance(teacher_logits, Tensor) else np.asarray(teacher_logits)
    labels = np.asarray(labels)
    if logits.shape[0] == 0:
        raise ValueError("confidence profile needs at least one prediction")
    conf, pred = confidences(logits)
    correct = pred == labels
    edges = np.linspace(0.0, 1.0, bins + 1)
    idx = np.clip(np.searchsorted(edges, conf, side="right") - 1, 0, bins - 1)
    true_counts = np.bincount(idx[correct], minlength=bins)
    false_counts = np.bincount(idx[~correct], minlength=bins)
    theta = threshold_from_counts(edges, true_counts, false_counts)
    return ConfidenceProfile(edges, true_counts, false_counts, theta)


def _finite(value, name):
    v = value.data if isinstance(value, Tensor) else np.asarray(value)
    if not np.isfinite(v).all():
        raise NonFiniteError(f"{name} is not finite")


def total_loss(l_cls, l_s=None, l_p=None, n=1, gates=None, schedule=None):
    """L_cls + f(n) * (L_P + L_S) with per-sample gating.

    ``l_s`` is a per-sample vector; it is averaged over the gated-in samples
    only.  ``l_p`` is scaled by the fraction of gated-in samples.  With
    ``schedule=None`` the weight is 1; with ``gates=None`` every sample is in.
    """
    _finite(l_cls, "classification loss")
    f_n = 1.0 if schedule is None else schedule_weight(n, schedule, 1.0)
    if l_s is None and l_p is None:
        return l_cls

    batch = l_s.shape[0] if l_s is not None else None
    if gates is None:
        gates = np.ones(batch if batch is not None else 1, dtype=np.int64)
    gates = np.asarray(gates)
    frac = float(gates.mean())

    distill = None
    if l_s is not None:
        _finite(l_s, "spectrum loss")
        kept = np.flatnonzero(gates)
        if kept.size:
            distill = mean(take(l_s, kept, axis=0))
    if l_p is not None:
        _finite(l_p, "parameter loss")
        if frac > 0:
            scaled = l_p if frac == 1.0 else mul(l_p, frac)
            distill = scaled if distill is None else distill + scaled
    if distill is None or f_n == 0:
        return l_cls
    return l_cls + mul(distill, f_n)
