"""Distillation objectives: feature-spectrum loss, parameter-distribution
KL and the softened-logit KD baseline."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .spectral import FeatureSpectrum, flatten_kernels, kernel_energy, magnitude_spectrum
from .tensor import (
    Tensor,
    ShapeError,
    concat,
    linear,
    log,
    log_softmax,
    mean,
    mul,
    neg,
    reshape,
    softmax,
    tsum,
)

STAGE_WEIGHTS = (0.125, 0.25, 0.5, 1.0)
BAND_MODES = ("all", "low", "high")
SPECTRUM_EPS = 1e-8
PD_EPS = 1e-8
DEFAULT_BINS = 32


class ConfigurationError(ValueError):
    pass


@dataclass
class Predictor:
    """1x1 convolution (per-bin linear map) from student to teacher channels."""

    weight: Tensor
    bias: Tensor

    @classmethod
    def create(cls, c_student, c_teacher, rng, scale=0.01):
        # Near-zero start. A unit-scale map makes the bin softmax far sharper than
        # the teacher's, and the cheapest way down is to shrink student features.
        w = rng.standard_normal((c_student, c_teacher)) * (scale / np.sqrt(c_student))
        return cls(Tensor(w, requires_grad=True), Tensor(np.zeros(c_teacher), requires_grad=True))

    @property
    def params(self):
        return [self.weight, self.bias]

    def __call__(self, x):
        return linear(x, self.weight, self.bias)


def band_bins(num_bins, band_mode):
    if band_mode not in BAND_MODES:
        raise ValueError(f"band_mode must be one of {BAND_MODES}, got {band_mode!r}")
    cut = (num_bins + 1) // 2
    if band_mode == "all":
        sel = np.arange(num_bins)
    elif band_mode == "low":
        sel = np.arange(cut)
    else:
        sel = np.arange(cut, num_bins)
    if sel.size == 0:
        raise ValueError(f"band_mode {band_mode!r} selects no bins out of {num_bins}")
    return sel


def teacher_distribution(magnitudes, axis, eps=SPECTRUM_EPS):
    mags = magnitudes.data if isinstance(magnitudes, Tensor) else np.asarray(magnitudes)
    return mags / (mags.sum(axis=axis, keepdims=True) + eps)


def spectrum_loss(teacher_spec, student_spec, predictor, band_mode="all", sample_axis=None):
    """Cross-entropy between per-location frequency distributions.

    The teacher magnitudes are L1-normalised over the bin axis; the student
    magnitudes go through ``predictor`` and a softmax over the bin axis.
    Both use every bin for normalisation, and only the bins chosen by
    ``band_mode`` enter the sum.  Returns the mean over all locations, or
    a per-sample vector when ``sample_axis`` is given.
    """
    axis = student_spec.axis
    s_vals = student_spec.values
    t_vals = teacher_spec.values.data if isinstance(teacher_spec, FeatureSpectrum) else teacher_spec
    if isinstance(teacher_spec, FeatureSpectrum) and teacher_spec.axis != axis:
        raise ShapeError("teacher and student spectra use different bin axes")
    if s_vals.shape[:-1] != t_vals.shape[:-1]:
        raise ShapeError(f"spectrum_loss: student {s_vals.shape} vs teacher {t_vals.shape}")
    if predictor.weight.shape != (s_vals.shape[-1], t_vals.shape[-1]):
        raise ShapeError(
            f"predictor {predictor.weight.shape} does not map {s_vals.shape[-1]} -> {t_vals.shape[-1]} channels"
        )
    num_bins = s_vals.shape[axis]
    sel = band_bins(num_bins, band_mode)

    p_t = teacher_distribution(t_vals, axis)
    mask_shape = [1] * p_t.ndim
    mask_shape[axis] = num_bins
    mask = np.zeros(num_bins)
    mask[sel] = 1.0
    weights = p_t * mask.reshape(mask_shape)

    logp_s = log_softmax(predictor(s_vals), axis=axis)
    per_loc = neg(tsum(mul(logp_s, Tensor(weights)), axis=axis))
    if sample_axis is None:
        return mean(per_loc)
    sample_axis = sample_axis if sample_axis < axis else sample_axis - 1
    other = tuple(i for i in range(per_loc.ndim) if i != sample_axis)
    return mean(per_loc, axis=other)


def stage_spectrum_loss(teacher_feats, student_feats, stage, predictors, band_mode="all",
                        frame_axis=0, sample_axis=None):
    """Stage-weighted spectrum loss; ``stage`` counts from 1.

    Teacher entries may be feature tensors or precomputed spectra.
    """
    if stage not in (1, 2, 3, 4):
        raise ValueError(f"stage must be in 1..4, got {stage}")
    i = stage - 1
    t = teacher_feats[i]
    if not isinstance(t, FeatureSpectrum):
        t = magnitude_spectrum(Tensor(t.data if isinstance(t, Tensor) else t), axis=frame_axis, stage=stage)
    s = magnitude_spectrum(student_feats[i], axis=frame_axis, stage=stage)
    raw = spectrum_loss(t, s, predictors[i], band_mode, sample_axis)
    return mul(raw, STAGE_WEIGHTS[i])


# ---------------------------------------------------------------------------
# Parameter distribution distillation


def sample_kernel_indices(teacher_count, student_count, seed):
    if teacher_count < student_count:
        raise ConfigurationError(
            f"cannot sample {student_count} kernels from a teacher layer with {teacher_count}"
        )
    if teacher_count == student_count:
        return np.arange(teacher_count)
    rng = np.random.default_rng(seed)
    return np.sort(rng.choice(teacher_count, size=student_count, replace=False))


def sample_kernels(teacher_kernels, student_count, seed):
    """Uniformly pick ``student_count`` teacher kernels without replacement."""
    idx = sample_kernel_indices(len(teacher_kernels), student_count, seed)
    return [teacher_kernels[i] for i in idx]


@dataclass
class ParameterDistribution:
    probabilities: Tensor
    bins: int
    group: int | None = None


def histogram_assignment(length, bins):
    """[K, B] 0/1 matrix sending one-sided bin k of a length-L kernel to floor(B*k/K)."""
    kk = length // 2 + 1
    target = np.minimum(np.floor(bins * np.arange(kk) / kk).astype(np.int64), bins - 1)
    assign = np.zeros((kk, bins))
    assign[np.arange(kk), target] = 1.0
    return assign


def _as_rows(kernels):
    """Group kernels by flattened length into [n, L] tensors."""
    if isinstance(kernels, Tensor):
        if kernels.ndim == 4:
            return [flatten_kernels(kernels)]
        if kernels.ndim == 2:
            return [kernels]
        raise ShapeError(f"kernels tensor must be [k,k,Cin,Cout] or [n, L], got {kernels.shape}")
    if len(kernels) == 0:
        raise ValueError("parameter_distribution needs at least one kernel")
    groups = {}
    for ker in kernels:
        ker = ker if isinstance(ker, Tensor) else Tensor(ker)
        groups.setdefault(ker.data.size, []).append(reshape(ker, (1, ker.data.size)))
    return [rows[0] if len(rows) == 1 else concat(rows, axis=0) for _, rows in sorted(groups.items())]


def parameter_distribution(kernels, bins=DEFAULT_BINS, group=None, eps=PD_EPS):
    """Normalised spectral-energy histogram over ``bins`` frequency bins."""
    if bins < 2:
        raise ValueError("need at least 2 histogram bins")
    hist = None
    for rows in _as_rows(kernels):
        length = rows.shape[1]
        if length < 2:
            raise ValueError("kernels must have at least 2 weights")
        energy = tsum(kernel_energy(rows), axis=0)
        part = energy @ Tensor(histogram_assignment(length, bins))
        hist = part if hist is None else hist + part
    hist = hist + eps
    return ParameterDistribution(hist / tsum(hist), bins, group)


def kl_divergence(p, q):
    """KL(p || q) for distributions given as Tensors or arrays (q may be constant)."""
    p = p if isinstance(p, Tensor) else Tensor(p)
    q_data = q.data if isinstance(q, Tensor) else np.asarray(q, dtype=np.float64)
    if p.shape != q_data.shape:
        raise ShapeError(f"KL between shapes {p.shape} and {q_data.shape}")
    q = q if isinstance(q, Tensor) else Tensor(q_data)
    return tsum(mul(p, log(p) - log(q)))


def pdd_loss(student_layers, teacher_layers, bins=DEFAULT_BINS, seed=0):
    """Mean over layer groups of KL(PD_student || PD_teacher-sample).

    Layers are [k, k, Cin, Cout] weights paired position by position; the
    teacher side is a constant (frozen network).
    """
    if len(student_layers) != len(teacher_layers) or not student_layers:
        raise ConfigurationError(
            f"pdd_loss needs paired layers, got {len(student_layers)} student / {len(teacher_layers)} teacher"
        )
    total = None
    for g, (ws, wt) in enumerate(zip(student_layers, teacher_layers)):
        wt = wt.data if isinstance(wt, Tensor) else np.asarray(wt)
        n_s = ws.shape[-1]
        try:
            idx = sample_kernel_indices(wt.shape[-1], n_s, [seed, g])
        except ConfigurationError as exc:
            raise ConfigurationError(f"layer group {g}: {exc}") from None
        t_rows = flatten_kernels(Tensor(wt[..., idx])).data
        pd_t = parameter_distribution(Tensor(t_rows), bins, g).probabilities.data
        pd_s = parameter_distribution(flatten_kernels(ws), bins, g).probabilities
        kl = kl_divergence(pd_s, pd_t)
        total = kl if total is None else total + kl
    return mul(total, 1.0 / len(student_layers))


# ---------------------------------------------------------------------------
# Softened-logit KD baseline


def simple_kd_loss(student_logits, teacher_logits, temperature=4.0, reduction="mean"):
    """tau^2 * KL(softmax(t/tau) || softmax(s/tau)) per sample."""
    t = teacher_logits.data if isinstance(teacher_logits, Tensor) else np.asarray(teacher_logits)
    p_t = softmax(Tensor(t / temperature), axis=-1).data
    logp_s = log_softmax(mul(student_logits, 1.0 / temperature), axis=-1)
    logp_t = np.log(np.clip(p_t, 1e-300, None))
    per_sample = tsum(mul(Tensor(p_t), Tensor(logp_t) - logp_s), axis=-1)
    per_sample = mul(per_sample, temperature ** 2)
    return per_sample if reduction == "none" else mean(per_sample)
