"""Temporal DFT of stage features, low/high band split and kernel spectra."""

from __future__ import annotations

from dataclasses import dataclass
from functools import lru_cache

import numpy as np

from . import _kernels
from .tensor import Tensor, ShapeError, take, transpose, reshape


def _cos_sin(kp, length):
    """cos and sin of 2*pi*kp/length, exact at multiples of a quarter turn."""
    kp = kp % length
    ang = 2.0 * np.pi * kp / length
    cos, sin = np.cos(ang), np.sin(ang)
    quarter = (4 * kp) % length == 0
    q = (4 * kp // length) % 4
    cos = np.where(quarter, np.array([1.0, 0.0, -1.0, 0.0])[q], cos)
    sin = np.where(quarter, np.array([0.0, 1.0, 0.0, -1.0])[q], sin)
    return cos, sin


@lru_cache(maxsize=64)
def dft_matrices(length):
    """Cosine and sine matrices [K, T] for the one-sided real DFT."""
    k = np.arange(length // 2 + 1)[:, None]
    p = np.arange(length)[None, :]
    cos, sin = _cos_sin(k * p, length)
    cos.setflags(write=False)
    sin.setflags(write=False)
    return cos, sin


def naive_dft(x, axis=0):
    """Full complex DFT along ``axis`` by direct O(T^2) summation."""
    x = np.moveaxis(np.asarray(x, dtype=np.float64), axis, 0)
    t = x.shape[0]
    cos, sin = _cos_sin(np.outer(np.arange(t), np.arange(t)), t)
    w = cos - 1j * sin
    out = (w @ x.reshape(t, -1)).reshape(x.shape)
    return np.moveaxis(out, 0, axis)


def temporal_dft(features, axis=0, method="auto"):
    """Complex spectrum of ``features`` along the frame axis.

    ``method`` is ``"naive"``, ``"fft"`` (power-of-two lengths only) or
    ``"auto"``, which takes the FFT whenever the length allows it.
    """
    x = features.data if isinstance(features, Tensor) else np.asarray(features, dtype=np.float64)
    t = x.shape[axis]
    if t < 2:
        raise ValueError(f"temporal DFT needs at least 2 frames, got {t}")
    pow2 = t & (t - 1) == 0
    if method == "auto":
        method = "fft" if pow2 else "naive"
    if method == "naive":
        return naive_dft(x, axis)
    if method != "fft":
        raise ValueError(f"unknown DFT method {method!r}")
    moved = np.moveaxis(x, axis, 0)
    out = _kernels.fft_radix2(moved.reshape(t, -1)).reshape(moved.shape)
    return np.moveaxis(out, 0, axis)


@dataclass
class FeatureSpectrum:
    """One-sided temporal magnitudes; ``values`` carries the bin axis at ``axis``."""

    values: Tensor
    length: int
    bins: tuple
    axis: int = 0
    stage: int | None = None

    @property
    def num_bands(self):
        return len(self.bins)


def _magnitude(x, axis):
    t = x.shape[axis]
    kk = t // 2 + 1
    cos, sin = dft_matrices(t)
    full = temporal_dft(x.data, axis=axis)
    spec = np.take(full, np.arange(kk), axis=axis)
    mag = np.abs(spec)
    # unit phasor; zero magnitude gets a zero subgradient
    safe = np.where(mag > 0, mag, 1.0)
    re_u = np.where(mag > 0, spec.real / safe, 0.0)
    im_u = np.where(mag > 0, spec.imag / safe, 0.0)

    def backward(g):
        gm = np.moveaxis(g, axis, 0).reshape(kk, -1)
        ru = np.moveaxis(re_u, axis, 0).reshape(kk, -1)
        iu = np.moveaxis(im_u, axis, 0).reshape(kk, -1)
        # Re = cos @ x, Im = -sin @ x
        gx = cos.T @ (gm * ru) - sin.T @ (gm * iu)
        shape = np.moveaxis(x.data, axis, 0).shape
        return (np.moveaxis(gx.reshape(shape), 0, axis),)

    return Tensor._make(mag, (x,), backward, "magnitude_spectrum")


def magnitude_spectrum(features, axis=0, stage=None):
    """|DFT| along ``axis`` for bins 0..floor(T/2); differentiable."""
    if not isinstance(features, Tensor):
        features = Tensor(features)
    t = features.shape[axis]
    if t < 2:
        raise ValueError(f"temporal DFT needs at least 2 frames, got {t}")
    axis = axis % features.ndim
    return FeatureSpectrum(_magnitude(features, axis), t, tuple(range(t // 2 + 1)), axis, stage)


def band_split(spectrum):
    """Split into low bins [0, ceil(K/2)) and high bins [ceil(K/2), K)."""
    k = spectrum.num_bands
    if k < 2:
        raise ValueError(f"band split needs at least 2 bins, got {k}")
    cut = (k + 1) // 2
    parts = []
    for idx in (np.arange(cut), np.arange(cut, k)):
        vals = take(spectrum.values, idx, axis=spectrum.axis)
        bins = tuple(spectrum.bins[i] for i in idx)
        parts.append(FeatureSpectrum(vals, spectrum.length, bins, spectrum.axis, spectrum.stage))
    return parts[0], parts[1]


def band_energy(spectrum):
    """Mean squared magnitude per bin, averaged over every other axis."""
    vals = np.moveaxis(spectrum.values.data, spectrum.axis, 0)
    return (vals.reshape(vals.shape[0], -1) ** 2).mean(axis=1)


def band_reconstruct(features, axis=0, band="low"):
    """Inverse DFT keeping only the low or high half of the one-sided bins."""
    x = np.asarray(features, dtype=np.float64)
    t = x.shape[axis]
    full = temporal_dft(x, axis=axis)
    kk = t // 2 + 1
    cut = (kk + 1) // 2
    freq = np.minimum(np.arange(t), t - np.arange(t))  # one-sided bin of each full bin
    keep = freq < cut if band == "low" else freq >= cut
    shape = [1] * x.ndim
    shape[axis] = t
    masked = full * keep.reshape(shape)
    return np.fft.ifft(masked, axis=axis).real


# ---------------------------------------------------------------------------
# Kernel spectra


@dataclass
class KernelSpectrum:
    length: int
    magnitudes: Tensor
    kernel_id: int | None = None

    @property
    def frequencies(self):
        return np.arange(self.length // 2 + 1) / self.length


def flatten_kernels(weight):
    """[k, k, Cin, Cout] -> [Cout, k*k*Cin], row-major per output channel."""
    if not isinstance(weight, Tensor):
        weight = Tensor(weight)
    if weight.ndim != 4:
        raise ShapeError(f"expected a [k, k, Cin, Cout] kernel, got {weight.shape}")
    k1, k2, cin, cout = weight.shape
    return reshape(transpose(weight, (3, 0, 1, 2)), (cout, k1 * k2 * cin))


def kernel_spectrum(kernel, kernel_id=None):
    """One-sided DFT magnitudes of a kernel flattened row-major."""
    if not isinstance(kernel, Tensor):
        kernel = Tensor(kernel)
    length = kernel.data.size
    if length < 2:
        raise ValueError(f"kernel spectrum needs at least 2 weights, got {length}")
    flat = reshape(kernel, (length,))
    return KernelSpectrum(length, _magnitude(flat, 0), kernel_id)


def kernel_energy(flat):
    """Squared one-sided DFT magnitudes of each row of ``flat`` ([n, L] -> [n, K])."""
    length = flat.shape[1]
    cos, sin = dft_matrices(length)
    re = flat @ Tensor(cos.T)
    im = flat @ Tensor(sin.T)
    return re * re + im * im
