"""Analysis outputs: per-band feature energies, low/high band reconstructions,
kernel parameter distributions and evaluation reports."""

from __future__ import annotations

import csv
import os

import numpy as np

from .losses import kl_divergence, pdd_loss
from .models import forward_with_stages
from .spectral import band_energy, band_reconstruct, magnitude_spectrum
from .tensor import Tensor, no_grad
from .tensorio import load_tensor
from .train import layer_distributions


def write_pgm(path, image):
    """8-bit binary PGM, linearly rescaled from the image's own min/max."""
    img = np.asarray(image, dtype=np.float64)
    if img.ndim != 2:
        raise ValueError(f"PGM needs a 2-D image, got shape {img.shape}")
    lo, hi = img.min(), img.max()
    scaled = np.zeros(img.shape) if hi - lo < 1e-12 else (img - lo) / (hi - lo)
    pixels = np.round(scaled * 255).astype(np.uint8)
    try:
        with open(path, "wb") as fh:
            fh.write(f"P5\n{img.shape[1]} {img.shape[0]}\n255\n".encode("ascii"))
            fh.write(pixels.tobytes())
    except OSError as exc:
        raise OSError(f"cannot write image {path}: {exc}") from exc


def read_pgm(path):
    with open(path, "rb") as fh:
        buf = fh.read()
    magic, dims, maxval, rest = buf.split(b"\n", 3)
    if magic != b"P5" or maxval != b"255":
        raise ValueError(f"{path}: not an 8-bit binary PGM")
    w, h = (int(v) for v in dims.split())
    return np.frombuffer(rest, dtype=np.uint8).reshape(h, w)


def montage(frames):
    """[T, h, w, c] -> [h, T*w] strip of channel-mean frames."""
    x = np.asarray(frames).mean(axis=-1)
    return np.concatenate(list(x), axis=1)


def analyze_spectrum(model, clip_path, out_dir):
    """Band-energy CSV and low/high reconstructions for one clip.

    Stage 0 is the input clip itself; stages 1-4 are the backbone taps.
    """
    clip = load_tensor(clip_path)
    if clip.ndim != 4:
        raise ValueError(f"{clip_path}: expected a clip [T, H, W, C], got shape {clip.shape}")
    os.makedirs(out_dir, exist_ok=True)
    with no_grad():
        feats, _ = forward_with_stages(model, clip)
    levels = [clip] + [f.data for f in feats]
    t = clip.shape[0]
    csv_path = os.path.join(out_dir, "band_energy.csv")
    written = [csv_path]
    with open(csv_path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["stage", "bin", "normalized_frequency", "mean_energy"])
        for stage, x in enumerate(levels):
            for k, e in enumerate(band_energy(magnitude_spectrum(x))):
                w.writerow([stage, k, repr(k / t), repr(float(e))])
    for stage, x in enumerate(levels):
        for band in ("low", "high"):
            path = os.path.join(out_dir, f"stage{stage}_{band}.pgm")
            write_pgm(path, montage(band_reconstruct(x, axis=0, band=band)))
            written.append(path)
    return written


def analyze_params(teacher, student, out_dir, baseline=None, bins=32, seed=0):
    """Per-group kernel energy distributions plus KL of each student to the teacher.

    The CSV holds one row per (role, group, bin).  The teacher row uses all
    of its kernels; the KL values use the same teacher subsampling as the
    training loss.
    """
    os.makedirs(out_dir, exist_ok=True)
    roles = [("teacher", teacher), ("student", student)]
    if baseline is not None:
        roles.append(("baseline", baseline))
    dists = {role: layer_distributions(m, bins) for role, m in roles}
    path = os.path.join(out_dir, "param_distribution.csv")
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["role", "group", "bin", "probability"])
        for role, groups in dists.items():
            for g, probs in enumerate(groups):
                for b, p in enumerate(probs):
                    w.writerow([role, g, b, repr(float(p))])
    kls = {}
    with no_grad():
        for role, m in roles[1:]:
            kls[f"kl_{role}_teacher"] = pdd_loss(m.stage_kernels(1), teacher.stage_kernels(1), bins, seed).item()
        if baseline is not None:
            kls["kl_student_baseline"] = float(np.mean([
                kl_divergence(Tensor(s), Tensor(b)).item()
                for s, b in zip(dists["student"], dists["baseline"])
            ]))
    with open(os.path.join(out_dir, "param_kl.csv"), "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["pair", "kl"])
        for name, value in kls.items():
            w.writerow([name, repr(value)])
    return kls


def write_eval_csv(path, report):
    os.makedirs(os.path.dirname(os.path.abspath(path)), exist_ok=True)
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["metric", "value"])
        w.writerow(["top1", repr(report["top1"])])
        w.writerow(["top5", repr(report["top5"])])
        for c, acc in enumerate(report["per_class"]):
            w.writerow([f"class_{c}", repr(acc)])
