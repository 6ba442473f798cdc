"""Deterministic synthetic moving-shape videos.

Two regimes: in ``temporal`` the class is the direction of motion and the
background is random, so no single frame identifies the class; in
``scene`` the background texture is the class and the motion is random.
"""

from __future__ import annotations

import os
from dataclasses import dataclass

import numpy as np

from .tensorio import load_tensor, save_tensor

REGIMES = ("temporal", "scene")
SPLITS = ("train", "val", "test")
NUM_TEXTURES = 8


@dataclass(frozen=True)
class DatasetConfig:
    regime: str = "temporal"
    num_classes: int = 8
    clips_per_class: int = 250
    frames: int = 8
    height: int = 32
    width: int = 32
    noise: float = 0.05
    seed: int = 0
    # shape half-size and speed (pixels per frame), drawn uniformly per clip
    radius: tuple = (2.5, 4.5)
    speed: tuple = (1.5, 2.5)

    def __post_init__(self):
        if self.regime not in REGIMES:
            raise ValueError(f"regime must be one of {REGIMES}, got {self.regime!r}")
        if self.num_classes < 2:
            raise ValueError("need at least 2 classes")
        if self.frames < 2:
            raise ValueError("need at least 2 frames")
        if self.height < 16 or self.width < 16:
            raise ValueError("frames must be at least 16x16")
        for name in ("radius", "speed"):
            lo, hi = (float(v) for v in getattr(self, name))
            if not 0 < lo <= hi:
                raise ValueError(f"{name} range must satisfy 0 < low <= high, got {getattr(self, name)}")
            object.__setattr__(self, name, (lo, hi))
        track = 2 * (self.radius[1] + 1) + self.speed[1] * (self.frames - 1)
        if track > min(self.height, self.width) - 1:
            raise ValueError(f"largest shape moving at top speed needs {track:.1f} px, frame is "
                             f"{self.height}x{self.width}")


@dataclass
class VideoClip:
    frames: np.ndarray  # [T, H, W, 1]
    label: int
    seed: int


def texture_bank(cfg, count=None):
    """Fixed oriented-grating backgrounds in [0.1, 0.4], one per index."""
    count = count or max(NUM_TEXTURES, cfg.num_classes)
    yy, xx = np.mgrid[0:cfg.height, 0:cfg.width].astype(np.float64)
    rng = np.random.default_rng([cfg.seed, 7919])
    bank = []
    for i in range(count):
        ang = np.pi * i / count
        freq = 2 * np.pi / (4.0 + 2.0 * (i % 3))
        phase = rng.uniform(0, 2 * np.pi)
        g = np.sin(freq * (xx * np.cos(ang) + yy * np.sin(ang)) + phase)
        bank.append(0.25 + 0.15 * g)
    return np.stack(bank)


def _render(cfg, rng, direction, background):
    h, w, t = cfg.height, cfg.width, cfg.frames
    radius = rng.uniform(*cfg.radius)
    speed = rng.uniform(*cfg.speed)
    square = rng.random() < 0.5
    level = rng.uniform(0.75, 1.0)
    dx, dy = np.cos(direction) * speed, np.sin(direction) * speed
    span_x, span_y = dx * (t - 1), dy * (t - 1)
    margin = radius + 1.0
    lo_x, hi_x = margin - min(0.0, span_x), w - 1 - margin - max(0.0, span_x)
    lo_y, hi_y = margin - min(0.0, span_y), h - 1 - margin - max(0.0, span_y)
    cx0 = rng.uniform(lo_x, hi_x)
    cy0 = rng.uniform(lo_y, hi_y)
    yy, xx = np.mgrid[0:h, 0:w].astype(np.float64)
    frames = np.empty((t, h, w, 1))
    for p in range(t):
        cx, cy = cx0 + p * dx, cy0 + p * dy
        if square:
            mask = (np.abs(xx - cx) <= radius) & (np.abs(yy - cy) <= radius)
        else:
            mask = (xx - cx) ** 2 + (yy - cy) ** 2 <= radius ** 2
        frames[p, :, :, 0] = np.where(mask, level, background)
    if cfg.noise > 0:
        frames += rng.normal(0.0, cfg.noise, frames.shape)
    return np.clip(frames, 0.0, 1.0)


def generate_clip(cfg, class_id, instance_seed, bank=None):
    if not 0 <= class_id < cfg.num_classes:
        raise ValueError(f"class {class_id} outside [0, {cfg.num_classes})")
    bank = texture_bank(cfg) if bank is None else bank
    rng = np.random.default_rng([cfg.seed, REGIMES.index(cfg.regime), class_id, instance_seed])
    if cfg.regime == "temporal":
        direction = 2 * np.pi * class_id / cfg.num_classes
        background = bank[rng.integers(len(bank))]
    else:
        direction = rng.uniform(0, 2 * np.pi)
        background = bank[class_id]
    return VideoClip(_render(cfg, rng, direction, background), class_id, instance_seed)


def split_counts(cfg):
    """Per-class (train, val, test) counts; 70/15/15 overall, class-balanced."""
    n = cfg.clips_per_class

    def cum(frac, k):
        return int(np.floor(frac * n * k + 0.5))

    counts = []
    for c in range(cfg.num_classes):
        tr = cum(0.70, c + 1) - cum(0.70, c)
        va = cum(0.15, c + 1) - cum(0.15, c)
        counts.append((tr, va, n - tr - va))
    return counts


def iter_clips(cfg):
    """Yield (split, clip) for the whole dataset in a fixed order."""
    bank = texture_bank(cfg)
    for c, (tr, va, _) in enumerate(split_counts(cfg)):
        for i in range(cfg.clips_per_class):
            split = "train" if i < tr else "val" if i < tr + va else "test"
            yield split, generate_clip(cfg, c, i, bank)


def make_arrays(cfg):
    """In-memory dataset: {split: (videos [N, T, H, W, 1], labels [N])}."""
    out = {s: ([], []) for s in SPLITS}
    for split, clip in iter_clips(cfg):
        out[split][0].append(clip.frames)
        out[split][1].append(clip.label)
    return {s: (np.stack(v), np.asarray(l, dtype=np.int64)) for s, (v, l) in out.items() if v}


def generate_dataset(cfg, out_dir):
    """Write one FPCD tensor per clip plus ``manifest.tsv`` (path, label, split)."""
    clip_dir = os.path.join(out_dir, "clips")
    try:
        os.makedirs(clip_dir, exist_ok=True)
    except OSError as exc:
        raise OSError(f"cannot create dataset directory {clip_dir}: {exc}") from exc
    lines = []
    for split, clip in iter_clips(cfg):
        rel = os.path.join("clips", f"c{clip.label:02d}_i{clip.seed:05d}.fpcd")
        save_tensor(os.path.join(out_dir, rel), clip.frames)
        lines.append(f"{rel}\t{clip.label}\t{split}\n")
    manifest = os.path.join(out_dir, "manifest.tsv")
    with open(manifest, "w") as fh:
        fh.writelines(lines)
    return manifest


def load_dataset(data_dir, splits=SPLITS):
    manifest = os.path.join(data_dir, "manifest.tsv")
    if not os.path.exists(manifest):
        raise FileNotFoundError(f"no dataset manifest at {manifest}")
    rows = {s: ([], []) for s in splits}
    with open(manifest) as fh:
        for line in fh:
            if not line.strip():
                continue
            rel, label, split = line.rstrip("\n").split("\t")
            if split in rows:
                rows[split][0].append(load_tensor(os.path.join(data_dir, rel)))
                rows[split][1].append(int(label))
    return {s: (np.stack(v), np.asarray(l, dtype=np.int64)) for s, (v, l) in rows.items() if v}
