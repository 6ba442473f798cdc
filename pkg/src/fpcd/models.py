"""Staged per-frame CNN backbones (teacher and student) with stage taps."""

from __future__ import annotations

import json
import os
from dataclasses import asdict, dataclass, field

import numpy as np

from .tensor import (
    ShapeError,
    Tensor,
    add,
    avgpool2d,
    conv2d,
    linear,
    mean,
    mul,
    relu,
    reshape,
    temporal_shift,
)
from .tensorio import load_tensor, save_tensor

TEACHER_WIDTHS = (32, 64, 128, 256)
STUDENT_WIDTHS = (16, 32, 64, 128)


@dataclass
class BackboneConfig:
    widths: tuple = STUDENT_WIDTHS
    convs_per_stage: int = 1
    num_classes: int = 8
    frames: int = 8
    in_channels: int = 1
    # channels shifted each way before a stage's first conv = C // shift_div;
    # 0 disables the shift and makes the network frame-order invariant
    shift_div: int = 8
    seed: int = 0
    # fixed input standardisation (x - input_mean) / input_std
    input_mean: float = 0.0
    input_std: float = 1.0

    def __post_init__(self):
        self.widths = tuple(int(w) for w in self.widths)
        if len(self.widths) != 4 or min(self.widths) < 1:
            raise ValueError(f"need 4 positive stage widths, got {self.widths}")
        if self.convs_per_stage < 1:
            raise ValueError("need at least one conv per stage")
        if self.num_classes < 2 or self.frames < 1:
            raise ValueError("need num_classes >= 2 and frames >= 1")


@dataclass
class StagedBackbone:
    config: BackboneConfig
    params: dict = field(default_factory=dict)

    @classmethod
    def build(cls, config):
        rng = np.random.default_rng(config.seed)
        params = {}
        cin = config.in_channels
        for s, width in enumerate(config.widths, start=1):
            for j in range(1, config.convs_per_stage + 1):
                fan_in = 9 * cin
                params[f"s{s}.conv{j}.w"] = Tensor(
                    rng.standard_normal((3, 3, cin, width)) * np.sqrt(2.0 / fan_in), requires_grad=True
                )
                params[f"s{s}.conv{j}.b"] = Tensor(np.zeros(width), requires_grad=True)
                cin = width
        params["fc.w"] = Tensor(
            rng.standard_normal((cin, config.num_classes)) * np.sqrt(1.0 / cin), requires_grad=True
        )
        params["fc.b"] = Tensor(np.zeros(config.num_classes), requires_grad=True)
        return cls(config, params)

    @property
    def parameters(self):
        return list(self.params.values())

    def num_parameters(self):
        return sum(p.data.size for p in self.params.values())

    def stage_kernels(self, conv=1):
        """Weights of conv ``conv`` in each stage, [k, k, Cin, Cout] each."""
        return [self.params[f"s{s}.conv{conv}.w"] for s in range(1, 5)]

    def forward(self, video):
        """``video`` is [N, T, H, W, C]; returns (stage features [N, T, h, w, c], logits [N, classes])."""
        if not isinstance(video, Tensor):
            video = Tensor(video)
        cfg = self.config
        if video.ndim != 5 or video.shape[1] != cfg.frames or video.shape[4] != cfg.in_channels:
            raise ShapeError(
                f"expected video [N, {cfg.frames}, H, W, {cfg.in_channels}], got {video.shape}"
            )
        n, t, h, w, c = video.shape
        x = reshape(video, (n * t, h, w, c))
        if cfg.input_mean != 0.0 or cfg.input_std != 1.0:
            x = mul(add(x, -cfg.input_mean), 1.0 / cfg.input_std)
        feats = []
        for s in range(1, 5):
            for j in range(1, cfg.convs_per_stage + 1):
                if j == 1 and cfg.shift_div:
                    x = temporal_shift(x, t, x.shape[3] // cfg.shift_div)
                x = relu(conv2d(x, self.params[f"s{s}.conv{j}.w"], self.params[f"s{s}.conv{j}.b"], 1, 1))
            x = avgpool2d(x, 2)
            feats.append(reshape(x, (n, t) + x.shape[1:]))
        pooled = mean(x, axis=(1, 2))
        frame_logits = linear(pooled, self.params["fc.w"], self.params["fc.b"])
        logits = mean(reshape(frame_logits, (n, t, cfg.num_classes)), axis=1)
        return feats, logits

    def __call__(self, video):
        return self.forward(video)[1]

    # -- checkpoints ---------------------------------------------------------

    def save(self, directory):
        os.makedirs(directory, exist_ok=True)
        cfg = asdict(self.config)
        cfg["widths"] = list(cfg["widths"])
        with open(os.path.join(directory, "model.json"), "w") as fh:
            json.dump(cfg, fh, indent=2, sort_keys=True)
        write_params(directory, self.params)

    @classmethod
    def load(cls, directory):
        path = os.path.join(directory, "model.json")
        try:
            with open(path) as fh:
                cfg = json.load(fh)
        except OSError as exc:
            raise OSError(f"cannot read checkpoint config {path}: {exc}") from exc
        model = cls.build(BackboneConfig(**cfg))
        stored = read_params(directory)
        for name, p in model.params.items():
            if name not in stored:
                raise KeyError(f"checkpoint {directory} lacks parameter {name}")
            if stored[name].shape != p.data.shape:
                raise ShapeError(f"{name}: checkpoint shape {stored[name].shape} != model {p.data.shape}")
            p.data = stored[name]
        return model


def write_params(directory, params, manifest="params.tsv"):
    lines = []
    for name, p in params.items():
        fname = name.replace("/", "_") + ".fpcd"
        save_tensor(os.path.join(directory, fname), p.data if isinstance(p, Tensor) else p)
        lines.append(f"{name}\t{fname}\n")
    with open(os.path.join(directory, manifest), "w") as fh:
        fh.writelines(lines)


def read_params(directory, manifest="params.tsv"):
    path = os.path.join(directory, manifest)
    try:
        with open(path) as fh:
            rows = [line.rstrip("\n").split("\t") for line in fh if line.strip()]
    except OSError as exc:
        raise OSError(f"cannot read parameter manifest {path}: {exc}") from exc
    return {name: load_tensor(os.path.join(directory, fname)) for name, fname in rows}


def build_teacher(widths=TEACHER_WIDTHS, num_classes=8, frames=8, seed=0, shift_div=8, **kw):
    return StagedBackbone.build(
        BackboneConfig(tuple(widths), 2, num_classes, frames, 1, shift_div, seed, **kw)
    )


def build_student(widths=STUDENT_WIDTHS, num_classes=8, frames=8, seed=0, shift_div=8, **kw):
    return StagedBackbone.build(
        BackboneConfig(tuple(widths), 1, num_classes, frames, 1, shift_div, seed, **kw)
    )


def forward_with_stages(model, clip):
    """Single clip [T, H, W, C] -> (4 stage features [T, h, w, c], logits [classes])."""
    frames = clip.frames if hasattr(clip, "frames") else clip
    data = frames.data if isinstance(frames, Tensor) else np.asarray(frames, dtype=np.float64)
    feats, logits = model.forward(Tensor(data[None]))
    return [reshape(f, f.shape[1:]) for f in feats], reshape(logits, logits.shape[1:])
