"""Training loops for teacher, baseline student and distilled students."""

from __future__ import annotations

import copy
import csv
import json
import logging
import os
from dataclasses import asdict, dataclass, field, fields

import numpy as np

from . import collab
from .losses import (
    Predictor,
    ConfigurationError,
    STAGE_WEIGHTS,
    kl_divergence,
    parameter_distribution,
    pdd_loss,
    simple_kd_loss,
    spectrum_loss,
)
from .models import (
    STUDENT_WIDTHS,
    TEACHER_WIDTHS,
    StagedBackbone,
    build_student,
    build_teacher,
    read_params,
    write_params,
)
from .spectral import FeatureSpectrum, flatten_kernels, magnitude_spectrum
from .tensor import NonFiniteError, SGD, Tensor, clip_grad_norm, cross_entropy, mul, no_grad

log = logging.getLogger(__name__)

MODES = ("train-teacher", "train-student-baseline", "distill-fpcd", "distill-simple-kd")
FSD_MODES = ("off", "low", "high", "all")
METRIC_COLUMNS = ("epoch", "loss_cls", "loss_s", "loss_p", "f_n", "gate_fraction", "train_top1", "val_top1")


class TrainingAborted(RuntimeError):
    pass


@dataclass
class RunConfig:
    mode: str = "distill-fpcd"
    fsd: str = "all"
    pdd: bool = True
    cl: bool = True
    gamma: float = 0.9
    alpha: float = 0.1
    lam: float = 0.8
    n1: int | None = None
    n2: int | None = None
    confidence_bins: int = 50
    pd_bins: int = 32
    kd_temperature: float = 4.0
    lr: float = 0.01
    momentum: float = 0.9
    weight_decay: float = 0.0
    # joint gradient L2 norm cap per step; None leaves gradients alone
    grad_clip: float | None = None
    epochs: int = 60
    batch_size: int = 32
    lr_milestones: tuple = (0.5, 0.75)
    lr_decay: float = 0.1
    teacher_widths: tuple = TEACHER_WIDTHS
    student_widths: tuple = STUDENT_WIDTHS
    shift_div: int = 8
    input_mean: float = 0.3
    input_std: float = 0.2
    seed: int = 0
    data_dir: str | None = None
    out_dir: str | None = None
    teacher_dir: str | None = None

    def __post_init__(self):
        if self.mode not in MODES:
            raise ConfigurationError(f"mode must be one of {MODES}, got {self.mode!r}")
        if self.fsd not in FSD_MODES:
            raise ConfigurationError(f"fsd must be one of {FSD_MODES}, got {self.fsd!r}")
        self.teacher_widths = tuple(self.teacher_widths)
        self.student_widths = tuple(self.student_widths)
        self.lr_milestones = tuple(self.lr_milestones)
        if self.mode == "distill-fpcd" and any(s > t for s, t in zip(self.student_widths, self.teacher_widths)):
            raise ConfigurationError("teacher stage widths must be >= student widths")
        if self.grad_clip is not None and not self.grad_clip > 0:
            raise ConfigurationError(f"grad_clip must be positive, got {self.grad_clip}")
        if self.epochs < 0 or self.batch_size < 1:
            raise ConfigurationError("epochs must be >= 0 and batch_size >= 1")
        if self.mode == "distill-fpcd" and self.cl and self.epochs:
            if self.epochs < self.schedule().n2:
                raise ConfigurationError(f"collaborative learning needs epochs >= N2 ({self.schedule().n2})")

    @property
    def distills(self):
        return self.mode == "distill-fpcd" and (self.fsd != "off" or self.pdd)

    def schedule(self):
        if self.n1 is None or self.n2 is None:
            base = collab.DistillSchedule.for_epochs(max(self.epochs, 2), self.gamma, self.alpha, self.lam)
            n1 = base.n1 if self.n1 is None else self.n1
            n2 = base.n2 if self.n2 is None else self.n2
            return collab.DistillSchedule(self.gamma, self.alpha, self.lam, n1, n2)
        return collab.DistillSchedule(self.gamma, self.alpha, self.lam, self.n1, self.n2)

    def lr_at(self, epoch):
        drops = sum(epoch > round(m * self.epochs) for m in self.lr_milestones)
        return self.lr * self.lr_decay ** drops

    @classmethod
    def from_dict(cls, values):
        known = {f.name for f in fields(cls)}
        unknown = set(values) - known
        if unknown:
            raise ConfigurationError(f"unknown config keys: {sorted(unknown)}")
        return cls(**values)

    def to_dict(self):
        d = asdict(self)
        for k, v in d.items():
            if isinstance(v, tuple):
                d[k] = list(v)
        return d


@dataclass
class MetricsRow:
    epoch: int
    loss_cls: float
    loss_s: float
    loss_p: float
    f_n: float
    gate_fraction: float
    train_top1: float
    val_top1: float


@dataclass
class RunResult:
    model: StagedBackbone
    metrics: list = field(default_factory=list)
    predictors: list = field(default_factory=list)
    profile: collab.ConfidenceProfile | None = None

    @property
    def final_val_top1(self):
        return self.metrics[-1].val_top1 if self.metrics else float("nan")


def _streams(seed):
    """Independent RNG streams so optional features never perturb the others."""
    names = ("init", "shuffle", "stage", "pdd", "predictor")
    seqs = np.random.SeedSequence(seed).spawn(len(names))
    return {n: np.random.default_rng(s) for n, s in zip(names, seqs)}


def _init_seed(rng):
    return int(rng.integers(2**31))


def predict_logits(model, videos, batch_size=64):
    out = []
    with no_grad():
        for i in range(0, len(videos), batch_size):
            out.append(model.forward(videos[i:i + batch_size])[1].data)
    return np.concatenate(out) if out else np.zeros((0, model.config.num_classes))


def accuracy_report(logits, labels, num_classes=None):
    labels = np.asarray(labels)
    num_classes = num_classes or logits.shape[1]
    pred = logits.argmax(axis=1)
    k = min(5, logits.shape[1])
    topk = np.argsort(-logits, axis=1, kind="stable")[:, :k]
    per_class = []
    for c in range(num_classes):
        m = labels == c
        per_class.append(float((pred[m] == c).mean()) if m.any() else float("nan"))
    return {
        "top1": float((pred == labels).mean()),
        "top5": float((topk == labels[:, None]).any(axis=1).mean()),
        "per_class": per_class,
    }


def evaluate(model, videos, labels, batch_size=64):
    """Top-1, top-5 and per-class accuracy of ``model`` on one split."""
    return accuracy_report(predict_logits(model, videos, batch_size), labels, model.config.num_classes)


def write_metrics(path, rows):
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(METRIC_COLUMNS)
        for r in rows:
            w.writerow([r.epoch] + [repr(float(getattr(r, c))) for c in METRIC_COLUMNS[1:]])


def read_metrics(path):
    with open(path) as fh:
        rows = list(csv.DictReader(fh))
    return [MetricsRow(int(r["epoch"]), *(float(r[c]) for c in METRIC_COLUMNS[1:])) for r in rows]


class _Distiller:
    """Per-step distillation terms against a frozen teacher.

    Teacher stage spectra and logits are computed once for the whole
    training split; the teacher never changes, so this is exact.
    """

    def __init__(self, cfg, teacher, student, train, val, rngs):
        self.cfg = cfg
        self.teacher = teacher
        self.student = student
        self.rng_stage = rngs["stage"]
        self.rng_pdd = rngs["pdd"]
        videos, labels = train
        self.kd = cfg.mode == "distill-simple-kd"
        self.need_spectra = cfg.mode == "distill-fpcd" and cfg.fsd != "off"
        self.need_logits = self.kd or (cfg.mode == "distill-fpcd" and cfg.cl)
        self.spectra = [[] for _ in range(4)]
        logits = []
        if self.need_spectra or self.need_logits:
            with no_grad():
                for i in range(0, len(videos), 64):
                    feats, lg = teacher.forward(videos[i:i + 64])
                    logits.append(lg.data)
                    if self.need_spectra:
                        for s in range(4):
                            self.spectra[s].append(magnitude_spectrum(feats[s], axis=1).values.data)
            self.spectra = [np.concatenate(s) if s else None for s in self.spectra]
            self.teacher_logits = np.concatenate(logits)
        self.predictors = []
        if self.need_spectra:
            rng = rngs["predictor"]
            for cs, ct in zip(student.config.widths, teacher.config.widths):
                self.predictors.append(Predictor.create(cs, ct, rng))
        self.profile = None
        self.conf = None
        if cfg.mode == "distill-fpcd" and cfg.cl:
            self.profile = collab.build_confidence_profile(
                predict_logits(teacher, val[0]), val[1], cfg.confidence_bins
            )
            self.conf, _ = collab.confidences(self.teacher_logits)
        self.schedule = cfg.schedule() if cfg.mode == "distill-fpcd" and cfg.cl else None

    @property
    def params(self):
        return [p for pr in self.predictors for p in pr.params]

    def loss(self, idx, feats, logits, l_cls, epoch):
        """Returns (total loss, raw L_S, raw L_P, f_n, gate fraction)."""
        cfg = self.cfg
        if self.kd:
            kd = simple_kd_loss(logits, self.teacher_logits[idx], cfg.kd_temperature)
            return l_cls + kd, 0.0, 0.0, 1.0, 1.0
        gates = self.profile.gates(self.conf[idx]) if self.profile is not None else np.ones(len(idx), int)
        l_s = l_p = None
        stage = int(self.rng_stage.integers(1, 5))
        s = stage - 1
        pdd_seed = int(self.rng_pdd.integers(2**31))
        if self.need_spectra:
            t_spec = FeatureSpectrum(Tensor(self.spectra[s][idx]), feats[s].shape[1],
                                     tuple(range(feats[s].shape[1] // 2 + 1)), axis=1, stage=stage)
            s_spec = magnitude_spectrum(feats[s], axis=1, stage=stage)
            raw = spectrum_loss(t_spec, s_spec, self.predictors[s], cfg.fsd, sample_axis=0)
            l_s = mul(raw, STAGE_WEIGHTS[s])
        if cfg.pdd:
            # same stage and stage weight as the spectrum term
            l_p = mul(pdd_loss([self.student.stage_kernels(1)[s]], [self.teacher.stage_kernels(1)[s]],
                               cfg.pd_bins, pdd_seed), STAGE_WEIGHTS[s])
        total = collab.total_loss(l_cls, l_s, l_p, epoch, gates, self.schedule)
        f_n = collab.schedule_weight(epoch, self.schedule) if self.schedule else 1.0
        return (
            total,
            float(l_s.data.mean()) if l_s is not None else 0.0,
            l_p.item() if l_p is not None else 0.0,
            f_n,
            float(gates.mean()),
        )


def _fit(cfg, model, train, val, distiller=None):
    videos, labels = train
    rngs = _streams(cfg.seed)
    shuffle = rngs["shuffle"]
    params = model.parameters + (distiller.params if distiller else [])
    opt = SGD(params, cfg.lr, cfg.momentum, cfg.weight_decay)
    rows = []
    last_good = copy.deepcopy([p.data for p in params])
    for epoch in range(1, cfg.epochs + 1):
        opt.lr = cfg.lr_at(epoch)
        order = shuffle.permutation(len(videos))
        sums = np.zeros(5)
        correct = 0
        batches = 0
        for start in range(0, len(order), cfg.batch_size):
            idx = order[start:start + cfg.batch_size]
            try:
                feats, logits = model.forward(videos[idx])
                l_cls = cross_entropy(logits, labels[idx])
                if distiller is None:
                    loss, l_s, l_p, f_n, frac = l_cls, 0.0, 0.0, 0.0, 1.0
                else:
                    loss, l_s, l_p, f_n, frac = distiller.loss(idx, feats, logits, l_cls, epoch)
                opt.zero_grad()
                loss.backward()
                if cfg.grad_clip is not None:
                    clip_grad_norm(params, cfg.grad_clip)
                opt.step()
            except NonFiniteError as exc:
                for p, d in zip(params, last_good):
                    p.data = d
                if cfg.out_dir:
                    save_run(cfg, RunResult(model, rows, distiller.predictors if distiller else []))
                raise TrainingAborted(f"epoch {epoch}: {exc}; restored last good parameters") from exc
            sums += (l_cls.item(), l_s, l_p, f_n, frac)
            correct += int((logits.data.argmax(axis=1) == labels[idx]).sum())
            batches += 1
        means = sums / max(batches, 1)
        val_top1 = evaluate(model, *val)["top1"] if val is not None else float("nan")
        row = MetricsRow(epoch, means[0], means[1], means[2], means[3], means[4],
                         correct / len(videos), val_top1)
        rows.append(row)
        last_good = [p.data.copy() for p in params]
        log.info("epoch %d lr %.4g loss %.4f train %.3f val %.3f", epoch, opt.lr, row.loss_cls,
                 row.train_top1, row.val_top1)
    return rows


def save_run(cfg, result):
    out = cfg.out_dir
    os.makedirs(out, exist_ok=True)
    result.model.save(os.path.join(out, "checkpoint"))
    if result.predictors:
        preds = {}
        for s, pr in enumerate(result.predictors, start=1):
            preds[f"pred.s{s}.w"] = pr.weight
            preds[f"pred.s{s}.b"] = pr.bias
        write_params(os.path.join(out, "checkpoint"), preds, manifest="predictor.tsv")
    write_metrics(os.path.join(out, "metrics.csv"), result.metrics)
    with open(os.path.join(out, "config.json"), "w") as fh:
        json.dump(cfg.to_dict(), fh, indent=2, sort_keys=True)
    if result.profile is not None:
        result.profile.write_csv(os.path.join(out, "confidence_profile.csv"))


def _num_classes(data):
    return int(max(y.max() for _, y in data.values())) + 1


def _frames(data):
    return next(iter(data.values()))[0].shape[1]


def train_teacher(cfg, data):
    """Plain cross-entropy training of the teacher backbone."""
    rngs = _streams(cfg.seed)
    model = build_teacher(cfg.teacher_widths, _num_classes(data), _frames(data),
                          _init_seed(rngs["init"]), cfg.shift_div,
                          input_mean=cfg.input_mean, input_std=cfg.input_std)
    rows = _fit(cfg, model, data["train"], data.get("val"))
    result = RunResult(model, rows)
    if cfg.out_dir:
        save_run(cfg, result)
    return result


def _new_student(cfg, data):
    rngs = _streams(cfg.seed)
    return build_student(cfg.student_widths, _num_classes(data), _frames(data),
                         _init_seed(rngs["init"]), cfg.shift_div,
                         input_mean=cfg.input_mean, input_std=cfg.input_std)


def train_baseline(cfg, data):
    """Student trained on labels only."""
    model = _new_student(cfg, data)
    rows = _fit(cfg, model, data["train"], data.get("val"))
    result = RunResult(model, rows)
    if cfg.out_dir:
        save_run(cfg, result)
    return result


def distill(cfg, teacher, data):
    """Student trained against ``teacher`` with the enabled distillation terms."""
    if cfg.mode not in ("distill-fpcd", "distill-simple-kd"):
        raise ConfigurationError(f"distill() needs a distillation mode, got {cfg.mode!r}")
    student = _new_student(cfg, data)
    if teacher.config.frames != student.config.frames or teacher.config.num_classes != student.config.num_classes:
        raise ConfigurationError("teacher and student disagree on frames or classes")
    if any(s > t for s, t in zip(student.config.widths, teacher.config.widths)):
        raise ConfigurationError("teacher stage widths must be >= student widths")
    distiller = None
    if cfg.distills or cfg.mode == "distill-simple-kd":
        distiller = _Distiller(cfg, teacher, student, data["train"], data["val"], _streams(cfg.seed))
    rows = _fit(cfg, student, data["train"], data.get("val"), distiller)
    result = RunResult(student, rows, distiller.predictors if distiller else [],
                       distiller.profile if distiller else None)
    if cfg.out_dir:
        save_run(cfg, result)
    return result


def run(cfg, data, teacher=None):
    if cfg.mode == "train-teacher":
        return train_teacher(cfg, data)
    if cfg.mode == "train-student-baseline":
        return train_baseline(cfg, data)
    if teacher is None:
        if not cfg.teacher_dir:
            raise ConfigurationError("distillation needs a teacher checkpoint (teacher_dir)")
        teacher = StagedBackbone.load(os.path.join(cfg.teacher_dir, "checkpoint"))
    return distill(cfg, teacher, data)


# ---------------------------------------------------------------------------
# Parameter-distribution analysis


def layer_distributions(model, bins=32):
    with no_grad():
        return [parameter_distribution(flatten_kernels(w), bins, g).probabilities.data
                for g, w in enumerate(model.stage_kernels(1))]


def mean_pd_kl(student, teacher, bins=32, seed=0):
    """Mean over layer groups of KL(PD_student || PD_teacher-sample)."""
    with no_grad():
        return pdd_loss(student.stage_kernels(1), teacher.stage_kernels(1), bins, seed).item()


def load_predictors(directory):
    path = os.path.join(directory, "predictor.tsv")
    if not os.path.exists(path):
        return []
    raw = read_params(directory, "predictor.tsv")
    return [Predictor(Tensor(raw[f"pred.s{s}.w"]), Tensor(raw[f"pred.s{s}.b"])) for s in range(1, 5)]


__all__ = [
    "RunConfig",
    "MetricsRow",
    "RunResult",
    "TrainingAborted",
    "accuracy_report",
    "distill",
    "evaluate",
    "kl_divergence",
    "layer_distributions",
    "mean_pd_kl",
    "read_metrics",
    "run",
    "train_baseline",
    "train_teacher",
    "write_metrics",
]
