"""Shared end-to-end runs for the distillation criteria.

Every run is trained at most once per session and reused by each criterion
that needs it.  Variants for the same seed share the init and shuffle
streams, so seed-wise comparisons are paired.
"""

import time

import numpy as np

from fpcd.data import DatasetConfig, make_arrays
from fpcd.train import RunConfig, distill, evaluate, mean_pd_kl, train_baseline, train_teacher

SEEDS = (0, 1, 2)
NOISE = 0.2

# teacher: 2x wider, shift on a quarter of the channels, 6 epochs
TEACHER = dict(teacher_widths=(8, 16, 32, 64), shift_div=4, lr=0.02, epochs=6, batch_size=16,
               lr_milestones=(0.67,), grad_clip=1.0, seed=100)
# student: 2-4-8-16 channels, 3 epochs with one lr drop
STUDENT = dict(teacher_widths=(8, 16, 32, 64), student_widths=(2, 4, 8, 16), shift_div=2, lr=0.04,
               epochs=3, batch_size=16, lr_milestones=(0.67,), grad_clip=1.0)

VARIANTS = {
    "base": None,
    "fsd": dict(fsd="all", pdd=False, cl=False),
    "fsd-low": dict(fsd="low", pdd=False, cl=False),
    "fsd+pdd": dict(fsd="all", pdd=True, cl=False),
    "full": dict(fsd="all", pdd=True, cl=True),
}


class Experiments:
    def __init__(self):
        self._data = {}
        self._teachers = {}
        self._runs = {}
        self.seconds = {}

    def data(self, regime):
        if regime not in self._data:
            self._data[regime] = make_arrays(DatasetConfig(regime=regime, noise=NOISE))
        return self._data[regime]

    def _timed(self, key, fn):
        start = time.time()
        out = fn()
        self.seconds[key] = time.time() - start
        return out

    def teacher(self, regime):
        if regime not in self._teachers:
            cfg = RunConfig(mode="train-teacher", **TEACHER)
            self._teachers[regime] = self._timed(
                ("teacher", regime), lambda: train_teacher(cfg, self.data(regime)).model)
        return self._teachers[regime]

    def run(self, regime, variant, seed):
        """(test top1, trained student) for one variant and seed."""
        key = (regime, variant, seed)
        if key not in self._runs:
            data = self.data(regime)
            flags = VARIANTS[variant]
            if flags is None:
                cfg = RunConfig(mode="train-student-baseline", seed=seed, **STUDENT)
                result = self._timed(key, lambda: train_baseline(cfg, data))
            else:
                teacher = self.teacher(regime)
                cfg = RunConfig(mode="distill-fpcd", seed=seed, **flags, **STUDENT)
                result = self._timed(key, lambda: distill(cfg, teacher, data))
            top1 = evaluate(result.model, *data["test"])["top1"]
            self._runs[key] = (top1, result.model)
        return self._runs[key]

    def top1(self, regime, variant):
        return [self.run(regime, variant, s)[0] for s in SEEDS]

    def mean_top1(self, regime, variant):
        return float(np.mean(self.top1(regime, variant)))

    def pd_kl(self, regime, variant):
        """Seed-mean of the group-mean KL(PD_s || PD_t) for trained students."""
        teacher = self.teacher(regime)
        return float(np.mean([mean_pd_kl(self.run(regime, variant, s)[1], teacher) for s in SEEDS]))

    def elapsed(self, regime, variants):
        keys = [("teacher", regime)] + [(regime, v, s) for v in variants for s in SEEDS]
        return sum(self.seconds.get(k, 0.0) for k in keys)
