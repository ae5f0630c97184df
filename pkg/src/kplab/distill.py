"""Two-phase feature distillation.

Phase 1 trains the student's layers up to and including the tap so that its
tap feature matches the frozen teacher's, using only the squared feature
distance (labels are never touched).  Phase 2 freezes those layers and fits
the layers above the tap with cross-entropy.
"""
from __future__ import annotations

from dataclasses import dataclass
from typing import Optional

import numpy as np

from . import tensor as T
from .errors import ConfigError
from .nn import (CheckpointSeries, ModelSpec, Network, TrainConfig, accuracy, extract_feature,
                 forward, init_params, sgd_series)

DISTILL_TAPS = ("conv_top", "fc1", "fc2", "fc3")


@dataclass(frozen=True)
class DistillConfig:
    tap: str = "fc1"
    phase1_epochs: int = 10
    phase1_lr: float = 1e-4
    phase2_epochs: int = 5
    phase2_lr: float = 0.05
    batch_size: int = 32
    momentum: float = 0.9
    seed: int = 0

    def __post_init__(self):
        if self.phase1_epochs < 1 or self.phase2_epochs < 1:
            raise ConfigError("both distillation phases need at least one epoch")
        if self.phase1_lr <= 0 or self.phase2_lr <= 0:
            raise ConfigError("learning rates must be positive")

    def phase1(self) -> TrainConfig:
        return TrainConfig(self.phase1_epochs, self.batch_size, self.phase1_lr, self.momentum, self.seed)

    def phase2(self) -> TrainConfig:
        return TrainConfig(self.phase2_epochs, self.batch_size, self.phase2_lr, self.momentum,
                           self.seed + 7919)


def _check_taps(teacher: Network, student_spec: ModelSpec, tap: str) -> None:
    teacher.spec.tap_index(tap)
    student_spec.tap_index(tap)
    dt, ds = teacher.spec.tap_dim(tap), student_spec.tap_dim(tap)
    if dt != ds:
        raise ConfigError(f"tap {tap!r} width differs: teacher {dt}, student {ds}")


def teacher_targets(teacher: Network, tap: str, images: np.ndarray, batch: int = 256) -> np.ndarray:
    return np.concatenate([extract_feature(teacher.params, teacher.spec, tap, images[s:s + batch])
                           for s in range(0, len(images), batch)])


def distill_phase1(teacher: Network, student_spec: ModelSpec, data, cfg: DistillConfig,
                   init: Optional[np.ndarray] = None) -> CheckpointSeries:
    """Feature-matching phase; returns per-epoch snapshots of the full student vector.

    Only ``data.images`` is read.  Layers above the tap keep their initial
    values.  ``init`` defaults to the seeded He initialisation.
    """
    _check_taps(teacher, student_spec, cfg.tap)
    images = np.asarray(data.images, dtype=np.float64)
    targets = teacher_targets(teacher, cfg.tap, images)
    stop = student_spec.tap_index(cfg.tap)
    w0 = init_params(student_spec, np.random.default_rng([cfg.seed, 0x1A])) if init is None else init
    below = student_spec.layer_mask(lambda i: i <= stop)

    def batch_loss(tensors, idx):
        h = forward(student_spec, tensors, images[idx], stop=stop)
        return T.mse(h.reshape(len(idx), -1), targets[idx])

    series = sgd_series(student_spec, w0, len(images), cfg.phase1(), batch_loss,
                        trainable=below, phase="phase1")
    return series


def feature_mse(student_spec: ModelSpec, params, teacher: Network, tap: str, images) -> float:
    """Mean over samples of ||f_T(x) - f_S(x)||^2."""
    s = teacher_targets(Network(student_spec, params), tap, images)
    t = teacher_targets(teacher, tap, images)
    return float(np.mean(np.sum((s - t) ** 2, axis=1)))


@dataclass
class HeadResult:
    network: Network
    accuracy: float
    series: CheckpointSeries
    frozen_grad_norms: list


def head_finetune(student_spec: ModelSpec, phase1: CheckpointSeries, data, cfg: DistillConfig) -> HeadResult:
    """Train only the layers above the tap with cross-entropy.

    The parameters at and below the tap are passed as constants, so their
    gradients are identically zero and their values bit-identical afterwards;
    ``frozen_grad_norms`` records the per-step norm as evidence.
    """
    stop = student_spec.tap_index(cfg.tap)
    images = np.asarray(data.images, dtype=np.float64)
    labels = np.asarray(data.labels)
    above = student_spec.layer_mask(lambda i: i > stop)
    frozen_norms = []

    def batch_loss(tensors, idx):
        return T.softmax_crossentropy(forward(student_spec, tensors, images[idx]), labels[idx])

    def on_step(tensors):
        g = [t.grad for t in tensors if not t.requires_grad and t.grad is not None]
        frozen_norms.append(float(np.sqrt(sum(np.sum(x * x) for x in g))) if g else 0.0)

    series = sgd_series(student_spec, phase1.final, len(images), cfg.phase2(), batch_loss,
                        trainable=above, phase="final", on_step=on_step)
    acc = accuracy(student_spec, series.final, images, labels)
    series.accuracy = acc
    return HeadResult(Network(student_spec, series.final), acc, series, frozen_norms)
