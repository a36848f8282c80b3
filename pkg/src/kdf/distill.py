"""Soft-target distillation losses.

The combined objective is::

    loss = hard_weight * CE(student, labels) + alpha * T**2 * KL(P_T || Q_T)

where ``P_T``/``Q_T`` are the teacher/student softmax outputs at temperature
``T``. Cross-entropy uses temperature-1 logits.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import NamedTuple, Sequence

import numpy as np

from . import tensor as T
from .configfile import ConfigError
from .tensor import ShapeError, Tensor


@dataclass(frozen=True)
class DistillConfig:
    temperature: float = 3.0
    alpha: float = 0.2
    # None binds the hard-label weight to 1 - alpha
    hard_weight: float | None = None
    class_weights: tuple[float, ...] | None = None

    def validate(self, num_classes: int | None = None) -> "DistillConfig":
        problems = []
        if not self.temperature > 0:
            problems.append(f"temperature must be > 0, got {self.temperature}")
        if not 0 <= self.alpha <= 1:
            problems.append(f"alpha must be in [0, 1], got {self.alpha}")
        if self.hard_weight is not None and self.hard_weight < 0:
            problems.append(f"hard_weight must be >= 0, got {self.hard_weight}")
        if self.class_weights is not None:
            if min(self.class_weights, default=0) <= 0:
                problems.append("class_weights must all be > 0")
            if num_classes is not None and len(self.class_weights) != num_classes:
                problems.append(f"class_weights has {len(self.class_weights)} entries, expected {num_classes}")
        if problems:
            raise ConfigError(problems)
        return self

    @property
    def ce_weight(self) -> float:
        return 1.0 - self.alpha if self.hard_weight is None else self.hard_weight


def _check_temperature(temperature: float) -> None:
    if not temperature > 0:
        raise ValueError(f"temperature must be > 0, got {temperature}")


def log_softmax_t(logits: Tensor, temperature: float = 1.0) -> Tensor:
    _check_temperature(temperature)
    scaled = logits if temperature == 1 else logits / temperature
    return T.log_softmax(scaled, axis=-1)


def softmax_t(logits: Tensor, temperature: float = 1.0) -> Tensor:
    """Row-wise softmax of ``logits / temperature``."""
    return T.exp(log_softmax_t(logits, temperature))


def kl_div_from_log(teacher_log_probs: Tensor, student_log_probs: Tensor) -> Tensor:
    """Batch-mean KL(P || Q) from log-probabilities; the teacher side is detached."""
    if teacher_log_probs.shape != student_log_probs.shape or student_log_probs.ndim != 2:
        raise ShapeError(f"kl_div: teacher {teacher_log_probs.shape} and student {student_log_probs.shape} "
                         "must be equal (N, C) shapes")
    log_p = teacher_log_probs.data
    p = Tensor(np.exp(log_p), dtype=log_p.dtype)
    per_entry = p * (Tensor(log_p, dtype=log_p.dtype) - student_log_probs)
    return T.sum(per_entry) / log_p.shape[0]


def kl_div_loss(p: Tensor, q: Tensor) -> Tensor:
    """Batch-mean KL(P || Q) from probability rows, logs clamped at 1e-12."""
    p_data = p.data if isinstance(p, Tensor) else np.asarray(p)
    q = q if isinstance(q, Tensor) else Tensor(q)
    if p_data.shape != q.shape or q.ndim != 2:
        raise ShapeError(f"kl_div: P {p_data.shape} and Q {q.shape} must be equal (N, C) shapes")
    log_p = np.log(np.maximum(p_data, T.CLAMP_EPS)).astype(q.dtype)
    return kl_div_from_log(Tensor(log_p, dtype=q.dtype), T.log(q))


def _labels(labels, n: int, num_classes: int) -> np.ndarray:
    y = np.asarray(labels)
    if y.shape != (n,) or not np.issubdtype(y.dtype, np.integer):
        raise ShapeError(f"labels must be {n} integer class indices, got shape {y.shape} dtype {y.dtype}")
    bad = (y < 0) | (y >= num_classes)
    if bad.any():
        raise ValueError(f"label {int(y[bad][0])} at position {int(np.argmax(bad))} outside [0, {num_classes})")
    return y


def cross_entropy(logits: Tensor, labels, class_weights: Sequence[float] | None = None) -> Tensor:
    """Class-weighted cross-entropy: sum_i w[y_i] * -log softmax(z_i)[y_i] / sum_i w[y_i]."""
    if logits.ndim != 2:
        raise ShapeError(f"cross_entropy: expected (N, C) logits, got {logits.shape}")
    n, c = logits.shape
    y = _labels(labels, n, c)
    if class_weights is None:
        w = np.ones(c, dtype=logits.dtype)
    else:
        w = np.asarray(class_weights, dtype=logits.dtype)
        if w.shape != (c,):
            raise ShapeError(f"cross_entropy: {w.shape[0] if w.ndim else 0} class weights for {c} classes")
    selector = np.zeros((n, c), dtype=logits.dtype)
    selector[np.arange(n), y] = w[y]
    log_probs = T.log_softmax(logits, axis=-1)
    return -T.sum(log_probs * Tensor(selector, dtype=logits.dtype)) / selector.sum(dtype=np.float64)


class LossBreakdown(NamedTuple):
    total: Tensor
    ce: float
    kl: float


def combined_loss(student_logits: Tensor, teacher_logits: Tensor, labels, cfg: DistillConfig) -> LossBreakdown:
    """Weighted sum of hard-label cross-entropy and temperature-scaled KL."""
    if teacher_logits.requires_grad:
        raise ValueError("teacher logits must be detached from the gradient tape (frozen teacher)")
    cfg.validate(student_logits.shape[-1])
    ce = cross_entropy(student_logits, labels, cfg.class_weights)
    total = ce * cfg.ce_weight
    if cfg.alpha == 0:
        return LossBreakdown(total, ce.item(), 0.0)
    t = cfg.temperature
    kl = kl_div_from_log(log_softmax_t(teacher_logits, t), log_softmax_t(student_logits, t))
    total = total + kl * (cfg.alpha * t * t)
    return LossBreakdown(total, ce.item(), kl.item())
