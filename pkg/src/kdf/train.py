"""SGD training loop with reduce-on-plateau decay, for plain and distillation runs."""

from __future__ import annotations

import csv
import io
import json
import logging
import math
import time
from contextlib import nullcontext
from dataclasses import asdict, dataclass, field, replace
from pathlib import Path
from typing import Sequence

import numpy as np

from . import zoo
from .configfile import ConfigError
from .data import random_flip
from .distill import DistillConfig, combined_loss, cross_entropy
from .nn import Module
from .tensor import Parameter, Tensor, no_grad

log = logging.getLogger(__name__)


@dataclass(frozen=True)
class TrainConfig:
    batch_size: int = 16
    epochs: int = 80
    lr: float = 1e-3
    momentum: float = 0.9
    plateau_factor: float = 0.1
    plateau_patience: int = 5
    plateau_threshold: float = 1e-4
    plateau_metric: str = "val_loss"
    min_lr: float = 1e-7
    flip_prob: float = 0.5
    seed: int = 0
    deterministic: bool = True
    class_weighting: str = "inverse_frequency"

    def validate(self) -> "TrainConfig":
        problems = []
        if self.batch_size < 1:
            problems.append(f"batch_size must be >= 1, got {self.batch_size}")
        if self.epochs < 0:
            problems.append(f"epochs must be >= 0, got {self.epochs}")
        if self.lr < 0:
            problems.append(f"lr must be >= 0, got {self.lr}")
        if not 0 < self.plateau_factor < 1:
            problems.append(f"plateau_factor must be in (0, 1), got {self.plateau_factor}")
        if self.plateau_patience < 1:
            problems.append(f"plateau_patience must be >= 1, got {self.plateau_patience}")
        if self.plateau_metric not in ("val_loss", "val_accuracy"):
            problems.append(f"plateau_metric must be val_loss or val_accuracy, got {self.plateau_metric!r}")
        if not 0 <= self.flip_prob <= 1:
            problems.append(f"flip_prob must be in [0, 1], got {self.flip_prob}")
        if self.class_weighting not in ("inverse_frequency", "uniform"):
            problems.append(f"class_weighting must be inverse_frequency or uniform, got {self.class_weighting!r}")
        if problems:
            raise ConfigError(problems)
        return self


class NumericalError(RuntimeError):
    pass


class SGD:
    """Momentum SGD: ``v = momentum * v + grad``; ``p -= lr * v``; grads cleared after each step."""

    def __init__(self, params: Sequence[Parameter], lr: float, momentum: float = 0.9):
        self.params = list(params)
        self.lr = lr
        self.momentum = momentum
        self.velocity = [None] * len(self.params)

    def step(self) -> None:
        missing = [i for i, p in enumerate(self.params) if p.grad is None]
        if missing:
            raise RuntimeError(f"sgd_step: {len(missing)} parameter(s) have no gradient; call backward first")
        for i, p in enumerate(self.params):
            g = p.grad
            v = g.copy() if self.velocity[i] is None else self.velocity[i] * p.dtype.type(self.momentum) + g
            self.velocity[i] = v
            p.data = p.data - p.dtype.type(self.lr) * v
            p.grad = None


def sgd_step(params: Sequence[Parameter], lr: float, momentum: float = 0.0, velocity: list | None = None) -> list:
    """Functional form of one momentum step; returns the updated velocity list."""
    opt = SGD(params, lr, momentum)
    if velocity is not None:
        opt.velocity = list(velocity)
    opt.step()
    return opt.velocity


class PlateauScheduler:
    """Multiply the learning rate by ``factor`` once the metric has not improved
    by more than ``threshold`` for ``patience`` consecutive epochs."""

    def __init__(self, lr: float, factor: float = 0.1, patience: int = 5, threshold: float = 1e-4,
                 mode: str = "min", min_lr: float = 1e-7):
        self.lr = lr
        self.factor, self.patience, self.threshold = factor, patience, threshold
        self.mode, self.min_lr = mode, min_lr
        self.best = math.inf if mode == "min" else -math.inf
        self.bad_epochs = 0

    def _improved(self, metric: float) -> bool:
        if self.mode == "min":
            return metric < self.best - self.threshold
        return metric > self.best + self.threshold

    def step(self, metric: float) -> float:
        """Record one epoch's metric and return the learning rate for the next epoch."""
        if self._improved(metric):
            self.best = metric
            self.bad_epochs = 0
        else:
            self.bad_epochs += 1
        if self.bad_epochs >= self.patience:
            self.lr = max(self.lr * self.factor, self.min_lr)
            self.bad_epochs = 0
        return self.lr


def plateau_schedule(history: Sequence[float], lr: float = 1e-3, factor: float = 0.1, patience: int = 5,
                     threshold: float = 1e-4, mode: str = "min", min_lr: float = 1e-7) -> list[float]:
    """Learning rate in effect after each epoch of ``history`` (the last entry is the next lr)."""
    if not len(history):
        raise ValueError("plateau_schedule: empty metric history")
    sched = PlateauScheduler(lr, factor, patience, threshold, mode, min_lr)
    return [sched.step(m) for m in history]


@dataclass
class EpochRecord:
    epoch: int
    lr: float
    train_loss: float
    train_ce: float
    train_kl: float
    train_accuracy: float
    val_loss: float | None
    val_accuracy: float | None
    seconds: float = 0.0


@dataclass
class TrainReport:
    model: str
    mode: str
    epochs: list[EpochRecord] = field(default_factory=list)
    best_epoch: int | None = None
    best_metric: float | None = None
    checkpoint: str | None = None
    config: dict = field(default_factory=dict)

    @property
    def losses(self) -> list[float]:
        return [e.train_loss for e in self.epochs]

    @property
    def learning_rates(self) -> list[float]:
        return [e.lr for e in self.epochs]

    def to_json(self, timing: bool = True) -> dict:
        out = asdict(self)
        if not timing:
            for e in out["epochs"]:
                e.pop("seconds")
        return out

    def to_csv(self, timing: bool = True) -> str:
        buf = io.StringIO()
        names = [f for f in EpochRecord.__dataclass_fields__ if timing or f != "seconds"]
        writer = csv.writer(buf, lineterminator="\n")
        writer.writerow(names)
        for e in self.epochs:
            writer.writerow(["" if getattr(e, n) is None else repr(getattr(e, n)) for n in names])
        return buf.getvalue()

    def write(self, out_dir: str | Path, timing: bool = True) -> None:
        out_dir = Path(out_dir)
        out_dir.mkdir(parents=True, exist_ok=True)
        (out_dir / "report.json").write_text(json.dumps(self.to_json(timing), indent=2) + "\n")
        (out_dir / "report.csv").write_text(self.to_csv(timing))


def _predict_logits(model: Module, images: np.ndarray, batch_size: int) -> np.ndarray:
    chunks = []
    with no_grad():
        for start in range(0, len(images), batch_size):
            chunks.append(model(Tensor(images[start:start + batch_size])).data)
    return np.concatenate(chunks) if chunks else np.zeros((0, 0), dtype=np.float32)


def _objective(model, teacher, distill_cfg, xb, yb, weights):
    logits = model(Tensor(xb))
    if teacher is None:
        loss = cross_entropy(logits, yb, weights)
        return loss, loss.item(), 0.0, logits
    with no_grad():
        teacher_logits = teacher(Tensor(xb))
    parts = combined_loss(logits, teacher_logits, yb, distill_cfg)
    return parts.total, parts.ce, parts.kl, logits


def _evaluate_loss(model, teacher, distill_cfg, images, labels, weights, batch_size):
    was_training = model.training
    model.eval()
    total = correct = 0.0
    with no_grad():
        for start in range(0, len(images), batch_size):
            xb, yb = images[start:start + batch_size], labels[start:start + batch_size]
            loss, _, _, logits = _objective(model, teacher, distill_cfg, xb, yb, weights)
            total += loss.item() * len(yb)
            correct += int((logits.data.argmax(axis=1) == yb).sum())
    model.train(was_training)
    return total / len(labels), 100.0 * correct / len(labels)


def fit(model: zoo.Model, images: np.ndarray, labels: np.ndarray, cfg: TrainConfig = TrainConfig(), *,
        val_images: np.ndarray | None = None, val_labels: np.ndarray | None = None,
        teacher: Module | None = None, distill_cfg: DistillConfig | None = None,
        class_weights: Sequence[float] | None = None, checkpoint_path: str | Path | None = None,
        on_epoch=None) -> TrainReport:
    """Train ``model`` in place; with ``teacher`` the distillation objective is used.

    The best-validation weights (or best training loss without a validation
    set) are written to ``checkpoint_path`` whenever they improve.
    """
    cfg.validate()
    images = np.asarray(images, dtype=np.float32)
    labels = np.asarray(labels, dtype=np.int64)
    if len(labels) == 0:
        raise ValueError("fit: empty training set")
    if images.shape[0] != labels.shape[0]:
        raise ValueError(f"fit: {images.shape[0]} images but {labels.shape[0]} labels")
    if teacher is not None:
        distill_cfg = (distill_cfg or DistillConfig()).validate()
        teacher.eval()
    has_val = val_images is not None and val_labels is not None and len(val_labels) > 0
    weights = class_weights
    if teacher is not None and distill_cfg.class_weights is None and weights is not None:
        distill_cfg = replace(distill_cfg, class_weights=tuple(float(w) for w in weights))

    mode = "distill" if teacher is not None else "train"
    report = TrainReport(model.config.name if hasattr(model, "config") else type(model).__name__, mode,
                         config={"train": asdict(cfg), "distill": asdict(distill_cfg) if distill_cfg else None,
                                 "class_weights": None if weights is None else [float(w) for w in weights]})
    opt = SGD(model.parameters(), cfg.lr, cfg.momentum)
    metric_mode = "max" if has_val and cfg.plateau_metric == "val_accuracy" else "min"
    sched = PlateauScheduler(cfg.lr, cfg.plateau_factor, cfg.plateau_patience, cfg.plateau_threshold,
                             metric_mode, cfg.min_lr)
    best = None
    n = len(labels)
    limiter = _thread_limit(1) if cfg.deterministic else nullcontext()
    with limiter:
        for epoch in range(1, cfg.epochs + 1):
            started = time.perf_counter()
            rng = np.random.default_rng([cfg.seed, epoch])
            if hasattr(model, "seed_dropout"):
                model.seed_dropout(rng)
            order = rng.permutation(n)
            model.train()
            lr = opt.lr
            sum_loss = sum_ce = sum_kl = 0.0
            correct = 0
            for step, start in enumerate(range(0, n, cfg.batch_size), 1):
                idx = order[start:start + cfg.batch_size]
                xb = random_flip(images[idx], rng, cfg.flip_prob) if cfg.flip_prob else images[idx]
                yb = labels[idx]
                loss, ce, kl, logits = _objective(model, teacher, distill_cfg, xb, yb, weights)
                value = loss.item()
                if not math.isfinite(value):
                    raise NumericalError(f"non-finite loss {value} at epoch {epoch}, step {step}")
                loss.backward()
                opt.step()
                sum_loss += value * len(idx)
                sum_ce += ce * len(idx)
                sum_kl += kl * len(idx)
                correct += int((logits.data.argmax(axis=1) == yb).sum())
            val_loss = val_acc = None
            if has_val:
                val_loss, val_acc = _evaluate_loss(model, teacher, distill_cfg, val_images, val_labels,
                                                   weights, cfg.batch_size)
            record = EpochRecord(epoch, lr, sum_loss / n, sum_ce / n, sum_kl / n, 100.0 * correct / n,
                                 val_loss, val_acc, time.perf_counter() - started)
            report.epochs.append(record)
            if has_val:
                metric = val_acc if cfg.plateau_metric == "val_accuracy" else val_loss
            else:
                metric = record.train_loss
            opt.lr = sched.step(metric)
            improved = best is None or (metric > best if metric_mode == "max" else metric < best)
            if improved:
                best = metric
                report.best_epoch, report.best_metric = epoch, metric
                if checkpoint_path is not None:
                    zoo.save(model, checkpoint_path)
                    report.checkpoint = str(checkpoint_path)
            log.info("epoch %d lr %.2e loss %.4f val_acc %s", epoch, lr, record.train_loss, val_acc)
            if on_epoch is not None:
                on_epoch(record)
    model.eval()
    return report


def _thread_limit(n: int):
    try:
        from threadpoolctl import threadpool_limits
    except ImportError:  # pragma: no cover
        return nullcontext()
    return threadpool_limits(n)
