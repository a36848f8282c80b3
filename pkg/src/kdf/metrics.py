"""Accuracy, confusion matrices, latency/memory benchmarks and side-by-side comparison tables."""

from __future__ import annotations

import csv
import io
import json
import os
import resource
import statistics
import sys
import time
from contextlib import nullcontext
from dataclasses import asdict, dataclass, field

import numpy as np

from .data import EMOTIONS
from .nn import Module
from .tensor import Tensor, no_grad
from .zoo import BYTES_PER_PARAM, Model, model_size, total_parameters


class ConfusionMatrix:
    """Counts with rows = true class, columns = predicted class."""

    def __init__(self, counts):
        counts = np.asarray(counts, dtype=np.int64)
        if counts.ndim != 2 or counts.shape[0] != counts.shape[1]:
            raise ValueError(f"confusion matrix must be square, got shape {counts.shape}")
        if (counts < 0).any():
            raise ValueError("confusion matrix entries must be non-negative")
        self.counts = counts

    @classmethod
    def from_predictions(cls, y_true, y_pred, num_classes: int = len(EMOTIONS)) -> "ConfusionMatrix":
        counts = np.zeros((num_classes, num_classes), dtype=np.int64)
        np.add.at(counts, (np.asarray(y_true), np.asarray(y_pred)), 1)
        return cls(counts)

    @property
    def num_classes(self) -> int:
        return self.counts.shape[0]

    @property
    def total(self) -> int:
        return int(self.counts.sum())

    def tp(self) -> np.ndarray:
        return np.diag(self.counts).copy()

    def fp(self) -> np.ndarray:
        return self.counts.sum(axis=0) - self.tp()

    def fn(self) -> np.ndarray:
        return self.counts.sum(axis=1) - self.tp()

    def tn(self) -> np.ndarray:
        return self.total - self.tp() - self.fp() - self.fn()

    def per_class_accuracy(self) -> np.ndarray:
        """One-vs-rest (TP + TN) / (TP + TN + FP + FN) * 100 for each class."""
        if self.total == 0:
            raise ValueError("accuracy undefined for an empty confusion matrix")
        return 100.0 * (self.tp() + self.tn()) / self.total

    def accuracy(self) -> float:
        return accuracy(self)

    def __add__(self, other: "ConfusionMatrix") -> "ConfusionMatrix":
        return ConfusionMatrix(self.counts + other.counts)

    def to_csv(self, labels=EMOTIONS) -> str:
        labels = list(labels)[: self.num_classes]
        buf = io.StringIO()
        writer = csv.writer(buf, lineterminator="\n")
        writer.writerow(["true\\pred"] + labels)
        for name, row in zip(labels, self.counts):
            writer.writerow([name] + row.tolist())
        return buf.getvalue()

    def to_json(self) -> dict:
        return {
            "counts": self.counts.tolist(),
            "accuracy": self.accuracy(),
            "per_class_accuracy": dict(zip(EMOTIONS, self.per_class_accuracy().round(4).tolist())),
        }


def accuracy(confusion: ConfusionMatrix) -> float:
    """Overall multi-class accuracy in percent: trace / total * 100."""
    total = confusion.total
    if total == 0:
        raise ValueError("accuracy undefined for an empty confusion matrix")
    return 100.0 * float(np.trace(confusion.counts)) / total


def predict_logits(model: Module, images: np.ndarray, batch_size: int = 64) -> np.ndarray:
    was_training = model.training
    model.eval()
    out = []
    with no_grad():
        for start in range(0, len(images), batch_size):
            out.append(model(Tensor(images[start:start + batch_size])).data)
    model.train(was_training)
    if not out:
        return np.zeros((0, 0), dtype=np.float32)
    return np.concatenate(out)


@dataclass
class EvalResult:
    confusion: ConfusionMatrix
    accuracy: float
    predictions: np.ndarray

    def to_json(self) -> dict:
        return {"accuracy": self.accuracy, "samples": self.confusion.total, "confusion": self.confusion.to_json()}


def evaluate(model: Module, images: np.ndarray, labels: np.ndarray, batch_size: int = 64,
             num_classes: int = len(EMOTIONS)) -> EvalResult:
    """Eval-mode argmax predictions (ties resolve to the lowest class index)."""
    logits = predict_logits(model, np.asarray(images, dtype=np.float32), batch_size)
    pred = logits.argmax(axis=1)
    cm = ConfusionMatrix.from_predictions(labels, pred, num_classes)
    return EvalResult(cm, accuracy(cm), pred)


# -- latency ------------------------------------------------------------------------

@dataclass
class LatencyStats:
    mean_ms: float
    median_ms: float
    p95_ms: float
    runs: int
    warmup: int
    batch: int
    input_shape: tuple
    threads: int | None
    samples_ms: list[float] = field(default_factory=list, repr=False)

    def to_json(self) -> dict:
        out = asdict(self)
        out.pop("samples_ms")
        return out


def _thread_limit(threads: int | None):
    if threads is None:
        return nullcontext()
    try:
        from threadpoolctl import threadpool_limits
    except ImportError:  # pragma: no cover
        return nullcontext()
    return threadpool_limits(threads)


def bench_latency(model: Module, input_shape, warmup: int = 20, runs: int = 100, threads: int | None = 1,
                  seed: int = 0) -> LatencyStats:
    """Wall-clock of single-sample eval forwards; warmup runs are discarded."""
    if runs < 1:
        raise ValueError("runs must be >= 1")
    x = Tensor(np.random.default_rng(seed).random((1, *input_shape), dtype=np.float32))
    was_training = model.training
    model.eval()
    samples = []
    with _thread_limit(threads), no_grad():
        for i in range(warmup + runs):
            start = time.perf_counter_ns()
            model(x)
            elapsed = time.perf_counter_ns() - start
            if i >= warmup:
                samples.append(elapsed / 1e6)
    model.train(was_training)
    return LatencyStats(
        mean_ms=statistics.fmean(samples),
        median_ms=statistics.median(samples),
        p95_ms=float(np.percentile(samples, 95)),
        runs=runs, warmup=warmup, batch=1, input_shape=tuple(input_shape), threads=threads,
        samples_ms=samples,
    )


# -- memory -------------------------------------------------------------------------

@dataclass
class MemoryReport:
    parameter_bytes: int
    buffer_bytes: int
    activation_bytes: int | None
    peak_rss_bytes: int | None
    note: str = "peak_rss_bytes is the whole process high-water mark and depends on the environment"

    @property
    def parameter_mib(self) -> float:
        return self.parameter_bytes / 2**20

    def to_json(self) -> dict:
        out = asdict(self)
        out["parameter_mib"] = round(self.parameter_mib, 2)
        return out


def activation_bytes(model: Model, input_shape=None, batch: int = 1) -> int:
    """Analytic sum of every top-level layer's output size at ``batch`` (32-bit floats)."""
    shape = tuple(input_shape or model.config.input_shape)
    total = 0
    for _, layer in model.layers():
        shape = layer.output_shape(shape)
        total += int(np.prod(shape)) * batch * BYTES_PER_PARAM
    return total


def peak_rss_bytes() -> int | None:
    try:
        peak = resource.getrusage(resource.RUSAGE_SELF).ru_maxrss
    except (AttributeError, OSError):  # pragma: no cover
        return None
    return peak if sys.platform == "darwin" else peak * 1024


def memory_report(model: Module, input_shape=None) -> MemoryReport:
    count = total_parameters(model)
    act = activation_bytes(model, input_shape) if isinstance(model, Model) else None
    return MemoryReport(count.trainable * BYTES_PER_PARAM, count.buffers * BYTES_PER_PARAM, act, peak_rss_bytes())


# -- reports and comparison ------------------------------------------------------------

@dataclass
class BenchReport:
    name: str
    parameters: int | None = None
    size_bytes: int | None = None
    size_mib: float | None = None
    memory_mb: float | None = None
    latency_ms: float | None = None
    accuracy: float | None = None
    latency: LatencyStats | None = None
    memory: MemoryReport | None = None
    confusion: ConfusionMatrix | None = None
    environment: dict = field(default_factory=dict)

    def to_json(self) -> dict:
        return {
            "name": self.name,
            "parameters": self.parameters,
            "size_bytes": self.size_bytes,
            "size_mb": None if self.size_bytes is None else round(self.size_bytes / 10**6, 2),
            "size_mib": None if self.size_mib is None else round(self.size_mib, 2),
            "memory_mb": self.memory_mb,
            "latency_ms": self.latency_ms,
            "accuracy": self.accuracy,
            "latency": None if self.latency is None else self.latency.to_json(),
            "memory": None if self.memory is None else self.memory.to_json(),
            "confusion": None if self.confusion is None else self.confusion.to_json(),
            "environment": self.environment,
        }


def benchmark(model: Model, name: str | None = None, warmup: int = 20, runs: int = 100, threads: int | None = 1,
              images: np.ndarray | None = None, labels: np.ndarray | None = None) -> BenchReport:
    count = total_parameters(model)
    size = model_size(count)
    lat = bench_latency(model, model.config.input_shape, warmup, runs, threads)
    mem = memory_report(model)
    report = BenchReport(
        name=name or model.config.name, parameters=count.trainable, size_bytes=size.bytes, size_mib=size.mib,
        memory_mb=(mem.parameter_bytes + (mem.activation_bytes or 0)) / 2**20, latency_ms=lat.mean_ms,
        latency=lat, memory=mem,
        environment={"threads": threads, "batch": 1, "input_shape": list(model.config.input_shape),
                     "cpu_count": os.cpu_count(), "numpy": np.__version__},
    )
    if images is not None and labels is not None:
        result = evaluate(model, images, labels)
        report.accuracy, report.confusion = result.accuracy, result.confusion
    return report


def improvement(base: float, value: float) -> float:
    """Relative reduction versus ``base`` in percent: (base - value) / base * 100."""
    return (base - value) / base * 100.0


# metric key, row label, lower-is-better
COMPARE_ROWS = (
    ("size_mib", "Model Size (MiB)", True),
    ("parameters", "Parameters", True),
    ("memory_mb", "Memory Usage (MB)", True),
    ("latency_ms", "Average Inference Time (ms)", True),
    ("accuracy", "Accuracy (%)", False),
)


@dataclass
class Comparison:
    names: list[str]
    rows: list[dict]

    def to_json(self) -> dict:
        return {"models": self.names, "rows": self.rows}

    def to_csv(self) -> str:
        buf = io.StringIO()
        writer = csv.writer(buf, lineterminator="\n")
        header = ["metric"]
        for name in self.names:
            header.append(name)
        for name in self.names[1:]:
            header.append(f"{name} vs {self.names[0]} (%)")
        writer.writerow(header)
        for row in self.rows:
            writer.writerow([row["metric"]] + ["" if v is None else v for v in row["values"]]
                            + ["" if v is None else f"{v:.2f}" for v in row["change_pct"]])
        return buf.getvalue()

    def to_text(self) -> str:
        width = max(len(r["metric"]) for r in self.rows) + 2
        cols = [f"{n:>16}" for n in self.names]
        lines = [" " * width + "".join(cols)]
        for row in self.rows:
            cells = "".join(f"{_fmt(v):>16}" for v in row["values"])
            changes = "  ".join(f"{'n/a' if c is None else f'{c:+.2f}%'}" for c in row["change_pct"])
            lines.append(f"{row['metric']:<{width}}{cells}   {changes}")
        return "\n".join(lines) + "\n"


def _fmt(v) -> str:
    if v is None:
        return "-"
    if isinstance(v, int):
        return f"{v:,}"
    return f"{v:.2f}"


def compare(reports: list[BenchReport]) -> Comparison:
    """Table of metrics with each model's relative improvement over the first report.

    Lower-is-better metrics use (base - x) / base * 100; accuracy reports the
    absolute difference in percentage points.
    """
    if len(reports) < 2:
        raise ValueError("compare needs at least two reports")
    base = reports[0]
    rows = []
    for key, label, lower_better in COMPARE_ROWS:
        values = [getattr(r, key) for r in reports]
        if all(v is None for v in values):
            continue
        changes = []
        for r in reports[1:]:
            b, x = getattr(base, key), getattr(r, key)
            if b is None or x is None or (lower_better and b == 0):
                changes.append(None)
            elif lower_better:
                changes.append(improvement(b, x))
            else:
                changes.append(x - b)
        rows.append({"metric": label, "key": key, "values": values, "change_pct": changes})
    return Comparison([r.name for r in reports], rows)


def dumps(obj) -> str:
    return json.dumps(obj, indent=2, default=float)
