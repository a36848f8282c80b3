"""ResEmoteNet-style teacher and its channel-scaled students: configs, builders,
parameter accounting, size arithmetic and checkpoints."""

from __future__ import annotations

import dataclasses
import io
import struct
from dataclasses import dataclass
from pathlib import Path
from typing import NamedTuple

import numpy as np

from . import configfile
from .configfile import ConfigError
from .nn import (AdaptiveAvgPool2d, ConvBlock, Dropout, Flatten, Linear, MaxPool2d, Module, ParamCount,
                 ReLU, ResidualBlock, SEBlock, kaiming_init)
from .tensor import Tensor


@dataclass(frozen=True)
class ModelConfig:
    """Declarative architecture.

    ``residual_channels`` lists the input width of each residual block (the
    way the teacher/student comparison table prints it); block ``i`` outputs
    ``residual_expansion * residual_channels[i]`` channels, which must equal
    the next block's input.
    """

    name: str = "resemotenet"
    input_shape: tuple[int, ...] = (3, 64, 64)
    conv_channels: tuple[int, ...] = (64, 128, 256)
    se_channels: int = 256
    se_reduction: int = 16
    se_bias: bool = False
    residual_channels: tuple[int, ...] = (256, 512, 1024)
    residual_expansion: int = 2
    residual_stride: int = 2
    head_widths: tuple[int, ...] = (1024, 512, 256, 7)
    dropout_rate: float = 0.2
    num_classes: int = 7
    bn_eps: float = 1e-5
    bn_momentum: float = 0.1

    def validate(self) -> "ModelConfig":
        problems = []
        if len(self.input_shape) != 3 or min(self.input_shape, default=0) < 1:
            problems.append(f"input_shape must be (channels, height, width) of positive sizes, got {self.input_shape}")
        for key in ("conv_channels", "residual_channels", "head_widths"):
            values = getattr(self, key)
            if not values or min(values) < 1:
                problems.append(f"{key} must be a non-empty list of positive counts, got {values}")
        for key in ("se_channels", "se_reduction", "residual_expansion", "residual_stride", "num_classes"):
            if getattr(self, key) < 1:
                problems.append(f"{key} must be >= 1, got {getattr(self, key)}")
        if self.conv_channels and self.se_channels != self.conv_channels[-1]:
            problems.append(f"se_channels ({self.se_channels}) must equal the last conv width ({self.conv_channels[-1]})")
        if self.residual_channels and self.residual_channels[0] != self.se_channels:
            problems.append(f"first residual input ({self.residual_channels[0]}) must equal se_channels ({self.se_channels})")
        for i in range(len(self.residual_channels) - 1):
            out = self.residual_channels[i] * self.residual_expansion
            if self.residual_channels[i + 1] != out:
                problems.append(f"residual block {i + 1} outputs {out} channels but block {i + 2} expects "
                                f"{self.residual_channels[i + 1]}")
        if self.head_widths and self.head_widths[-1] != self.num_classes:
            problems.append(f"head_widths must end in num_classes ({self.num_classes}), got {self.head_widths}")
        if not 0 <= self.dropout_rate < 1:
            problems.append(f"dropout_rate must be in [0, 1), got {self.dropout_rate}")
        if problems:
            raise ConfigError(problems)
        return self

    @property
    def residual_out_channels(self) -> tuple[int, ...]:
        return tuple(c * self.residual_expansion for c in self.residual_channels)

    def to_text(self, prefix: str = "") -> str:
        return configfile.dump(self, prefix)

    @classmethod
    def from_text(cls, text: str) -> "ModelConfig":
        return configfile.build(cls, configfile.parse(text))


TEACHER = ModelConfig()


def halve_channels(config: ModelConfig, factor: int) -> ModelConfig:
    """Divide every channel width (and every hidden head width) by ``factor``.

    The class count stays fixed. Entries that do not divide evenly are an
    error rather than being rounded.
    """
    if factor < 1:
        raise ValueError(f"factor must be a positive integer, got {factor}")

    def scale(key, values):
        bad = [v for v in values if v % factor]
        if bad:
            raise ConfigError([f"{key} entries {bad} are not divisible by {factor}"])
        return tuple(v // factor for v in values)

    return dataclasses.replace(
        config,
        name=config.name if factor == 1 else f"{config.name}/{factor}",
        conv_channels=scale("conv_channels", config.conv_channels),
        se_channels=scale("se_channels", (config.se_channels,))[0],
        residual_channels=scale("residual_channels", config.residual_channels),
        head_widths=scale("head_widths", config.head_widths[:-1]) + config.head_widths[-1:],
    )


STUDENT_A = dataclasses.replace(halve_channels(TEACHER, 2), name="student_a")
STUDENT_B = dataclasses.replace(halve_channels(TEACHER, 4), name="student_b")
# Student C's published total is only reached with an unreduced SE bottleneck (32 -> 32 -> 32).
STUDENT_C = dataclasses.replace(halve_channels(TEACHER, 8), name="student_c", se_reduction=1)

# Two-stage miniatures for synthetic 8x8 data; not part of the published family.
TOY_TEACHER = ModelConfig(name="toy_teacher", input_shape=(3, 8, 8), conv_channels=(16, 32), se_channels=32,
                          se_reduction=4, residual_channels=(32,), head_widths=(64, 7), dropout_rate=0.0)
TOY_STUDENT = dataclasses.replace(halve_channels(TOY_TEACHER, 2), name="toy_student")

PRESETS: dict[str, ModelConfig] = {
    "resemotenet": TEACHER,
    "student_a": STUDENT_A,
    "student_b": STUDENT_B,
    "student_c": STUDENT_C,
    "toy_teacher": TOY_TEACHER,
    "toy_student": TOY_STUDENT,
}
ALIASES = {"teacher": "resemotenet", "a": "student_a", "b": "student_b", "c": "student_c"}

# Trainable-parameter totals of the teacher/student comparison table.
REFERENCE_TOTALS = {
    "resemotenet": 80_238_599,
    "student_a": 20_069_383,
    "student_b": 5_022_215,
    "student_c": 1_259_911,
}


def preset(name: str) -> ModelConfig:
    key = ALIASES.get(name.lower(), name.lower())
    try:
        return PRESETS[key]
    except KeyError:
        raise KeyError(f"unknown model {name!r}; choose from {sorted(PRESETS)}") from None


class Model(Module):
    """Ordered stack of named layers producing raw logits (no softmax)."""

    def __init__(self, config: ModelConfig):
        super().__init__()
        config.validate()
        object.__setattr__(self, "config", config)
        object.__setattr__(self, "layer_names", [])
        bn = dict(bn_eps=config.bn_eps, bn_momentum=config.bn_momentum)

        in_ch = config.input_shape[0]
        for i, out_ch in enumerate(config.conv_channels, 1):
            self._add(f"conv{i}", ConvBlock(in_ch, out_ch, 3, 1, 1, **bn))
            self._add(f"pool{i}", MaxPool2d(2))
            in_ch = out_ch
        self._add("se", SEBlock(config.se_channels, config.se_reduction, config.se_bias))
        for i, (cin, cout) in enumerate(zip(config.residual_channels, config.residual_out_channels), 1):
            self._add(f"res{i}", ResidualBlock(cin, cout, config.residual_stride, **bn))
            in_ch = cout
        self._add("avgpool", AdaptiveAvgPool2d(1))
        self._add("flatten", Flatten())
        widths = (in_ch,) + tuple(config.head_widths)
        for i in range(len(config.head_widths)):
            last = i == len(config.head_widths) - 1
            name = "fc_out" if last else f"fc{i + 1}"
            self._add(name, Linear(widths[i], widths[i + 1]))
            if not last:
                self._add(f"relu{i + 1}", ReLU())
                self._add(f"drop{i + 1}", Dropout(config.dropout_rate, seed=i))

    def _add(self, name: str, layer: Module) -> None:
        setattr(self, name, layer)
        self.layer_names.append(name)

    def layers(self):
        return [(name, getattr(self, name)) for name in self.layer_names]

    def forward(self, x: Tensor) -> Tensor:
        for _, layer in self.layers():
            x = layer(x)
        return x

    def output_shape(self, shape):
        for _, layer in self.layers():
            shape = layer.output_shape(shape)
        return shape

    def seed_dropout(self, rng: np.random.Generator) -> None:
        for m in self.modules():
            if isinstance(m, Dropout):
                m.rng = np.random.default_rng(rng.integers(2**63))

    def extra_repr(self):
        return self.config.name


def build(config: ModelConfig, seed: int = 0, init: bool = True) -> Model:
    """Build ``config``; ``init=False`` leaves zero weights (cheap, for accounting only)."""
    model = Model(config)
    if init:
        kaiming_init(model, np.random.default_rng(seed))
    return model


# -- accounting -------------------------------------------------------------

def total_parameters(model: Module) -> ParamCount:
    return model.parameter_count()


def count_by_enumeration(model: Module) -> ParamCount:
    """Independent count: multiply out the dimensions of every state tensor."""
    trainable = buffers = 0
    params = {name for name, _ in model.named_parameters()}
    for name, value in model.state_dict().items():
        n = 1
        for d in value.shape:
            n *= int(d)
        if name in params:
            trainable += n
        else:
            buffers += n
    return ParamCount(trainable, buffers)


class ModelSize(NamedTuple):
    bytes: int

    @property
    def mb(self) -> float:
        return self.bytes / 10**6

    @property
    def mib(self) -> float:
        return self.bytes / 2**20

    def __str__(self):
        return f"{self.bytes:,} bytes ({self.mb:.2f} MB, {self.mib:.2f} MiB)"


BYTES_PER_PARAM = 4


def model_size(model_or_count) -> ModelSize:
    """Bytes of 32-bit trainable parameters (running statistics excluded)."""
    if isinstance(model_or_count, Module):
        n = total_parameters(model_or_count).trainable
    elif isinstance(model_or_count, ParamCount):
        n = model_or_count.trainable
    else:
        n = int(model_or_count)
    return ModelSize(BYTES_PER_PARAM * n)


@dataclass
class LayerRow:
    name: str
    kind: str
    output_shape: tuple[int, ...]
    trainable: int
    buffers: int
    cumulative: int


@dataclass
class Inspection:
    config: ModelConfig
    rows: list[LayerRow]
    count: ParamCount
    reference: int | None = None

    @property
    def delta(self) -> int | None:
        return None if self.reference is None else self.count.trainable - self.reference

    @property
    def rel_error(self) -> float | None:
        return None if self.reference is None else abs(self.delta) / self.reference

    def checksum_line(self) -> str:
        if self.reference is None:
            return f"total {self.count.trainable:,} (no reference total for {self.config.name!r})"
        status = "MATCH" if self.delta == 0 else "DELTA"
        return (f"{status} total {self.count.trainable:,} vs reference {self.reference:,}: "
                f"delta {self.delta:+,} ({100 * self.rel_error:.4f}%)")

    def to_text(self) -> str:
        out = io.StringIO()
        out.write(f"model {self.config.name}  input {self.config.input_shape}\n")
        out.write(f"{'layer':<10} {'kind':<18} {'output':<16} {'params':>12} {'buffers':>9} {'cumulative':>12}\n")
        for r in self.rows:
            out.write(f"{r.name:<10} {r.kind:<18} {str(r.output_shape):<16} {r.trainable:>12,} "
                      f"{r.buffers:>9,} {r.cumulative:>12,}\n")
        size = model_size(self.count)
        out.write(f"trainable {self.count.trainable:,}  buffers {self.count.buffers:,}  size {size}\n")
        out.write(self.checksum_line() + "\n")
        return out.getvalue()

    def to_json(self) -> dict:
        size = model_size(self.count)
        return {
            "config": dataclasses.asdict(self.config),
            "layers": [dataclasses.asdict(r) for r in self.rows],
            "trainable": self.count.trainable,
            "buffers": self.count.buffers,
            "size_bytes": size.bytes,
            "size_mb": round(size.mb, 2),
            "size_mib": round(size.mib, 2),
            "reference_total": self.reference,
            "delta": self.delta,
            "rel_error": self.rel_error,
        }


def inspect(model: Model, reference: int | None = None) -> Inspection:
    """Per-layer output shape and parameter counts with a running total."""
    if reference is None:
        reference = REFERENCE_TOTALS.get(model.config.name)
    rows, shape, cumulative = [], tuple(model.config.input_shape), 0
    for name, layer in model.layers():
        shape = layer.output_shape(shape)
        c = layer.parameter_count()
        cumulative += c.trainable
        rows.append(LayerRow(name, type(layer).__name__, shape, c.trainable, c.buffers, cumulative))
    return Inspection(model.config, rows, total_parameters(model), reference)


# -- checkpoints ----------------------------------------------------------------

MAGIC = b"KDF1"
VERSION = 1


class CheckpointError(Exception):
    pass


class CorruptHeaderError(CheckpointError):
    pass


class TruncatedPayloadError(CheckpointError):
    pass


class DimensionMismatchError(CheckpointError):
    pass


def _pack_str(text: str) -> bytes:
    raw = text.encode("utf-8")
    return struct.pack("<I", len(raw)) + raw


def dumps(model: Model) -> bytes:
    """Serialize as: magic, u32 version, u32-prefixed config text, u32 tensor count,
    then per tensor a u32-prefixed name, u32 rank, u32 dims and little-endian float32 payload."""
    state = model.state_dict()
    parts = [MAGIC, struct.pack("<I", VERSION), _pack_str(model.config.to_text()), struct.pack("<I", len(state))]
    for name, value in state.items():
        arr = np.asarray(value, dtype="<f4")
        parts.append(_pack_str(name))
        parts.append(struct.pack("<I", arr.ndim) + struct.pack(f"<{arr.ndim}I", *arr.shape))
        parts.append(arr.tobytes(order="C"))
    return b"".join(parts)


class _Reader:
    def __init__(self, data: bytes):
        self.data, self.pos = data, 0

    def take(self, n: int, what: str) -> bytes:
        if self.pos + n > len(self.data):
            raise TruncatedPayloadError(f"truncated payload: need {n} bytes for {what} at offset {self.pos}, "
                                        f"file has {len(self.data) - self.pos} left")
        chunk = self.data[self.pos:self.pos + n]
        self.pos += n
        return chunk

    def u32(self, what: str) -> int:
        return struct.unpack("<I", self.take(4, what))[0]

    def text(self, what: str) -> str:
        return self.take(self.u32(what), what).decode("utf-8")


def loads(data: bytes) -> Model:
    """Rebuild a model from checkpoint bytes; it comes back in eval mode."""
    if len(data) < 8 or data[:4] != MAGIC:
        raise CorruptHeaderError(f"corrupt header: expected magic {MAGIC!r}, got {data[:4]!r}")
    reader = _Reader(data)
    reader.take(4, "magic")
    version = reader.u32("version")
    if version != VERSION:
        raise CorruptHeaderError(f"corrupt header: unsupported checkpoint version {version}")
    try:
        config = ModelConfig.from_text(reader.text("config"))
    except (ConfigError, UnicodeDecodeError) as exc:
        raise CorruptHeaderError(f"corrupt header: unreadable config ({exc})") from exc
    model = build(config, init=False)
    expected = model.state_dict()
    count = reader.u32("tensor count")
    state = {}
    for _ in range(count):
        name = reader.text("tensor name")
        rank = reader.u32(f"{name} rank")
        dims = struct.unpack(f"<{rank}I", reader.take(4 * rank, f"{name} dims"))
        if name not in expected:
            raise DimensionMismatchError(f"tensor {name!r} is not part of model {config.name!r}")
        if tuple(dims) != expected[name].shape:
            raise DimensionMismatchError(f"tensor {name!r}: checkpoint dims {dims} != model dims {expected[name].shape}")
        n = int(np.prod(dims, dtype=np.int64))
        state[name] = np.frombuffer(reader.take(4 * n, f"{name} payload"), dtype="<f4").reshape(dims).astype(np.float32)
    if set(state) != set(expected):
        missing = sorted(set(expected) - set(state))
        raise DimensionMismatchError(f"checkpoint lacks tensors {missing}")
    if reader.pos != len(data):
        raise CorruptHeaderError(f"{len(data) - reader.pos} trailing bytes after last tensor")
    model.load_state_dict(state)
    return model.eval()


def save(model: Model, path: str | Path) -> Path:
    path = Path(path)
    path.write_bytes(dumps(model))
    return path


def load(path: str | Path) -> Model:
    return loads(Path(path).read_bytes())
