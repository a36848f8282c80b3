"""Layer vocabulary for the ResEmoteNet family: conv/BN blocks, squeeze-and-excitation,
residual blocks, pooling, dropout and linear heads."""

from __future__ import annotations

from typing import Iterator, NamedTuple

import numpy as np

from . import tensor as T
from .tensor import Parameter, ShapeError, Tensor


class ChannelMismatchError(ShapeError):
    pass


class ParamCount(NamedTuple):
    trainable: int
    buffers: int

    @property
    def total(self) -> int:
        return self.trainable + self.buffers

    def __add__(self, other):
        return ParamCount(self.trainable + other.trainable, self.buffers + other.buffers)


class Module:
    """Container that registers parameters, buffers and child modules in assignment order."""

    def __init__(self):
        object.__setattr__(self, "_params", {})
        object.__setattr__(self, "_buffers", {})
        object.__setattr__(self, "_modules", {})
        object.__setattr__(self, "training", True)

    def __setattr__(self, name, value):
        if isinstance(value, Parameter):
            self._params[name] = value
        elif isinstance(value, Module):
            self._modules[name] = value
        elif name in self._buffers:
            self._buffers[name] = value
        object.__setattr__(self, name, value)

    def register_buffer(self, name: str, value: np.ndarray) -> None:
        self._buffers[name] = value
        object.__setattr__(self, name, value)

    def __call__(self, x: Tensor) -> Tensor:
        return self.forward(x)

    def forward(self, x: Tensor) -> Tensor:
        raise NotImplementedError

    def output_shape(self, shape: tuple[int, ...]) -> tuple[int, ...]:
        """Per-sample output shape (no batch axis) for a per-sample input shape."""
        return shape

    # -- traversal --
    def children(self) -> Iterator[tuple[str, "Module"]]:
        return iter(self._modules.items())

    def modules(self) -> Iterator["Module"]:
        yield self
        for _, child in self.children():
            yield from child.modules()

    def named_parameters(self, prefix: str = "") -> Iterator[tuple[str, Parameter]]:
        for name, p in self._params.items():
            yield prefix + name, p
        for name, child in self._modules.items():
            yield from child.named_parameters(f"{prefix}{name}.")

    def parameters(self) -> list[Parameter]:
        return [p for _, p in self.named_parameters()]

    def named_buffers(self, prefix: str = "") -> Iterator[tuple[str, np.ndarray]]:
        for name, b in self._buffers.items():
            yield prefix + name, b
        for name, child in self._modules.items():
            yield from child.named_buffers(f"{prefix}{name}.")

    def state_dict(self) -> dict[str, np.ndarray]:
        """Parameters then buffers, each in registration order."""
        state = {name: p.data for name, p in self.named_parameters()}
        state.update(self.named_buffers())
        return state

    def load_state_dict(self, state: dict[str, np.ndarray]) -> None:
        own = self.state_dict()
        missing = set(own) - set(state)
        unexpected = set(state) - set(own)
        if missing or unexpected:
            raise KeyError(f"state mismatch: missing {sorted(missing)}, unexpected {sorted(unexpected)}")
        for name, value in state.items():
            if own[name].shape != value.shape:
                raise ShapeError(f"{name}: expected shape {own[name].shape}, got {value.shape}")
        for name, p in self.named_parameters():
            p.data = np.array(state[name], dtype=p.dtype)
        self._load_buffers(state, "")

    def _load_buffers(self, state, prefix):
        for name in list(self._buffers):
            setattr(self, name, np.array(state[prefix + name], dtype=self._buffers[name].dtype))
        for name, child in self._modules.items():
            child._load_buffers(state, f"{prefix}{name}.")

    def parameter_count(self) -> ParamCount:
        trainable = int(np.sum([p.size for p in self.parameters()], dtype=np.int64))
        buffers = int(np.sum([b.size for _, b in self.named_buffers()], dtype=np.int64))
        return ParamCount(trainable, buffers)

    # -- mode and dtype --
    def train(self, mode: bool = True) -> "Module":
        for m in self.modules():
            object.__setattr__(m, "training", mode)
        return self

    def eval(self) -> "Module":
        return self.train(False)

    def zero_grad(self) -> None:
        for p in self.parameters():
            p.grad = None

    def astype(self, dtype) -> "Module":
        for p in self.parameters():
            p.data = p.data.astype(dtype)
            p.grad = None
        for m in self.modules():
            for name, b in list(m._buffers.items()):
                setattr(m, name, b.astype(dtype))
        return self

    def extra_repr(self) -> str:
        return ""

    def __repr__(self):
        return f"{type(self).__name__}({self.extra_repr()})"


def _check_channels(module: Module, x: Tensor, expected: int) -> None:
    if x.ndim != 4:
        raise ShapeError(f"{module!r}: expected (batch, channel, height, width) input, got shape {x.shape}")
    if x.shape[1] != expected:
        raise ChannelMismatchError(f"{module!r}: expected {expected} input channels, got {x.shape[1]}")


class Conv2d(Module):
    def __init__(self, in_channels: int, out_channels: int, kernel_size: int = 3, stride: int = 1,
                 padding: int = 0, bias: bool = True):
        super().__init__()
        self.in_channels, self.out_channels = in_channels, out_channels
        self.kernel_size, self.stride, self.padding = kernel_size, stride, padding
        self.weight = Parameter(np.zeros((out_channels, in_channels, kernel_size, kernel_size)))
        self.bias = Parameter(np.zeros(out_channels)) if bias else None

    def forward(self, x):
        _check_channels(self, x, self.in_channels)
        return T.conv2d(x, self.weight, self.bias, self.stride, self.padding)

    def output_shape(self, shape):
        _, h, w = shape
        k, s, p = self.kernel_size, self.stride, self.padding
        return (self.out_channels, T.conv_output_size(h, k, s, p), T.conv_output_size(w, k, s, p))

    def extra_repr(self):
        return f"{self.in_channels}, {self.out_channels}, k={self.kernel_size}, s={self.stride}, p={self.padding}"


class BatchNorm2d(Module):
    """Batch statistics in training mode, running statistics in eval mode."""

    def __init__(self, channels: int, eps: float = 1e-5, momentum: float = 0.1):
        super().__init__()
        self.channels, self.eps, self.momentum = channels, eps, momentum
        self.weight = Parameter(np.ones(channels))
        self.bias = Parameter(np.zeros(channels))
        self.register_buffer("running_mean", np.zeros(channels, dtype=np.float32))
        self.register_buffer("running_var", np.ones(channels, dtype=np.float32))

    def forward(self, x):
        _check_channels(self, x, self.channels)
        scale = self.weight.reshape(1, -1, 1, 1)
        shift = self.bias.reshape(1, -1, 1, 1)
        if not self.training:
            inv_std = (self.running_var + self.eps) ** -0.5
            mean = Tensor(self.running_mean.reshape(1, -1, 1, 1), dtype=x.dtype)
            return (x - mean) * (scale * Tensor(inv_std.reshape(1, -1, 1, 1), dtype=x.dtype)) + shift
        mu = T.mean(x, axis=(0, 2, 3), keepdims=True)
        centered = x - mu
        var = T.mean(centered * centered, axis=(0, 2, 3), keepdims=True)
        out = centered * (var + self.eps) ** -0.5 * scale + shift
        n = x.size // self.channels
        batch_var = var.data.reshape(-1) * (n / max(n - 1, 1))
        m = self.momentum
        self.running_mean = ((1 - m) * self.running_mean + m * mu.data.reshape(-1)).astype(self.running_mean.dtype)
        self.running_var = ((1 - m) * self.running_var + m * batch_var).astype(self.running_var.dtype)
        return out

    def extra_repr(self):
        return str(self.channels)


class ReLU(Module):
    def forward(self, x):
        return T.relu(x)


class MaxPool2d(Module):
    def __init__(self, kernel_size: int = 2):
        super().__init__()
        self.kernel_size = kernel_size

    def forward(self, x):
        return T.max_pool2d(x, self.kernel_size)

    def output_shape(self, shape):
        c, h, w = shape
        return (c, h // self.kernel_size, w // self.kernel_size)

    def extra_repr(self):
        return f"k={self.kernel_size}"


class AdaptiveAvgPool2d(Module):
    """Average pool to ``output_size``; input sides must be multiples of it."""

    def __init__(self, output_size: int = 1):
        super().__init__()
        self.output_size = output_size

    def forward(self, x):
        n, c, h, w = x.shape
        o = self.output_size
        if h % o or w % o:
            raise ShapeError(f"{self!r}: spatial size {(h, w)} is not a multiple of {o}")
        if o == 1:
            return T.mean(x, axis=(2, 3), keepdims=True)
        blocks = T.reshape(x, (n, c, o, h // o, o, w // o))
        return T.mean(blocks, axis=(3, 5))

    def output_shape(self, shape):
        return (shape[0], self.output_size, self.output_size)

    def extra_repr(self):
        return str(self.output_size)


class Flatten(Module):
    def forward(self, x):
        return T.reshape(x, (x.shape[0], -1))

    def output_shape(self, shape):
        return (int(np.prod(shape)),)


class Linear(Module):
    def __init__(self, in_features: int, out_features: int, bias: bool = True):
        super().__init__()
        self.in_features, self.out_features = in_features, out_features
        self.weight = Parameter(np.zeros((out_features, in_features)))
        self.bias = Parameter(np.zeros(out_features)) if bias else None

    def forward(self, x):
        if x.ndim != 2 or x.shape[1] != self.in_features:
            raise ChannelMismatchError(f"{self!r}: expected (batch, {self.in_features}) input, got {x.shape}")
        return T.linear(x, self.weight, self.bias)

    def output_shape(self, shape):
        return (self.out_features,)

    def extra_repr(self):
        return f"{self.in_features} -> {self.out_features}"


class Dropout(Module):
    """Inverted dropout: survivors are scaled by 1/(1-rate); identity in eval mode."""

    def __init__(self, rate: float = 0.2, seed: int = 0):
        super().__init__()
        if not 0 <= rate < 1:
            raise ValueError(f"dropout rate must be in [0, 1), got {rate}")
        self.rate = rate
        self.rng = np.random.default_rng(seed)

    def forward(self, x):
        if not self.training or self.rate == 0:
            return x
        keep = self.rng.random(x.shape) >= self.rate
        mask = keep.astype(x.dtype) / x.dtype.type(1 - self.rate)
        return x * Tensor(mask, dtype=x.dtype)

    def extra_repr(self):
        return f"rate={self.rate}"


class Sequential(Module):
    def __init__(self, *layers: Module, names: list[str] | None = None):
        super().__init__()
        names = names or [str(i) for i in range(len(layers))]
        for name, layer in zip(names, layers):
            setattr(self, name, layer)

    def forward(self, x):
        for _, layer in self.children():
            x = layer(x)
        return x

    def output_shape(self, shape):
        for _, layer in self.children():
            shape = layer.output_shape(shape)
        return shape


class ConvBlock(Module):
    """Convolution followed by optional batch-norm and optional ReLU."""

    def __init__(self, in_channels: int, out_channels: int, kernel_size: int = 3, stride: int = 1,
                 padding: int | None = None, batchnorm: bool = True, activation: bool = True,
                 bn_eps: float = 1e-5, bn_momentum: float = 0.1):
        super().__init__()
        padding = kernel_size // 2 if padding is None else padding
        self.in_channels, self.out_channels = in_channels, out_channels
        self.activation = activation
        self.conv = Conv2d(in_channels, out_channels, kernel_size, stride, padding)
        self.bn = BatchNorm2d(out_channels, bn_eps, bn_momentum) if batchnorm else None

    @property
    def has_batchnorm(self) -> bool:
        return self.bn is not None

    def forward(self, x):
        x = self.conv(x)
        if self.bn is not None:
            x = self.bn(x)
        return T.relu(x) if self.activation else x

    def output_shape(self, shape):
        return self.conv.output_shape(shape)

    def extra_repr(self):
        return self.conv.extra_repr()


class SEBlock(Module):
    """Squeeze-and-excitation: global average pool, bottleneck pair, sigmoid channel gate."""

    def __init__(self, channels: int, reduction: int = 16, bias: bool = False):
        super().__init__()
        if reduction < 1:
            raise ValueError(f"SE reduction must be >= 1, got {reduction}")
        self.channels, self.reduction = channels, reduction
        self.hidden = max(1, channels // reduction)
        self.squeeze = Linear(channels, self.hidden, bias=bias)
        self.excite = Linear(self.hidden, channels, bias=bias)

    def gate(self, x: Tensor) -> Tensor:
        _check_channels(self, x, self.channels)
        pooled = T.mean(x, axis=(2, 3))
        return T.sigmoid(self.excite(T.relu(self.squeeze(pooled))))

    def forward(self, x):
        g = self.gate(x)
        return x * T.reshape(g, (x.shape[0], self.channels, 1, 1))

    def extra_repr(self):
        return f"{self.channels}, hidden={self.hidden}"


class ResidualBlock(Module):
    """relu(conv-bn-relu-conv-bn(x) + shortcut(x)); projection shortcut when shape changes."""

    def __init__(self, in_channels: int, out_channels: int, stride: int = 1,
                 bn_eps: float = 1e-5, bn_momentum: float = 0.1):
        super().__init__()
        self.in_channels, self.out_channels, self.stride = in_channels, out_channels, stride
        bn = dict(bn_eps=bn_eps, bn_momentum=bn_momentum)
        self.conv1 = ConvBlock(in_channels, out_channels, 3, stride, 1, activation=True, **bn)
        self.conv2 = ConvBlock(out_channels, out_channels, 3, 1, 1, activation=False, **bn)
        self.shortcut = None
        if stride != 1 or in_channels != out_channels:
            self.shortcut = ConvBlock(in_channels, out_channels, 1, stride, 0, activation=False, **bn)

    def forward(self, x):
        _check_channels(self, x, self.in_channels)
        main = self.conv2(self.conv1(x))
        skip = self.shortcut(x) if self.shortcut is not None else x
        return T.relu(main + skip)

    def output_shape(self, shape):
        return self.conv2.output_shape(self.conv1.output_shape(shape))

    def extra_repr(self):
        return f"{self.in_channels} -> {self.out_channels}, stride={self.stride}"


def kaiming_init(module: Module, rng: np.random.Generator) -> None:
    """Fan-in normal init for conv/linear weights; zero biases; unit BN scale."""
    for m in module.modules():
        if isinstance(m, (Conv2d, Linear)):
            w = m.weight
            fan_in = int(np.prod(w.shape[1:]))
            std = np.float32(np.sqrt(2.0 / fan_in))
            w.data = rng.standard_normal(w.shape, dtype=np.float32) * std
            if m.bias is not None:
                m.bias.data = np.zeros(m.bias.shape, dtype=np.float32)
        elif isinstance(m, BatchNorm2d):
            m.weight.data = np.ones(m.channels, dtype=np.float32)
            m.bias.data = np.zeros(m.channels, dtype=np.float32)
