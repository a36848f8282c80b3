"""Dense row-major tensors with reverse-mode automatic differentiation.

Every primitive below computes its forward value with numpy and, when any
input requires a gradient, attaches a :class:`Node` holding the closure that
maps the output gradient back onto the inputs. :func:`backward` orders the
recorded nodes into a :class:`GradTape` and sweeps it once in reverse.
"""

from __future__ import annotations

import threading
from contextlib import contextmanager
from dataclasses import dataclass
from typing import Callable, Sequence

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

DEFAULT_DTYPE = np.float32
CLAMP_EPS = 1e-12

_grad_state = threading.local()


class ShapeError(ValueError):
    """Raised when operand shapes are incompatible for an operation."""


def is_grad_enabled() -> bool:
    return getattr(_grad_state, "enabled", True)


@contextmanager
def no_grad():
    """Disable graph recording in the current thread."""
    previous = is_grad_enabled()
    _grad_state.enabled = False
    try:
        yield
    finally:
        _grad_state.enabled = previous


@contextmanager
def kink_probe():
    """Collect, per ReLU/max-pool call, the distance of its input to the nearest non-differentiable point.

    Gradient checks use it to reject sample points where finite differences would straddle a kink.
    """
    previous = getattr(_grad_state, "kinks", None)
    _grad_state.kinks = record = []
    try:
        yield record
    finally:
        _grad_state.kinks = previous


def _log_kink(distance: float) -> None:
    record = getattr(_grad_state, "kinks", None)
    if record is not None:
        record.append(distance)


class Node:
    __slots__ = ("op", "inputs", "backward_fn")

    def __init__(self, op: str, inputs: tuple, backward_fn: Callable):
        self.op = op
        self.inputs = inputs
        self.backward_fn = backward_fn


class Tensor:
    __slots__ = ("data", "requires_grad", "grad", "node", "name")
    __array_priority__ = 1000

    def __init__(self, data, requires_grad: bool = False, dtype=None, name: str | None = None):
        if isinstance(data, Tensor):
            data = data.data
        self.data = np.asarray(data, dtype=dtype or DEFAULT_DTYPE, order="C")
        self.requires_grad = bool(requires_grad)
        self.grad: np.ndarray | None = None
        self.node: Node | None = None
        self.name = name

    # -- inspection -------------------------------------------------------
    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def size(self) -> int:
        return self.data.size

    @property
    def dtype(self):
        return self.data.dtype

    @property
    def is_leaf(self) -> bool:
        return self.node is None

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        if self.data.size != 1:
            raise ShapeError(f"item(): tensor of shape {self.shape} is not a scalar")
        return float(self.data.reshape(-1)[0])

    def detach(self) -> "Tensor":
        return Tensor(self.data, dtype=self.data.dtype)

    def zero_grad(self) -> None:
        self.grad = None

    def __repr__(self):
        tag = f", name={self.name!r}" if self.name else ""
        return f"Tensor(shape={self.shape}, dtype={self.dtype}, requires_grad={self.requires_grad}{tag})"

    def __len__(self):
        return self.shape[0]

    # -- operators --------------------------------------------------------
    def __add__(self, other):
        return add(self, other)

    def __radd__(self, other):
        return add(other, self)

    def __sub__(self, other):
        return sub(self, other)

    def __rsub__(self, other):
        return sub(other, self)

    def __mul__(self, other):
        return mul(self, other)

    def __rmul__(self, other):
        return mul(other, self)

    def __truediv__(self, other):
        return div(self, other)

    def __rtruediv__(self, other):
        return div(other, self)

    def __neg__(self):
        return neg(self)

    def __matmul__(self, other):
        return matmul(self, other)

    def __pow__(self, exponent):
        return power(self, exponent)

    def sum(self, axis=None, keepdims=False):
        return sum(self, axis=axis, keepdims=keepdims)

    def mean(self, axis=None, keepdims=False):
        return mean(self, axis=axis, keepdims=keepdims)

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)

    def transpose(self, *axes):
        return transpose(self, axes or None)

    def relu(self):
        return relu(self)

    def sigmoid(self):
        return sigmoid(self)

    def exp(self):
        return exp(self)

    def log(self):
        return log(self)

    def backward(self) -> "GradTape":
        return backward(self)


class Parameter(Tensor):
    """A leaf tensor that always participates in gradient computation."""

    __slots__ = ()

    def __init__(self, data, dtype=None, name: str | None = None):
        super().__init__(data, requires_grad=True, dtype=dtype, name=name)


def as_tensor(value, like: Tensor | None = None) -> Tensor:
    if isinstance(value, Tensor):
        return value
    dtype = like.dtype if like is not None else DEFAULT_DTYPE
    return Tensor(np.asarray(value, dtype=dtype), dtype=dtype)


def _result(data: np.ndarray, op: str, inputs: tuple, backward_fn: Callable) -> Tensor:
    out = Tensor.__new__(Tensor)
    out.data = np.asarray(data, order="C")
    out.grad = None
    out.name = None
    track = is_grad_enabled() and any(t.requires_grad for t in inputs)
    out.requires_grad = track
    out.node = Node(op, inputs, backward_fn) if track else None
    return out


def _pair(a, b) -> tuple[Tensor, Tensor]:
    if isinstance(a, Tensor):
        return a, as_tensor(b, like=a)
    b = as_tensor(b)
    return as_tensor(a, like=b), b


def _broadcast_shape(op: str, a: Tensor, b: Tensor) -> tuple[int, ...]:
    try:
        return np.broadcast_shapes(a.shape, b.shape)
    except ValueError:
        raise ShapeError(f"{op}: cannot broadcast shapes {a.shape} and {b.shape}") from None


def unbroadcast(grad: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    """Sum ``grad`` down to ``shape`` along the axes broadcasting expanded."""
    while grad.ndim > len(shape):
        grad = grad.sum(axis=0)
    for axis, n in enumerate(shape):
        if n == 1 and grad.shape[axis] != 1:
            grad = grad.sum(axis=axis, keepdims=True)
    return grad


# -- elementwise ----------------------------------------------------------

def add(a, b) -> Tensor:
    a, b = _pair(a, b)
    _broadcast_shape("add", a, b)

    def backward_fn(g):
        return unbroadcast(g, a.shape), unbroadcast(g, b.shape)

    return _result(a.data + b.data, "add", (a, b), backward_fn)


def sub(a, b) -> Tensor:
    a, b = _pair(a, b)
    _broadcast_shape("sub", a, b)

    def backward_fn(g):
        return unbroadcast(g, a.shape), unbroadcast(-g, b.shape)

    return _result(a.data - b.data, "sub", (a, b), backward_fn)


def mul(a, b) -> Tensor:
    a, b = _pair(a, b)
    _broadcast_shape("mul", a, b)

    def backward_fn(g):
        ga = unbroadcast(g * b.data, a.shape) if a.requires_grad else None
        gb = unbroadcast(g * a.data, b.shape) if b.requires_grad else None
        return ga, gb

    return _result(a.data * b.data, "mul", (a, b), backward_fn)


def _clamp_denominator(x: np.ndarray) -> np.ndarray:
    small = np.abs(x) < CLAMP_EPS
    if not small.any():
        return x
    return np.where(small, np.where(x < 0, -CLAMP_EPS, CLAMP_EPS), x).astype(x.dtype)


def div(a, b) -> Tensor:
    """Elementwise ``a / b`` with ``|b|`` clamped to at least 1e-12."""
    a, b = _pair(a, b)
    _broadcast_shape("div", a, b)
    denom = _clamp_denominator(b.data)
    out = a.data / denom

    def backward_fn(g):
        ga = unbroadcast(g / denom, a.shape) if a.requires_grad else None
        gb = unbroadcast(-g * out / denom, b.shape) if b.requires_grad else None
        return ga, gb

    return _result(out, "div", (a, b), backward_fn)


def neg(a: Tensor) -> Tensor:
    return _result(-a.data, "neg", (a,), lambda g: (-g,))


def power(a: Tensor, exponent: float) -> Tensor:
    if isinstance(exponent, Tensor):
        raise TypeError("power: exponent must be a Python number")
    exponent = float(exponent)
    base = a.data
    if exponent < 0 or not exponent.is_integer():
        base = np.maximum(base, CLAMP_EPS).astype(a.dtype)
    out = base ** a.dtype.type(exponent)

    def backward_fn(g):
        return (g * a.dtype.type(exponent) * base ** a.dtype.type(exponent - 1),)

    return _result(out, "pow", (a,), backward_fn)


def _exp_limit(dtype) -> float:
    return float(np.log(np.finfo(dtype).max)) - 1.0


def exp(a: Tensor) -> Tensor:
    x = np.minimum(a.data, _exp_limit(a.dtype))
    out = np.exp(x)

    def backward_fn(g):
        return (g * out * (a.data <= _exp_limit(a.dtype)),)

    return _result(out, "exp", (a,), backward_fn)


def log(a: Tensor) -> Tensor:
    """Natural log with inputs clamped to at least 1e-12."""
    clamped = np.maximum(a.data, CLAMP_EPS).astype(a.dtype)

    def backward_fn(g):
        return (g / clamped * (a.data >= CLAMP_EPS),)

    return _result(np.log(clamped), "log", (a,), backward_fn)


def relu(a: Tensor) -> Tensor:
    mask = a.data > 0
    if a.size:
        _log_kink(float(np.abs(a.data).min()))
    return _result(a.data * mask, "relu", (a,), lambda g: (g * mask,))


def sigmoid(a: Tensor) -> Tensor:
    out = np.exp(-np.logaddexp(a.dtype.type(0), -a.data))

    def backward_fn(g):
        return (g * out * (1 - out),)

    return _result(out, "sigmoid", (a,), backward_fn)


# -- reductions and shape ---------------------------------------------------

def _normalize_axes(axis, ndim: int) -> tuple[int, ...]:
    if axis is None:
        return tuple(range(ndim))
    if isinstance(axis, int):
        axis = (axis,)
    return tuple(sorted(ax % ndim for ax in axis))


def _expand_reduced(g: np.ndarray, shape: tuple[int, ...], axes: tuple[int, ...], keepdims: bool):
    if not keepdims:
        g = np.expand_dims(g, axes) if axes else g
    return np.broadcast_to(g, shape)


def sum(a: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    axes = _normalize_axes(axis, a.ndim)
    out = a.data.sum(axis=axes, keepdims=keepdims)

    def backward_fn(g):
        return (_expand_reduced(g, a.shape, axes, keepdims),)

    return _result(np.asarray(out, dtype=a.dtype), "sum", (a,), backward_fn)


def mean(a: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    axes = _normalize_axes(axis, a.ndim)
    count = int(np.prod([a.shape[ax] for ax in axes])) if axes else 1
    out = a.data.mean(axis=axes, keepdims=keepdims)

    def backward_fn(g):
        return (_expand_reduced(g / a.dtype.type(count), a.shape, axes, keepdims),)

    return _result(np.asarray(out, dtype=a.dtype), "mean", (a,), backward_fn)


def reshape(a: Tensor, shape) -> Tensor:
    try:
        out = a.data.reshape(shape)
    except ValueError:
        raise ShapeError(f"reshape: cannot reshape {a.shape} to {tuple(shape)}") from None
    return _result(out, "reshape", (a,), lambda g: (g.reshape(a.shape),))


def transpose(a: Tensor, axes=None) -> Tensor:
    axes = tuple(range(a.ndim))[::-1] if axes is None else tuple(axes)
    inverse = tuple(np.argsort(axes))
    out = np.ascontiguousarray(a.data.transpose(axes))
    return _result(out, "transpose", (a,), lambda g: (np.ascontiguousarray(g.transpose(inverse)),))


def broadcast_to(a: Tensor, shape) -> Tensor:
    shape = tuple(shape)
    try:
        out = np.array(np.broadcast_to(a.data, shape))
    except ValueError:
        raise ShapeError(f"broadcast_to: cannot broadcast {a.shape} to {shape}") from None
    return _result(out, "broadcast_to", (a,), lambda g: (unbroadcast(g, a.shape),))


# -- linear algebra -----------------------------------------------------------

def matmul(a, b) -> Tensor:
    a, b = _pair(a, b)
    if a.ndim != 2 or b.ndim != 2 or a.shape[1] != b.shape[0]:
        raise ShapeError(f"matmul: incompatible shapes {a.shape} and {b.shape}")

    def backward_fn(g):
        ga = g @ b.data.T if a.requires_grad else None
        gb = a.data.T @ g if b.requires_grad else None
        return ga, gb

    return _result(a.data @ b.data, "matmul", (a, b), backward_fn)


def linear(x: Tensor, weight: Tensor, bias: Tensor | None = None) -> Tensor:
    """``x @ weight.T + bias`` for ``x`` of shape (N, in), ``weight`` (out, in)."""
    if x.ndim != 2 or weight.ndim != 2 or x.shape[1] != weight.shape[1]:
        raise ShapeError(f"linear: input {x.shape} does not match weight {weight.shape}")
    out = x.data @ weight.data.T
    if bias is not None:
        out = out + bias.data
    inputs = (x, weight) if bias is None else (x, weight, bias)

    def backward_fn(g):
        grads = [g @ weight.data if x.requires_grad else None,
                 g.T @ x.data if weight.requires_grad else None]
        if bias is not None:
            grads.append(g.sum(axis=0))
        return tuple(grads)

    return _result(out, "linear", inputs, backward_fn)


def conv_output_size(size: int, kernel: int, stride: int, padding: int) -> int:
    return (size + 2 * padding - kernel) // stride + 1


def conv2d(x: Tensor, weight: Tensor, bias: Tensor | None = None, stride: int = 1, padding: int = 0) -> Tensor:
    """2-D cross-correlation over NCHW input via an explicit im2col matrix."""
    if x.ndim != 4 or weight.ndim != 4:
        raise ShapeError(f"conv2d: expected 4-D input and weight, got {x.shape} and {weight.shape}")
    n, c, h, w = x.shape
    o, wc, kh, kw = weight.shape
    if c != wc:
        raise ShapeError(f"conv2d: input {x.shape} has {c} channels, weight {weight.shape} expects {wc}")
    ho = conv_output_size(h, kh, stride, padding)
    wo = conv_output_size(w, kw, stride, padding)
    if ho < 1 or wo < 1:
        raise ShapeError(f"conv2d: input {x.shape} too small for kernel {weight.shape} with padding {padding}")

    xp = np.pad(x.data, ((0, 0), (0, 0), (padding, padding), (padding, padding))) if padding else x.data
    windows = sliding_window_view(xp, (kh, kw), axis=(2, 3))[:, :, ::stride, ::stride][:, :, :ho, :wo]
    cols = windows.transpose(0, 2, 3, 1, 4, 5).reshape(n * ho * wo, c * kh * kw)
    w2 = weight.data.reshape(o, -1)
    out = cols @ w2.T
    if bias is not None:
        out += bias.data
    out = out.reshape(n, ho, wo, o).transpose(0, 3, 1, 2)
    inputs = (x, weight) if bias is None else (x, weight, bias)

    def backward_fn(g):
        g2 = g.transpose(0, 2, 3, 1).reshape(-1, o)
        gx = None
        if x.requires_grad:
            gcols = (g2 @ w2).reshape(n, ho, wo, c, kh, kw)
            gxp = np.zeros(xp.shape, dtype=g.dtype)
            h_end, w_end = stride * (ho - 1) + 1, stride * (wo - 1) + 1
            for i in range(kh):
                for j in range(kw):
                    gxp[:, :, i:i + h_end:stride, j:j + w_end:stride] += gcols[:, :, :, :, i, j].transpose(0, 3, 1, 2)
            gx = gxp[:, :, padding:padding + h, padding:padding + w]
        gw = (g2.T @ cols).reshape(weight.shape) if weight.requires_grad else None
        grads = [gx, gw]
        if bias is not None:
            grads.append(g2.sum(axis=0))
        return tuple(grads)

    return _result(out, "conv2d", inputs, backward_fn)


def max_pool2d(x: Tensor, kernel: int = 2) -> Tensor:
    """Non-overlapping max pooling; trailing rows/columns that do not fill a window are dropped."""
    if x.ndim != 4:
        raise ShapeError(f"max_pool2d: expected 4-D input, got {x.shape}")
    n, c, h, w = x.shape
    ho, wo = h // kernel, w // kernel
    if ho < 1 or wo < 1:
        raise ShapeError(f"max_pool2d: input {x.shape} smaller than kernel {kernel}")
    cropped = x.data[:, :, :ho * kernel, :wo * kernel]
    windows = cropped.reshape(n, c, ho, kernel, wo, kernel).transpose(0, 1, 2, 4, 3, 5).reshape(n, c, ho, wo, kernel * kernel)
    idx = windows.argmax(axis=-1)[..., None]
    out = np.take_along_axis(windows, idx, axis=-1)[..., 0]
    if kernel > 1:
        top2 = np.partition(windows, -2, axis=-1)[..., -2:]
        gaps = top2[..., 1] - top2[..., 0]
        # exact ties at zero come from ReLU clamping and carry no gradient
        gaps = gaps[(gaps > 0) | (top2[..., 1] != 0)]
        if gaps.size:
            _log_kink(float(gaps.min()))

    def backward_fn(g):
        gw = np.zeros(windows.shape, dtype=g.dtype)
        np.put_along_axis(gw, idx, g[..., None], axis=-1)
        gw = gw.reshape(n, c, ho, wo, kernel, kernel).transpose(0, 1, 2, 4, 3, 5).reshape(n, c, ho * kernel, wo * kernel)
        gx = np.zeros(x.shape, dtype=g.dtype)
        gx[:, :, :ho * kernel, :wo * kernel] = gw
        return (gx,)

    return _result(out, "max_pool2d", (x,), backward_fn)


def log_softmax(x: Tensor, axis: int = -1) -> Tensor:
    """Numerically stable log-softmax built from recorded primitives."""
    shift = Tensor(x.data.max(axis=axis, keepdims=True), dtype=x.dtype)
    shifted = x - shift
    return shifted - log(sum(exp(shifted), axis=axis, keepdims=True))


def softmax(x: Tensor, axis: int = -1) -> Tensor:
    return exp(log_softmax(x, axis=axis))


# -- backward sweep -----------------------------------------------------------

@dataclass
class GradTape:
    """Recorded non-leaf tensors in topological order (inputs before outputs)."""

    nodes: list

    @classmethod
    def from_output(cls, root: Tensor) -> "GradTape":
        order: list[Tensor] = []
        visited: set[int] = set()
        stack = [(root, False)]
        while stack:
            t, expanded = stack.pop()
            if expanded:
                order.append(t)
                continue
            if id(t) in visited:
                continue
            visited.add(id(t))
            stack.append((t, True))
            for parent in reversed(t.node.inputs):
                if parent.node is not None and id(parent) not in visited:
                    stack.append((parent, False))
        return cls(order)

    def __len__(self):
        return len(self.nodes)

    def ops(self) -> list[str]:
        return [t.node.op for t in self.nodes]

    def release(self) -> None:
        for t in self.nodes:
            t.node = None


def backward(loss: Tensor) -> GradTape:
    """Populate ``.grad`` on every leaf that requires it; consumes the tape."""
    if loss.size != 1:
        raise ShapeError(f"backward: loss must be a scalar, got shape {loss.shape}")
    if loss.node is None:
        if loss.requires_grad:
            _accumulate(loss, np.ones_like(loss.data))
            return GradTape([])
        raise RuntimeError("backward: loss is not connected to any tensor requiring grad (empty or consumed tape)")
    tape = GradTape.from_output(loss)
    pending: dict[int, np.ndarray] = {id(loss): np.ones_like(loss.data)}
    for t in reversed(tape.nodes):
        g = pending.pop(id(t), None)
        if g is None:
            continue
        for parent, pg in zip(t.node.inputs, t.node.backward_fn(g)):
            if pg is None or not parent.requires_grad:
                continue
            if parent.node is None:
                _accumulate(parent, pg)
            elif id(parent) in pending:
                pending[id(parent)] = pending[id(parent)] + pg
            else:
                pending[id(parent)] = pg
    tape.release()
    return tape


def _accumulate(leaf: Tensor, g: np.ndarray) -> None:
    g = np.asarray(g, dtype=leaf.dtype).reshape(leaf.shape)
    leaf.grad = np.array(g) if leaf.grad is None else leaf.grad + g


# -- finite-difference oracle -------------------------------------------------

@dataclass
class GradCheckResult:
    max_rel_error: float
    worst: str
    checked: int

    def ok(self, rtol: float = 1e-4) -> bool:
        return self.max_rel_error <= rtol


def check_gradients(loss_fn: Callable[[], Tensor], tensors: Sequence[Tensor], eps: float = 1e-3,
                    names: Sequence[str] | None = None, extrapolate: bool = True) -> GradCheckResult:
    """Compare analytic gradients of ``loss_fn`` against central differences.

    ``loss_fn`` takes no arguments and closes over ``tensors``; those tensors
    are perturbed in place. Run it in float64 so the oracle has headroom.
    With ``extrapolate`` the central differences at ``eps`` and ``eps/2`` are
    combined (Richardson) so truncation error is O(eps**4) instead of O(eps**2).
    The element-wise error is ``|a - n| / max(|a|, |n|, 1e-6)``.
    """
    names = list(names) if names is not None else [f"input{i}" for i in range(len(tensors))]
    for t in tensors:
        t.grad = None
    backward(loss_fn())
    analytic = [np.zeros(t.shape) if t.grad is None else t.grad.astype(np.float64) for t in tensors]

    def central(flat, i, h):
        orig = flat[i]
        flat[i] = orig + h
        up = float(loss_fn().data)
        flat[i] = orig - h
        down = float(loss_fn().data)
        flat[i] = orig
        return (up - down) / (2 * h)

    worst, worst_err, checked = "", 0.0, 0
    with no_grad():
        for name, t, a in zip(names, tensors, analytic):
            flat = t.data.reshape(-1)
            for i in range(flat.size):
                numeric = central(flat, i, eps)
                if extrapolate:
                    numeric = (4 * central(flat, i, eps / 2) - numeric) / 3
                an = float(a.reshape(-1)[i])
                err = abs(an - numeric) / max(abs(an), abs(numeric), 1e-6)
                checked += 1
                if err > worst_err:
                    worst_err, worst = err, f"{name}[{np.unravel_index(i, t.shape)}]"
    return GradCheckResult(worst_err, worst, checked)
