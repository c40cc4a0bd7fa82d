# -*- coding: utf-8 -*-
"""
Autograd Tensor Engine
======================
Dense float32 tensors with reverse-mode automatic differentiation, sized for
training the small video and skeleton networks of modalbridge on a CPU.

QUICK REFERENCE
---------------
Core types:
    Tensor                  → numpy-backed array + requires_grad + grad
    GradGraph               → topologically ordered ops behind one output
    Function                → base class of every differentiable op

Differentiable ops:
    add, sub, multiply, divide, matmul, dot, conv3d, relu, log,
    softmax, log_softmax, l2_norm, sum_axis, mean_axis, reshape,
    transpose, concat, stack, max_pool3d, global_avg_pool

Training helpers:
    backward(loss)          → populate .grad on everything reachable
    zero_grad(params)       → drop accumulated gradients
    sgd_step(params, ...)   → momentum SGD with L2 weight decay
    cross_entropy(logits, labels)
    gradcheck(fn, arrays)   → analytic vs central-difference relative error

Modes:
    no_grad()               → ops record no graph (inference)
    default_dtype(dtype)    → storage dtype for new tensors (float32 default)
    set_debug(True)         → NaN/Inf assertion after every op
                              (also enabled by MODALBRIDGE_DEBUG=1)

Example:
    >>> x = Tensor([1.0, 2.0, 3.0], requires_grad=True)
    >>> backward(sum_axis(x * x))
    >>> x.grad
    array([2., 4., 6.], dtype=float32)
"""

import contextlib
import hashlib
import logging
import os
import threading
from typing import Callable, Dict, Iterable, List, Mapping, Optional, Sequence, Tuple, Union

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

logger = logging.getLogger(__name__)

# ─────────────────────────────────────────────────────────────────────────────
# CONSTANTS
# ─────────────────────────────────────────────────────────────────────────────

# Floor under norms in backward passes so the zero vector gets a zero gradient
NORM_FLOOR = 1e-12

_STATE = threading.local()
_DEBUG = os.environ.get("MODALBRIDGE_DEBUG") == "1"

ArrayLike = Union[np.ndarray, float, int, Sequence[float], Sequence[Sequence[float]]]


# ─────────────────────────────────────────────────────────────────────────────
# ERRORS
# ─────────────────────────────────────────────────────────────────────────────

class ShapeError(ValueError):
    """Operands of an op do not conform."""


class GradientError(RuntimeError):
    """Backward or an optimizer step was asked for something impossible."""


class NonFiniteError(FloatingPointError):
    """A NaN or Inf appeared while debug mode was on."""


# ─────────────────────────────────────────────────────────────────────────────
# MODES
# ─────────────────────────────────────────────────────────────────────────────

def grad_enabled() -> bool:
    return getattr(_STATE, "grad_enabled", True)


def get_default_dtype():
    return getattr(_STATE, "dtype", np.float32)


@contextlib.contextmanager
def no_grad():
    """Run ops without recording a graph."""
    previous = grad_enabled()
    _STATE.grad_enabled = False
    try:
        yield
    finally:
        _STATE.grad_enabled = previous


@contextlib.contextmanager
def default_dtype(dtype):
    """Temporarily store new tensors with `dtype` (float64 for gradient checks)."""
    previous = get_default_dtype()
    _STATE.dtype = dtype
    try:
        yield
    finally:
        _STATE.dtype = previous


def set_debug(enabled: bool) -> None:
    global _DEBUG
    _DEBUG = bool(enabled)


def _check_finite(where: str, array: np.ndarray) -> None:
    if not np.all(np.isfinite(array)):
        raise NonFiniteError(f"{where} produced non-finite values")


# ─────────────────────────────────────────────────────────────────────────────
# TENSOR
# ─────────────────────────────────────────────────────────────────────────────

class Tensor:
    """
    An n-dimensional array that can take part in a differentiation graph.

    Zero-dimensional inputs are stored with shape (1,), so every tensor has
    at least one positive dimension. `grad` is a plain numpy array of the
    same shape once backward has reached this tensor.
    """

    def __init__(self, data: ArrayLike, requires_grad: bool = False, name: Optional[str] = None):
        array = np.asarray(data, dtype=get_default_dtype())
        if array.ndim == 0:
            array = array.reshape(1)
        self.data = array
        self.requires_grad = requires_grad
        self.grad: Optional[np.ndarray] = None
        self.velocity: Optional[np.ndarray] = None  # momentum buffer of sgd_step
        self.name = name
        self._op: Optional["Function"] = None

    @property
    def shape(self) -> Tuple[int, ...]:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def size(self) -> int:
        return self.data.size

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        if self.data.size != 1:
            raise ShapeError(f"item() needs a single-element tensor, got shape {self.shape}")
        return float(self.data.reshape(-1)[0])

    def __repr__(self) -> str:
        label = f" name={self.name}" if self.name else ""
        return f"Tensor(shape={self.shape}{label}, requires_grad={self.requires_grad})"

    # Operators
    def __add__(self, other):
        return add(self, other)

    def __radd__(self, other):
        return add(other, self)

    def __sub__(self, other):
        return sub(self, other)

    def __rsub__(self, other):
        return sub(other, self)

    def __mul__(self, other):
        return multiply(self, other)

    def __rmul__(self, other):
        return multiply(other, self)

    def __truediv__(self, other):
        return divide(self, other)

    def __rtruediv__(self, other):
        return divide(other, self)

    def __neg__(self):
        return Neg.apply(self)

    def __matmul__(self, other):
        return matmul(self, other)

    # Method forms
    def sum(self, axis=None, keepdims: bool = False) -> "Tensor":
        return sum_axis(self, axis=axis, keepdims=keepdims)

    def mean(self, axis=None, keepdims: bool = False) -> "Tensor":
        return mean_axis(self, axis=axis, keepdims=keepdims)

    def reshape(self, *shape) -> "Tensor":
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)

    def relu(self) -> "Tensor":
        return relu(self)

    def backward(self) -> None:
        backward(self)


def as_tensor(value: Union[Tensor, ArrayLike]) -> Tensor:
    """Wrap constants; tensors pass through untouched."""
    if isinstance(value, Tensor):
        return value
    return Tensor(value, requires_grad=False)


# ─────────────────────────────────────────────────────────────────────────────
# GRAPH
# ─────────────────────────────────────────────────────────────────────────────

class Function:
    """
    Base class of differentiable operations.

    `forward` receives the raw arrays of the inputs and returns the output
    array; `backward` receives dL/d(output) and returns one gradient (or None)
    per input, already in that input's shape or broadcast-compatible with it.
    """

    name = "op"

    def __init__(self, *inputs: Tensor):
        self.inputs = inputs

    def forward(self, *arrays: np.ndarray, **kwargs) -> np.ndarray:
        raise NotImplementedError(f"{type(self).__name__}.forward")

    def backward(self, grad: np.ndarray) -> Tuple[Optional[np.ndarray], ...]:
        raise NotImplementedError(f"{type(self).__name__}.backward")

    @classmethod
    def apply(cls, *inputs: Tensor, **kwargs) -> Tensor:
        fn = cls(*inputs)
        out_data = fn.forward(*(t.data for t in inputs), **kwargs)
        if _DEBUG:
            _check_finite(cls.name, out_data)
        requires_grad = grad_enabled() and any(t.requires_grad for t in inputs)
        out = Tensor(out_data, requires_grad=requires_grad)
        if requires_grad:
            out._op = fn
        return out


def unbroadcast(grad: np.ndarray, shape: Tuple[int, ...]) -> np.ndarray:
    """Sum a broadcast gradient back down to `shape`."""
    if grad.shape == shape:
        return grad
    while grad.ndim > len(shape):
        grad = grad.sum(axis=0)
    for axis, size in enumerate(shape):
        if size == 1 and grad.shape[axis] != 1:
            grad = grad.sum(axis=axis, keepdims=True)
    return grad.reshape(shape)


class GradGraph:
    """
    The operations that produced one output, inputs-first.

    Built by an iterative depth-first walk from the output; every node
    appears once, after all of its inputs.
    """

    def __init__(self, output: Tensor):
        self.output = output
        self.nodes: List[Tensor] = []
        seen = set()
        stack: List[Tuple[Tensor, bool]] = [(output, False)]
        while stack:
            node, expanded = stack.pop()
            if expanded:
                self.nodes.append(node)
                continue
            if id(node) in seen:
                continue
            seen.add(id(node))
            stack.append((node, True))
            if node._op is not None:
                for parent in reversed(node._op.inputs):
                    if parent.requires_grad and id(parent) not in seen:
                        stack.append((parent, False))

    @property
    def operations(self) -> List[Function]:
        return [node._op for node in self.nodes if node._op is not None]

    def __len__(self) -> int:
        return len(self.operations)

    def run_backward(self) -> None:
        pending: Dict[int, np.ndarray] = {id(self.output): np.ones_like(self.output.data)}
        for node in reversed(self.nodes):
            grad = pending.pop(id(node), None)
            if grad is None:
                continue
            if node.grad is None:
                node.grad = grad.copy()
            else:
                node.grad += grad
            op = node._op
            if op is None:
                continue
            input_grads = op.backward(grad)
            for parent, parent_grad in zip(op.inputs, input_grads):
                if parent_grad is None or not parent.requires_grad:
                    continue
                parent_grad = unbroadcast(parent_grad, parent.shape)
                key = id(parent)
                if key in pending:
                    pending[key] = pending[key] + parent_grad
                else:
                    pending[key] = parent_grad
            if _DEBUG:
                for parent_grad in input_grads:
                    if parent_grad is not None:
                        _check_finite(f"{op.name} backward", parent_grad)


def backward(loss: Tensor) -> None:
    """
    Backpropagate from a scalar loss of shape (1,).

    Gradients accumulate into `.grad` across calls until zero_grad.
    """
    if loss.shape != (1,):
        raise GradientError(f"backward needs a scalar loss of shape (1,), got shape {loss.shape}")
    if loss._op is None:
        raise GradientError("backward called on a tensor with an empty graph (nothing requires grad)")
    GradGraph(loss).run_backward()


# ─────────────────────────────────────────────────────────────────────────────
# ELEMENTWISE OPS
# ─────────────────────────────────────────────────────────────────────────────

def _broadcast_shape(op: str, a: np.ndarray, b: np.ndarray) -> Tuple[int, ...]:
    try:
        return np.broadcast_shapes(a.shape, b.shape)
    except ValueError:
        raise ShapeError(f"{op}: shapes {a.shape} and {b.shape} do not broadcast") from None


class Add(Function):
    name = "add"

    def forward(self, a, b):
        _broadcast_shape(self.name, a, b)
        return a + b

    def backward(self, grad):
        return grad, grad


class Sub(Function):
    name = "sub"

    def forward(self, a, b):
        _broadcast_shape(self.name, a, b)
        return a - b

    def backward(self, grad):
        return grad, -grad


class Mul(Function):
    name = "multiply"

    def forward(self, a, b):
        _broadcast_shape(self.name, a, b)
        self.a, self.b = a, b
        return a * b

    def backward(self, grad):
        return grad * self.b, grad * self.a


class Div(Function):
    name = "divide"

    def forward(self, a, b):
        _broadcast_shape(self.name, a, b)
        self.a, self.b = a, b
        return a / b

    def backward(self, grad):
        return grad / self.b, -grad * self.a / (self.b * self.b)


class Neg(Function):
    name = "neg"

    def forward(self, a):
        return -a

    def backward(self, grad):
        return (-grad,)


class ReLU(Function):
    name = "relu"

    def forward(self, a):
        self.mask = a > 0
        return np.where(self.mask, a, 0).astype(a.dtype)

    def backward(self, grad):
        return (grad * self.mask,)


class Log(Function):
    name = "log"

    def forward(self, a):
        self.a = a
        return np.log(a)

    def backward(self, grad):
        return (grad / self.a,)


def add(a, b) -> Tensor:
    return Add.apply(as_tensor(a), as_tensor(b))


def sub(a, b) -> Tensor:
    return Sub.apply(as_tensor(a), as_tensor(b))


def multiply(a, b) -> Tensor:
    return Mul.apply(as_tensor(a), as_tensor(b))


def divide(a, b) -> Tensor:
    return Div.apply(as_tensor(a), as_tensor(b))


def relu(a: Tensor) -> Tensor:
    return ReLU.apply(as_tensor(a))


def log(a: Tensor) -> Tensor:
    return Log.apply(as_tensor(a))


# ─────────────────────────────────────────────────────────────────────────────
# REDUCTIONS
# ─────────────────────────────────────────────────────────────────────────────

def _normalize_axes(axis, ndim: int) -> Tuple[int, ...]:
    if axis is None:
        return tuple(range(ndim))
    if isinstance(axis, int):
        axis = (axis,)
    axes = []
    for ax in axis:
        if not -ndim <= ax < ndim:
            raise ShapeError(f"axis {ax} out of range for a {ndim}-d tensor")
        axes.append(ax % ndim)
    return tuple(sorted(set(axes)))


def _kept_shape(shape: Tuple[int, ...], axes: Tuple[int, ...]) -> Tuple[int, ...]:
    return tuple(1 if i in axes else size for i, size in enumerate(shape))


class Sum(Function):
    name = "sum"

    def forward(self, a, axis=None, keepdims=False):
        self.in_shape = a.shape
        self.axes = _normalize_axes(axis, a.ndim)
        return np.sum(a, axis=self.axes, keepdims=keepdims)

    def backward(self, grad):
        grad = grad.reshape(_kept_shape(self.in_shape, self.axes))
        return (np.broadcast_to(grad, self.in_shape).copy(),)


class Mean(Function):
    name = "mean"

    def forward(self, a, axis=None, keepdims=False):
        self.in_shape = a.shape
        self.axes = _normalize_axes(axis, a.ndim)
        self.count = int(np.prod([a.shape[ax] for ax in self.axes]))
        return np.mean(a, axis=self.axes, keepdims=keepdims)

    def backward(self, grad):
        grad = grad.reshape(_kept_shape(self.in_shape, self.axes)) / self.count
        return (np.broadcast_to(grad, self.in_shape).copy(),)


class L2Norm(Function):
    name = "l2_norm"

    def forward(self, a, axis=-1, keepdims=False):
        self.a = a
        self.axes = _normalize_axes(axis, a.ndim)
        self.norm = np.sqrt(np.sum(a * a, axis=self.axes, keepdims=True))
        return self.norm if keepdims else np.squeeze(self.norm, axis=self.axes)

    def backward(self, grad):
        grad = grad.reshape(self.norm.shape)
        return (grad * self.a / np.maximum(self.norm, NORM_FLOOR),)


def sum_axis(a: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    """Sum over `axis` (all axes when None; a full reduction has shape (1,))."""
    return Sum.apply(as_tensor(a), axis=axis, keepdims=keepdims)


def mean_axis(a: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    return Mean.apply(as_tensor(a), axis=axis, keepdims=keepdims)


def l2_norm(a: Tensor, axis=-1, keepdims: bool = False) -> Tensor:
    return L2Norm.apply(as_tensor(a), axis=axis, keepdims=keepdims)


def global_avg_pool(a: Tensor) -> Tensor:
    """[N, C, *spatial] → [N, C], averaging every axis after the channels."""
    if a.ndim < 3:
        raise ShapeError(f"global_avg_pool needs [N, C, ...], got shape {a.shape}")
    return mean_axis(a, axis=tuple(range(2, a.ndim)))


# ─────────────────────────────────────────────────────────────────────────────
# LINEAR ALGEBRA
# ─────────────────────────────────────────────────────────────────────────────

class MatMul(Function):
    name = "matmul"

    def forward(self, a, b):
        if a.ndim < 2 or b.ndim < 2 or a.shape[-1] != b.shape[-2]:
            raise ShapeError(f"matmul: shapes {a.shape} and {b.shape} do not contract")
        try:
            np.broadcast_shapes(a.shape[:-2], b.shape[:-2])
        except ValueError:
            raise ShapeError(f"matmul: batch dims of {a.shape} and {b.shape} do not broadcast") from None
        self.a, self.b = a, b
        return a @ b

    def backward(self, grad):
        return grad @ np.swapaxes(self.b, -1, -2), np.swapaxes(self.a, -1, -2) @ grad


class Dot(Function):
    name = "dot"

    def forward(self, a, b):
        if a.ndim != 1 or a.shape != b.shape:
            raise ShapeError(f"dot: needs two equal-length vectors, got {a.shape} and {b.shape}")
        self.a, self.b = a, b
        return np.dot(a, b).reshape(1)

    def backward(self, grad):
        return grad * self.b, grad * self.a


def matmul(a, b) -> Tensor:
    return MatMul.apply(as_tensor(a), as_tensor(b))


def dot(a, b) -> Tensor:
    return Dot.apply(as_tensor(a), as_tensor(b))


# ─────────────────────────────────────────────────────────────────────────────
# SHAPE OPS
# ─────────────────────────────────────────────────────────────────────────────

class Reshape(Function):
    name = "reshape"

    def forward(self, a, shape):
        self.in_shape = a.shape
        try:
            # Always a copy: outputs never alias parameter storage
            return np.array(a.reshape(shape))
        except ValueError:
            raise ShapeError(f"reshape: cannot view {a.shape} as {tuple(shape)}") from None

    def backward(self, grad):
        return (grad.reshape(self.in_shape),)


class Transpose(Function):
    name = "transpose"

    def forward(self, a, axes):
        if sorted(axes) != list(range(a.ndim)):
            raise ShapeError(f"transpose: axes {tuple(axes)} invalid for shape {a.shape}")
        self.axes = tuple(axes)
        return np.ascontiguousarray(np.transpose(a, self.axes))

    def backward(self, grad):
        return (np.transpose(grad, np.argsort(self.axes)),)


class Concat(Function):
    name = "concat"

    def forward(self, *arrays, axis=0):
        first = arrays[0]
        axis = axis % first.ndim
        for other in arrays[1:]:
            if other.ndim != first.ndim or any(
                other.shape[i] != first.shape[i] for i in range(first.ndim) if i != axis
            ):
                raise ShapeError(f"concat: shapes {first.shape} and {other.shape} differ off axis {axis}")
        self.axis = axis
        self.splits = np.cumsum([a.shape[axis] for a in arrays])[:-1]
        return np.concatenate(arrays, axis=axis)

    def backward(self, grad):
        return tuple(np.split(grad, self.splits, axis=self.axis))


def reshape(a: Tensor, shape) -> Tensor:
    return Reshape.apply(as_tensor(a), shape=tuple(shape))


def transpose(a: Tensor, axes) -> Tensor:
    return Transpose.apply(as_tensor(a), axes=tuple(axes))


def concat(tensors: Sequence[Tensor], axis: int = 0) -> Tensor:
    if not tensors:
        raise ShapeError("concat: needs at least one tensor")
    return Concat.apply(*(as_tensor(t) for t in tensors), axis=axis)


def stack(tensors: Sequence[Tensor], axis: int = 0) -> Tensor:
    """Join equal-shaped tensors along a new axis."""
    if not tensors:
        raise ShapeError("stack: needs at least one tensor")
    expanded = []
    for t in tensors:
        t = as_tensor(t)
        new_shape = list(t.shape)
        new_shape.insert(axis % (t.ndim + 1), 1)
        expanded.append(reshape(t, new_shape))
    return concat(expanded, axis=axis)


# ─────────────────────────────────────────────────────────────────────────────
# SOFTMAX FAMILY
# ─────────────────────────────────────────────────────────────────────────────

class Softmax(Function):
    name = "softmax"

    def forward(self, a, axis=-1):
        self.axis = axis
        shifted = a - a.max(axis=axis, keepdims=True)
        e = np.exp(shifted)
        self.out = e / e.sum(axis=axis, keepdims=True)
        return self.out

    def backward(self, grad):
        s = self.out
        return (s * (grad - np.sum(grad * s, axis=self.axis, keepdims=True)),)


class LogSoftmax(Function):
    name = "log_softmax"

    def forward(self, a, axis=-1):
        self.axis = axis
        shifted = a - a.max(axis=axis, keepdims=True)
        self.out = shifted - np.log(np.exp(shifted).sum(axis=axis, keepdims=True))
        return self.out

    def backward(self, grad):
        soft = np.exp(self.out)
        return (grad - soft * np.sum(grad, axis=self.axis, keepdims=True),)


def softmax(a: Tensor, axis: int = -1) -> Tensor:
    return Softmax.apply(as_tensor(a), axis=axis)


def log_softmax(a: Tensor, axis: int = -1) -> Tensor:
    return LogSoftmax.apply(as_tensor(a), axis=axis)


def cross_entropy(logits: Tensor, labels: Sequence[int]) -> Tensor:
    """Mean negative log-likelihood of integer `labels` under [N, K] logits."""
    labels = np.asarray(labels, dtype=np.int64)
    if logits.ndim != 2 or labels.shape != (logits.shape[0],):
        raise ShapeError(f"cross_entropy: logits {logits.shape} vs labels {labels.shape}")
    num_classes = logits.shape[1]
    if labels.size and (labels.min() < 0 or labels.max() >= num_classes):
        raise ShapeError(f"cross_entropy: labels outside [0, {num_classes})")
    one_hot = np.zeros(logits.shape, dtype=get_default_dtype())
    one_hot[np.arange(labels.size), labels] = 1.0
    picked = sum_axis(log_softmax(logits, axis=-1) * one_hot)
    return picked * (-1.0 / labels.size)


# ─────────────────────────────────────────────────────────────────────────────
# 3D CONVOLUTION AND POOLING
# ─────────────────────────────────────────────────────────────────────────────

def _triple(value) -> Tuple[int, int, int]:
    if isinstance(value, int):
        return (value, value, value)
    value = tuple(int(v) for v in value)
    if len(value) != 3:
        raise ShapeError(f"expected an int or a 3-tuple, got {value}")
    return value


def _scatter_windows(windows: np.ndarray, out_shape: Tuple[int, ...], stride) -> np.ndarray:
    """
    Inverse of the sliding-window gather: add every kernel tap of
    `windows` [N, C, To, Ho, Wo, kt, kh, kw] back onto a [N, C, T, H, W] grid.
    """
    st, sh, sw = stride
    _, _, to, ho, wo, kt, kh, kw = windows.shape
    grid = np.zeros(out_shape, dtype=windows.dtype)
    for i in range(kt):
        for j in range(kh):
            for k in range(kw):
                grid[:, :, i:i + st * (to - 1) + 1:st, j:j + sh * (ho - 1) + 1:sh, k:k + sw * (wo - 1) + 1:sw] += \
                    windows[:, :, :, :, :, i, j, k]
    return grid


class Conv3d(Function):
    name = "conv3d"

    def forward(self, x, w, *bias, stride=(1, 1, 1), padding=(0, 0, 0)):
        if x.ndim != 5 or w.ndim != 5 or x.shape[1] != w.shape[1]:
            raise ShapeError(f"conv3d: input {x.shape} and kernel {w.shape} do not conform "
                             "(expected [N, C, T, H, W] and [O, C, kt, kh, kw])")
        if bias and bias[0].shape != (w.shape[0],):
            raise ShapeError(f"conv3d: bias {bias[0].shape} does not match {w.shape[0]} output channels")
        self.stride, self.padding = stride, padding
        pt, ph, pw = padding
        xp = np.pad(x, ((0, 0), (0, 0), (pt, pt), (ph, ph), (pw, pw))) if any(padding) else x
        out_channels, channels, kt, kh, kw = w.shape
        if any(size < k for size, k in zip(xp.shape[2:], (kt, kh, kw))):
            raise ShapeError(f"conv3d: padded input {xp.shape} smaller than kernel {w.shape}")
        st, sh, sw = stride
        windows = sliding_window_view(xp, (kt, kh, kw), axis=(2, 3, 4))[:, :, ::st, ::sh, ::sw]
        n, _, to, ho, wo = windows.shape[:5]
        self.cols = windows.transpose(0, 2, 3, 4, 1, 5, 6, 7).reshape(n * to * ho * wo, -1)
        self.w, self.x_shape, self.xp_shape = w, x.shape, xp.shape
        self.has_bias = bool(bias)
        out = self.cols @ w.reshape(out_channels, -1).T
        if bias:
            out = out + bias[0]
        self.out_dims = (n, to, ho, wo)
        return np.ascontiguousarray(out.reshape(n, to, ho, wo, out_channels).transpose(0, 4, 1, 2, 3))

    def backward(self, grad):
        out_channels, channels, kt, kh, kw = self.w.shape
        n, to, ho, wo = self.out_dims
        g2 = grad.transpose(0, 2, 3, 4, 1).reshape(-1, out_channels)
        dw = (g2.T @ self.cols).reshape(self.w.shape)
        dcols = (g2 @ self.w.reshape(out_channels, -1)).reshape(n, to, ho, wo, channels, kt, kh, kw)
        dxp = _scatter_windows(dcols.transpose(0, 4, 1, 2, 3, 5, 6, 7), self.xp_shape, self.stride)
        pt, ph, pw = self.padding
        _, _, t, h, w = self.x_shape
        dx = dxp[:, :, pt:pt + t, ph:ph + h, pw:pw + w]
        if self.has_bias:
            return dx, dw, g2.sum(axis=0)
        return dx, dw


class MaxPool3d(Function):
    name = "max_pool3d"

    def forward(self, x, kernel=(2, 2, 2), stride=(2, 2, 2)):
        if x.ndim != 5:
            raise ShapeError(f"max_pool3d: expected [N, C, T, H, W], got {x.shape}")
        if any(size < k for size, k in zip(x.shape[2:], kernel)):
            raise ShapeError(f"max_pool3d: input {x.shape} smaller than window {kernel}")
        st, sh, sw = stride
        windows = sliding_window_view(x, kernel, axis=(2, 3, 4))[:, :, ::st, ::sh, ::sw]
        self.win_shape = windows.shape
        flat = windows.reshape(windows.shape[:5] + (-1,))
        self.argmax = flat.argmax(axis=-1)
        self.x_shape, self.stride = x.shape, stride
        return np.take_along_axis(flat, self.argmax[..., None], axis=-1)[..., 0]

    def backward(self, grad):
        routed = np.zeros(self.win_shape[:5] + (int(np.prod(self.win_shape[5:])),), dtype=grad.dtype)
        np.put_along_axis(routed, self.argmax[..., None], grad[..., None], axis=-1)
        return (_scatter_windows(routed.reshape(self.win_shape), self.x_shape, self.stride),)


def conv3d(x: Tensor, weight: Tensor, bias: Optional[Tensor] = None, stride=1, padding=0) -> Tensor:
    """
    3D convolution (cross-correlation) of [N, C, T, H, W] by [O, C, kt, kh, kw].

    `stride` and `padding` are ints or per-axis (t, h, w) triples; padding
    is zeros on both sides.
    """
    inputs = [as_tensor(x), as_tensor(weight)] + ([as_tensor(bias)] if bias is not None else [])
    return Conv3d.apply(*inputs, stride=_triple(stride), padding=_triple(padding))


def max_pool3d(x: Tensor, kernel=2, stride=None) -> Tensor:
    kernel = _triple(kernel)
    stride = kernel if stride is None else _triple(stride)
    return MaxPool3d.apply(as_tensor(x), kernel=kernel, stride=stride)


# ─────────────────────────────────────────────────────────────────────────────
# OPTIMIZATION
# ─────────────────────────────────────────────────────────────────────────────

def zero_grad(params: Iterable[Tensor]) -> None:
    for p in params:
        p.grad = None


def sgd_step(params: Iterable[Tensor], lr: float, momentum: float = 0.0, weight_decay: float = 0.0) -> None:
    """
    One momentum-SGD update per parameter:

        v ← momentum·v + grad + weight_decay·param
        param ← param − lr·v

    The velocity buffer lives on the parameter and survives across calls.
    """
    params = list(params)
    for p in params:
        if p.grad is None:
            label = p.name or f"tensor of shape {p.shape}"
            raise GradientError(f"sgd_step: {label} has no gradient (call backward first)")
    for p in params:
        step = p.grad + weight_decay * p.data
        if p.velocity is None:
            p.velocity = np.zeros_like(p.data)
        p.velocity = (momentum * p.velocity + step).astype(p.data.dtype)
        p.data -= lr * p.velocity


def parameter_digest(params: Mapping[str, Tensor]) -> str:
    """sha256 over names, shapes and raw bytes, in mapping order."""
    h = hashlib.sha256()
    for name, p in params.items():
        h.update(name.encode("utf-8"))
        h.update(str(p.shape).encode("utf-8"))
        h.update(np.ascontiguousarray(p.data).tobytes())
    return h.hexdigest()


# ─────────────────────────────────────────────────────────────────────────────
# GRADIENT CHECKING
# ─────────────────────────────────────────────────────────────────────────────

def relative_error(analytic: np.ndarray, numeric: np.ndarray) -> float:
    diff = np.linalg.norm(analytic - numeric)
    scale = max(np.linalg.norm(analytic) + np.linalg.norm(numeric), NORM_FLOOR)
    return float(diff / scale)


def gradcheck(fn: Callable[..., Tensor], arrays: Sequence[np.ndarray], eps: float = 1e-5, seed: int = 0) -> float:
    """
    Worst relative error between backward and central differences over
    every input of `fn`. Runs in float64; the output is projected onto a
    fixed random direction so the whole Jacobian is exercised.
    """
    with default_dtype(np.float64):
        arrays = [np.array(a, dtype=np.float64) for a in arrays]
        leaves = [Tensor(a.copy(), requires_grad=True) for a in arrays]
        out = fn(*leaves)
        direction = np.random.default_rng(seed).standard_normal(out.shape)
        backward(sum_axis(out * direction))

        def projected(values: List[np.ndarray]) -> float:
            with no_grad():
                return float(np.sum(fn(*(Tensor(v) for v in values)).data * direction))

        worst = 0.0
        for index, leaf in enumerate(leaves):
            numeric = np.zeros_like(arrays[index])
            for flat in range(arrays[index].size):
                shifted = [a.copy() for a in arrays]
                shifted[index].reshape(-1)[flat] += eps
                upper = projected(shifted)
                shifted[index].reshape(-1)[flat] -= 2 * eps
                lower = projected(shifted)
                numeric.reshape(-1)[flat] = (upper - lower) / (2 * eps)
            worst = max(worst, relative_error(leaf.grad, numeric))
        return worst
