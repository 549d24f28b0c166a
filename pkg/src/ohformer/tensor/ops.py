"""
Elementwise, shape, reduction and matrix operations.

Importing this module registers the arithmetic operators and methods on
``Tensor`` (``a + b``, ``a @ b``, ``x.sum()``, ``x[idx]`` ...).
"""

import math
from typing import Optional, Sequence, Tuple, Union

import numpy as np

from ohformer.errors import ContractError, DimensionError
from ohformer.tensor.core import Function, Tensor, as_tensor, default_dtype, unbroadcast

Axis = Union[None, int, Tuple[int, ...]]

_GELU_C = math.sqrt(2.0 / math.pi)


class Add(Function):
    def forward(self, a, b):
        self.save_for_backward(a.shape, b.shape)
        return a + b

    def backward(self, grad):
        a_shape, b_shape = self.saved
        return unbroadcast(grad, a_shape), unbroadcast(grad, b_shape)


class Sub(Function):
    def forward(self, a, b):
        self.save_for_backward(a.shape, b.shape)
        return a - b

    def backward(self, grad):
        a_shape, b_shape = self.saved
        return unbroadcast(grad, a_shape), unbroadcast(-grad, b_shape)


class Mul(Function):
    def forward(self, a, b):
        self.save_for_backward(a, b)
        return a * b

    def backward(self, grad):
        a, b = self.saved
        ga = unbroadcast(grad * b, a.shape) if self.needs_input_grad[0] else None
        gb = unbroadcast(grad * a, b.shape) if self.needs_input_grad[1] else None
        return ga, gb


class Div(Function):
    def forward(self, a, b):
        self.save_for_backward(a, b)
        return a / b

    def backward(self, grad):
        a, b = self.saved
        ga = unbroadcast(grad / b, a.shape) if self.needs_input_grad[0] else None
        gb = unbroadcast(-grad * a / (b * b), b.shape) if self.needs_input_grad[1] else None
        return ga, gb


class Neg(Function):
    def forward(self, a):
        return -a

    def backward(self, grad):
        return (-grad,)


class PowConst(Function):
    def forward(self, a, exponent: float):
        self.save_for_backward(a, exponent)
        return a ** exponent

    def backward(self, grad):
        a, exponent = self.saved
        return (grad * exponent * a ** (exponent - 1),)


class Exp(Function):
    def forward(self, a):
        out = np.exp(a)
        self.save_for_backward(out)
        return out

    def backward(self, grad):
        (out,) = self.saved
        return (grad * out,)


class Log(Function):
    def forward(self, a):
        self.save_for_backward(a)
        return np.log(a)

    def backward(self, grad):
        (a,) = self.saved
        return (grad / a,)


class Sqrt(Function):
    def forward(self, a):
        out = np.sqrt(a)
        self.save_for_backward(out)
        return out

    def backward(self, grad):
        (out,) = self.saved
        return (grad * 0.5 / out,)


class Relu(Function):
    def forward(self, a):
        self.save_for_backward(a > 0)
        return np.maximum(a, 0)

    def backward(self, grad):
        (mask,) = self.saved
        return (grad * mask,)


class Gelu(Function):
    """tanh-form GELU."""

    def forward(self, a):
        inner = _GELU_C * (a + 0.044715 * a ** 3)
        t = np.tanh(inner)
        self.save_for_backward(a, t)
        return 0.5 * a * (1.0 + t)

    def backward(self, grad):
        a, t = self.saved
        d_inner = _GELU_C * (1.0 + 3 * 0.044715 * a * a)
        local = 0.5 * (1.0 + t) + 0.5 * a * (1.0 - t * t) * d_inner
        return (grad * local,)


class Sum(Function):
    def forward(self, a, axis: Axis = None, keepdims: bool = False):
        self.save_for_backward(a.shape, axis, keepdims)
        return np.sum(a, axis=axis, keepdims=keepdims)

    def backward(self, grad):
        shape, axis, keepdims = self.saved
        if axis is not None and not keepdims:
            axes = (axis,) if isinstance(axis, int) else axis
            axes = tuple(ax % len(shape) for ax in axes)
            grad = np.expand_dims(grad, axes)
        return (np.broadcast_to(grad, shape).copy(),)


class Max(Function):
    def forward(self, a, axis: Axis = None, keepdims: bool = False):
        out = np.max(a, axis=axis, keepdims=True)
        mask = (a == out).astype(a.dtype)
        # ties share the gradient evenly
        self.save_for_backward(mask / mask.sum(axis=axis, keepdims=True), axis, keepdims)
        return out if keepdims else np.squeeze(out, axis=axis)

    def backward(self, grad):
        share, axis, keepdims = self.saved
        if axis is not None and not keepdims:
            axes = (axis,) if isinstance(axis, int) else axis
            grad = np.expand_dims(grad, tuple(ax % share.ndim for ax in axes))
        elif axis is None and not keepdims:
            grad = np.reshape(grad, (1,) * share.ndim)
        return (share * grad,)


class Reshape(Function):
    def forward(self, a, shape: Tuple[int, ...]):
        self.save_for_backward(a.shape)
        return a.reshape(shape)

    def backward(self, grad):
        (shape,) = self.saved
        return (grad.reshape(shape),)


class Transpose(Function):
    def forward(self, a, axes: Tuple[int, ...]):
        self.save_for_backward(axes)
        return np.transpose(a, axes)

    def backward(self, grad):
        (axes,) = self.saved
        return (np.transpose(grad, np.argsort(axes)),)


class GetItem(Function):
    def forward(self, a, index):
        self.save_for_backward(a.shape, a.dtype, index)
        return np.array(a[index])

    def backward(self, grad):
        shape, dtype, index = self.saved
        out = np.zeros(shape, dtype=dtype)
        np.add.at(out, index, grad)
        return (out,)


class Concat(Function):
    def forward(self, *arrays, axis: int = 0):
        self.save_for_backward(axis, np.cumsum([a.shape[axis] for a in arrays])[:-1])
        return np.concatenate(arrays, axis=axis)

    def backward(self, grad):
        axis, splits = self.saved
        return tuple(np.split(grad, splits, axis=axis))


class Pad2d(Function):
    """Zero padding of the last two axes."""

    def forward(self, a, pad: int):
        self.save_for_backward(pad)
        width = [(0, 0)] * (a.ndim - 2) + [(pad, pad), (pad, pad)]
        return np.pad(a, width)

    def backward(self, grad):
        (pad,) = self.saved
        if pad == 0:
            return (grad,)
        return (grad[..., pad:-pad, pad:-pad],)


class SegmentSum(Function):
    """Sums the positions of one axis that share a segment id."""

    def forward(self, a, segments: np.ndarray, count: int, axis: int):
        order = np.argsort(segments, kind="stable")
        starts = np.searchsorted(segments[order], np.arange(count))
        self.save_for_backward(segments, axis)
        return np.add.reduceat(np.take(a, order, axis=axis), starts, axis=axis)

    def backward(self, grad):
        segments, axis = self.saved
        return (np.take(grad, segments, axis=axis),)


class MatMul(Function):
    def forward(self, a, b):
        self.save_for_backward(a, b)
        return np.matmul(a, b)

    def backward(self, grad):
        a, b = self.saved
        ga = gb = None
        if self.needs_input_grad[0]:
            ga = unbroadcast(np.matmul(grad, np.swapaxes(b, -1, -2)), a.shape)
        if self.needs_input_grad[1]:
            gb = unbroadcast(np.matmul(np.swapaxes(a, -1, -2), grad), b.shape)
        return ga, gb


class Softmax(Function):
    def forward(self, a):
        shifted = a - a.max(axis=-1, keepdims=True)
        e = np.exp(shifted)
        out = e / e.sum(axis=-1, keepdims=True)
        self.save_for_backward(out)
        return out

    def backward(self, grad):
        (out,) = self.saved
        return (out * (grad - (grad * out).sum(axis=-1, keepdims=True)),)


class LogSoftmax(Function):
    def forward(self, a):
        shifted = a - a.max(axis=-1, keepdims=True)
        log_norm = np.log(np.exp(shifted).sum(axis=-1, keepdims=True))
        out = shifted - log_norm
        self.save_for_backward(out)
        return out

    def backward(self, grad):
        (out,) = self.saved
        return (grad - np.exp(out) * grad.sum(axis=-1, keepdims=True),)


def add(a, b) -> Tensor:
    return Add.apply(as_tensor(a), as_tensor(b))


def mul(a, b) -> Tensor:
    return Mul.apply(as_tensor(a), as_tensor(b))


def matmul(a: Tensor, b: Tensor) -> Tensor:
    """
    Batched matrix product ``a[.., m, k] @ b[.., k, n]``.

    Raises:
        DimensionError: inner extents differ or batch extents do not broadcast
    """
    if a.ndim < 2 or b.ndim < 2 or a.shape[-1] != b.shape[-2]:
        raise DimensionError("matmul inner extents differ", a.shape, b.shape)
    try:
        np.broadcast_shapes(a.shape[:-2], b.shape[:-2])
    except ValueError:
        raise DimensionError("matmul batch extents do not broadcast", a.shape, b.shape) from None
    return MatMul.apply(a, b)


def softmax_lastdim(x: Tensor) -> Tensor:
    """Max-stabilized softmax over the last axis."""
    return Softmax.apply(x)


def log_softmax(x: Tensor) -> Tensor:
    return LogSoftmax.apply(x)


def gelu(x: Tensor) -> Tensor:
    return Gelu.apply(x)


def relu(x: Tensor) -> Tensor:
    return Relu.apply(x)


def exp(x: Tensor) -> Tensor:
    return Exp.apply(x)


def log(x: Tensor) -> Tensor:
    return Log.apply(x)


def sqrt(x: Tensor) -> Tensor:
    return Sqrt.apply(x)


def concat(tensors: Sequence[Tensor], axis: int = 0) -> Tensor:
    if len(tensors) == 1:
        return tensors[0]
    return Concat.apply(*tensors, axis=axis)


def segment_sum(x: Tensor, segments: np.ndarray, count: int, axis: int = -1) -> Tensor:
    """
    Sum ``x`` over groups of positions along ``axis``; the output axis has extent ``count``.

    Raises:
        DimensionError: ``segments`` does not label every position of ``axis``
        ContractError: an id in 0..count-1 labels no position, or an id is out of range
    """
    segments = np.asarray(segments, dtype=np.int64)
    axis = axis % x.ndim
    if segments.shape != (x.shape[axis],):
        raise DimensionError("segment ids do not label the summed axis", segments.shape, x.shape)
    if segments.size and (segments.min() < 0 or segments.max() >= count):
        raise ContractError(f"segment ids must lie in 0..{count - 1}")
    if np.bincount(segments, minlength=count).min(initial=1) == 0:
        raise ContractError(f"every segment in 0..{count - 1} needs at least one position")
    return SegmentSum.apply(x, segments=segments, count=count, axis=axis)


def pad2d(x: Tensor, pad: int) -> Tensor:
    return x if pad == 0 else Pad2d.apply(x, pad=pad)


def zeros(shape: Sequence[int], requires_grad: bool = False) -> Tensor:
    return Tensor(np.zeros(shape, dtype=default_dtype()), requires_grad=requires_grad)


def ones(shape: Sequence[int], requires_grad: bool = False) -> Tensor:
    return Tensor(np.ones(shape, dtype=default_dtype()), requires_grad=requires_grad)


def _sum(self: Tensor, axis: Axis = None, keepdims: bool = False) -> Tensor:
    return Sum.apply(self, axis=axis, keepdims=keepdims)


def _mean(self: Tensor, axis: Axis = None, keepdims: bool = False) -> Tensor:
    if axis is None:
        count = self.size
    else:
        axes = (axis,) if isinstance(axis, int) else axis
        count = int(np.prod([self.shape[ax] for ax in axes]))
    return _sum(self, axis, keepdims) * (1.0 / count)


def _max(self: Tensor, axis: Axis = None, keepdims: bool = False) -> Tensor:
    return Max.apply(self, axis=axis, keepdims=keepdims)


def _reshape(self: Tensor, *shape) -> Tensor:
    if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
        shape = tuple(shape[0])
    return Reshape.apply(self, shape=tuple(shape))


def _transpose(self: Tensor, *axes) -> Tensor:
    if not axes:
        axes = tuple(range(self.ndim - 2)) + (self.ndim - 1, self.ndim - 2)
    elif len(axes) == 1 and isinstance(axes[0], (tuple, list)):
        axes = tuple(axes[0])
    return Transpose.apply(self, axes=tuple(axes))


def _pow(self: Tensor, exponent: float) -> Tensor:
    if isinstance(exponent, Tensor):
        raise TypeError("only constant exponents are supported")
    return PowConst.apply(self, exponent=float(exponent))


def _getitem(self: Tensor, index) -> Tensor:
    if isinstance(index, Tensor):
        index = index.data.astype(np.int64)
    return GetItem.apply(self, index=index)


def _register_operators() -> None:
    Tensor.__add__ = lambda self, other: Add.apply(self, as_tensor(other))
    Tensor.__radd__ = lambda self, other: Add.apply(as_tensor(other), self)
    Tensor.__sub__ = lambda self, other: Sub.apply(self, as_tensor(other))
    Tensor.__rsub__ = lambda self, other: Sub.apply(as_tensor(other), self)
    Tensor.__mul__ = lambda self, other: Mul.apply(self, as_tensor(other))
    Tensor.__rmul__ = lambda self, other: Mul.apply(as_tensor(other), self)
    Tensor.__truediv__ = lambda self, other: Div.apply(self, as_tensor(other))
    Tensor.__rtruediv__ = lambda self, other: Div.apply(as_tensor(other), self)
    Tensor.__neg__ = lambda self: Neg.apply(self)
    Tensor.__matmul__ = lambda self, other: matmul(self, as_tensor(other))
    Tensor.__pow__ = _pow
    Tensor.__getitem__ = _getitem
    Tensor.sum = _sum
    Tensor.mean = _mean
    Tensor.max = _max
    Tensor.reshape = _reshape
    Tensor.transpose = _transpose
    Tensor.exp = exp
    Tensor.log = log
    Tensor.sqrt = sqrt


_register_operators()
