"""
Dense tensors with reverse-mode automatic differentiation.

A ``Tensor`` wraps a numpy array. Every differentiable operation is a
``Function`` subclass whose ``apply`` records the operation on the output
tensor, so the graph is the set of ``_ctx`` links reachable from a loss.
``backward`` replays the recorded adjoints in reverse topological order.
"""

import contextlib
from typing import Iterator, List, Optional, Sequence, Tuple

import numpy as np

from ohformer.errors import ContractError

_default_dtype = np.float32
_grad_enabled = True


def default_dtype() -> type:
    """Return the dtype used for newly created tensors."""
    return _default_dtype


@contextlib.contextmanager
def float64_mode() -> Iterator[None]:
    """Create tensors in 64-bit precision inside the block (gradient checking only)."""
    global _default_dtype
    previous = _default_dtype
    _default_dtype = np.float64
    try:
        yield
    finally:
        _default_dtype = previous


def grad_enabled() -> bool:
    return _grad_enabled


@contextlib.contextmanager
def no_grad() -> Iterator[None]:
    """Disable graph recording inside the block."""
    global _grad_enabled
    previous = _grad_enabled
    _grad_enabled = False
    try:
        yield
    finally:
        _grad_enabled = previous


class Tensor:
    """
    N-dimensional float array with optional gradient tracking.

    Args:
        data: Array-like values; cast to the current default dtype
        requires_grad: Whether gradients should accumulate into ``grad``
    """

    __array_priority__ = 100.0

    def __init__(self, data, requires_grad: bool = False):
        self.data = np.asarray(data, dtype=default_dtype())
        if self.data.ndim and 0 in self.data.shape:
            raise ContractError(f"tensor extents must be positive, got {self.data.shape}")
        self.requires_grad = requires_grad
        self.grad: Optional[np.ndarray] = None
        self._ctx: Optional["Function"] = None

    @classmethod
    def _wrap(cls, data: np.ndarray, requires_grad: bool, ctx: Optional["Function"]) -> "Tensor":
        out = cls.__new__(cls)
        out.data = data
        out.requires_grad = requires_grad
        out.grad = None
        out._ctx = ctx
        return out

    def __repr__(self) -> str:
        flag = ", requires_grad=True" if self.requires_grad else ""
        return f"Tensor(shape={self.shape}, dtype={self.data.dtype}{flag})"

    @property
    def shape(self) -> Tuple[int, ...]:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def dtype(self):
        return self.data.dtype

    @property
    def size(self) -> int:
        return self.data.size

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        return float(self.data.reshape(-1)[0])

    def detach(self) -> "Tensor":
        return Tensor._wrap(self.data, False, None)

    def zero_grad(self) -> None:
        self.grad = None

    def backward(self) -> None:
        backward(self)


class Function:
    """
    One differentiable operation.

    Subclasses implement ``forward`` on numpy arrays and ``backward`` that
    maps the output gradient to one gradient (or ``None``) per parent.
    """

    def __init__(self, *parents: Tensor):
        self.parents = parents
        self.needs_input_grad = tuple(p.requires_grad for p in parents)
        self.saved: Tuple = ()

    def save_for_backward(self, *values) -> None:
        self.saved = values

    def forward(self, *arrays: np.ndarray, **kwargs) -> np.ndarray:
        raise NotImplementedError

    def backward(self, grad: np.ndarray) -> Tuple[Optional[np.ndarray], ...]:
        raise NotImplementedError

    @classmethod
    def apply(cls, *parents: Tensor, **kwargs) -> Tensor:
        ctx = cls(*parents)
        data = ctx.forward(*(p.data for p in parents), **kwargs)
        requires_grad = _grad_enabled and any(ctx.needs_input_grad)
        if not requires_grad:
            ctx.saved = ()
        return Tensor._wrap(data, requires_grad, ctx if requires_grad else None)


def as_tensor(value) -> Tensor:
    return value if isinstance(value, Tensor) else Tensor(value)


def unbroadcast(grad: np.ndarray, shape: Sequence[int]) -> np.ndarray:
    """Sum ``grad`` down to ``shape``, undoing numpy broadcasting."""
    extra = grad.ndim - len(shape)
    if extra > 0:
        grad = grad.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, n in enumerate(shape) if n == 1 and grad.shape[i] != 1)
    if axes:
        grad = grad.sum(axis=axes, keepdims=True)
    return grad


def topological_order(root: Tensor) -> List[Tensor]:
    """
    Return the tracked tensors reachable from ``root``, inputs before consumers.

    Iterative post-order walk, so deep graphs do not hit the recursion limit.
    """
    order: List[Tensor] = []
    visited = set()
    stack: List[Tuple[Tensor, bool]] = [(root, False)]
    while stack:
        node, expanded = stack.pop()
        if expanded:
            order.append(node)
            continue
        if id(node) in visited:
            continue
        visited.add(id(node))
        stack.append((node, True))
        if node._ctx is not None:
            for parent in node._ctx.parents:
                if parent.requires_grad and id(parent) not in visited:
                    stack.append((parent, False))
    return order


def backward(loss: Tensor) -> None:
    """
    Accumulate d(loss)/d(t) into ``t.grad`` for every tracked leaf tensor.

    Repeated calls without ``zero_grad`` add to the existing gradients.
    """
    if loss.size != 1:
        raise ContractError(f"backward needs a scalar loss, got shape {loss.shape}")
    if not loss.requires_grad:
        raise ContractError("loss is not connected to any tensor that requires grad")

    order = topological_order(loss)
    grads = {id(loss): np.ones_like(loss.data)}
    for node in reversed(order):
        grad = grads.pop(id(node), None)
        if grad is None:
            continue
        if node._ctx is None:
            grad = np.asarray(grad, dtype=node.data.dtype)
            node.grad = grad.copy() if node.grad is None else node.grad + grad
            continue
        parent_grads = node._ctx.backward(grad)
        for parent, parent_grad in zip(node._ctx.parents, parent_grads):
            if parent_grad is None or not parent.requires_grad:
                continue
            key = id(parent)
            grads[key] = parent_grad if key not in grads else grads[key] + parent_grad
