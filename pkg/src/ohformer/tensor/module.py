"""
Parameter containers.

A ``Module`` finds its parameters, buffers and children by walking its
attributes in assignment order, which makes the dotted names
(``layers.2.orders.0.lrp.offset_weight``) deterministic.
"""

from collections import OrderedDict
from typing import Dict, Iterable, Iterator, List, Tuple

import numpy as np

from ohformer.errors import ContractError, DimensionError
from ohformer.tensor.core import Tensor


class Parameter(Tensor):
    """
    Trainable tensor.

    Args:
        data: Initial values
        decay: Whether SGD weight decay applies to this parameter
    """

    def __init__(self, data, decay: bool = True):
        super().__init__(data, requires_grad=True)
        self.decay = decay


class Module:
    training = True

    def register_buffer(self, name: str, value: np.ndarray) -> None:
        names = self.__dict__.setdefault("_buffer_names", [])
        if name not in names:
            names.append(name)
        setattr(self, name, value)

    def children(self) -> Iterator[Tuple[str, "Module"]]:
        for name, value in vars(self).items():
            if not name.startswith("_") and isinstance(value, Module):
                yield name, value

    def named_parameters(self, prefix: str = "") -> Iterator[Tuple[str, Parameter]]:
        for name, value in vars(self).items():
            if not name.startswith("_") and isinstance(value, Parameter):
                yield prefix + name, value
        for name, child in self.children():
            yield from child.named_parameters(f"{prefix}{name}.")

    def named_buffers(self, prefix: str = "") -> Iterator[Tuple[str, np.ndarray]]:
        for name in self.__dict__.get("_buffer_names", []):
            yield prefix + name, getattr(self, name)
        for name, child in self.children():
            yield from child.named_buffers(f"{prefix}{name}.")

    def parameters(self) -> List[Parameter]:
        return [p for _, p in self.named_parameters()]

    def zero_grad(self) -> None:
        for p in self.parameters():
            p.grad = None

    def train(self, mode: bool = True) -> "Module":
        self.training = mode
        for _, child in self.children():
            child.train(mode)
        return self

    def eval(self) -> "Module":
        return self.train(False)

    def astype(self, dtype) -> "Module":
        """Convert every parameter and buffer in place (used for 64-bit gradient checks)."""
        for _, p in self.named_parameters():
            p.data = p.data.astype(dtype)
            p.grad = None
        self._cast_buffers(dtype)
        return self

    def _cast_buffers(self, dtype) -> None:
        for name in self.__dict__.get("_buffer_names", []):
            setattr(self, name, getattr(self, name).astype(dtype))
        for _, child in self.children():
            child._cast_buffers(dtype)

    def state_dict(self) -> "OrderedDict[str, np.ndarray]":
        """Parameters in traversal order, followed by buffers."""
        state = OrderedDict((name, p.data) for name, p in self.named_parameters())
        for name, buf in self.named_buffers():
            if name in state:
                raise ContractError(f"duplicate state name {name!r}")
            state[name] = buf
        return state

    def load_state_dict(self, state: Dict[str, np.ndarray]) -> None:
        """
        Copy values into this module.

        Raises:
            ContractError: names missing or unexpected
            DimensionError: a value has the wrong shape
        """
        params = dict(self.named_parameters())
        buffers = dict(self.named_buffers())
        expected = set(params) | set(buffers)
        missing = sorted(expected - set(state))
        unexpected = sorted(set(state) - expected)
        if missing or unexpected:
            raise ContractError(f"state mismatch: missing {missing[:5]}, unexpected {unexpected[:5]}")
        for name, value in state.items():
            target = params[name].data if name in params else buffers[name]
            if target.shape != value.shape:
                raise DimensionError(f"state entry {name!r} has the wrong shape", value.shape, target.shape)
            if name in params:
                params[name].data = np.array(value, dtype=target.dtype)
            else:
                target[...] = value


class ModuleList(Module):
    """Ordered sequence of modules, named by index."""

    def __init__(self, modules: Iterable[Module] = ()):
        self._items: List[Module] = list(modules)

    def children(self) -> Iterator[Tuple[str, Module]]:
        for i, module in enumerate(self._items):
            yield str(i), module

    def append(self, module: Module) -> None:
        self._items.append(module)

    def __getitem__(self, index: int) -> Module:
        return self._items[index]

    def __len__(self) -> int:
        return len(self._items)

    def __iter__(self) -> Iterator[Module]:
        return iter(self._items)
