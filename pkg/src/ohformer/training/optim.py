"""SGD with momentum and weight decay, and the cosine learning-rate schedule."""

import math
from collections import OrderedDict
from typing import Dict, Iterable, Optional, Tuple

import numpy as np

from ohformer.errors import ConfigurationError, ContractError
from ohformer.tensor import Parameter


def cosine_lr(step: int, total: int, base_lr: float) -> float:
    """lr_t = base_lr * 0.5 * (1 + cos(pi * t / T))"""
    if total <= 0:
        raise ConfigurationError(f"cosine schedule needs a positive step count, got {total}")
    if not 0 <= step <= total:
        raise ConfigurationError(f"step {step} outside the schedule [0, {total}]")
    return base_lr * 0.5 * (1.0 + math.cos(math.pi * step / total))


def sgd_step(params: Iterable[Tuple[str, Parameter]], state: Dict[str, np.ndarray], lr: float,
             momentum: float, weight_decay: float) -> None:
    """
    v <- momentum * v + (g + wd * theta); theta <- theta - lr * v

    Weight decay applies only to parameters whose ``decay`` flag is set. A
    parameter without a gradient is treated as having a zero gradient.

    Raises:
        ContractError: a gradient's shape differs from its parameter
    """
    for name, p in params:
        grad = np.zeros_like(p.data) if p.grad is None else p.grad
        if grad.shape != p.data.shape:
            raise ContractError(f"gradient of {name} has shape {grad.shape}, parameter {p.data.shape}")
        step = grad + weight_decay * p.data if p.decay and weight_decay else grad
        buf = state.get(name)
        if buf is None:
            buf = np.zeros_like(p.data)
        buf = (momentum * buf + step).astype(p.data.dtype)
        state[name] = buf
        p.data = (p.data - lr * buf).astype(p.data.dtype)


class SGD:
    """
    Momentum SGD over named parameters.

    Args:
        params: ``(name, parameter)`` pairs, e.g. ``model.named_parameters()``
        momentum: Momentum factor
        weight_decay: L2 coefficient for parameters with ``decay`` set
    """

    def __init__(self, params: Iterable[Tuple[str, Parameter]], momentum: float = 0.9, weight_decay: float = 1e-4):
        self.params = list(params)
        self.momentum = momentum
        self.weight_decay = weight_decay
        self.state: "OrderedDict[str, np.ndarray]" = OrderedDict(
            (name, np.zeros_like(p.data)) for name, p in self.params
        )

    def step(self, lr: float) -> None:
        sgd_step(self.params, self.state, lr, self.momentum, self.weight_decay)

    def zero_grad(self) -> None:
        for _, p in self.params:
            p.grad = None

    def state_dict(self) -> "OrderedDict[str, np.ndarray]":
        return OrderedDict(self.state)

    def load_state_dict(self, state: Dict[str, np.ndarray], strict: Optional[bool] = True) -> None:
        names = [name for name, _ in self.params]
        if strict and sorted(state) != sorted(names):
            raise ContractError("optimizer state does not match the parameter set")
        for name, p in self.params:
            if name in state:
                if state[name].shape != p.data.shape:
                    raise ContractError(f"momentum buffer {name} has shape {state[name].shape}")
                self.state[name] = np.array(state[name], dtype=p.data.dtype)
