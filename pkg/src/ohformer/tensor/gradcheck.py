"""
Finite-difference gradient oracle.

Compares the reverse-mode gradient of a scalar function with a central
difference computed coordinate by coordinate, accumulating in 64 bits.
"""

import logging
from typing import Callable, Optional, Sequence, Union

import numpy as np

from ohformer.errors import ContractError
from ohformer.tensor.core import Tensor, backward, no_grad

logger = logging.getLogger(__name__)


def default_eps(dtype) -> float:
    return 1e-6 if np.dtype(dtype) == np.float64 else 1e-3


def _evaluate(f: Callable[..., Tensor], tensors: Sequence[Tensor]) -> float:
    out = f(*tensors)
    if out.size != 1:
        raise ContractError(f"finite_diff_check needs a scalar function, got shape {out.shape}")
    return float(np.asarray(out.data, dtype=np.float64).reshape(-1)[0])


def finite_diff_check(f: Callable[..., Tensor], x: Union[Tensor, Sequence[Tensor]],
                      eps: Optional[float] = None) -> float:
    """
    Maximum relative error between analytic and central-difference gradients.

    Args:
        f: Deterministic scalar function, called as ``f(*tensors)``
        x: One tensor or a sequence of tensors to check every coordinate of
        eps: Perturbation; defaults to 1e-6 for 64-bit data and 1e-3 otherwise

    Returns:
        max over coordinates of |analytic - numeric| / max(1, |analytic|, |numeric|)
    """
    tensors = [x] if isinstance(x, Tensor) else list(x)
    for t in tensors:
        t.requires_grad = True
        t.grad = None

    out = f(*tensors)
    backward(out)
    analytic = [np.zeros(t.shape) if t.grad is None else t.grad.astype(np.float64) for t in tensors]

    worst = 0.0
    with no_grad():
        for t, grad in zip(tensors, analytic):
            step = default_eps(t.dtype) if eps is None else eps
            flat = t.data.reshape(-1)
            if not np.shares_memory(flat, t.data):
                raise ContractError("finite_diff_check needs contiguous tensor data")
            for i in range(flat.size):
                original = flat[i]
                flat[i] = original + step
                upper = float(flat[i])
                f_plus = _evaluate(f, tensors)
                flat[i] = original - step
                lower = float(flat[i])
                f_minus = _evaluate(f, tensors)
                flat[i] = original
                numeric = (f_plus - f_minus) / (upper - lower)
                exact = grad.reshape(-1)[i]
                error = abs(exact - numeric) / max(1.0, abs(exact), abs(numeric))
                worst = max(worst, error)
    logger.debug("finite_diff_check over %d tensors: max relative error %.3e", len(tensors), worst)
    return worst
