"""Layer and batch normalization."""

import numpy as np

from ohformer.errors import ConfigurationError, DimensionError
from ohformer.tensor.core import Function, Tensor, unbroadcast


def _normalize_backward(grad_hat: np.ndarray, x_hat: np.ndarray, inv_std: np.ndarray, axis: int) -> np.ndarray:
    n = x_hat.shape[axis]
    total = grad_hat.sum(axis=axis, keepdims=True)
    dot = (grad_hat * x_hat).sum(axis=axis, keepdims=True)
    return inv_std * (grad_hat - total / n - x_hat * dot / n)


class LayerNorm(Function):
    def forward(self, x, gamma, beta, eps: float):
        mean = x.mean(axis=-1, keepdims=True)
        centered = x - mean
        inv_std = 1.0 / np.sqrt((centered * centered).mean(axis=-1, keepdims=True) + eps)
        x_hat = centered * inv_std
        self.save_for_backward(x_hat, inv_std, gamma)
        return x_hat * gamma + beta

    def backward(self, grad):
        x_hat, inv_std, gamma = self.saved
        gx = _normalize_backward(grad * gamma, x_hat, inv_std, axis=-1) if self.needs_input_grad[0] else None
        ggamma = unbroadcast(grad * x_hat, gamma.shape) if self.needs_input_grad[1] else None
        gbeta = unbroadcast(grad, gamma.shape) if self.needs_input_grad[2] else None
        return gx, ggamma, gbeta


def layer_norm(x: Tensor, gamma: Tensor, beta: Tensor, eps: float = 1e-6) -> Tensor:
    """Normalize the last axis to zero mean and unit variance, then scale and shift."""
    if gamma.shape != (x.shape[-1],) or beta.shape != (x.shape[-1],):
        raise DimensionError("layer_norm affine width differs from input", x.shape, gamma.shape)
    if eps <= 0:
        raise ConfigurationError(f"layer_norm eps must be positive, got {eps}")
    return LayerNorm.apply(x, gamma, beta, eps=eps)


class BatchNormTrain(Function):
    def forward(self, x, gamma, beta, eps: float):
        mean = x.mean(axis=0, keepdims=True)
        centered = x - mean
        var = (centered * centered).mean(axis=0, keepdims=True)
        inv_std = 1.0 / np.sqrt(var + eps)
        x_hat = centered * inv_std
        self.save_for_backward(x_hat, inv_std, gamma)
        return x_hat * gamma + beta

    def backward(self, grad):
        x_hat, inv_std, gamma = self.saved
        gx = _normalize_backward(grad * gamma, x_hat, inv_std, axis=0) if self.needs_input_grad[0] else None
        ggamma = (grad * x_hat).sum(axis=0) if self.needs_input_grad[1] else None
        gbeta = grad.sum(axis=0) if self.needs_input_grad[2] else None
        return gx, ggamma, gbeta


def batch_norm_1d(x: Tensor, gamma: Tensor, beta: Tensor, running_mean: np.ndarray, running_var: np.ndarray,
                  training: bool, momentum: float = 0.1, eps: float = 1e-5) -> Tensor:
    """
    Batch normalization over [B, d] features.

    In training mode the batch statistics normalize the input and
    ``running_mean``/``running_var`` are updated in place by an exponential
    moving average (unbiased variance). In eval mode the running statistics
    are used.

    Raises:
        ConfigurationError: fewer than two samples in training mode
    """
    if x.ndim != 2 or gamma.shape != (x.shape[1],):
        raise DimensionError("batch_norm_1d expects [B, d] input and [d] affine", x.shape, gamma.shape)
    if not training:
        inv_std = 1.0 / np.sqrt(running_var + eps)
        scale = gamma * Tensor(inv_std.astype(x.dtype))
        return (x - Tensor(running_mean.astype(x.dtype))) * scale + beta
    batch = x.shape[0]
    if batch < 2:
        raise ConfigurationError(f"batch_norm_1d needs at least 2 samples in training mode, got {batch}")
    out = BatchNormTrain.apply(x, gamma, beta, eps=eps)
    running_mean *= 1.0 - momentum
    running_mean += momentum * x.data.mean(axis=0)
    running_var *= 1.0 - momentum
    running_var += momentum * x.data.var(axis=0) * batch / (batch - 1)
    return out
