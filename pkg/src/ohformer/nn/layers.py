"""Small parameterized building blocks shared by the attention layers and heads."""

import math

import numpy as np

from ohformer.tensor import Module, Parameter, Rng, Tensor, batch_norm_1d, gelu, layer_norm


def trunc_normal(rng: Rng, shape, std: float = 0.02) -> np.ndarray:
    return rng.truncated_normal(shape, std=std)


class Linear(Module):
    """``x @ weight + bias`` with weight stored [in, out]."""

    def __init__(self, in_features: int, out_features: int, rng: Rng, bias: bool = True, std: float = 0.02):
        self.weight = Parameter(trunc_normal(rng, (in_features, out_features), std))
        self.bias = Parameter(np.zeros(out_features)) if bias else None

    def __call__(self, x: Tensor) -> Tensor:
        out = x @ self.weight
        return out if self.bias is None else out + self.bias


class LayerNorm(Module):
    def __init__(self, width: int, eps: float = 1e-6):
        self.gamma = Parameter(np.ones(width), decay=False)
        self.beta = Parameter(np.zeros(width), decay=False)
        self.eps = eps

    def __call__(self, x: Tensor) -> Tensor:
        return layer_norm(x, self.gamma, self.beta, self.eps)


class BatchNorm1d(Module):
    def __init__(self, width: int, momentum: float = 0.1, eps: float = 1e-5):
        self.gamma = Parameter(np.ones(width), decay=False)
        self.beta = Parameter(np.zeros(width), decay=False)
        self.register_buffer("running_mean", np.zeros(width, dtype=np.float32))
        self.register_buffer("running_var", np.ones(width, dtype=np.float32))
        self.momentum = momentum
        self.eps = eps

    def __call__(self, x: Tensor) -> Tensor:
        return batch_norm_1d(x, self.gamma, self.beta, self.running_mean, self.running_var,
                             self.training, self.momentum, self.eps)


class FeedForward(Module):
    """Two affine maps around a GELU, hidden width ``ratio * width``."""

    def __init__(self, width: int, ratio: int, rng: Rng):
        self.fc1 = Linear(width, ratio * width, rng)
        self.fc2 = Linear(ratio * width, width, rng)

    def __call__(self, x: Tensor) -> Tensor:
        return self.fc2(gelu(self.fc1(x)))


def conv_weight(rng: Rng, out_channels: int, in_per_group: int, kernel: int) -> np.ndarray:
    fan_in = in_per_group * kernel * kernel
    return rng.normal(0.0, math.sqrt(2.0 / fan_in), (out_channels, in_per_group, kernel, kernel))
