"""
End-to-end network: convolutional stem, class token, position embedding,
the layer stack, final LayerNorm, part pooling and BNNeck heads.
"""

import logging
from dataclasses import dataclass
from typing import List, NamedTuple, Optional, Tuple

import numpy as np

from ohformer.errors import ConfigurationError, ContractError, DimensionError
from ohformer.nn.attention import AttentionCapture
from ohformer.nn.grid import TokenGrid
from ohformer.nn.layers import BatchNorm1d, LayerNorm, conv_weight
from ohformer.nn.oh_layer import FlopCounter, OhLayer
from ohformer.nn.stack import StackSpec
from ohformer.tensor import (
    Module,
    ModuleList,
    Parameter,
    Rng,
    Tensor,
    concat,
    conv2d,
    conv_output_size,
    no_grad,
    relu,
)

logger = logging.getLogger(__name__)

MIN_IMAGE = 10


def stem_grid(height: int, width: int) -> Tuple[int, int]:
    """Token grid produced by the stem: 5x5 stride 5 then 3x3 stride 2, both padded by 1."""
    if height < MIN_IMAGE or width < MIN_IMAGE:
        raise ConfigurationError(f"images must be at least {MIN_IMAGE}x{MIN_IMAGE}, got {height}x{width}")
    h = conv_output_size(conv_output_size(height, 5, 5, 1), 3, 2, 1)
    w = conv_output_size(conv_output_size(width, 5, 5, 1), 3, 2, 1)
    return h, w


def stripe_bounds(rows: int, parts: int) -> List[Tuple[int, int]]:
    """Adaptive row stripes: stripe k covers [floor(k*rows/parts), floor((k+1)*rows/parts))."""
    if not 1 <= parts <= rows:
        raise ConfigurationError(f"cannot split {rows} token rows into {parts} parts")
    return [((k * rows) // parts, ((k + 1) * rows) // parts) for k in range(parts)]


def part_pool(tokens: TokenGrid, parts: int) -> Tensor:
    """Mean of each horizontal stripe of spatial tokens, [B, p, d]."""
    if tokens.has_cls:
        raise ContractError("part pooling needs tokens without the class token")
    batch, channels = tokens.batch, tokens.channels
    grid = tokens.tokens.reshape(batch, tokens.height, tokens.width, channels)
    pooled = [grid[:, lo:hi].mean(axis=(1, 2)).reshape(batch, 1, channels)
              for lo, hi in stripe_bounds(tokens.height, parts)]
    return concat(pooled, axis=1)


class HeadOutput(NamedTuple):
    f_triplet: Tensor
    f_infer: Tensor
    logits: Tensor


class BnNeck(Module):
    """BatchNorm on the feature, then a bias-free classifier."""

    def __init__(self, width: int, classes: int, rng: Rng, momentum: float = 0.1):
        self.bn = BatchNorm1d(width, momentum)
        self.classifier = Parameter(rng.normal(0.0, 0.001, (width, classes)))


def bnneck(feature: Tensor, head: BnNeck) -> HeadOutput:
    f_infer = head.bn(feature)
    return HeadOutput(feature, f_infer, f_infer @ head.classifier)


@dataclass
class ModelOutput:
    z_cls: Tensor  # [B, d]
    parts: Tensor  # [B, p, d]
    grid: Tuple[int, int]
    capture: Optional[AttentionCapture] = None


class OHFormer(Module):
    """
    The full network for one ``StackSpec``.

    Args:
        spec: Architecture, including input size and identity count
        rng: Initialization source
        bn_momentum: Running-statistics momentum of the BNNeck heads
    """

    def __init__(self, spec: StackSpec, rng: Rng, bn_momentum: float = 0.1):
        spec.validate()
        self.spec = spec
        d = spec.width
        self.grid = stem_grid(*spec.input_size)
        if spec.parts > self.grid[0]:
            raise ConfigurationError(f"{spec.parts} parts need at least as many token rows, grid is {self.grid}")
        self.stem1_weight = Parameter(conv_weight(rng, d, 3, 5))
        self.stem1_bias = Parameter(np.zeros(d))
        self.stem2_weight = Parameter(conv_weight(rng, d, d, 3))
        self.stem2_bias = Parameter(np.zeros(d))
        self.cls_token = Parameter(np.zeros((1, 1, d)), decay=False)
        self.pos_embed = Parameter(rng.truncated_normal((1, 1 + self.grid[0] * self.grid[1], d), std=0.02))
        self.layers = ModuleList(
            OhLayer(d, spec.heads, self.grid, rng, order=spec.order_of(i), mode=spec.mode, lrp=spec.lrp,
                    prior_mixing=spec.prior_mixing, prior_axis=spec.prior_axis, tie_vk=spec.tie_vk,
                    deform_depthwise=spec.deform_depthwise, mlp_ratio=spec.mlp_ratio)
            for i in range(spec.layers)
        )
        self.norm = LayerNorm(d)
        self.heads = ModuleList(BnNeck(d, spec.classes, rng, bn_momentum) for _ in range(1 + spec.parts))
        logger.debug("built %d-layer model, grid %dx%d, %d parameters", spec.layers, *self.grid,
                     sum(p.size for p in self.parameters()))

    def stem(self, images: Tensor) -> TokenGrid:
        if images.ndim != 4 or images.shape[1] != 3:
            raise DimensionError("images must be [B, 3, H, W]", images.shape)
        stem_grid(*images.shape[2:])
        x = relu(conv2d(images, self.stem1_weight, stride=5, padding=1, bias=self.stem1_bias))
        x = conv2d(x, self.stem2_weight, stride=2, padding=1, bias=self.stem2_bias)
        return TokenGrid.from_map(x)

    def forward(self, images: Tensor, capture: Optional[AttentionCapture] = None,
                flops: Optional[FlopCounter] = None) -> ModelOutput:
        grid = self.stem(images)
        if grid.shape != self.grid:
            raise DimensionError(f"model expects a {self.grid} token grid", grid.shape)
        batch = grid.batch
        cls = self.cls_token + Tensor(np.zeros((batch, 1, self.spec.width)))
        tokens = concat([cls, grid.tokens], axis=1) + self.pos_embed
        x = TokenGrid(tokens, grid.height, grid.width, True)
        for index, layer in enumerate(self.layers):
            x = layer(x, capture, flops, index)
        x = TokenGrid(self.norm(x.tokens), x.height, x.width, True)
        return ModelOutput(x.cls_token(), part_pool(x.spatial(), self.spec.parts), self.grid, capture)

    __call__ = forward

    def head_outputs(self, out: ModelOutput) -> List[HeadOutput]:
        """BNNeck outputs for the class token, then each part token."""
        features = [out.z_cls] + [out.parts[:, k] for k in range(self.spec.parts)]
        return [bnneck(f, head) for f, head in zip(features, self.heads)]

    def embed(self, images: Tensor) -> np.ndarray:
        """
        Inference embedding [B, (1+p)*d]: BN-ed class token then BN-ed part tokens.

        Raises:
            ContractError: the model is in training mode
        """
        if self.training:
            raise ContractError("embed needs the model in eval mode")
        with no_grad():
            heads = self.head_outputs(self.forward(images))
            return np.concatenate([h.f_infer.data for h in heads], axis=1)
