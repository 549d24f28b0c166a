"""
Local relation perception: the stride-2 bridge between attention orders.

The output is the sum of the selected branches. A variant is a ``+``-joined
list of branch kinds:

- ``DWC``  depthwise 3x3 convolution
- ``NC``   full 3x3 convolution
- ``AP``   3x3 average pooling
- ``MP``   3x3 max pooling
- ``DFC``  deformable 3x3 convolution with learned offsets
- ``None`` identity at full resolution (no downsampling)

Every kind except ``None`` uses kernel 3, stride 2, padding 1, so all
branches land on the same (ceil(h/2), ceil(w/2)) grid.

Offsets are predicted as 18 channels, interleaved (dy, dx) per kernel tap,
taps in row-major order.
"""

from typing import Optional, Tuple

import numpy as np

from ohformer.errors import ConfigurationError, ContractError
from ohformer.nn.grid import TokenGrid
from ohformer.nn.layers import conv_weight
from ohformer.tensor import (
    Module,
    Parameter,
    Rng,
    Tensor,
    avg_pool2d,
    bilinear_sample,
    conv2d,
    conv_output_size,
    max_pool2d,
)

KINDS = ("DWC", "NC", "AP", "MP", "DFC", "None")
DEFAULT_VARIANT = "DWC+DFC"

KERNEL = 3
STRIDE = 2
PADDING = 1


def parse_variant(text: str) -> Tuple[str, ...]:
    """
    Split a variant string into its branch kinds.

    Raises:
        ConfigurationError: unknown kind, repeated kind, or ``None`` combined with another kind
    """
    kinds = tuple(part.strip() for part in text.split("+"))
    for kind in kinds:
        if kind not in KINDS:
            raise ConfigurationError(f"unknown LRP branch {kind!r} in {text!r}; expected one of {', '.join(KINDS)}")
    if len(set(kinds)) != len(kinds):
        raise ConfigurationError(f"LRP variant {text!r} repeats a branch")
    if "None" in kinds and len(kinds) > 1:
        raise ConfigurationError(f"LRP variant {text!r} combines None with a downsampling branch")
    return kinds


def lrp_output_shape(height: int, width: int, variant: str = DEFAULT_VARIANT) -> Tuple[int, int]:
    if parse_variant(variant) == ("None",):
        return height, width
    return conv_output_size(height, KERNEL, STRIDE, PADDING), conv_output_size(width, KERNEL, STRIDE, PADDING)


def _base_grid(out_h: int, out_w: int) -> np.ndarray:
    """Sampling positions of the 9 taps for every output cell, [9, oh, ow, 2] as (y, x)."""
    taps = np.array([(i, j) for i in range(KERNEL) for j in range(KERNEL)], dtype=np.float64)
    rows = np.arange(out_h) * STRIDE - PADDING
    cols = np.arange(out_w) * STRIDE - PADDING
    base = np.empty((KERNEL * KERNEL, out_h, out_w, 2))
    base[..., 0] = taps[:, 0, None, None] + rows[None, :, None]
    base[..., 1] = taps[:, 1, None, None] + cols[None, None, :]
    return base


def deform_conv(x: Tensor, offsets: Tensor, weight: Tensor, bias: Optional[Tensor] = None) -> Tensor:
    """
    Deformable 3x3 stride-2 convolution given precomputed offsets.

    Args:
        x: Input map [B, C, H, W]
        offsets: [B, 18, oh, ow], (dy, dx) per tap
        weight: [O, C, 3, 3] for a full convolution or [C, 1, 3, 3] for a depthwise one
    """
    batch, channels = x.shape[:2]
    out_h, out_w = offsets.shape[2:]
    taps = KERNEL * KERNEL
    base = Tensor(_base_grid(out_h, out_w)[None])
    shifts = offsets.reshape(batch, taps, 2, out_h, out_w).transpose(0, 1, 3, 4, 2)
    coords = (base + shifts).reshape(batch, taps * out_h * out_w, 2)
    sampled = bilinear_sample(x, coords).reshape(batch, channels, taps, out_h * out_w)
    if weight.shape[1] == 1 and weight.shape[0] == channels and channels > 1:
        out = (sampled * weight.reshape(1, channels, taps, 1)).sum(axis=2)
    else:
        out = weight.reshape(weight.shape[0], channels * taps) @ sampled.reshape(batch, channels * taps, out_h * out_w)
    out = out.reshape(batch, weight.shape[0], out_h, out_w)
    if bias is not None:
        out = out + bias.reshape(1, -1, 1, 1)
    return out


class Lrp(Module):
    """
    Parameters of one LRP bridge.

    Args:
        channels: Token width d
        variant: Branch kinds, e.g. ``"DWC+DFC"``
        rng: Initialization source
        deform_depthwise: Use a depthwise main convolution in the deformable branch
    """

    def __init__(self, channels: int, rng: Rng, variant: str = DEFAULT_VARIANT, deform_depthwise: bool = False):
        self.kinds = parse_variant(variant)
        self.variant = "+".join(self.kinds)
        self.channels = channels
        self.deform_depthwise = deform_depthwise
        if "DWC" in self.kinds:
            self.dw_weight = Parameter(conv_weight(rng, channels, 1, KERNEL))
            self.dw_bias = Parameter(np.zeros(channels))
        if "NC" in self.kinds:
            self.nc_weight = Parameter(conv_weight(rng, channels, channels, KERNEL))
            self.nc_bias = Parameter(np.zeros(channels))
        if "DFC" in self.kinds:
            # zero offsets: training starts from a plain strided convolution
            self.offset_weight = Parameter(np.zeros((2 * KERNEL * KERNEL, channels, KERNEL, KERNEL)))
            self.offset_bias = Parameter(np.zeros(2 * KERNEL * KERNEL))
            in_per_group = 1 if deform_depthwise else channels
            self.deform_weight = Parameter(conv_weight(rng, channels, in_per_group, KERNEL))
            self.deform_bias = Parameter(np.zeros(channels))

    @property
    def downsamples(self) -> bool:
        return self.kinds != ("None",)


def deform_branch(x: Tensor, p: Lrp) -> Tensor:
    """Predict offsets from ``x``, sample the taps, apply the deformable weights."""
    if "DFC" not in p.kinds:
        raise ContractError(f"LRP variant {p.variant!r} has no deformable branch")
    offsets = conv2d(x, p.offset_weight, stride=STRIDE, padding=PADDING, bias=p.offset_bias)
    return deform_conv(x, offsets, p.deform_weight, p.deform_bias)


def variant_branch(x: Tensor, kind: str, p: Optional[Lrp] = None) -> Tensor:
    """
    One LRP branch on a [B, d, h, w] map.

    Raises:
        ConfigurationError: unknown kind, or a parameterized kind without parameters
    """
    if kind not in KINDS:
        raise ConfigurationError(f"unknown LRP branch {kind!r}")
    if kind == "None":
        return x
    if kind == "AP":
        return avg_pool2d(x, KERNEL, STRIDE, PADDING)
    if kind == "MP":
        return max_pool2d(x, KERNEL, STRIDE, PADDING)
    if p is None or kind not in p.kinds:
        raise ConfigurationError(f"LRP branch {kind} needs its parameters")
    if kind == "DWC":
        return conv2d(x, p.dw_weight, stride=STRIDE, padding=PADDING, groups=x.shape[1], bias=p.dw_bias)
    if kind == "NC":
        return conv2d(x, p.nc_weight, stride=STRIDE, padding=PADDING, bias=p.nc_bias)
    return deform_branch(x, p)


def lrp(a: TokenGrid, p: Lrp) -> TokenGrid:
    """
    Apply the bridge to a token grid without class token.

    Raises:
        ContractError: the grid still carries a class token
        ConfigurationError: a downsampling variant on a grid smaller than 2x2
    """
    if a.has_cls:
        raise ContractError("lrp needs features without the class token")
    if not p.downsamples:
        return a
    if a.height < 2 or a.width < 2:
        raise ConfigurationError(f"lrp cannot downsample a {a.height}x{a.width} grid")
    x = a.to_map()
    out = None
    for kind in p.kinds:
        branch = variant_branch(x, kind, p)
        out = branch if out is None else out + branch
    return TokenGrid.from_map(out)
