"""
The omni-relational high-order layer.

Order 1 is pre-norm multi-head self-attention with a residual. Each further
order bridges the previous order's spatial tokens through LRP and attends
again; in ``shared`` mode the scores are not recomputed but pooled from the
first order and mixed with a learned prior. All orders are upsampled back to
the first-order grid, summed, and passed through LayerNorm + FFN with a skip.

An order-1 layer is exactly a pre-norm transformer block.
"""

from collections import defaultdict
from dataclasses import dataclass, field
from typing import Dict, List, Optional, Sequence, Tuple

import numpy as np

from ohformer.errors import ConfigurationError, ContractError, DimensionError
from ohformer.nn.attention import (
    AttentionCapture,
    ProjectionSet,
    attend,
    merge_heads,
    self_attention,
    split_heads,
)
from ohformer.nn.grid import TokenGrid
from ohformer.nn.layers import FeedForward, LayerNorm
from ohformer.nn.lrp import DEFAULT_VARIANT, Lrp, lrp, lrp_output_shape
from ohformer.tensor import (
    Module,
    ModuleList,
    Parameter,
    Rng,
    Tensor,
    concat,
    conv_output_size,
    matmul,
    nearest_index,
    nearest_upsample2d,
    segment_sum,
    zeros,
)

MODES = ("full", "shared")
PRIOR_AXES = ("key", "query", "elementwise")
MAX_ORDER = 4
PRIOR_TAPS = 9


@dataclass
class OrderState:
    """Feature and pre-softmax scores of one order."""

    order: int
    feature: TokenGrid
    scores: Tensor  # [B, h, n, n]

    @property
    def grid(self) -> Tuple[int, int]:
        return self.feature.shape


@dataclass
class FlopCounter:
    """Accumulates attention-score multiply-adds per (layer, order) for one forward pass."""

    entries: List[Tuple[int, int, int]] = field(default_factory=list)

    def add(self, layer: int, order: int, madds: int) -> None:
        self.entries.append((layer, order, int(madds)))

    def total(self, layer: Optional[int] = None) -> int:
        return sum(m for lay, _, m in self.entries if layer is None or lay == layer)

    def by_layer(self) -> Dict[int, int]:
        totals: Dict[int, int] = defaultdict(int)
        for lay, _, madds in self.entries:
            totals[lay] += madds
        return dict(totals)


def first_order_madds(tokens: int, width: int, heads: int) -> int:
    return 2 * tokens * width * width + heads * tokens * tokens * (width // heads)


def high_order_madds(tokens: int, width: int, heads: int, mode: str,
                     prior_mixing: bool = True, prior_axis: str = "key") -> int:
    """
    Cost of producing one higher order's scores.

    Shared scores are block sums of the first order (additions only) scaled once
    per pooled score; a key or query prior then spends PRIOR_TAPS multiply-adds
    per score and an elementwise prior one.
    """
    if mode == "full":
        return 2 * tokens * width * width + heads * tokens * tokens * (width // heads)
    pooled = heads * tokens * tokens
    if not prior_mixing:
        return pooled
    if prior_axis == "elementwise":
        return 2 * pooled
    return (1 + PRIOR_TAPS) * pooled


def score_madds(mode: str, token_counts: Sequence[int], width: int, heads: int,
                prior_mixing: bool = True, prior_axis: str = "key") -> int:
    """
    Analytic score cost of one layer.

    Args:
        token_counts: First-order token count (with class token), then the
            spatial token count of every higher order
    """
    total = first_order_madds(token_counts[0], width, heads)
    for n in token_counts[1:]:
        total += high_order_madds(n, width, heads, mode, prior_mixing, prior_axis)
    return total


def order_grids(grid: Tuple[int, int], order: int, variant: str = DEFAULT_VARIANT) -> List[Tuple[int, int]]:
    """Spatial grids of orders 1..order.

    Raises:
        ConfigurationError: a grid is too small to downsample, naming the order
    """
    grids = [tuple(grid)]
    for i in range(2, order + 1):
        height, width = grids[-1]
        if variant != "None" and (height < 2 or width < 2):
            raise ConfigurationError(f"order {i} needs a {height}x{width} grid downsampled; extents must be >= 2")
        grids.append(lrp_output_shape(height, width, variant))
    return grids


def layer_token_counts(grid: Tuple[int, int], order: int, variant: str = DEFAULT_VARIANT) -> List[int]:
    grids = order_grids(grid, order, variant)
    return [1 + grids[0][0] * grids[0][1]] + [h * w for h, w in grids[1:]]


def _halvings(src: Tuple[int, int], dst: Tuple[int, int]) -> bool:
    current = tuple(src)
    while True:
        if current == tuple(dst):
            return True
        if current[0] < 2 and current[1] < 2:
            return False
        nxt = (conv_output_size(current[0], 3, 2, 1), conv_output_size(current[1], 3, 2, 1))
        if nxt == current:
            return False
        current = nxt


def block_cells(src: Tuple[int, int], dst: Tuple[int, int]) -> np.ndarray:
    """Coarse cell of every fine token under the nearest-index map, both grids row-major."""
    rows = nearest_index(src[0], dst[0])
    cols = nearest_index(src[1], dst[1])
    return (rows[:, None] * dst[1] + cols[None, :]).reshape(-1)


def pooling_matrix(src: Tuple[int, int], dst: Tuple[int, int]) -> np.ndarray:
    """[n', n] block-mean matrix from fine tokens to the coarse cells of the nearest-index map."""
    cell = block_cells(src, dst)
    pool = np.zeros((dst[0] * dst[1], cell.size))
    pool[cell, np.arange(cell.size)] = 1.0
    return pool / pool.sum(axis=1, keepdims=True)


def share_scores(s1: Tensor, src: Tuple[int, int], dst: Tuple[int, int]) -> Tensor:
    """
    Pool first-order spatial scores [B, h, n, n] onto a coarser grid.

    Both axes are block-averaged: block sums over the query and key cells,
    then one scale per pooled score. Softmax is left to the consumer.

    Raises:
        ConfigurationError: ``dst`` is not reachable from ``src`` by repeated halving
        DimensionError: the score block does not match ``src``
    """
    n = src[0] * src[1]
    if s1.shape[-1] != n or s1.shape[-2] != n:
        raise DimensionError(f"spatial scores do not match grid {src[0]}x{src[1]}", s1.shape)
    if tuple(dst) == tuple(src):
        return s1
    if not _halvings(src, dst):
        raise ConfigurationError(f"grid {dst[0]}x{dst[1]} is not reachable by halving {src[0]}x{src[1]}")
    cells = block_cells(src, dst)
    count = dst[0] * dst[1]
    sizes = np.bincount(cells, minlength=count).astype(s1.dtype)
    summed = segment_sum(segment_sum(s1, cells, count, axis=-1), cells, count, axis=-2)
    return summed * (1.0 / np.outer(sizes, sizes)).astype(s1.dtype)


def grid_neighbors(grid: Tuple[int, int]) -> Tuple[np.ndarray, np.ndarray]:
    """
    [n, 9] token indices of each cell's 3x3 neighbourhood, and a mask of the ones inside the grid.

    Taps outside the grid point at the cell itself with mask 0.
    """
    height, width = grid
    r, c = np.divmod(np.arange(height * width), width)
    dr, dc = np.divmod(np.arange(PRIOR_TAPS), 3)
    rows = r[:, None] + dr[None, :] - 1
    cols = c[:, None] + dc[None, :] - 1
    inside = (rows >= 0) & (rows < height) & (cols >= 0) & (cols < width)
    index = np.where(inside, rows * width + cols, np.arange(height * width)[:, None])
    return index, inside


class LocalPrior(Module):
    """
    Learned square prior over one order's tokens, supported on each cell's 3x3 grid neighbourhood.

    Stored as its taps: on the key axis tap ``t`` of column ``k`` is the entry
    ``W[neighbors[k, t], k]``; on the query axis it is ``W[k, neighbors[k, t]]``.
    Identity at initialization.
    """

    def __init__(self, grid: Tuple[int, int]):
        self.grid = tuple(grid)
        self.neighbors, self.inside = grid_neighbors(self.grid)
        taps = np.zeros(self.neighbors.shape)
        taps[:, PRIOR_TAPS // 2] = 1.0
        self.taps = Parameter(taps)

    @property
    def extent(self) -> int:
        return self.neighbors.shape[0]

    def weights(self) -> Tensor:
        return self.taps * self.inside.astype(self.taps.dtype)

    def dense(self, axis: str = "key") -> np.ndarray:
        """The [n, n] matrix this prior stands for on ``axis``."""
        w = self.weights().data
        out = np.zeros((self.extent, self.extent), dtype=w.dtype)
        own = np.repeat(np.arange(self.extent)[:, None], PRIOR_TAPS, axis=1)
        if axis == "key":
            np.add.at(out, (self.neighbors, own), w)
        else:
            np.add.at(out, (own, self.neighbors), w)
        return out

    def __call__(self, s: Tensor, axis: str = "key") -> Tensor:
        if s.ndim != 4:
            raise DimensionError("a local prior mixes [B, h, n, n] scores", s.shape)
        w = self.weights()
        if axis == "key":
            gathered = s[:, :, :, self.neighbors]  # [B, h, n, n, 9]
            return (gathered * w).sum(axis=-1)
        if axis == "query":
            gathered = s[:, :, self.neighbors, :]  # [B, h, n, 9, n]
            return (gathered * w.reshape(self.extent, PRIOR_TAPS, 1)).sum(axis=-2)
        raise ConfigurationError(f"a local prior mixes along the key or query axis, not {axis!r}")


def prior_mix(s_shared: Tensor, w_prior, axis: str = "key") -> Tensor:
    """
    Re-weight shared scores with a learned prior.

    ``key``: S W, ``query``: W S, ``elementwise``: S * W. ``w_prior`` is a dense
    [n', n'] tensor or a ``LocalPrior`` of extent n'.
    """
    n = s_shared.shape[-1]
    if axis not in PRIOR_AXES:
        raise ConfigurationError(f"unknown prior axis {axis!r}; expected one of {', '.join(PRIOR_AXES)}")
    if isinstance(w_prior, LocalPrior):
        if w_prior.extent != n:
            raise DimensionError("prior extent differs from the shared scores", (w_prior.extent,), s_shared.shape)
        return w_prior(s_shared, axis)
    if w_prior.shape != (n, n):
        raise DimensionError("prior extent differs from the shared scores", w_prior.shape, s_shared.shape)
    if axis == "key":
        return matmul(s_shared, w_prior)
    if axis == "query":
        return matmul(w_prior, s_shared)
    return s_shared * w_prior


class OhOrder(Module):
    """Parameters of one order >= 2: its LRP bridge, projections and optional prior."""

    def __init__(self, order: int, width: int, heads: int, grid: Tuple[int, int], rng: Rng, mode: str,
                 variant: str, prior_mixing: bool, prior_axis: str, tie_vk: bool, deform_depthwise: bool):
        self.order = order
        self.lrp = Lrp(width, rng, variant, deform_depthwise)
        self.grid = tuple(grid)
        shared = mode == "shared"
        self.proj = ProjectionSet(width, heads, rng, query_key=not shared, tie_vk=tie_vk)
        self.prior = None
        if shared and prior_mixing:
            n = grid[0] * grid[1]
            self.prior = Parameter(np.ones((n, n))) if prior_axis == "elementwise" else LocalPrior(grid)


class OhLayer(Module):
    """
    One layer of the stack; ``order == 1`` is a plain pre-norm transformer block.

    Args:
        width: Token width d
        heads: Attention heads
        grid: Spatial grid of the first order
        rng: Initialization source
        order: Highest order m, 1..4
        mode: ``full`` recomputes scores at each order, ``shared`` pools them from order 1
        lrp: LRP variant string
        prior_mixing: Shared mode only; learn a prior on top of the pooled scores
        prior_axis: ``key``, ``query`` or ``elementwise``
        tie_vk: Full mode only; values through the key projection
        deform_depthwise: Depthwise main convolution in the deformable branch
        mlp_ratio: FFN hidden width multiplier
    """

    def __init__(self, width: int, heads: int, grid: Tuple[int, int], rng: Rng, order: int = 1,
                 mode: str = "full", lrp: str = DEFAULT_VARIANT, prior_mixing: bool = True,
                 prior_axis: str = "key", tie_vk: bool = False, deform_depthwise: bool = False,
                 mlp_ratio: int = 4):
        if not 1 <= order <= MAX_ORDER:
            raise ConfigurationError(f"order must be in 1..{MAX_ORDER}, got {order}")
        if mode not in MODES:
            raise ConfigurationError(f"unknown attention mode {mode!r}; expected full or shared")
        if prior_axis not in PRIOR_AXES:
            raise ConfigurationError(f"unknown prior axis {prior_axis!r}")
        if tie_vk and mode == "shared" and order > 1:
            raise ConfigurationError("tie_vk applies to full mode only")
        self.order = order
        self.mode = mode
        self.grid = tuple(grid)
        self.prior_mixing = prior_mixing
        self.prior_axis = prior_axis
        self.variant = lrp
        self.norm1 = LayerNorm(width)
        self.attn = ProjectionSet(width, heads, rng)
        self.orders = ModuleList()
        grids = order_grids(grid, order, lrp)
        for i in range(2, order + 1):
            self.orders.append(OhOrder(i, width, heads, grids[i - 1], rng, mode, lrp,
                                       prior_mixing, prior_axis, tie_vk, deform_depthwise))
        self.norm2 = LayerNorm(width)
        self.ffn = FeedForward(width, mlp_ratio, rng)

    @property
    def width(self) -> int:
        return self.attn.width

    @property
    def heads(self) -> int:
        return self.attn.heads

    def token_counts(self) -> List[int]:
        return layer_token_counts(self.grid, self.order, self.variant)

    def score_madds(self, mode: Optional[str] = None) -> int:
        return score_madds(mode or self.mode, self.token_counts(), self.width, self.heads,
                           self.prior_mixing, self.prior_axis)

    def __call__(self, x: TokenGrid, capture: Optional[AttentionCapture] = None,
                 flops: Optional[FlopCounter] = None, index: int = 0) -> TokenGrid:
        return oh_layer(x, self, capture, flops, index)


def first_order(x: TokenGrid, layer: OhLayer, capture: Optional[AttentionCapture] = None) -> OrderState:
    """Pre-norm attention over all tokens plus the residual input."""
    if not x.has_cls:
        raise ContractError("the first order needs the class token")
    result = self_attention(layer.norm1(x.tokens), layer.attn)
    if capture is not None:
        capture.emit(1, result.scores, result.weights, x.shape, True)
    feature = TokenGrid(x.tokens + result.output, x.height, x.width, True)
    return OrderState(1, feature, result.scores)


def high_order_step(prev: OrderState, layer: OhLayer, first: OrderState,
                    capture: Optional[AttentionCapture] = None) -> OrderState:
    """
    Order ``prev.order + 1``: LRP bridge, then attention with own or shared scores.

    Raises:
        ConfigurationError: the previous grid is too small to downsample
    """
    order = prev.order + 1
    params: OhOrder = layer.orders[order - 2]
    source = prev.feature.spatial()
    if params.lrp.downsamples and (source.height < 2 or source.width < 2):
        raise ConfigurationError(f"order {order}: cannot downsample a {source.height}x{source.width} grid")
    bridged = lrp(source, params.lrp)

    if layer.mode == "full":
        result = self_attention(bridged.tokens, params.proj)
        s, weights, out = result.scores, result.weights, result.output
    else:
        spatial = first.scores[:, :, 1:, 1:]
        s = share_scores(spatial, first.grid, bridged.shape)
        if params.prior is not None:
            s = prior_mix(s, params.prior, layer.prior_axis)
        v = split_heads(params.proj.project_value(bridged.tokens), params.proj.heads)
        heads_out, weights = attend(s, v)
        out = params.proj.out(merge_heads(heads_out))

    if capture is not None:
        capture.emit(order, s, weights, bridged.shape, False)
    return OrderState(order, TokenGrid(out, bridged.height, bridged.width, False), s)


def fuse(states: Sequence[OrderState], layer: OhLayer) -> TokenGrid:
    """
    Upsample every higher order onto the first-order grid, sum, then LayerNorm + FFN with a skip.

    Raises:
        ContractError: states out of order or with grids that cannot map onto order 1
    """
    first = states[0]
    if first.order != 1 or not first.feature.has_cls:
        raise ContractError("fusion needs the first order, with its class token, first")
    height, width = first.grid
    summed = first.feature.tokens
    for expected, state in enumerate(states[1:], start=2):
        if state.order != expected or state.feature.has_cls:
            raise ContractError(f"order states out of sequence at order {state.order}")
        if state.grid[0] > height or state.grid[1] > width:
            raise ContractError(f"order {state.order} grid {state.grid} exceeds the first-order grid")
        up = TokenGrid.from_map(nearest_upsample2d(state.feature.to_map(), (height, width))).tokens
        cls_slot = zeros((up.shape[0], 1, up.shape[2]))
        summed = summed + concat([cls_slot, up], axis=1)
    out = summed + layer.ffn(layer.norm2(summed))
    return TokenGrid(out, height, width, True)


def oh_layer(x: TokenGrid, layer: OhLayer, capture: Optional[AttentionCapture] = None,
             flops: Optional[FlopCounter] = None, index: int = 0) -> TokenGrid:
    """First order, orders 2..m, fusion. Score multiply-adds go to ``flops`` when given."""
    if capture is not None:
        capture.layer = index
    first = first_order(x, layer, capture)
    states = [first]
    if flops is not None:
        flops.add(index, 1, first_order_madds(x.tokens.shape[1], layer.width, layer.heads))
    for _ in range(2, layer.order + 1):
        state = high_order_step(states[-1], layer, first, capture)
        states.append(state)
        if flops is not None:
            n = state.grid[0] * state.grid[1]
            flops.add(index, state.order, high_order_madds(
                n, layer.width, layer.heads, layer.mode, layer.prior_mixing, layer.prior_axis))
    return fuse(states, layer)
