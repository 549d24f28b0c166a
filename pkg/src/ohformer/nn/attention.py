"""
Scaled dot-product and multi-head self-attention with weight capture.

Heads split the width evenly: d_k = d_v = d / h.
"""

import math
from dataclasses import dataclass, field
from typing import List, NamedTuple, Optional, Tuple

import numpy as np

from ohformer.errors import ConfigurationError, ContractError, DimensionError
from ohformer.nn.layers import Linear
from ohformer.tensor import Module, Rng, Tensor, matmul, softmax_lastdim


@dataclass
class AttentionRecord:
    """One head's attention at one order of one layer, batch axis kept."""

    layer: int
    order: int
    head: int
    weights: np.ndarray  # [B, T', T'], post-softmax
    scores: np.ndarray  # [B, T', T'], pre-softmax
    grid: Tuple[int, int]
    has_cls: bool


@dataclass
class AttentionCapture:
    """Per-forward sink for attention records. ``layer`` is set by the caller before each layer runs."""

    records: List[AttentionRecord] = field(default_factory=list)
    layer: int = 0

    def emit(self, order: int, scores: Tensor, weights: Tensor, grid: Tuple[int, int], has_cls: bool) -> None:
        for head in range(weights.shape[1]):
            self.records.append(AttentionRecord(
                layer=self.layer,
                order=order,
                head=head,
                weights=np.array(weights.data[:, head], dtype=np.float64),
                scores=np.array(scores.data[:, head], dtype=np.float64),
                grid=tuple(grid),
                has_cls=has_cls,
            ))

    def for_layer(self, layer: int) -> List[AttentionRecord]:
        return [r for r in self.records if r.layer == layer]

    def layers(self) -> List[int]:
        return sorted({r.layer for r in self.records})


class ProjectionSet(Module):
    """
    Query/key/value/output projections of one attention order.

    Args:
        width: Token width d
        heads: Head count h; must divide d
        rng: Initialization source
        query_key: Whether this order computes its own scores (False for shared orders)
        tie_vk: Reuse the key projection for values (literal reading of the
            high-order value equation)
    """

    def __init__(self, width: int, heads: int, rng: Rng, query_key: bool = True, tie_vk: bool = False):
        if heads < 1 or width % heads:
            raise ConfigurationError(f"width {width} is not divisible by {heads} heads")
        if tie_vk and not query_key:
            raise ConfigurationError("tie_vk needs a key projection; shared orders have none")
        self.heads = heads
        self.width = width
        self.tie_vk = tie_vk
        self.query = Linear(width, width, rng) if query_key else None
        self.key = Linear(width, width, rng) if query_key else None
        self.value = None if tie_vk else Linear(width, width, rng)
        self.out = Linear(width, width, rng)

    @property
    def head_width(self) -> int:
        return self.width // self.heads

    def project_value(self, x: Tensor) -> Tensor:
        return (self.key if self.tie_vk else self.value)(x)


def split_heads(x: Tensor, heads: int) -> Tensor:
    """[B, T, d] -> [B, h, T, d/h]"""
    batch, tokens, width = x.shape
    return x.reshape(batch, tokens, heads, width // heads).transpose(0, 2, 1, 3)


def merge_heads(x: Tensor) -> Tensor:
    """[B, h, T, d/h] -> [B, T, d]"""
    batch, heads, tokens, head_width = x.shape
    return x.transpose(0, 2, 1, 3).reshape(batch, tokens, heads * head_width)


def _check_width(x: Tensor, proj: ProjectionSet) -> None:
    if x.ndim != 3 or x.shape[-1] != proj.width:
        raise DimensionError("attention input width differs from the projections", x.shape, (proj.width,))


def scores(x: Tensor, proj: ProjectionSet) -> Tensor:
    """Per-head Q K^T / sqrt(d_k), shape [B, h, T, T]."""
    _check_width(x, proj)
    if proj.query is None:
        raise ContractError("projection set has no query/key; its scores come from the first order")
    q = split_heads(proj.query(x), proj.heads)
    k = split_heads(proj.key(x), proj.heads)
    return matmul(q, k.transpose(0, 1, 3, 2)) * (1.0 / math.sqrt(proj.head_width))


def attend(s: Tensor, v: Tensor) -> Tuple[Tensor, Tensor]:
    """Softmax over keys, then the weighted sum of value rows. Returns (output, weights)."""
    if s.ndim != 4 or v.ndim != 4 or s.shape[-1] != v.shape[-2] or s.shape[:2] != v.shape[:2]:
        raise DimensionError("scores and values disagree", s.shape, v.shape)
    weights = softmax_lastdim(s)
    return matmul(weights, v), weights


def apply(s: Tensor, v: Tensor) -> Tensor:
    """softmax(scores) @ v for [B, h, T, T] scores and [B, h, T, d_v] values."""
    return attend(s, v)[0]


class AttentionOutput(NamedTuple):
    output: Tensor  # [B, T, d] after W_O
    scores: Tensor
    weights: Tensor


def self_attention(x: Tensor, proj: ProjectionSet) -> AttentionOutput:
    s = scores(x, proj)
    v = split_heads(proj.project_value(x), proj.heads)
    heads_out, weights = attend(s, v)
    return AttentionOutput(proj.out(merge_heads(heads_out)), s, weights)


def mhsa(x: Tensor, proj: ProjectionSet, capture: Optional[AttentionCapture] = None,
         order: int = 1, grid: Optional[Tuple[int, int]] = None, has_cls: bool = False) -> Tensor:
    """
    Multi-head self-attention without residual or normalization.

    When ``capture`` is given one record per head is emitted, tagged with
    ``order`` and the token ``grid``.
    """
    result = self_attention(x, proj)
    if capture is not None:
        capture.emit(order, result.scores, result.weights, grid or (x.shape[1], 1), has_cls)
    return result.output
