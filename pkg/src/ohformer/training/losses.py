"""
Identity loss and batch-hard triplet loss over BNNeck heads.

total = CE(cls) + triplet(cls) + mean over parts of (CE(part) + triplet(part))
"""

from dataclasses import dataclass
from typing import Sequence, Tuple

import numpy as np

from ohformer.errors import ContractError, DimensionError
from ohformer.nn.model import HeadOutput
from ohformer.tensor import Tensor, log_softmax, relu, sqrt

DIST_EPS = 1e-12
_MASK = 1e9


def pairwise_distance(features: Tensor) -> Tensor:
    """Euclidean distances [B, B]; ``DIST_EPS`` under the root keeps the gradient finite at zero."""
    batch, width = features.shape
    diff = features.reshape(batch, 1, width) - features.reshape(1, batch, width)
    return sqrt((diff * diff).sum(axis=-1) + DIST_EPS)


def batch_hard(dist: Tensor, labels: np.ndarray) -> Tuple[Tensor, Tensor]:
    """
    Farthest positive and nearest negative per anchor.

    Raises:
        ContractError: an anchor has no other sample of its identity, or no other identity
    """
    labels = np.asarray(labels)
    same = labels[:, None] == labels[None, :]
    positive = same & ~np.eye(labels.size, dtype=bool)
    negative = ~same
    if not positive.any(axis=1).all():
        raise ContractError("batch-hard mining needs at least two images per identity")
    if not negative.any(axis=1).all():
        raise ContractError("batch-hard mining needs at least two identities")
    dtype = dist.dtype
    pos_penalty = Tensor(((~positive) * _MASK).astype(dtype))
    neg_penalty = Tensor(((~negative) * _MASK).astype(dtype))
    d_p = (dist - pos_penalty).max(axis=1)
    d_n = -((-dist) - neg_penalty).max(axis=1)
    return d_p, d_n


def triplet_loss(d_p: Tensor, d_n: Tensor, margin: float) -> Tensor:
    """mean over anchors of max(0, d_p - d_n + margin)"""
    if d_p.shape != d_n.shape:
        raise DimensionError("positive and negative distances differ", d_p.shape, d_n.shape)
    return relu(d_p - d_n + margin).mean()


def batch_hard_triplet(features: Tensor, labels: np.ndarray, margin: float) -> Tensor:
    d_p, d_n = batch_hard(pairwise_distance(features), labels)
    return triplet_loss(d_p, d_n, margin)


def cross_entropy(logits: Tensor, labels: np.ndarray) -> Tensor:
    """
    Softmax cross-entropy with integer labels, averaged over the batch.

    Raises:
        ContractError: a label is outside the classifier range
    """
    labels = np.asarray(labels, dtype=np.int64)
    classes = logits.shape[-1]
    if labels.size and (labels.min() < 0 or labels.max() >= classes):
        raise ContractError(f"labels must be in [0, {classes}), got range [{labels.min()}, {labels.max()}]")
    picked = log_softmax(logits)[np.arange(labels.size), labels]
    return -picked.mean()


@dataclass
class LossBreakdown:
    total: Tensor
    ce_cls: float
    tri_cls: float
    parts: float


def total_loss(heads: Sequence[HeadOutput], labels: np.ndarray, margin: float) -> LossBreakdown:
    """
    Class-token CE + triplet plus the part-averaged CE + triplet.

    Args:
        heads: Class head first, then one head per part
    """
    if len(heads) < 2:
        raise ContractError("total_loss needs the class head and at least one part head")
    cls = heads[0]
    ce_cls = cross_entropy(cls.logits, labels)
    tri_cls = batch_hard_triplet(cls.f_triplet, labels, margin)
    part_terms = [cross_entropy(h.logits, labels) + batch_hard_triplet(h.f_triplet, labels, margin)
                  for h in heads[1:]]
    part_sum = part_terms[0]
    for term in part_terms[1:]:
        part_sum = part_sum + term
    parts = part_sum * (1.0 / len(part_terms))
    total = ce_cls + tri_cls + parts
    return LossBreakdown(total, ce_cls.item(), tri_cls.item(), parts.item())
