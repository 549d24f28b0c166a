"""P identities x K images batches for in-batch triplet mining."""

from collections import defaultdict
from typing import Dict, List, NamedTuple, Sequence

import numpy as np

from ohformer.errors import ConfigurationError
from ohformer.tensor import Rng


class Batch(NamedTuple):
    indices: np.ndarray  # dataset positions, [P*K]
    labels: np.ndarray  # identity labels, [P*K]


def identity_index(labels: Sequence[int]) -> Dict[int, List[int]]:
    index: Dict[int, List[int]] = defaultdict(list)
    for position, label in enumerate(labels):
        index[int(label)].append(position)
    return dict(index)


def pk_sample(index: Dict[int, List[int]], p: int, k: int, rng: Rng) -> Batch:
    """
    Draw ``p`` distinct identities and ``k`` images of each.

    Identities with fewer than ``k`` images are sampled with replacement.

    Raises:
        ConfigurationError: fewer than ``p`` identities, or ``k < 2``
    """
    if k < 2:
        raise ConfigurationError(f"k_per_id must be >= 2 for triplet mining, got {k}")
    ids = sorted(index)
    if len(ids) < p:
        raise ConfigurationError(f"batch needs {p} identities, dataset has {len(ids)}")
    chosen = [ids[i] for i in rng.permutation(len(ids))[:p]]
    indices, labels = [], []
    for pid in chosen:
        images = index[pid]
        if len(images) >= k:
            picks = [images[i] for i in rng.permutation(len(images))[:k]]
        else:
            picks = [images[i] for i in rng.integers(len(images), k)]
        indices.extend(picks)
        labels.extend([pid] * k)
    return Batch(np.array(indices, dtype=np.int64), np.array(labels, dtype=np.int64))


class PKSampler:
    """Endless PK batch source over a label list."""

    def __init__(self, labels: Sequence[int], p: int, k: int, rng: Rng):
        self.index = identity_index(labels)
        self.p = p
        self.k = k
        self.rng = rng
        if len(self.index) < p:
            raise ConfigurationError(f"batch needs {p} identities, dataset has {len(self.index)}")

    def sample(self) -> Batch:
        return pk_sample(self.index, self.p, self.k, self.rng)

    def __iter__(self):
        while True:
            yield self.sample()
