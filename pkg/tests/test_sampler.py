from collections import Counter

import numpy as np
import numpy.testing as npt
import pytest
from hypothesis import given
from hypothesis import strategies as st

from ohformer.errors import ConfigurationError
from ohformer.tensor import Rng
from ohformer.training.sampler import PKSampler, identity_index, pk_sample


def test_two_identities_fill_the_batch():
    batch = PKSampler([0, 0, 1, 1], p=2, k=2, rng=Rng(0)).sample()
    assert len(batch.indices) == 4
    assert sorted(batch.indices.tolist()) == [0, 1, 2, 3]
    assert Counter(batch.labels.tolist()) == {0: 2, 1: 2}


def test_small_identity_sampled_with_replacement():
    batch = pk_sample(identity_index([5, 6, 6, 6]), p=2, k=2, rng=Rng(1))
    picks = batch.indices[batch.labels == 5]
    npt.assert_array_equal(picks, [0, 0])


def test_same_seed_same_batches():
    labels = [i // 3 for i in range(30)]
    first = PKSampler(labels, 4, 3, Rng(8))
    second = PKSampler(labels, 4, 3, Rng(8))
    for _ in range(5):
        a, b = first.sample(), second.sample()
        npt.assert_array_equal(a.indices, b.indices)
        npt.assert_array_equal(a.labels, b.labels)


def test_too_few_identities():
    with pytest.raises(ConfigurationError):
        PKSampler([0, 0, 1, 1], p=3, k=2, rng=Rng(0))


def test_k_below_two():
    with pytest.raises(ConfigurationError):
        pk_sample(identity_index([0, 0, 1, 1]), p=2, k=1, rng=Rng(0))


@given(
    counts=st.lists(st.integers(min_value=1, max_value=6), min_size=2, max_size=8),
    p=st.integers(min_value=1, max_value=8),
    k=st.integers(min_value=2, max_value=5),
    seed=st.integers(min_value=0, max_value=1000),
)
def test_batches_hold_p_identities_of_k_images(counts, p, k, seed):
    p = min(p, len(counts))
    labels = [pid for pid, n in enumerate(counts) for _ in range(n)]
    batch = PKSampler(labels, p, k, Rng(seed)).sample()
    per_id = Counter(batch.labels.tolist())
    assert len(per_id) == p
    assert set(per_id.values()) == {k}
    assert all(labels[i] == label for i, label in zip(batch.indices, batch.labels))
    for pid in per_id:
        if counts[pid] >= k:
            assert len(set(batch.indices[batch.labels == pid].tolist())) == k
    assert np.all(batch.indices < len(labels))
