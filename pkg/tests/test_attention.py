import numpy as np
import numpy.testing as npt
import pytest

from ohformer.errors import ConfigurationError, ContractError, DimensionError
from ohformer.nn.attention import AttentionCapture, ProjectionSet, apply, mhsa, scores, self_attention
from ohformer.tensor import Tensor


@pytest.fixture
def proj(rng):
    return ProjectionSet(8, 2, rng)


class TestProjectionSet:
    def test_heads_must_divide_width(self, rng):
        with pytest.raises(ConfigurationError):
            ProjectionSet(10, 3, rng)

    def test_tied_values_reuse_the_key(self, rng):
        tied = ProjectionSet(8, 2, rng, tie_vk=True)
        x = Tensor(rng.normal(size=(1, 5, 8)))
        assert tied.value is None
        npt.assert_array_equal(tied.project_value(x).data, tied.key(x).data)

    def test_tied_values_need_a_key(self, rng):
        with pytest.raises(ConfigurationError):
            ProjectionSet(8, 2, rng, query_key=False, tie_vk=True)

    def test_shared_order_has_no_scores(self, rng):
        shared = ProjectionSet(8, 2, rng, query_key=False)
        with pytest.raises(ContractError):
            scores(Tensor(np.ones((1, 3, 8))), shared)


class TestMhsa:
    def test_weights_are_distributions(self, proj, rng):
        result = self_attention(Tensor(rng.normal(size=(2, 7, 8))), proj)
        assert result.weights.shape == (2, 2, 7, 7)
        npt.assert_allclose(result.weights.data.sum(axis=-1), 1.0, rtol=1e-5)
        assert (result.weights.data >= 0).all()

    def test_identical_tokens_give_identical_outputs(self, proj):
        x = Tensor(np.tile(np.linspace(-1, 1, 8), (1, 4, 1)))
        out = mhsa(x, proj).data
        npt.assert_allclose(out, np.broadcast_to(out[:, :1], out.shape), rtol=1e-5, atol=1e-6)

    def test_permutation_equivariant(self, proj, rng):
        x = rng.normal(size=(1, 6, 8))
        order = np.array([3, 0, 5, 1, 4, 2])
        out = mhsa(Tensor(x), proj).data
        permuted = mhsa(Tensor(x[:, order]), proj).data
        npt.assert_allclose(permuted, out[:, order], rtol=1e-4, atol=1e-6)

    def test_capture_emits_one_record_per_head(self, proj, rng):
        capture = AttentionCapture(layer=4)
        mhsa(Tensor(rng.normal(size=(3, 7, 8))), proj, capture, order=1, grid=(3, 2), has_cls=True)
        assert [r.head for r in capture.records] == [0, 1]
        record = capture.records[0]
        assert (record.layer, record.order, record.grid, record.has_cls) == (4, 1, (3, 2), True)
        assert record.weights.shape == (3, 7, 7)
        assert record.weights.dtype == np.float64
        assert capture.layers() == [4]

    def test_width_mismatch(self, proj):
        with pytest.raises(DimensionError):
            mhsa(Tensor(np.ones((1, 4, 6))), proj)


class TestScores:
    def test_zero_tokens_score_zero(self, proj):
        npt.assert_array_equal(scores(Tensor(np.zeros((1, 3, 8))), proj).data, 0.0)

    def test_matches_loop_oracle(self, proj, rng):
        x = Tensor(rng.normal(size=(1, 2, 8)))
        q, k = proj.query(x).data[0], proj.key(x).data[0]
        got = scores(x, proj).data
        for head in range(2):
            cols = slice(4 * head, 4 * head + 4)
            for i in range(2):
                for j in range(2):
                    expected = sum(q[i, cols][c] * k[j, cols][c] for c in range(4)) / 2.0
                    assert got[0, head, i, j] == pytest.approx(expected, abs=1e-5)


class TestApply:
    def test_equal_scores_average_the_values(self, rng):
        v = rng.normal(size=(1, 2, 3, 4))
        out = apply(Tensor(np.zeros((1, 2, 3, 3))), Tensor(v))
        npt.assert_allclose(out.data, np.broadcast_to(v.mean(axis=2, keepdims=True), v.shape), rtol=1e-5)

    def test_dominant_score_selects_a_value_row(self, rng):
        v = rng.normal(size=(1, 1, 3, 4))
        s = np.zeros((1, 1, 3, 3))
        s[0, 0, :, 2] = 1e4
        npt.assert_allclose(apply(Tensor(s), Tensor(v)).data[0, 0], np.repeat(v[0, 0, 2:3], 3, axis=0), rtol=1e-5)

    def test_shape_disagreement(self, rng):
        with pytest.raises(DimensionError):
            apply(Tensor(np.zeros((1, 1, 3, 3))), Tensor(np.zeros((1, 1, 2, 4))))
