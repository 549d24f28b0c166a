import numpy as np
import numpy.testing as npt
import pytest

from ohformer.errors import ConfigurationError, ContractError, DimensionError
from ohformer.nn.attention import AttentionCapture, mhsa
from ohformer.nn.grid import TokenGrid
from ohformer.nn.oh_layer import (
    PRIOR_TAPS,
    FlopCounter,
    LocalPrior,
    OhLayer,
    OrderState,
    first_order,
    first_order_madds,
    fuse,
    grid_neighbors,
    high_order_madds,
    layer_token_counts,
    order_grids,
    pooling_matrix,
    prior_mix,
    score_madds,
    share_scores,
)
from ohformer.tensor import Tensor, backward


def _tokens(rng, width=8, grid=(6, 3), batch=2):
    return TokenGrid(Tensor(rng.normal(size=(batch, 1 + grid[0] * grid[1], width))), *grid, has_cls=True)


def _records(capture, order):
    return [r for r in capture.records if r.order == order]


class TestConstruction:
    @pytest.mark.parametrize("kwargs", [
        {"order": 0},
        {"order": 5},
        {"mode": "sparse"},
        {"prior_axis": "diagonal"},
        {"order": 2, "mode": "shared", "tie_vk": True},
    ])
    def test_rejected_settings(self, rng, kwargs):
        with pytest.raises(ConfigurationError):
            OhLayer(8, 2, (6, 3), rng, **kwargs)

    def test_grid_too_small_for_order(self, rng):
        with pytest.raises(ConfigurationError, match="order 3"):
            OhLayer(8, 2, (3, 2), rng, order=3)

    def test_order_grids(self):
        assert order_grids((37, 13), 4) == [(37, 13), (19, 7), (10, 4), (5, 2)]

    def test_token_counts(self):
        assert layer_token_counts((6, 3), 3) == [19, 6, 2]

    def test_shared_orders_have_no_query_or_key(self, rng):
        layer = OhLayer(8, 2, (6, 3), rng, order=3, mode="shared")
        names = {name for name, _ in layer.named_parameters()}
        assert "orders.0.prior.taps" in names
        assert not any(name.startswith("orders.0.proj.query") for name in names)


class TestForward:
    def test_order_one_is_a_pre_norm_block(self, rng):
        layer = OhLayer(8, 2, (6, 3), rng, order=1)
        x = _tokens(rng)
        y = x.tokens + mhsa(layer.norm1(x.tokens), layer.attn)
        expected = y + layer.ffn(layer.norm2(y))
        npt.assert_allclose(layer(x).tokens.data, expected.data, rtol=1e-6, atol=1e-6)

    @pytest.mark.parametrize("mode", ["full", "shared"])
    def test_shape_preserved_and_orders_captured(self, rng, mode):
        layer = OhLayer(8, 2, (6, 3), rng, order=3, mode=mode)
        capture = AttentionCapture()
        out = layer(_tokens(rng), capture, index=5)
        assert out.tokens.shape == (2, 19, 8)
        assert out.has_cls and out.shape == (6, 3)
        assert [(r.order, r.head) for r in capture.records] == [(1, 0), (1, 1), (2, 0), (2, 1), (3, 0), (3, 1)]
        assert {r.layer for r in capture.records} == {5}
        assert [r.grid for r in _records(capture, 3)] == [(2, 1), (2, 1)]

    def test_shared_identity_prior_equals_pooled_scores(self, rng):
        layer = OhLayer(8, 2, (6, 3), rng, order=2, mode="shared")
        capture = AttentionCapture()
        layer(_tokens(rng), capture)
        pool = pooling_matrix((6, 3), (3, 2))
        for first, second in zip(_records(capture, 1), _records(capture, 2)):
            expected = pool @ first.scores[:, 1:, 1:] @ pool.T
            npt.assert_allclose(second.scores, expected, rtol=1e-5, atol=1e-6)

    def test_zero_elementwise_prior_gives_uniform_attention(self, rng):
        layer = OhLayer(8, 2, (6, 3), rng, order=2, mode="shared", prior_axis="elementwise")
        layer.orders[0].prior.data[...] = 0.0
        capture = AttentionCapture()
        layer(_tokens(rng), capture)
        for record in _records(capture, 2):
            npt.assert_allclose(record.weights, 1.0 / 6.0, rtol=1e-6)

    def test_first_order_needs_class_token(self, rng):
        layer = OhLayer(8, 2, (6, 3), rng)
        x = TokenGrid(Tensor(rng.normal(size=(1, 18, 8))), 6, 3)
        with pytest.raises(ContractError):
            first_order(x, layer)

    def test_fuse_rejects_out_of_sequence_states(self, rng):
        layer = OhLayer(8, 2, (6, 3), rng, order=3)
        x = _tokens(rng)
        first = first_order(x, layer)
        stray = OrderState(3, TokenGrid(Tensor(rng.normal(size=(2, 6, 8))), 3, 2), first.scores)
        with pytest.raises(ContractError):
            fuse([first, stray], layer)

    @pytest.mark.parametrize("mode", ["full", "shared"])
    def test_every_parameter_receives_a_gradient(self, rng, mode):
        layer = OhLayer(8, 2, (6, 3), rng, order=3, mode=mode, mlp_ratio=2)
        backward(layer(_tokens(rng)).tokens.sum())
        missing = [name for name, p in layer.named_parameters() if p.grad is None]
        assert missing == []


class TestSharedScores:
    def test_pooling_rows_are_means(self):
        pool = pooling_matrix((6, 3), (3, 2))
        assert pool.shape == (6, 18)
        npt.assert_allclose(pool.sum(axis=1), 1.0)
        assert ((pool > 0).sum(axis=0) == 1).all()

    def test_same_grid_passes_through(self, rng):
        s = Tensor(rng.normal(size=(1, 2, 18, 18)))
        assert share_scores(s, (6, 3), (6, 3)) is s

    def test_unreachable_grid(self, rng):
        with pytest.raises(ConfigurationError):
            share_scores(Tensor(rng.normal(size=(1, 1, 18, 18))), (6, 3), (4, 2))

    def test_score_block_must_match_grid(self, rng):
        with pytest.raises(DimensionError):
            share_scores(Tensor(rng.normal(size=(1, 1, 19, 19))), (6, 3), (3, 2))

    def test_constant_scores_stay_constant(self):
        s = Tensor(np.full((1, 1, 18, 18), 0.3))
        npt.assert_allclose(share_scores(s, (6, 3), (2, 1)).data, 0.3, rtol=1e-6)

    def test_block_means_match_pooling_matrix(self, rng):
        s = rng.normal(size=(2, 2, 18, 18))
        pool = pooling_matrix((6, 3), (3, 2))
        npt.assert_allclose(share_scores(Tensor(s), (6, 3), (3, 2)).data, pool @ s @ pool.T, rtol=1e-5, atol=1e-6)

    def test_gradient_spreads_over_blocks(self):
        s = Tensor(np.zeros((1, 1, 18, 18)))
        backward(share_scores(s, (6, 3), (3, 2)).sum())
        pool = pooling_matrix((6, 3), (3, 2))
        npt.assert_allclose(s.grad[0, 0], pool.T @ np.ones((6, 6)) @ pool, rtol=1e-6)


class TestLocalPrior:
    def test_neighbourhoods(self):
        index, inside = grid_neighbors((3, 2))
        assert index.shape == (6, PRIOR_TAPS)
        assert inside.sum(axis=1).tolist() == [4, 4, 6, 6, 4, 4]
        npt.assert_array_equal(index[~inside], np.nonzero(~inside)[0])
        assert sorted(index[2][inside[2]]) == [0, 1, 2, 3, 4, 5]

    @pytest.mark.parametrize("axis", ["key", "query"])
    def test_identity_at_initialization(self, rng, axis):
        prior = LocalPrior((3, 2))
        s = Tensor(rng.normal(size=(2, 2, 6, 6)))
        npt.assert_array_equal(prior_mix(s, prior, axis).data, s.data)
        npt.assert_array_equal(prior.dense(axis), np.eye(6))

    def test_matches_its_dense_matrix(self, rng):
        prior = LocalPrior((4, 3))
        prior.taps.data = rng.normal(size=prior.taps.shape)
        s = rng.normal(size=(2, 2, 12, 12))
        npt.assert_allclose(prior_mix(Tensor(s), prior, "key").data, s @ prior.dense("key"), rtol=1e-5, atol=1e-5)
        npt.assert_allclose(prior_mix(Tensor(s), prior, "query").data, prior.dense("query") @ s, rtol=1e-5, atol=1e-5)

    def test_support_is_local(self, rng):
        prior = LocalPrior((4, 3))
        prior.taps.data = rng.uniform(0.5, 1.0, size=prior.taps.shape)
        dense = prior.dense("key")
        rows, cols = np.divmod(np.arange(12), 3)
        near = (np.abs(rows[:, None] - rows[None, :]) <= 1) & (np.abs(cols[:, None] - cols[None, :]) <= 1)
        assert (dense[~near] == 0).all()
        assert (dense[near] > 0).all()

    def test_extent_mismatch(self, rng):
        with pytest.raises(DimensionError):
            prior_mix(Tensor(rng.normal(size=(1, 1, 5, 5))), LocalPrior((3, 2)))

    def test_elementwise_axis_rejected(self, rng):
        with pytest.raises(ConfigurationError):
            prior_mix(Tensor(rng.normal(size=(1, 1, 6, 6))), LocalPrior((3, 2)), "elementwise")

    def test_layer_scores_are_pooled_then_mixed(self, rng):
        layer = OhLayer(8, 2, (6, 3), rng, order=2, mode="shared")
        prior = layer.orders[0].prior
        prior.taps.data = prior.taps.data + rng.normal(0.0, 0.2, size=prior.taps.shape)
        capture = AttentionCapture()
        layer(_tokens(rng), capture)
        pool = pooling_matrix((6, 3), (3, 2))
        for first, second in zip(_records(capture, 1), _records(capture, 2)):
            expected = pool @ first.scores[:, 1:, 1:] @ pool.T @ prior.dense("key")
            npt.assert_allclose(second.scores, expected, rtol=1e-5, atol=1e-5)


class TestPriorMix:
    def test_identity_and_ones(self, rng):
        s = Tensor(rng.normal(size=(1, 2, 5, 5)))
        npt.assert_allclose(prior_mix(s, Tensor(np.eye(5)), "key").data, s.data, rtol=1e-6)
        npt.assert_allclose(prior_mix(s, Tensor(np.eye(5)), "query").data, s.data, rtol=1e-6)
        npt.assert_allclose(prior_mix(s, Tensor(np.ones((5, 5))), "elementwise").data, s.data, rtol=1e-6)

    def test_permutation_moves_keys_or_queries(self, rng):
        s = rng.normal(size=(1, 1, 5, 5))
        order = np.array([2, 4, 0, 1, 3])
        perm = Tensor(np.eye(5)[order])
        npt.assert_allclose(prior_mix(Tensor(s), perm, "key").data, s[..., np.argsort(order)], rtol=1e-6)
        npt.assert_allclose(prior_mix(Tensor(s), perm, "query").data, s[..., order, :], rtol=1e-6)

    def test_shape_mismatch(self, rng):
        with pytest.raises(DimensionError):
            prior_mix(Tensor(rng.normal(size=(1, 1, 5, 5))), Tensor(np.eye(4)))

    def test_unknown_axis(self, rng):
        with pytest.raises(ConfigurationError):
            prior_mix(Tensor(rng.normal(size=(1, 1, 3, 3))), Tensor(np.eye(3)), "row")


class TestFlops:
    def test_first_order(self):
        assert first_order_madds(19, 16, 2) == 2 * 19 * 16 * 16 + 2 * 19 * 19 * 8

    def test_higher_orders(self):
        assert high_order_madds(6, 16, 2, "full") == 2 * 6 * 256 + 2 * 36 * 8
        assert high_order_madds(6, 16, 2, "shared") == 2 * 36 * (1 + PRIOR_TAPS)
        assert high_order_madds(6, 16, 2, "shared", prior_axis="query") == 2 * 36 * (1 + PRIOR_TAPS)
        assert high_order_madds(6, 16, 2, "shared", prior_axis="elementwise") == 2 * 36 * 2
        assert high_order_madds(6, 16, 2, "shared", prior_mixing=False) == 2 * 36

    @pytest.mark.parametrize("order", [2, 3, 4])
    @pytest.mark.parametrize("prior", [("key", True), ("query", True), ("elementwise", True), ("key", False)])
    def test_shared_is_cheaper(self, order, prior):
        axis, mixing = prior
        counts = layer_token_counts((37, 13), order)
        shared = score_madds("shared", counts, 64, 4, prior_mixing=mixing, prior_axis=axis)
        assert shared < score_madds("full", counts, 64, 4)

    def test_full_size_layer_totals(self):
        counts = layer_token_counts((37, 13), 4)
        assert counts == [482, 133, 40, 10]
        assert score_madds("full", counts, 64, 4) == 21_557_312
        assert score_madds("shared", counts, 64, 4) == 19_592_840

    @pytest.mark.parametrize("axis", ["key", "query", "elementwise"])
    def test_counter_matches_analytic_cost(self, rng, axis):
        layer = OhLayer(8, 2, (6, 3), rng, order=3, mode="shared", prior_axis=axis)
        flops = FlopCounter()
        layer(_tokens(rng), flops=flops, index=1)
        assert [order for _, order, _ in flops.entries] == [1, 2, 3]
        assert flops.total() == layer.score_madds() == flops.by_layer()[1]
        assert layer.score_madds("full") > layer.score_madds()
