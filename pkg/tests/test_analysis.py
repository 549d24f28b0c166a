import math

import numpy as np
import numpy.testing as npt
import pytest
from hypothesis import given
from hypothesis import strategies as st
from hypothesis.extra import numpy as hnp

from ohformer.errors import ContractError
from ohformer.evaluation.analysis import (
    ANALYSIS_NAME,
    FLOPS_NAME,
    analyze_model,
    attention_similarity_report,
    capture_attention,
    compare_orders,
    flop_rows,
    format_report,
    js_divergence,
    uniform_js,
    write_analysis,
    write_analysis_heads,
    write_flops,
)
from ohformer.nn.attention import AttentionRecord
from ohformer.nn.model import OHFormer
from ohformer.nn.oh_layer import block_cells, pooling_matrix
from ohformer.nn.stack import stack_spec
from ohformer.tensor import Rng, nearest_index


def _softmax(s):
    e = np.exp(s - s.max(axis=-1, keepdims=True))
    return e / e.sum(axis=-1, keepdims=True)


def _record(order, weights, grid, layer=0, head=0, has_cls=False):
    return AttentionRecord(layer, order, head, weights, np.log(weights + 1e-12), grid, has_cls)


def _random_rows(rng, batch, n, rows=None):
    return _softmax(rng.normal(size=(batch, rows or n, n)))


class TestJsDivergence:
    def test_identical(self):
        assert js_divergence([0.2, 0.3, 0.5], [0.2, 0.3, 0.5]) == 0.0

    def test_disjoint_supports(self):
        assert js_divergence([1.0, 0.0], [0.0, 1.0]) == pytest.approx(math.log(2))

    def test_half_against_point_mass(self):
        assert js_divergence([0.5, 0.5], [1.0, 0.0]) == pytest.approx(0.2158, abs=5e-5)

    def test_vectorized_over_rows(self):
        out = js_divergence([[1.0, 0.0], [0.5, 0.5]], [[0.0, 1.0], [0.5, 0.5]])
        npt.assert_allclose(out, [math.log(2), 0.0])

    @pytest.mark.parametrize("p, q", [
        ([0.6, 0.6], [0.5, 0.5]),
        ([1.5, -0.5], [0.5, 0.5]),
        ([0.5, 0.5], [0.3, 0.3, 0.4]),
    ])
    def test_rejected(self, p, q):
        with pytest.raises(ContractError):
            js_divergence(p, q)

    @given(hnp.arrays(np.float64, (2, 5), elements=st.floats(0.0, 10.0)))
    def test_bounded_and_symmetric(self, raw):
        raw = raw + 1e-3
        p, q = raw / raw.sum(axis=-1, keepdims=True)
        forward, backward = js_divergence(p, q), js_divergence(q, p)
        assert 0.0 <= forward <= math.log(2) + 1e-12
        assert forward == pytest.approx(backward, abs=1e-12)


class TestCompareOrders:
    def _cells(self, fine_grid, coarse_grid):
        rows = nearest_index(fine_grid[0], coarse_grid[0])
        cols = nearest_index(fine_grid[1], coarse_grid[1])
        return [rows[i // fine_grid[1]] * coarse_grid[1] + cols[i % fine_grid[1]]
                for i in range(fine_grid[0] * fine_grid[1])]

    def _oracle(self, fine, fine_grid, coarse, coarse_grid):
        cell = self._cells(fine_grid, coarse_grid)
        values = []
        for b in range(fine.shape[0]):
            for i in range(fine.shape[1]):
                pooled = np.zeros(coarse.shape[-1])
                counts = np.zeros(coarse.shape[-1])
                for key, c in enumerate(cell):
                    pooled[c] += fine[b, i, key]
                    counts[c] += 1
                pooled /= counts
                pooled /= pooled.sum()
                values.append(js_divergence(pooled, coarse[b, cell[i]]))
        return float(np.mean(values))

    def _up_oracle(self, fine, fine_grid, coarse, coarse_grid):
        cell = self._cells(fine_grid, coarse_grid)
        values = []
        for b in range(fine.shape[0]):
            for i in range(fine.shape[1]):
                spread = np.array([coarse[b, cell[i], c] for c in cell])
                spread /= spread.sum()
                values.append(js_divergence(fine[b, i], spread))
        return float(np.mean(values))

    def test_down_matches_loop_oracle(self, rng):
        fine = _random_rows(rng, 2, 18)
        coarse = _random_rows(rng, 2, 6)
        expected = self._oracle(fine, (6, 3), coarse, (3, 2))
        assert compare_orders(fine, (6, 3), coarse, (3, 2), "down") == pytest.approx(expected, rel=1e-9)

    def test_up_matches_loop_oracle(self, rng):
        fine = _random_rows(rng, 2, 18)
        coarse = _random_rows(rng, 2, 6)
        expected = self._up_oracle(fine, (6, 3), coarse, (3, 2))
        assert compare_orders(fine, (6, 3), coarse, (3, 2), "up") == pytest.approx(expected, rel=1e-9)

    def test_rows_replicated_from_the_coarse_order_compare_to_zero(self, rng):
        coarse = _random_rows(rng, 2, 6)
        cells = block_cells((6, 3), (3, 2))
        fine = coarse[:, cells][:, :, cells]
        fine = fine / fine.sum(axis=-1, keepdims=True)
        assert compare_orders(fine, (6, 3), coarse, (3, 2), "up") == pytest.approx(0.0, abs=1e-12)

    def test_matching_distributions_compare_to_zero(self):
        fine = np.full((1, 18, 18), 1.0 / 18)
        coarse = np.full((1, 6, 6), 1.0 / 6)
        assert compare_orders(fine, (6, 3), coarse, (3, 2), "down") == pytest.approx(0.0, abs=1e-12)
        assert compare_orders(fine, (6, 3), coarse, (3, 2), "up") == pytest.approx(0.0, abs=1e-12)

    def test_unknown_direction(self, rng):
        with pytest.raises(ContractError):
            compare_orders(_random_rows(rng, 1, 18), (6, 3), _random_rows(rng, 1, 6), (3, 2), "sideways")


class TestSimilarityReport:
    def _layer_records(self, rng, layer=0, heads=2):
        records = []
        for head in range(heads):
            records.append(_record(1, _random_rows(rng, 2, 19), (6, 3), layer, head, has_cls=True))
            records.append(_record(2, _random_rows(rng, 2, 6), (3, 2), layer, head))
            records.append(_record(3, _random_rows(rng, 2, 2), (2, 1), layer, head))
        return records

    @pytest.mark.parametrize("direction", ["down", "up"])
    def test_symmetric_with_zero_diagonal(self, rng, direction):
        report = attention_similarity_report(self._layer_records(rng), direction)
        assert report.orders == (1, 2, 3)
        assert report.per_head.shape == (2, 3, 3)
        npt.assert_array_equal(np.diag(report.matrix), 0.0)
        npt.assert_allclose(report.matrix, report.matrix.T, atol=1e-9)
        npt.assert_allclose(report.matrix, report.per_head.mean(axis=0))
        assert (report.matrix[~np.eye(3, dtype=bool)] > 0).all()

    def test_mixed_layers(self, rng):
        records = self._layer_records(rng, layer=0) + self._layer_records(rng, layer=1)
        with pytest.raises(ContractError):
            attention_similarity_report(records)

    def test_empty(self):
        with pytest.raises(ContractError):
            attention_similarity_report([])

    def test_mismatched_heads(self, rng):
        records = self._layer_records(rng)[:-1]
        with pytest.raises(ContractError):
            attention_similarity_report(records)

    def test_uniform_attention_has_zero_uniform_divergence(self):
        records = [_record(2, np.full((1, 6, 6), 1.0 / 6), (3, 2))]
        assert uniform_js(records) == {2: pytest.approx(0.0, abs=1e-12)}

    def test_text_table(self, rng):
        text = format_report(attention_similarity_report(self._layer_records(rng)))
        lines = text.splitlines()
        assert lines[0] == "layer 0 (down)"
        assert "order 3" in lines[1]
        assert len(lines) == 5


class TestModelAnalysis:
    def test_shared_identity_prior_against_pooled_first_order(self, rng):
        spec = stack_spec(layers=1, orders={0: 2}, width=8, heads=2, parts=2, classes=4, mode="shared", mlp_ratio=2)
        model = OHFormer(spec, Rng(3))
        images = rng.normal(size=(2, 3, 60, 30))
        capture = capture_attention(model, images)
        report = attention_similarity_report(capture.for_layer(0), "down")
        for head in range(2):
            first = next(r for r in capture.records if r.order == 1 and r.head == head)
            fine = _softmax(first.scores[:, 1:, 1:])
            pool = pooling_matrix((6, 3), (3, 2))
            coarse = _softmax(pool @ first.scores[:, 1:, 1:] @ pool.T)
            expected = compare_orders(fine, (6, 3), coarse, (3, 2), "down")
            assert report.per_head[head, 0, 1] == pytest.approx(expected, rel=1e-4, abs=1e-6)

    def test_reports_cover_high_order_layers(self, tiny_spec, rng):
        model = OHFormer(tiny_spec, Rng(0))
        reports = analyze_model(model, rng.normal(size=(2, 3, 60, 30)), ("down", "up"))
        assert [(r.layer, r.direction) for r in reports] == [(1, "down"), (1, "up")]
        assert not model.training

    def test_baseline_has_nothing_to_analyze(self, rng):
        model = OHFormer(stack_spec(layers=1, orders={}, width=8, heads=2, parts=2), Rng(0))
        with pytest.raises(ContractError):
            analyze_model(model, rng.normal(size=(1, 3, 60, 30)))

    def test_flop_rows(self, tiny_spec):
        rows = flop_rows(OHFormer(tiny_spec, Rng(0)))
        assert [(layer, mode) for layer, mode, _ in rows] == [(1, "full"), (1, "shared")]
        assert rows[1][2] < rows[0][2]


def test_report_files(tmp_path, tiny_spec, rng):
    model = OHFormer(tiny_spec, Rng(0))
    reports = analyze_model(model, rng.normal(size=(1, 3, 60, 30)))
    analysis = write_analysis(reports, tmp_path)
    heads = write_analysis_heads(reports, tmp_path)
    flops = write_flops(flop_rows(model), tmp_path)
    assert analysis.name == ANALYSIS_NAME and flops.name == FLOPS_NAME
    rows = analysis.read_text().splitlines()
    assert rows[0] == "layer\torder_i\torder_j\tdirection\tmean_js"
    assert len(rows) == 1 + 9
    assert len(heads.read_text().splitlines()) == 1 + 2 * 9
    assert flops.read_text().splitlines()[1].startswith("1\tfull\t")
