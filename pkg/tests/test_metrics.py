import math

import numpy as np
import numpy.testing as npt
import pytest
from hypothesis import given
from hypothesis import strategies as st
from hypothesis.extra import numpy as hnp

from ohformer.errors import DimensionError, EvaluationError
from ohformer.evaluation.metrics import METRICS_NAME, RetrievalSet, cmc_map, dist_matrix, write_metrics


def _oracle(dist, q_pids, g_pids, q_cams, g_cams):
    """Brute-force CMC and mAP, one query at a time."""
    num_q, num_g = dist.shape
    curves, aps, skipped = [], [], 0
    for i in range(num_q):
        candidates = [j for j in range(num_g) if not (g_pids[j] == q_pids[i] and g_cams[j] == q_cams[i])]
        candidates.sort(key=lambda j: (dist[i, j], j))
        hits = [g_pids[j] == q_pids[i] for j in candidates]
        if not any(hits):
            skipped += 1
            continue
        first = hits.index(True)
        curves.append([1.0 if k >= first else 0.0 for k in range(num_g)])
        found, precisions = 0, []
        for rank, hit in enumerate(hits, start=1):
            if hit:
                found += 1
                precisions.append(found / rank)
        aps.append(sum(precisions) / len(precisions))
    return np.mean(curves, axis=0), float(np.mean(aps)), skipped


class TestDistMatrix:
    def test_unit_vectors(self):
        q = RetrievalSet(np.array([[1.0, 0.0]]), [0], [0], "query")
        g = RetrievalSet(np.array([[0.0, 1.0], [1.0, 0.0]]), [1, 0], [1, 1])
        npt.assert_allclose(dist_matrix(q, g), [[math.sqrt(2), 0.0]])

    def test_matches_double_loop(self, rng):
        a, b = rng.normal(size=(3, 4)), rng.normal(size=(3, 4))
        expected = [[np.sqrt(sum((a[i, k] - b[j, k]) ** 2 for k in range(4))) for j in range(3)] for i in range(3)]
        got = dist_matrix(RetrievalSet(a, [0] * 3, [0] * 3, "query"), RetrievalSet(b, [0] * 3, [0] * 3))
        npt.assert_allclose(got, expected, rtol=1e-5)

    def test_width_mismatch(self):
        q = RetrievalSet(np.ones((1, 3)), [0], [0], "query")
        g = RetrievalSet(np.ones((2, 4)), [0, 1], [0, 1])
        with pytest.raises(DimensionError):
            dist_matrix(q, g)

    def test_misaligned_labels(self):
        with pytest.raises(DimensionError):
            RetrievalSet(np.ones((2, 3)), [0], [0, 1])


class TestCmcMap:
    def test_positive_negative_positive(self):
        result = cmc_map(np.array([[0.1, 0.2, 0.3]]), [1], [1, 2, 1], [0], [1, 1, 1])
        assert result.mean_ap == pytest.approx(5 / 6)
        npt.assert_array_equal(result.cmc, [1.0, 1.0, 1.0])

    def test_perfect_separation(self):
        dist = np.array([[0.1, 0.2, 0.9, 0.8], [0.7, 0.9, 0.1, 0.3]])
        result = cmc_map(dist, [0, 1], [0, 0, 1, 1], [0, 0], [1, 1, 1, 1])
        assert result.rank(1) == 1.0
        assert result.mean_ap == 1.0

    def test_same_camera_positives_are_excluded(self):
        dist = np.array([[0.1, 0.5, 0.9], [0.1, 0.5, 0.9]])
        result = cmc_map(dist, [0, 1], [0, 1, 1], [0, 0], [0, 1, 2])
        assert (result.num_valid, result.num_skipped) == (1, 1)
        assert result.rank(1) == 0.0
        assert result.mean_ap == pytest.approx(0.5 * (1 / 2 + 2 / 3))

    def test_ties_keep_gallery_order(self):
        result = cmc_map(np.array([[0.0, 0.0]]), [0], [5, 0], [0], [1, 1])
        assert result.rank(1) == 0.0
        assert result.mean_ap == pytest.approx(0.5)

    def test_no_valid_query(self):
        with pytest.raises(EvaluationError):
            cmc_map(np.array([[0.1, 0.2]]), [0], [0, 1], [3], [3, 3])

    def test_label_shape_mismatch(self):
        with pytest.raises(DimensionError):
            cmc_map(np.zeros((2, 2)), [0], [0, 1], [0], [0, 1])

    def test_rank_clamps_to_gallery_size(self):
        result = cmc_map(np.array([[0.3, 0.1]]), [0], [0, 1], [0], [1, 1])
        assert result.rank(10) == 1.0
        assert result.line().split() == ["mAP=0.5000", "R1=0.0000", "R5=1.0000", "R10=1.0000"]

    @given(data=st.data(), num_q=st.integers(1, 5), num_g=st.integers(1, 8))
    def test_matches_brute_force(self, data, num_q, num_g):
        dist = data.draw(hnp.arrays(np.float64, (num_q, num_g), elements=st.sampled_from([0.0, 0.5, 1.0, 2.0])))
        q_pids = data.draw(hnp.arrays(np.int64, num_q, elements=st.integers(0, 2)))
        g_pids = data.draw(hnp.arrays(np.int64, num_g, elements=st.integers(0, 2)))
        q_cams = data.draw(hnp.arrays(np.int64, num_q, elements=st.integers(0, 1)))
        g_cams = data.draw(hnp.arrays(np.int64, num_g, elements=st.integers(0, 1)))
        if not any(
            any(g_pids[j] == q_pids[i] and g_cams[j] != q_cams[i] for j in range(num_g)) for i in range(num_q)
        ):
            with pytest.raises(EvaluationError):
                cmc_map(dist, q_pids, g_pids, q_cams, g_cams)
            return
        expected_cmc, expected_map, expected_skipped = _oracle(dist, q_pids, g_pids, q_cams, g_cams)
        result = cmc_map(dist, q_pids, g_pids, q_cams, g_cams)
        npt.assert_allclose(result.cmc, expected_cmc)
        assert result.mean_ap == pytest.approx(expected_map)
        assert result.num_skipped == expected_skipped


def test_write_metrics(tmp_path):
    result = cmc_map(np.array([[0.1, 0.2, 0.3]]), [1], [1, 2, 1], [0], [1, 1, 1])
    path = write_metrics(result, tmp_path)
    assert path.name == METRICS_NAME
    rows = [line.split("\t") for line in path.read_text().splitlines()]
    assert rows[0] == ["metric", "value"]
    assert rows[1] == ["mAP", "0.833333"]
    assert [r[0] for r in rows[1:]] == ["mAP", "R1", "R5", "R10", "num_valid", "num_skipped"]
    assert rows[-1] == ["num_skipped", "0"]
