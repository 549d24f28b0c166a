"""
Cross-order attention similarity and score-cost reports.

Attention rows of two orders live on different token grids. ``down``
block-averages the finer order's rows over the key axis onto the coarser
grid and renormalizes; ``up`` spreads each coarser row evenly over the fine
keys of its cells. Query rows are matched through the nearest-neighbor map
from fine to coarse cells, the same map the layer uses to fuse orders.
The class token is dropped from first-order rows, which are then
renormalized over the spatial keys.
"""

import csv
import logging
from dataclasses import dataclass
from pathlib import Path
from typing import Dict, List, Sequence, Tuple, Union

import numpy as np

from ohformer.errors import ContractError, OutputError
from ohformer.nn.attention import AttentionCapture, AttentionRecord
from ohformer.nn.model import OHFormer
from ohformer.nn.oh_layer import MODES, block_cells, pooling_matrix
from ohformer.tensor import Tensor, no_grad

logger = logging.getLogger(__name__)

DIRECTIONS = ("down", "up")
NORM_TOL = 1e-5

ANALYSIS_NAME = "analysis.tsv"
ANALYSIS_HEADS_NAME = "analysis_heads.tsv"
FLOPS_NAME = "flops.tsv"

PathLike = Union[str, Path]


def js_divergence(p, q) -> np.ndarray:
    """
    Jensen-Shannon divergence over the last axis, natural log, 0 ln 0 = 0.

    Raises:
        ContractError: an input has negative entries or does not sum to 1
    """
    p = np.asarray(p, dtype=np.float64)
    q = np.asarray(q, dtype=np.float64)
    if p.shape != q.shape:
        raise ContractError(f"distributions have different shapes {p.shape} and {q.shape}")
    for name, dist in (("p", p), ("q", q)):
        if (dist < 0).any():
            raise ContractError(f"{name} has negative entries")
        if (np.abs(dist.sum(axis=-1) - 1.0) > NORM_TOL).any():
            raise ContractError(f"{name} does not sum to 1")
    m = 0.5 * (p + q)

    def kl(a):
        ratio = np.divide(a, m, out=np.ones_like(a), where=a > 0)
        return (a * np.log(ratio)).sum(axis=-1)

    return np.maximum(0.5 * kl(p) + 0.5 * kl(q), 0.0)


def spatial_rows(record: AttentionRecord) -> np.ndarray:
    """[B, n, n] spatial-to-spatial attention, rows summing to 1."""
    w = record.weights
    if record.has_cls:
        w = w[:, 1:, 1:]
        w = w / w.sum(axis=-1, keepdims=True)
    return w


def compare_orders(fine: np.ndarray, fine_grid: Tuple[int, int], coarse: np.ndarray,
                   coarse_grid: Tuple[int, int], direction: str = "down") -> float:
    """Mean JS between matched rows of a finer and a coarser order, averaged over batch and fine queries."""
    if direction not in DIRECTIONS:
        raise ContractError(f"direction must be one of {DIRECTIONS}, got {direction!r}")
    cells = block_cells(fine_grid, coarse_grid)  # [nf]
    matched = coarse[:, cells, :]  # [B, nf, nc]
    if direction == "down":
        pooled = fine @ pooling_matrix(fine_grid, coarse_grid).T
        pooled = pooled / pooled.sum(axis=-1, keepdims=True)
        return float(js_divergence(pooled, matched).mean())
    # every fine key takes its cell's weight
    spread = matched[..., cells]
    spread = spread / spread.sum(axis=-1, keepdims=True)
    return float(js_divergence(fine, spread).mean())


@dataclass
class SimilarityReport:
    layer: int
    direction: str
    orders: Tuple[int, ...]
    matrix: np.ndarray  # [m, m], head-averaged
    per_head: np.ndarray  # [h, m, m]


def _by_order(records: Sequence[AttentionRecord]) -> Dict[int, Dict[int, AttentionRecord]]:
    if not records:
        raise ContractError("no attention records to analyze")
    layers = {r.layer for r in records}
    if len(layers) != 1:
        raise ContractError(f"records span layers {sorted(layers)}; analyze one layer at a time")
    grouped: Dict[int, Dict[int, AttentionRecord]] = {}
    for r in records:
        grouped.setdefault(r.order, {})[r.head] = r
    heads = {tuple(sorted(h)) for h in grouped.values()}
    if len(heads) != 1:
        raise ContractError("orders were captured with different head sets")
    return grouped


def attention_similarity_report(records: Sequence[AttentionRecord], direction: str = "down") -> SimilarityReport:
    """
    Order-by-order mean JS matrix of one layer's attention.

    Raises:
        ContractError: records are empty, span several layers, or the direction is unknown
    """
    grouped = _by_order(records)
    orders = tuple(sorted(grouped))
    heads = sorted(grouped[orders[0]])
    m = len(orders)
    per_head = np.zeros((len(heads), m, m))
    for h_index, head in enumerate(heads):
        rows = {o: spatial_rows(grouped[o][head]) for o in orders}
        for i in range(m):
            for j in range(i + 1, m):
                a, b = grouped[orders[i]][head], grouped[orders[j]][head]
                value = compare_orders(rows[orders[i]], a.grid, rows[orders[j]], b.grid, direction)
                per_head[h_index, i, j] = per_head[h_index, j, i] = value
    layer = records[0].layer
    return SimilarityReport(layer, direction, orders, per_head.mean(axis=0), per_head)


def uniform_js(records: Sequence[AttentionRecord]) -> Dict[int, float]:
    """Mean JS between each order's spatial attention rows and uniform attention."""
    grouped = _by_order(records)
    out = {}
    for order in sorted(grouped):
        values = []
        for record in grouped[order].values():
            rows = spatial_rows(record)
            uniform = np.full_like(rows, 1.0 / rows.shape[-1])
            values.append(js_divergence(rows, uniform).mean())
        out[order] = float(np.mean(values))
    return out


def capture_attention(model: OHFormer, images: np.ndarray) -> AttentionCapture:
    """One eval-mode forward pass recording every order's attention."""
    model.eval()
    capture = AttentionCapture()
    with no_grad():
        model.forward(Tensor(images), capture=capture)
    return capture


def analyze_model(model: OHFormer, images: np.ndarray, directions: Sequence[str] = ("down",)) -> List[SimilarityReport]:
    """
    Similarity reports for every layer with an order of two or more.

    Raises:
        ContractError: the model has no higher-order layer
    """
    layers = model.spec.high_order_layers()
    if not layers:
        raise ContractError(f"stack {model.spec.layer_orders()} has no layer of order >= 2 to analyze")
    capture = capture_attention(model, images)
    reports = []
    for direction in directions:
        for layer in layers:
            reports.append(attention_similarity_report(capture.for_layer(layer), direction))
    logger.info("analyzed %d layers in %d direction(s) over %d images", len(layers), len(directions), len(images))
    return reports


def flop_rows(model: OHFormer) -> List[Tuple[int, str, int]]:
    """(layer, mode, score multiply-adds) for both modes of every higher-order layer."""
    rows = []
    for index in model.spec.high_order_layers():
        layer = model.layers[index]
        rows.extend((index, mode, layer.score_madds(mode)) for mode in MODES)
    return rows


def format_report(report: SimilarityReport) -> str:
    labels = [f"order {o}" for o in report.orders]
    width = max(len(label) for label in labels) + 2
    lines = [f"layer {report.layer} ({report.direction})", " " * width + "".join(f"{x:>{width}}" for x in labels)]
    for label, row in zip(labels, report.matrix):
        lines.append(f"{label:<{width}}" + "".join(f"{v:>{width}.4f}" for v in row))
    return "\n".join(lines)


def _write_tsv(path: Path, header: Sequence[str], rows) -> Path:
    try:
        path.parent.mkdir(parents=True, exist_ok=True)
        with open(path, "w", newline="", encoding="utf-8") as fh:
            writer = csv.writer(fh, delimiter="\t", lineterminator="\n")
            writer.writerow(header)
            writer.writerows(rows)
    except OSError as e:
        raise OutputError(f"cannot write {path}: {e}") from e
    return path


def write_analysis(reports: Sequence[SimilarityReport], directory: PathLike) -> Path:
    rows = []
    for r in reports:
        for i, oi in enumerate(r.orders):
            for j, oj in enumerate(r.orders):
                rows.append((r.layer, oi, oj, r.direction, f"{r.matrix[i, j]:.6f}"))
    return _write_tsv(Path(directory) / ANALYSIS_NAME, ("layer", "order_i", "order_j", "direction", "mean_js"), rows)


def write_analysis_heads(reports: Sequence[SimilarityReport], directory: PathLike) -> Path:
    rows = []
    for r in reports:
        for head, matrix in enumerate(r.per_head):
            for i, oi in enumerate(r.orders):
                for j, oj in enumerate(r.orders):
                    rows.append((r.layer, head, oi, oj, r.direction, f"{matrix[i, j]:.6f}"))
    return _write_tsv(Path(directory) / ANALYSIS_HEADS_NAME,
                      ("layer", "head", "order_i", "order_j", "direction", "js"), rows)


def write_flops(rows: Sequence[Tuple[int, str, int]], directory: PathLike) -> Path:
    return _write_tsv(Path(directory) / FLOPS_NAME, ("layer", "mode", "score_madds"), rows)
