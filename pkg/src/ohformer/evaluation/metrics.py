"""
Retrieval metrics under the single-query protocol.

For each query, gallery images of the same identity taken by the same camera
are removed before ranking. Queries left without any positive are skipped
and counted. Ties in distance keep gallery order.
"""

import csv
import logging
from dataclasses import dataclass
from pathlib import Path
from typing import Dict, Union

import numpy as np

from ohformer.errors import DimensionError, EvaluationError, OutputError
from ohformer.nn.model import OHFormer
from ohformer.tensor import Tensor, parallel_map
from ohformer.training.data import ReidDataset

logger = logging.getLogger(__name__)

METRICS_NAME = "metrics.tsv"
RANKS = (1, 5, 10)

PathLike = Union[str, Path]


@dataclass
class RetrievalSet:
    embeddings: np.ndarray  # [N, D]
    pids: np.ndarray
    cams: np.ndarray
    role: str = "gallery"

    def __post_init__(self):
        self.embeddings = np.asarray(self.embeddings, dtype=np.float64)
        self.pids = np.asarray(self.pids)
        self.cams = np.asarray(self.cams)
        if self.embeddings.ndim != 2:
            raise DimensionError(f"{self.role} embeddings must be 2-D", self.embeddings.shape)
        if not len(self.pids) == len(self.cams) == len(self.embeddings):
            raise DimensionError(f"{self.role} labels are not aligned with embeddings",
                                 self.embeddings.shape, self.pids.shape, self.cams.shape)

    def __len__(self) -> int:
        return len(self.embeddings)

    @property
    def width(self) -> int:
        return self.embeddings.shape[1]


def dist_matrix(query: RetrievalSet, gallery: RetrievalSet) -> np.ndarray:
    """
    Euclidean distances [Nq, Ng], one query row per task.

    Raises:
        DimensionError: the embedding widths differ
    """
    if query.width != gallery.width:
        raise DimensionError("query and gallery embedding widths differ",
                             query.embeddings.shape, gallery.embeddings.shape)
    g = gallery.embeddings

    def row(q):
        return np.sqrt(((g - q[None, :]) ** 2).sum(axis=1))

    rows = parallel_map(row, list(query.embeddings))
    if not rows:
        return np.zeros((0, len(gallery)))
    return np.stack(rows)


@dataclass
class RetrievalResult:
    cmc: np.ndarray  # [Ng], cmc[k-1] = rank-k hit rate
    mean_ap: float
    num_valid: int
    num_skipped: int

    def rank(self, k: int) -> float:
        return float(self.cmc[min(k, len(self.cmc)) - 1])

    def summary(self) -> Dict[str, float]:
        values = {"mAP": self.mean_ap}
        values.update({f"R{k}": self.rank(k) for k in RANKS})
        values["num_valid"] = self.num_valid
        values["num_skipped"] = self.num_skipped
        return values

    def line(self) -> str:
        return " ".join(f"{key}={value:.4f}" for key, value in list(self.summary().items())[:1 + len(RANKS)])


def cmc_map(dist: np.ndarray, q_pids, g_pids, q_cams, g_cams) -> RetrievalResult:
    """
    CMC curve and mAP.

    AP is the mean, over a query's positives, of the precision at each
    positive's rank.

    Raises:
        DimensionError: label arrays do not match the distance matrix
        EvaluationError: no query has a valid positive
    """
    dist = np.asarray(dist)
    q_pids, g_pids = np.asarray(q_pids), np.asarray(g_pids)
    q_cams, g_cams = np.asarray(q_cams), np.asarray(g_cams)
    num_q, num_g = dist.shape
    if len(q_pids) != num_q or len(q_cams) != num_q or len(g_pids) != num_g or len(g_cams) != num_g:
        raise DimensionError("labels do not match the distance matrix", dist.shape, q_pids.shape, g_pids.shape)

    order = np.argsort(dist, axis=1, kind="stable")
    curves, aps = [], []
    skipped = 0
    for i in range(num_q):
        ranked = order[i]
        keep = ~((g_pids[ranked] == q_pids[i]) & (g_cams[ranked] == q_cams[i]))
        hits = (g_pids[ranked][keep] == q_pids[i]).astype(np.float64)
        if not hits.any():
            skipped += 1
            continue
        curve = np.ones(num_g)
        first = int(np.argmax(hits))
        curve[:first] = 0.0
        curves.append(curve)
        precision = np.cumsum(hits) / np.arange(1, len(hits) + 1)
        aps.append(float((precision * hits).sum() / hits.sum()))
    if not curves:
        raise EvaluationError(f"no valid query among {num_q}: every query lacks a cross-camera positive")
    if skipped:
        logger.info("skipped %d of %d queries without a valid positive", skipped, num_q)
    return RetrievalResult(np.mean(curves, axis=0), float(np.mean(aps)), len(curves), skipped)


def embed_dataset(model: OHFormer, dataset: ReidDataset, role: str = "gallery", batch_size: int = 32) -> RetrievalSet:
    """Inference embeddings of a whole split, in eval mode."""
    model.eval()
    chunks = [model.embed(Tensor(dataset.images[start:start + batch_size]))
              for start in range(0, len(dataset), batch_size)]
    return RetrievalSet(np.concatenate(chunks, axis=0), dataset.pids, dataset.cams, role)


def evaluate(model: OHFormer, query: ReidDataset, gallery: ReidDataset) -> RetrievalResult:
    q = embed_dataset(model, query, "query")
    g = embed_dataset(model, gallery, "gallery")
    return cmc_map(dist_matrix(q, g), q.pids, g.pids, q.cams, g.cams)


def write_metrics(result: RetrievalResult, directory: PathLike) -> Path:
    path = Path(directory) / METRICS_NAME
    try:
        path.parent.mkdir(parents=True, exist_ok=True)
        with open(path, "w", newline="", encoding="utf-8") as fh:
            writer = csv.writer(fh, delimiter="\t", lineterminator="\n")
            writer.writerow(("metric", "value"))
            for key, value in result.summary().items():
                writer.writerow((key, value if isinstance(value, int) else f"{value:.6f}"))
    except OSError as e:
        raise OutputError(f"cannot write {path}: {e}") from e
    return path
