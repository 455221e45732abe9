"""Exhaustive cosine retrieval and top-n recall metrics."""

import math
from dataclasses import dataclass, field

import numpy as np

from .errors import EmptyBatchError, NormalizationError, ShapeError


@dataclass
class EmbeddingIndex:
    ids: list
    matrix: np.ndarray

    def __post_init__(self):
        self.matrix = np.atleast_2d(np.asarray(self.matrix, dtype=np.float64))
        if len(self.ids) != self.matrix.shape[0] or len(self.ids) == 0:
            raise ShapeError("index needs one id per non-empty row")
        if len(set(self.ids)) != len(self.ids):
            raise ShapeError("index ids must be unique")
        if np.any(np.abs(np.linalg.norm(self.matrix, axis=1) - 1.0) > 1e-6):
            raise NormalizationError("index rows must be unit-norm")
        order = np.argsort(np.array(self.ids, dtype=object), kind="stable")
        self.id_rank = np.empty(len(self.ids), dtype=np.int64)
        self.id_rank[order] = np.arange(len(self.ids))


@dataclass
class RecallReport:
    ranks: np.ndarray
    n_refs: int
    recall: dict = field(default_factory=dict)
    top1pct_k: int = 1
    recall_top1pct: float = 0.0

    def as_dict(self):
        return {
            "n_queries": int(self.ranks.size),
            "n_refs": self.n_refs,
            "recall": {str(k): v for k, v in self.recall.items()},
            "top1pct_k": self.top1pct_k,
            "recall_top1pct": self.recall_top1pct,
        }


def _similarities(queries, index):
    q = np.atleast_2d(np.asarray(queries, dtype=np.float64))
    if q.shape[1] != index.matrix.shape[1]:
        raise ShapeError(f"query dim {q.shape[1]} != index dim {index.matrix.shape[1]}")
    return q @ index.matrix.T


def rank_all(queries, index):
    """Per query, reference ids sorted by descending similarity (ties by id).

    Returns ``(order, sims)`` where ``order[q]`` holds row indices into the
    index and ``sims[q]`` the matching similarities.
    """
    sims = _similarities(queries, index)
    order = np.empty(sims.shape, dtype=np.int64)
    for q, row in enumerate(sims):
        order[q] = np.lexsort((index.id_rank, -row))
    return order, np.take_along_axis(sims, order, axis=1)


def ground_truth_ranks(queries, index, truth_ids):
    """1-based rank of each query's true reference under the :func:`rank_all` order."""
    sims = _similarities(queries, index)
    pos = {pid: k for k, pid in enumerate(index.ids)}
    try:
        gt = np.array([pos[t] for t in truth_ids])
    except KeyError as exc:
        raise ShapeError(f"ground-truth id {exc.args[0]!r} not in index") from None
    gt_sim = sims[np.arange(len(gt)), gt][:, None]
    gt_rank = index.id_rank[gt][:, None]
    ahead = (sims > gt_sim) | ((sims == gt_sim) & (index.id_rank[None, :] < gt_rank))
    return 1 + ahead.sum(axis=1)


def top1pct_k(n_refs):
    return max(1, math.ceil(n_refs / 100))


def recall_at(ranks, ks=(1, 5, 10), n_refs=None):
    ranks = np.asarray(ranks, dtype=np.int64)
    if ranks.size == 0:
        raise EmptyBatchError("no ranks to evaluate")
    if np.any(ranks < 1):
        raise ValueError("ranks are 1-based")
    n_refs = int(ranks.max()) if n_refs is None else int(n_refs)
    k1 = top1pct_k(n_refs)
    return RecallReport(
        ranks=ranks,
        n_refs=n_refs,
        recall={int(k): float(np.mean(ranks <= k)) for k in ks},
        top1pct_k=k1,
        recall_top1pct=float(np.mean(ranks <= k1)),
    )


def recall_curve(report, k_max):
    """``(k, recall@k)`` rows for ``k = 1 .. k_max``."""
    ks = np.arange(1, int(k_max) + 1)
    counts = np.bincount(np.minimum(report.ranks, k_max + 1), minlength=k_max + 2)
    values = np.cumsum(counts[1:k_max + 1]) / report.ranks.size
    return np.column_stack([ks, values])


def evaluate(street_embs, aerial_embs, ids, ks=(1, 5, 10)):
    """Street-to-aerial recall where ``ids[i]`` names both views of pair ``i``."""
    index = EmbeddingIndex(list(ids), aerial_embs)
    ranks = ground_truth_ranks(street_embs, index, ids)
    return recall_at(ranks, ks, n_refs=len(ids))
