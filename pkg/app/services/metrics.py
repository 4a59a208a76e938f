from dataclasses import dataclass
from typing import Dict, Iterable, List, Sequence

import numpy as np
from loguru import logger

from app.models.containers import PairSet
from app.models.schemas import MetricRecord, MetricReport
from app.services.model import FactorModel, score_matrix
from app.utils.validators import ensure, validate_top_k


def _truncate(labels: Sequence[int], k: int) -> np.ndarray:
    ensure(validate_top_k(k))
    return np.asarray(labels, dtype=np.float64)[:k]


def dcg_at_k(labels: Sequence[int], k: int) -> float:
    """Labels are in rank order; K past the list end truncates."""
    top = _truncate(labels, k)
    discounts = 1.0 / np.log2(np.arange(2, len(top) + 2))
    return float(top @ discounts)


def map_at_k(labels: Sequence[int], k: int) -> float:
    """Average precision over hits in the top K, normalised by min(K, total positives)."""
    top = _truncate(labels, k)
    total = int(np.sum(labels))
    if total == 0:
        return 0.0
    hits = np.cumsum(top)
    precision = hits / np.arange(1, len(top) + 1)
    return float((precision * top).sum() / min(k, total))


def snips_metric(values: np.ndarray, m_bar: np.ndarray, labels: np.ndarray, clip_floor: float = 0.01) -> float:
    """Self-normalised IPS estimate of a per-pair metric."""
    values = np.asarray(values, dtype=np.float64)
    m_bar = np.maximum(np.asarray(m_bar, dtype=np.float64), clip_floor)
    weights = np.asarray(labels, dtype=np.float64) / m_bar
    total = weights.sum()
    if total <= 0:
        raise ValueError("SNIPS weights sum to zero; no positive pairs")
    return float((weights * values).sum() / total)


def mean_user_pcc(m_bar: np.ndarray, m: np.ndarray) -> float:
    """Mean over users of the Pearson correlation between estimated and true exposure rows."""
    m_bar = np.asarray(m_bar, dtype=np.float64)
    m = np.asarray(m, dtype=np.float64)
    if m_bar.shape != m.shape or m.ndim != 2:
        raise ValueError(f"exposure matrices must share a 2-d shape, got {m_bar.shape} and {m.shape}")

    a = m_bar - m_bar.mean(axis=1, keepdims=True)
    b = m - m.mean(axis=1, keepdims=True)
    norm_a = np.sqrt((a * a).sum(axis=1))
    norm_b = np.sqrt((b * b).sum(axis=1))
    valid = (norm_a > 0) & (norm_b > 0)

    skipped = int((~valid).sum())
    if skipped == len(valid):
        raise ValueError("every user has a constant exposure row; PCC is undefined")
    if skipped:
        logger.warning(f"Skipped {skipped} users with constant exposure rows in PCC")

    pcc = (a[valid] * b[valid]).sum(axis=1) / (norm_a[valid] * norm_b[valid])
    return float(pcc.mean())


@dataclass(frozen=True, eq=False)
class RankedList:
    """Items of one user in descending score order, ties by item index."""
    user: int
    items: np.ndarray
    labels: np.ndarray


def rank_test_lists(scores: np.ndarray, pairs: PairSet) -> List[RankedList]:
    """Group test pairs per user and order them by score."""
    pair_scores = scores[pairs.users, pairs.items]
    order = np.lexsort((pairs.items, -pair_scores, pairs.users))
    users = pairs.users[order]
    items = pairs.items[order]
    labels = pairs.labels[order]

    boundaries = np.flatnonzero(np.diff(users)) + 1
    lists = []
    for chunk_users, chunk_items, chunk_labels in zip(
            np.split(users, boundaries), np.split(items, boundaries), np.split(labels, boundaries)):
        lists.append(RankedList(int(chunk_users[0]), chunk_items, chunk_labels))
    return lists


def ranking_metrics(scores: np.ndarray, pairs: PairSet, ks: Iterable[int]) -> Dict[str, float]:
    """Mean DCG@K and MAP@K over users with a nonempty test list, keyed like `dcg@3`."""
    if len(pairs) == 0:
        raise ValueError("empty test set")
    ks = list(ks)
    lists = rank_test_lists(scores, pairs)
    results = {}
    for k in ks:
        results[f"dcg@{k}"] = float(np.mean([dcg_at_k(r.labels, k) for r in lists]))
        results[f"map@{k}"] = float(np.mean([map_at_k(r.labels, k) for r in lists]))
    return results


def evaluate(model: FactorModel, test_pairs: PairSet, ks: Sequence[int] = (1, 2, 3),
             method: str = "", seed: int = 0) -> MetricReport:
    values = ranking_metrics(score_matrix(model), test_pairs, ks)
    records = []
    for key, value in values.items():
        metric, k = key.split("@")
        records.append(MetricRecord(method=method, seed=seed, metric=metric, k=int(k), value=value))
    logger.debug(f"Evaluated {method or 'model'} seed {seed}: {values}")
    return MetricReport(records=records)


def per_pair_dcg(scores: np.ndarray, pairs: PairSet, k: int) -> np.ndarray:
    """Each pair's contribution label / log2(rank + 1) inside its user's top K, zero below."""
    ensure(validate_top_k(k))
    pair_scores = scores[pairs.users, pairs.items]
    order = np.lexsort((pairs.items, -pair_scores, pairs.users))
    users = pairs.users[order]

    starts = np.r_[0, np.flatnonzero(np.diff(users)) + 1]
    group_start = np.repeat(starts, np.diff(np.r_[starts, len(users)]))
    rank = np.arange(len(users)) - group_start + 1

    contribution = np.where(rank <= k, pairs.labels[order] / np.log2(rank + 1), 0.0)
    out = np.empty(len(pairs), dtype=np.float64)
    out[order] = contribution
    return out
