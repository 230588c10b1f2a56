"""
Ranking and calibration metrics.

AUC is the Mann-Whitney statistic: with average ranks for tied scores,
    AUC = (R_pos - n_pos (n_pos + 1) / 2) / (n_pos n_neg)
which credits a tied positive/negative pair with 0.5.
"""
from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Iterable, Optional, Tuple

import numpy as np
import pandas as pd
from scipy.stats import rankdata

from errors import DegenerateLabelsError, DomainError
from ml.losses import PROB_EPS, cross_entropy

CALIBRATION_BUCKETS = 10
BRUTEFORCE_CHUNK = 1024


@dataclass(frozen=True)
class ScoredExample:
    score: float
    label: int
    group: Optional[str] = None

    def __post_init__(self):
        if not math.isfinite(self.score):
            raise DomainError(f"score must be finite, got {self.score}")
        if self.label not in (0, 1):
            raise DomainError(f"label must be 0 or 1, got {self.label}")


def _arrays(scores, labels) -> Tuple[np.ndarray, np.ndarray]:
    scores = np.asarray(scores, dtype=np.float64).ravel()
    labels = np.asarray(labels).ravel()
    if scores.shape != labels.shape:
        raise DomainError(f"{scores.shape[0]} scores but {labels.shape[0]} labels")
    if not np.all(np.isfinite(scores)):
        raise DomainError("scores must be finite")
    if np.any((labels != 0) & (labels != 1)):
        raise DomainError("labels must be 0 or 1")
    labels = labels.astype(bool)
    n_pos = int(labels.sum())
    if n_pos == 0 or n_pos == labels.size:
        raise DegenerateLabelsError(
            f"AUC needs both classes, got {n_pos} positives and {labels.size - n_pos} negatives"
        )
    return scores, labels


def auc(scores, labels) -> float:
    scores, labels = _arrays(scores, labels)
    n_pos = int(labels.sum())
    n_neg = labels.size - n_pos
    ranks = rankdata(scores, method="average")
    rank_sum = float(ranks[labels].sum())
    return (rank_sum - n_pos * (n_pos + 1) / 2.0) / (n_pos * n_neg)


def auc_bruteforce(scores, labels) -> float:
    """Direct comparison of every positive/negative pair (for small n)."""
    scores, labels = _arrays(scores, labels)
    pos, neg = scores[labels], scores[~labels]
    wins = 0.0
    for start in range(0, pos.size, BRUTEFORCE_CHUNK):
        block = pos[start:start + BRUTEFORCE_CHUNK, None]
        wins += float(np.count_nonzero(block > neg[None, :]))
        wins += 0.5 * float(np.count_nonzero(block == neg[None, :]))
    return wins / (pos.size * neg.size)


def _unpack(examples: Iterable[ScoredExample]) -> Tuple[np.ndarray, np.ndarray]:
    examples = list(examples)
    return (np.array([e.score for e in examples], dtype=np.float64),
            np.array([e.label for e in examples], dtype=np.int64))


def auc_of(examples: Iterable[ScoredExample]) -> float:
    return auc(*_unpack(examples))


def auc_bruteforce_of(examples: Iterable[ScoredExample]) -> float:
    return auc_bruteforce(*_unpack(examples))


def auc_null_std(n_pos: int, n_neg: int) -> float:
    """Standard deviation of AUC under random scoring (no ties)."""
    return math.sqrt((n_pos + n_neg + 1) / (12.0 * n_pos * n_neg))


def log_loss(scores, labels, eps: float = PROB_EPS) -> float:
    scores = np.asarray(scores, dtype=np.float64)
    labels = np.asarray(labels, dtype=np.float64)
    if scores.size == 0:
        raise DomainError("log_loss over an empty set")
    loss, _ = cross_entropy(scores, labels, eps)
    return float(np.mean(loss))


def calibration_table(scores, labels, buckets: int = CALIBRATION_BUCKETS) -> pd.DataFrame:
    """Mean prediction vs empirical rate over equal-count score buckets."""
    scores = np.asarray(scores, dtype=np.float64)
    labels = np.asarray(labels, dtype=np.float64)
    order = np.argsort(scores, kind="stable")
    rows = []
    for bucket, index in enumerate(np.array_split(order, buckets)):
        if index.size == 0:
            continue
        rows.append({
            "bucket": bucket,
            "count": int(index.size),
            "mean_predicted": float(scores[index].mean()),
            "empirical_rate": float(labels[index].mean()),
        })
    return pd.DataFrame(rows, columns=["bucket", "count", "mean_predicted", "empirical_rate"])


def expected_calibration_error(table: pd.DataFrame) -> float:
    """Count-weighted mean absolute gap between prediction and outcome per bucket."""
    if table.empty:
        return 0.0
    gap = (table["mean_predicted"] - table["empirical_rate"]).abs()
    return float((gap * table["count"]).sum() / table["count"].sum())


def relative_gap(predicted: float, empirical: float) -> Optional[float]:
    if empirical == 0:
        return None
    return abs(predicted - empirical) / empirical
