"""Multi-label metrics: micro/macro F1, rank-based AUC, precision@k.

Conventions, fixed here because edge behavior matters at aggressive
cutoffs: F1 binarizes at ``score >= threshold`` and returns 0 when its
denominator is 0; macro-F1 counts labels with no gold and no predicted
positives as 0; AUC uses midrank tie handling, returns None (never 0) when
a side has no members, and macro-AUC skips single-class labels; top-k ties
break toward the smaller label index.
"""

from __future__ import annotations

import numpy as np
from scipy.stats import rankdata


def _check(scores, gold):
    scores = np.asarray(scores, dtype=np.float64)
    gold = np.asarray(gold)
    if scores.shape != gold.shape:
        raise ValueError(f"scores {scores.shape} and gold {gold.shape} differ")
    return scores, gold.astype(bool)


def _f1(tp: float, fp: float, fn: float) -> float:
    denom = 2 * tp + fp + fn
    return 0.0 if denom == 0 else 2 * tp / denom


def micro_f1(scores, gold, threshold: float = 0.5) -> float:
    """Pool TP/FP/FN over all (patient, label) cells."""
    scores, gold = _check(scores, gold)
    pred = scores >= threshold
    tp = float((pred & gold).sum())
    fp = float((pred & ~gold).sum())
    fn = float((~pred & gold).sum())
    return _f1(tp, fp, fn)


def macro_f1(scores, gold, threshold: float = 0.5) -> float:
    """Per-label F1 averaged uniformly over labels."""
    scores, gold = _check(scores, gold)
    pred = scores >= threshold
    values = []
    for l in range(scores.shape[1]):
        tp = float((pred[:, l] & gold[:, l]).sum())
        fp = float((pred[:, l] & ~gold[:, l]).sum())
        fn = float((~pred[:, l] & gold[:, l]).sum())
        values.append(_f1(tp, fp, fn))
    return float(np.mean(values))


def _rank_auc(scores: np.ndarray, gold: np.ndarray):
    """Mann-Whitney AUC with midrank ties; None when single-class."""
    pos = int(gold.sum())
    neg = gold.size - pos
    if pos == 0 or neg == 0:
        return None
    ranks = rankdata(scores, method="average")
    return float((ranks[gold].sum() - pos * (pos + 1) / 2.0) / (pos * neg))


def micro_auc(scores, gold):
    """AUC over all cells pooled; None if every cell has the same class."""
    scores, gold = _check(scores, gold)
    return _rank_auc(scores.reshape(-1), gold.reshape(-1))


def per_label_auc(scores, gold) -> list:
    scores, gold = _check(scores, gold)
    return [_rank_auc(scores[:, l], gold[:, l]) for l in range(scores.shape[1])]


def macro_auc(scores, gold):
    """Mean per-label AUC over labels with both classes present."""
    values = [v for v in per_label_auc(scores, gold) if v is not None]
    return float(np.mean(values)) if values else None


def precision_at_k(scores, gold, k: int = 5) -> float:
    """Fraction of the k top-scored labels that are gold, averaged over
    patients; ties broken by ascending label index."""
    scores, gold = _check(scores, gold)
    if scores.shape[1] < k:
        raise ValueError(f"need at least {k} labels, got {scores.shape[1]}")
    top = np.argsort(-scores, axis=1, kind="stable")[:, :k]
    hits = np.take_along_axis(gold, top, axis=1)
    return float(hits.mean(axis=1).mean())


def top_k_labels(scores_row, k: int) -> list:
    """Descending-probability label indices, ties toward the smaller index."""
    return np.argsort(-np.asarray(scores_row), kind="stable")[:k].tolist()
