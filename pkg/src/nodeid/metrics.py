"""Evaluation metrics: accuracy, ROC-AUC, ranking hits, clustering agreement.

hits@k follows the ranking convention used by link-prediction benchmarks: a
positive scores a hit when it ranks above the k-th best negative.  Ties are
resolved in expectation (uniformly random tie order), which keeps the metric
deterministic and gives the exact closed-form null k / (n_neg + 1) when all
scores are identical.
"""

from __future__ import annotations

import numpy as np
from scipy.optimize import linear_sum_assignment


def accuracy(pred: np.ndarray, labels: np.ndarray) -> float:
    pred = np.asarray(pred)
    labels = np.asarray(labels)
    if len(pred) == 0:
        raise ValueError("accuracy of an empty set")
    return float((pred == labels).mean())


def roc_auc_binary(scores: np.ndarray, labels: np.ndarray) -> float:
    """Rank-based AUC with midrank tie handling."""
    scores = np.asarray(scores, dtype=np.float64).reshape(-1)
    labels = np.asarray(labels).reshape(-1)
    pos = scores[labels == 1]
    neg = scores[labels == 0]
    if len(pos) == 0 or len(neg) == 0:
        raise ValueError("roc_auc needs both classes present")
    order = np.argsort(scores, kind="stable")
    ranks = np.empty(len(scores), dtype=np.float64)
    sorted_scores = scores[order]
    i = 0
    while i < len(scores):
        j = i
        while j + 1 < len(scores) and sorted_scores[j + 1] == sorted_scores[i]:
            j += 1
        ranks[order[i:j + 1]] = 0.5 * (i + j) + 1.0
        i = j + 1
    sum_pos = ranks[labels == 1].sum()
    n_pos, n_neg = len(pos), len(neg)
    return float((sum_pos - n_pos * (n_pos + 1) / 2.0) / (n_pos * n_neg))


def hits_at_k(pos_scores: np.ndarray, neg_scores: np.ndarray, k: int) -> float:
    """Expected fraction of positives ranked above the k-th best negative."""
    pos = np.asarray(pos_scores, dtype=np.float64).reshape(-1)
    neg = np.asarray(neg_scores, dtype=np.float64).reshape(-1)
    if k < 1:
        raise ValueError("k must be >= 1")
    if len(neg) == 0 or len(pos) == 0:
        raise ValueError("hits_at_k needs positives and negatives")
    neg_sorted = np.sort(neg)[::-1]
    total = 0.0
    for s in pos:
        above = int(np.searchsorted(-neg_sorted, -s, side="left"))   # negs strictly greater
        ties = int(np.searchsorted(-neg_sorted, -s, side="right")) - above
        if above >= k:
            continue
        if above + ties < k:
            total += 1.0
        else:
            # positive sits inside the tie block straddling rank k
            total += min(max(k - above, 0), ties + 1) / (ties + 1)
    return total / len(pos)


def null_hits_at_k(k: int, num_negatives: int) -> float:
    """hits@k of an uninformative scorer (all scores identical)."""
    return min(k, num_negatives + 1) / (num_negatives + 1)


def _contingency(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    a = np.asarray(a, dtype=np.int64)
    b = np.asarray(b, dtype=np.int64)
    _, ai = np.unique(a, return_inverse=True)
    _, bi = np.unique(b, return_inverse=True)
    table = np.zeros((ai.max() + 1, bi.max() + 1), dtype=np.int64)
    np.add.at(table, (ai, bi), 1)
    return table


def nmi(assignments: np.ndarray, labels: np.ndarray) -> float:
    """Normalized mutual information with arithmetic-mean normalization."""
    table = _contingency(assignments, labels).astype(np.float64)
    n = table.sum()
    pa = table.sum(axis=1) / n
    pb = table.sum(axis=0) / n
    ha = -np.sum(pa[pa > 0] * np.log(pa[pa > 0]))
    hb = -np.sum(pb[pb > 0] * np.log(pb[pb > 0]))
    pij = table / n
    mask = pij > 0
    mi = float(np.sum(pij[mask] * np.log(pij[mask] / np.outer(pa, pb)[mask])))
    denom = 0.5 * (ha + hb)
    if denom <= 0:
        return 1.0 if mi == 0 and ha == hb == 0 else 0.0
    return float(mi / denom)


def pairwise_f1(assignments: np.ndarray, labels: np.ndarray) -> float:
    """F1 over same-cluster node pairs (precision/recall of co-assignment)."""
    table = _contingency(assignments, labels)

    def pairs(counts):
        counts = counts.astype(np.float64)
        return float((counts * (counts - 1) / 2.0).sum())

    tp = pairs(table.reshape(-1))
    pred_pairs = pairs(table.sum(axis=1))
    true_pairs = pairs(table.sum(axis=0))
    if pred_pairs == 0 or true_pairs == 0 or tp == 0:
        return 0.0
    precision = tp / pred_pairs
    recall = tp / true_pairs
    return float(2 * precision * recall / (precision + recall))


def matched_macro_f1(assignments: np.ndarray, labels: np.ndarray) -> float:
    """Macro F1 after optimally matching clusters to label ids."""
    table = _contingency(assignments, labels).astype(np.float64)
    rows, cols = linear_sum_assignment(-table)
    f1s = []
    for r, c in zip(rows, cols):
        tp = table[r, c]
        fp = table[r].sum() - tp
        fn = table[:, c].sum() - tp
        if tp == 0:
            f1s.append(0.0)
        else:
            f1s.append(2 * tp / (2 * tp + fp + fn))
    # label classes never matched to any cluster count as zero
    unmatched = table.shape[1] - len(cols)
    f1s.extend([0.0] * max(unmatched, 0))
    return float(np.mean(f1s)) if f1s else 0.0
