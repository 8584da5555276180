"""Ranking and classification metrics, plus the experiment CSV format.

Ranking metrics take relevance grades in ranked order (best first as the
system scored them). Graded metrics use the standard exponential gain by
default; set-based metrics binarize at a configurable minimum grade,
which defaults to the top grade of the scale.
"""

from __future__ import annotations

import logging
import math
from collections import Counter
from pathlib import Path

logger = logging.getLogger(__name__)

RANK_KS = (5, 10, 20, 30)

diagnostics: Counter = Counter()


def gain_value(rel: int, gain: str = "exp") -> float:
    if gain == "exp":
        return float(2 ** rel - 1)
    if gain == "linear":
        return float(rel)
    raise ValueError(f"unknown gain {gain!r}")


def dcg_at_k(grades, k: int, gain: str = "exp") -> float:
    """Discounted cumulative gain over the first ``k`` ranks."""
    total = 0.0
    for rank, rel in enumerate(grades[:k], start=1):
        total += gain_value(rel, gain) / math.log2(rank + 1)
    return total


def ndcg_at_k(grades, k: int, gain: str = "exp") -> float:
    """DCG normalized by the ideal ordering; 0 when nothing is relevant."""
    ideal = dcg_at_k(sorted(grades, reverse=True), k, gain)
    if ideal == 0.0:
        return 0.0
    return dcg_at_k(grades, k, gain) / ideal


def binarize(grades, min_grade: int) -> list[int]:
    return [1 if rel >= min_grade else 0 for rel in grades]


def precision_at_k(binary, k: int) -> float:
    if k < 1:
        raise ValueError("k must be >= 1")
    return sum(binary[:k]) / k


def average_precision(binary) -> float:
    """Mean of precision at each relevant rank; 0 when nothing is relevant."""
    hits = 0
    total = 0.0
    for rank, rel in enumerate(binary, start=1):
        if rel:
            hits += 1
            total += hits / rank
    if hits == 0:
        return 0.0
    return total / hits


def ranking_metrics(ranked_grades: list[list[int]], levels: int,
                    min_grade: int | None = None, gain: str = "exp",
                    ks=RANK_KS) -> dict[str, float]:
    """Mean retrieval metrics over queries: MAP, P@k, and N@k (NDCG).

    ``ranked_grades`` holds one grade list per query, already in the
    system's ranked order. ``min_grade`` binarizes for precision and
    MAP; ``None`` means only the top grade (``levels - 1``) counts as
    relevant. Queries with no relevant candidate at all are excluded
    from MAP (their AP is undefined) and tallied in
    ``diagnostics["map_queries_without_relevant"]``.
    """
    if not ranked_grades:
        raise ValueError("no queries to evaluate")
    if min_grade is None:
        min_grade = levels - 1
    out: dict[str, float] = {}
    n = len(ranked_grades)
    binaries = [binarize(g, min_grade) for g in ranked_grades]
    with_relevant = [b for b in binaries if any(b)]
    skipped = n - len(with_relevant)
    if skipped:
        diagnostics["map_queries_without_relevant"] += skipped
        logger.warning("%d of %d queries have no relevant candidate at grade "
                       ">= %d; excluded from MAP", skipped, n, min_grade)
    if with_relevant:
        out["MAP"] = sum(average_precision(b) for b in with_relevant) / len(with_relevant)
    else:
        out["MAP"] = 0.0
    for k in ks:
        out[f"P@{k}"] = sum(precision_at_k(b, k) for b in binaries) / n
    for k in ks:
        out[f"N@{k}"] = sum(ndcg_at_k(g, k, gain) for g in ranked_grades) / n
    return out


def macro_prf(y_true, y_pred, n_labels: int):
    """Macro precision/recall/F1 over a fixed label set.

    A label with no predictions scores precision 0, one with no true
    examples scores recall 0; both situations are tallied so callers can
    see how often the zero convention fired. Returns
    ``(precision, recall, f1, n_zeroed)``.
    """
    if len(y_true) != len(y_pred):
        raise ValueError("y_true and y_pred must have equal length")
    precisions, recalls, f1s = [], [], []
    zeroed = 0
    for label in range(n_labels):
        tp = sum(1 for t, p in zip(y_true, y_pred) if t == label and p == label)
        fp = sum(1 for t, p in zip(y_true, y_pred) if t != label and p == label)
        fn = sum(1 for t, p in zip(y_true, y_pred) if t == label and p != label)
        if tp + fp == 0:
            precision = 0.0
            zeroed += 1
        else:
            precision = tp / (tp + fp)
        if tp + fn == 0:
            recall = 0.0
            zeroed += 1
        else:
            recall = tp / (tp + fn)
        f1 = 0.0 if precision + recall == 0 else 2 * precision * recall / (precision + recall)
        precisions.append(precision)
        recalls.append(recall)
        f1s.append(f1)
    n = n_labels
    return sum(precisions) / n, sum(recalls) / n, sum(f1s) / n, zeroed


def accuracy(y_true, y_pred) -> float:
    if not y_true:
        raise ValueError("no examples to evaluate")
    return sum(1 for t, p in zip(y_true, y_pred) if t == p) / len(y_true)


def matching_metrics(y_true, y_pred, n_labels: int) -> dict[str, float]:
    """Macro classification metrics for pair matching."""
    precision, recall, f1, zeroed = macro_prf(y_true, y_pred, n_labels)
    if zeroed:
        logger.warning("macro metrics zeroed %d absent class sides", zeroed)
    return {"macro_p": precision, "macro_r": recall, "macro_f1": f1,
            "accuracy": accuracy(y_true, y_pred)}


def rank_by_score(scores: dict[str, float]) -> list[str]:
    """Candidate ids by descending score; ties break by ascending id."""
    return [cid for cid, _ in sorted(scores.items(), key=lambda kv: (-kv[1], kv[0]))]


def write_metrics_csv(path: str | Path, rows: list[dict[str, float]],
                      labels: list[str] | None = None) -> None:
    """Write one row per fold plus a mean row, scores scaled to 0..100.

    Column order follows the first row's keys; every value is formatted
    with two decimals so repeated runs produce identical bytes.
    """
    if not rows:
        raise ValueError("no metric rows to write")
    columns = list(rows[0])
    for row in rows[1:]:
        if list(row) != columns:
            raise ValueError("metric rows disagree on columns")
    if labels is None:
        labels = [str(i) for i in range(len(rows))]
    lines = ["fold," + ",".join(columns)]
    for label, row in zip(labels, rows):
        lines.append(label + "," + ",".join(f"{100 * row[c]:.2f}" for c in columns))
    means = {c: sum(row[c] for row in rows) / len(rows) for c in columns}
    lines.append("mean," + ",".join(f"{100 * means[c]:.2f}" for c in columns))
    Path(path).write_text("\n".join(lines) + "\n")
