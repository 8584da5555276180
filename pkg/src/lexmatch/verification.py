"""Independent reference implementations and a gradient checker.

Everything here is written the slow, obvious way (explicit loops, no
shared helpers with the production code) so tests can compare the two
paths. The gradient checker perturbs parameters one coordinate at a time
and compares central differences against autograd.
"""

from __future__ import annotations

import math
import random
from dataclasses import dataclass

import numpy as np
import torch


def oracle_softmax(scores: list[float]) -> list[float]:
    top = max(scores)
    exps = [math.exp(s - top) for s in scores]
    total = sum(exps)
    return [e / total for e in exps]


def oracle_cross_attention(affinity: np.ndarray, x: np.ndarray,
                           y: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Row/column softmax attention, one weight at a time."""
    n_x, n_y = affinity.shape
    fused_x = np.zeros((n_x, x.shape[1] + y.shape[1]))
    fused_y = np.zeros((n_y, x.shape[1] + y.shape[1]))
    for i in range(n_x):
        weights = oracle_softmax(list(affinity[i, :]))
        context = sum(weights[j] * y[j] for j in range(n_y))
        fused_x[i] = np.concatenate([x[i], context])
    for j in range(n_y):
        weights = oracle_softmax(list(affinity[:, j]))
        context = sum(weights[i] * x[i] for i in range(n_x))
        fused_y[j] = np.concatenate([y[j], context])
    return fused_x, fused_y


def oracle_article_attention(hidden: np.ndarray, memory: np.ndarray,
                             w_q: np.ndarray, w_k: np.ndarray,
                             w_v: np.ndarray):
    """Per-article attention over sentences with plain loops.

    ``w_*`` are the projection matrices applied as ``w @ vector``.
    Returns the raw affinities, value vectors, and article summaries.
    """
    n, n_articles = hidden.shape[0], memory.shape[0]
    queries = [w_q @ memory[k] for k in range(n_articles)]
    keys = [w_k @ hidden[i] for i in range(n)]
    values = [w_v @ hidden[i] for i in range(n)]
    lam = np.zeros((n, n_articles))
    for i in range(n):
        for k in range(n_articles):
            lam[i, k] = float(np.dot(queries[k], keys[i]))
    summaries = np.zeros((n_articles, w_v.shape[0]))
    for k in range(n_articles):
        weights = oracle_softmax(list(lam[:, k]))
        for i in range(n):
            summaries[k] += weights[i] * values[i]
    return lam, np.stack(values), summaries


def oracle_cosine(a, b) -> float:
    num = sum(float(ai) * float(bi) for ai, bi in zip(a, b))
    na = math.sqrt(sum(float(ai) ** 2 for ai in a))
    nb = math.sqrt(sum(float(bi) ** 2 for bi in b))
    if na == 0.0 or nb == 0.0:
        return 0.0
    return num / (na * nb)


def oracle_ndcg(grades, k: int, gain: str = "exp") -> float:
    def one(sequence):
        total = 0.0
        for rank, rel in enumerate(sequence[:k], start=1):
            g = (2.0 ** rel - 1.0) if gain == "exp" else float(rel)
            total += g / (math.log(rank + 1) / math.log(2))
        return total

    best = one(sorted(grades, reverse=True))
    if best == 0.0:
        return 0.0
    return one(list(grades)) / best


def oracle_average_precision(binary) -> float:
    relevant = sum(binary)
    if relevant == 0:
        return 0.0
    total = 0.0
    seen = 0
    for rank, rel in enumerate(binary, start=1):
        if rel:
            seen += 1
            total += seen / rank
    return total / relevant


def oracle_precision_at_k(binary, k: int) -> float:
    return sum(binary[:k]) / k


def oracle_bm25(docs: dict[str, list[str]], query: list[str], doc_id: str,
                k1: float = 1.2, b: float = 0.75) -> float:
    """Straight transcription of the scoring formula."""
    n = len(docs)
    avg_len = sum(len(toks) for toks in docs.values()) / n
    doc = docs[doc_id]
    score = 0.0
    for term in query:
        f = doc.count(term)
        if f == 0:
            continue
        df = sum(1 for toks in docs.values() if term in toks)
        idf = math.log(1.0 + (n - df + 0.5) / (df + 0.5))
        score += idf * f * (k1 + 1.0) / (f + k1 * (1.0 - b + b * len(doc) / avg_len))
    return score


def oracle_multilabel_rank_loss(cosines, positive, tau: float) -> float:
    pos = sum(math.exp(-tau * c) for c, p in zip(cosines, positive) if p)
    neg = sum(math.exp(tau * c) for c, p in zip(cosines, positive) if not p)
    return math.log(1.0 + pos) + math.log(1.0 + neg)


def oracle_graded_rank_loss(scores, grades, tau: float) -> float:
    total = 0.0
    for i, (s_hi, g_hi) in enumerate(zip(scores, grades)):
        for j, (s_lo, g_lo) in enumerate(zip(scores, grades)):
            if g_hi > g_lo:
                total += math.exp(tau * (s_lo - s_hi))
    return math.log(1.0 + total)


@dataclass
class GradCheckReport:
    """Gradient agreement for one parameter tensor."""

    parameter: str
    max_rel_error: float
    coordinates: int
    threshold: float = 1e-4

    @property
    def passed(self) -> bool:
        return self.max_rel_error < self.threshold


def worst_report(reports: list[GradCheckReport]) -> GradCheckReport:
    return max(reports, key=lambda r: r.max_rel_error)


def finite_difference_check(loss_fn, named_parameters, coords_per_param: int = 4,
                            step: float = 1e-5, seed: int = 0,
                            scale_floor: float = 1e-6,
                            threshold: float = 1e-4) -> list[GradCheckReport]:
    """Compare autograd gradients against central differences.

    ``loss_fn`` must be a deterministic zero-argument callable returning
    a scalar tensor. A few coordinates per parameter tensor are sampled;
    each relative error is ``|fd - grad| / max(|fd|, |grad|, floor)``
    with the step scaled by the coordinate's magnitude. A perturbation
    that makes the loss non-finite is reported as an infinite error, not
    a crash. Run the model in 64-bit for meaningful thresholds.
    """
    params = {name: p for name, p in named_parameters if p.requires_grad}
    if not params:
        raise ValueError("no trainable parameters to check")
    for p in params.values():
        p.grad = None
    loss = loss_fn()
    loss.backward()
    grads = {name: (p.grad.detach().clone() if p.grad is not None
                    else torch.zeros_like(p))
             for name, p in params.items()}

    rng = random.Random(seed)
    reports: list[GradCheckReport] = []
    for name, p in params.items():
        flat = p.data.reshape(-1)
        n = flat.numel()
        picks = rng.sample(range(n), min(coords_per_param, n))
        worst_here = 0.0
        for idx in picks:
            original = flat[idx].item()
            h = step * max(1.0, abs(original))
            flat[idx] = original + h
            with torch.no_grad():
                up = float(loss_fn())
            flat[idx] = original - h
            with torch.no_grad():
                down = float(loss_fn())
            flat[idx] = original
            if not (math.isfinite(up) and math.isfinite(down)):
                worst_here = math.inf
                continue
            fd = (up - down) / (2.0 * h)
            an = float(grads[name].reshape(-1)[idx])
            rel = abs(fd - an) / max(abs(fd), abs(an), scale_floor)
            worst_here = max(worst_here, rel)
        reports.append(GradCheckReport(parameter=name, max_rel_error=worst_here,
                                       coordinates=len(picks), threshold=threshold))
    return reports
