"""Training objectives.

All losses take raw tensors and return scalar tensors, so they compose
freely in the training loop. The rank-style losses use the
``log(1 + sum(exp(...)))`` form, computed as a log-sum-exp with an extra
zero term for stability.

Degenerate inputs that are defined away instead of raised (an all-zero
human alignment map) bump a counter in ``diagnostics``.
"""

from __future__ import annotations

from collections import Counter

import torch

_CLAMP = 1e-12

diagnostics: Counter = Counter()


def _log1p_exp_sum(terms: torch.Tensor) -> torch.Tensor:
    """``log(1 + sum(exp(terms)))``, stable for large magnitudes."""
    zero = terms.new_zeros(1)
    return torch.logsumexp(torch.cat([zero, terms.reshape(-1)]), dim=0)


def multilabel_rank_loss(cosines: torch.Tensor, positive: torch.Tensor,
                         tau: float) -> torch.Tensor:
    """Multi-label article loss over temperature-scaled cosines.

    Scores are ``tau * cosines``; the loss drives every positive
    article's score above zero and every negative's below:
    ``log(1 + sum_pos exp(-s)) + log(1 + sum_neg exp(s))``. Either side
    may be empty, in which case its term is ``log 1 = 0``.
    """
    positive = positive.bool()
    scores = tau * cosines
    return _log1p_exp_sum(-scores[positive]) + _log1p_exp_sum(scores[~positive])


def graded_rank_loss(scores: torch.Tensor, grades, tau: float) -> torch.Tensor:
    """Pairwise ranking loss over graded relevance.

    Every candidate pair whose grades differ contributes
    ``exp(tau * (score_low - score_high))``, where "high"/"low" refer to
    the grades; the loss is ``log(1 + sum(...))``. Equal grades impose
    no ordering and are skipped. With no ordered pair the loss is 0.
    """
    grades = torch.as_tensor(grades)
    higher = grades.unsqueeze(1) > grades.unsqueeze(0)  # [i, j]: grade_i > grade_j
    if not bool(higher.any()):
        return scores.new_zeros(())
    margins = scores.unsqueeze(0) - scores.unsqueeze(1)  # [i, j] = s_j - s_i
    return _log1p_exp_sum(tau * margins[higher])


def label_cross_entropy(probs: torch.Tensor, target: int) -> torch.Tensor:
    """Negative log probability of the target class, clamped at 1e-12."""
    return -torch.log(probs[target].clamp_min(_CLAMP))


def total_loss(article_losses, main_loss: torch.Tensor) -> torch.Tensor:
    """Mean of the per-case article losses plus the main-task loss."""
    if len(article_losses) == 0:
        return main_loss
    return torch.stack(list(article_losses)).mean() + main_loss


def rationale_loss(logits: torch.Tensor, labels) -> torch.Tensor:
    """Summed per-sentence cross entropy for the 4-way rationale tagger."""
    labels = torch.as_tensor(labels, dtype=torch.long)
    if logits.shape[0] != labels.shape[0]:
        raise ValueError("one label per sentence required")
    if labels.numel() and (int(labels.min()) < 0 or int(labels.max()) > 3):
        raise ValueError("rationale labels must lie in 0..3")
    probs = torch.softmax(logits, dim=-1)
    picked = probs[torch.arange(labels.shape[0]), labels]
    return -torch.log(picked.clamp_min(_CLAMP)).sum()


def alignment_divergence(human: torch.Tensor, affinity: torch.Tensor) -> torch.Tensor:
    """KL from the normalized human alignment map to the model's affinity.

    The human map is normalized by its total mass; the affinity matrix
    is turned into a distribution with a softmax over all cells. Cells
    with zero human mass contribute nothing. A map with no mass at all
    yields 0 and bumps ``diagnostics["alignment_empty"]``.
    """
    if human.shape != affinity.shape:
        raise ValueError(f"shape mismatch: {tuple(human.shape)} vs {tuple(affinity.shape)}")
    flat = human.reshape(-1)
    total = flat.sum()
    if float(total) <= 0:
        diagnostics["alignment_empty"] += 1
        return affinity.new_zeros(())
    target = flat / total
    log_model = torch.log_softmax(affinity.reshape(-1), dim=0)
    mask = target > 0
    return (target[mask] * (torch.log(target[mask]) - log_model[mask])).sum()
