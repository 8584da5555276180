"""Law-article attention, article prediction, and legal-level interaction.

A context GRU rereads the case, every law article queries the hidden
states through a scale-free dot-product attention, and the attended
value vectors feed a prototype classifier that decides which articles
the case invokes. Sentence rows of the article-affinity matrix double as
"law distribution" vectors: their cosines drive the legal-level
cross-attention between two cases, and an article-guided pooling turns
the interaction states into one vector steered by the predicted
articles.
"""

from __future__ import annotations

import torch
from torch import nn
from torch.nn import functional as F

from .semantic import init_gru, interaction_weights

LEGAL_AFFINITIES = ("law_distribution", "unit", "random", "embedding_distance")


def cosine_rows(a: torch.Tensor, b: torch.Tensor, eps: float = 1e-8) -> torch.Tensor:
    """Pairwise cosine between the rows of two matrices; zero rows give 0."""
    return F.normalize(a, dim=-1, eps=eps) @ F.normalize(b, dim=-1, eps=eps).T


class ContextEncoder(nn.Module):
    """Bidirectional GRU that contextualizes sentence embeddings in place.

    Output width equals the input width (half per direction), so the
    hidden states can stand in for the embeddings downstream.
    """

    def __init__(self, emb_dim: int):
        super().__init__()
        if emb_dim % 2:
            raise ValueError("emb_dim must be even")
        self.gru = init_gru(nn.GRU(emb_dim, emb_dim // 2, batch_first=True,
                                   bidirectional=True))

    def forward(self, emb: torch.Tensor) -> torch.Tensor:
        hidden, _ = self.gru(emb.unsqueeze(0))
        return hidden.squeeze(0)


class ArticleAttention(nn.Module):
    """Each article attends over a case's contextualized sentences.

    The raw affinity matrix (sentences x articles) is kept unscaled; its
    rows act as per-sentence law distributions. Value vectors are shared
    across articles.
    """

    def __init__(self, emb_dim: int, attn_dim: int):
        super().__init__()
        self.query = nn.Linear(emb_dim, attn_dim, bias=False)
        self.key = nn.Linear(emb_dim, attn_dim, bias=False)
        self.value = nn.Linear(emb_dim, attn_dim, bias=False)

    def forward(self, hidden: torch.Tensor, memory: torch.Tensor):
        """``hidden``: [n, emb_dim] context states; ``memory``: [n_articles, emb_dim].

        Returns ``(lam, val)`` with shapes [n, n_articles] and [n, attn_dim].
        """
        if hidden.ndim != 2 or hidden.shape[0] == 0:
            raise ValueError("need at least one contextualized sentence")
        lam = self.key(hidden) @ self.query(memory).T
        return lam, self.value(hidden)


def article_summaries(lam: torch.Tensor, val: torch.Tensor) -> torch.Tensor:
    """Per-article summaries: softmax over sentences, weighted value sum."""
    gamma = torch.softmax(lam, dim=0)
    return gamma.T @ val


class PrototypeClassifier(nn.Module):
    """Sigmoid of the cosine between article summaries and prototypes.

    A zero-norm summary or prototype gets cosine 0 (probability 0.5)
    instead of a crash; ``zero_norm_hits`` counts such rows.
    """

    def __init__(self, emb_dim: int, attn_dim: int):
        super().__init__()
        self.proto = nn.Linear(emb_dim, attn_dim)
        self.zero_norm_hits = 0

    def forward(self, summaries: torch.Tensor, memory: torch.Tensor):
        """Return per-article probabilities and the raw cosines."""
        prototypes = self.proto(memory)
        zeros = (summaries.norm(dim=1) == 0) | (prototypes.norm(dim=1) == 0)
        if bool(zeros.any()):
            self.zero_norm_hits += int(zeros.sum())
        cosines = F.cosine_similarity(summaries, prototypes, dim=1)
        return torch.sigmoid(cosines), cosines


def unit_affinity(n_x: int, n_y: int, dtype, device) -> torch.Tensor:
    return torch.eye(n_x, n_y, dtype=dtype, device=device)


def random_affinity(n_x: int, n_y: int, seed: int, dtype, device) -> torch.Tensor:
    """Uniform [-1, 1] affinity, a fixed function of seed and shape."""
    gen = torch.Generator()
    gen.manual_seed(seed * 1_000_003 + n_x * 1009 + n_y)
    return (2.0 * torch.rand(n_x, n_y, generator=gen) - 1.0).to(dtype=dtype,
                                                                device=device)


def legal_affinity(kind: str, lam_x, lam_y, val_x, val_y, seed: int = 0):
    """Sentence-by-sentence affinity for the legal interaction.

    ``law_distribution`` is the standard choice (cosine of article
    affinity rows); the others exist as controls that keep the wiring
    but remove or replace the signal.
    """
    if kind == "law_distribution":
        if lam_x.shape[1] != lam_y.shape[1]:
            raise ValueError(f"article counts differ: {lam_x.shape[1]} vs "
                             f"{lam_y.shape[1]}")
        return cosine_rows(lam_x, lam_y)
    if kind == "embedding_distance":
        return cosine_rows(val_x, val_y)
    n_x, n_y = val_x.shape[0], val_y.shape[0]
    if kind == "unit":
        return unit_affinity(n_x, n_y, val_x.dtype, val_x.device)
    if kind == "random":
        return random_affinity(n_x, n_y, seed, val_x.dtype, val_x.device)
    raise ValueError(f"unknown legal affinity {kind!r}; expected one of {LEGAL_AFFINITIES}")


class LegalInteraction(nn.Module):
    """Cross-attention over value vectors, recurrent encoding, max pooling."""

    def __init__(self, attn_dim: int, out_dim: int):
        super().__init__()
        if out_dim % 2:
            raise ValueError("out_dim must be even")
        self.gru = init_gru(nn.GRU(2 * attn_dim, out_dim // 2, batch_first=True,
                                   bidirectional=True))

    def encode(self, fused: torch.Tensor) -> torch.Tensor:
        hidden, _ = self.gru(fused.unsqueeze(0))
        return hidden.squeeze(0)

    def forward(self, affinity: torch.Tensor, val_x: torch.Tensor,
                val_y: torch.Tensor):
        """Return hidden states and pooled vectors for both cases."""
        alpha, beta = interaction_weights(affinity)
        hidden_x = self.encode(torch.cat([val_x, alpha @ val_y], dim=1))
        hidden_y = self.encode(torch.cat([val_y, beta.T @ val_x], dim=1))
        return hidden_x, hidden_y, hidden_x.max(dim=0).values, hidden_y.max(dim=0).values


class ArticleGuidedPooling(nn.Module):
    """Pool interaction states with attention steered by predicted articles.

    The guide vector is the mean embedding of the predicted articles;
    when nothing clears the decision threshold it falls back to the mean
    over all articles so the pooling stays defined.
    """

    def __init__(self, emb_dim: int, attn_dim: int, hidden_dim: int):
        super().__init__()
        self.project_hidden = nn.Linear(hidden_dim, attn_dim, bias=False)
        self.project_guide = nn.Linear(emb_dim, attn_dim, bias=False)

    def forward(self, hidden: torch.Tensor, article_embs: torch.Tensor,
                predicted: torch.Tensor):
        """``hidden``: [n, hidden_dim]; ``predicted``: [n_articles] bool mask."""
        if bool(predicted.any()):
            guide = article_embs[predicted].mean(dim=0)
        else:
            guide = article_embs.mean(dim=0)
        scores = self.project_hidden(hidden) @ self.project_guide(guide)
        psi = torch.softmax(scores, dim=0)
        return psi @ hidden, psi
