"""Sentence-level semantic interaction between two cases.

Affinity between sentences is the negated euclidean distance of their
MLP projections. Each case attends over the other's sentences, the
attended context is concatenated onto the original embedding, and a
shared bidirectional GRU plus element-wise max pooling turns the
sequence into one fixed-width vector per case.
"""

from __future__ import annotations

import torch
from torch import nn


def init_gru(gru: nn.GRU) -> nn.GRU:
    """Orthogonal recurrent kernels; input maps keep the framework default."""
    for name, param in gru.named_parameters():
        if name.startswith("weight_hh"):
            # weight_hh stacks the three gate blocks; orthogonalize each.
            hidden = param.shape[1]
            with torch.no_grad():
                for block in param.view(3, hidden, hidden):
                    nn.init.orthogonal_(block)
    return gru


def correlation(x: torch.Tensor, y: torch.Tensor, mlp=None) -> torch.Tensor:
    """``out[i, j] = -|| mlp(x_i) - mlp(y_j) ||_2``; entries are <= 0.

    ``mlp=None`` compares the raw vectors. Zero exactly when the mapped
    vectors coincide.
    """
    if x.shape[-1] != y.shape[-1]:
        raise ValueError(f"row widths differ: {x.shape[-1]} vs {y.shape[-1]}")
    if mlp is not None:
        x, y = mlp(x), mlp(y)
    return -torch.cdist(x, y)


def interaction_weights(affinity: torch.Tensor):
    """Row softmax (x attending over y) and column softmax (y over x)."""
    return torch.softmax(affinity, dim=1), torch.softmax(affinity, dim=0)


class DistanceAffinity(nn.Module):
    """``affinity[i, j] = -|| mlp(x_i) - mlp(y_j) ||_2`` with a two-layer MLP."""

    def __init__(self, dim: int):
        super().__init__()
        self.mlp = nn.Sequential(
            nn.Linear(dim, dim),
            nn.Tanh(),
            nn.Linear(dim, dim),
        )

    def forward(self, x: torch.Tensor, y: torch.Tensor) -> torch.Tensor:
        return correlation(x, y, self.mlp)


def cross_attend(affinity: torch.Tensor, x: torch.Tensor, y: torch.Tensor):
    """Fuse each sentence with its soft match on the other side.

    Outputs keep the original vectors in front: ``[x_i | sum_j a_ij y_j]``
    and ``[y_j | sum_i b_ij x_i]``.
    """
    alpha, beta = interaction_weights(affinity)
    fused_x = torch.cat([x, alpha @ y], dim=1)
    fused_y = torch.cat([y, beta.T @ x], dim=1)
    return fused_x, fused_y


class SemanticInteraction(nn.Module):
    """Cross-attention over raw sentence embeddings, pooled per case."""

    def __init__(self, emb_dim: int, out_dim: int):
        super().__init__()
        if out_dim % 2:
            raise ValueError("out_dim must be even")
        self.affinity = DistanceAffinity(emb_dim)
        self.gru = init_gru(nn.GRU(2 * emb_dim, out_dim // 2, batch_first=True,
                                   bidirectional=True))

    def pool(self, fused: torch.Tensor) -> torch.Tensor:
        hidden, _ = self.gru(fused.unsqueeze(0))
        return hidden.squeeze(0).max(dim=0).values

    def forward(self, x: torch.Tensor, y: torch.Tensor):
        """Return pooled representations for both cases and the affinity map."""
        affinity = self.affinity(x, y)
        fused_x, fused_y = cross_attend(affinity, x, y)
        return self.pool(fused_x), self.pool(fused_y), affinity
