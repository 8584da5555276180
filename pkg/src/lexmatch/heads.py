"""Output heads on top of the fused case representations."""

from __future__ import annotations

import torch
from torch import nn


class MatchHead(nn.Module):
    """Classify a pair from ``[x | y | abs(x - y)]`` with a bias-free linear map."""

    def __init__(self, rep_width: int, n_labels: int):
        super().__init__()
        if n_labels < 2:
            raise ValueError("n_labels must be >= 2")
        self.linear = nn.Linear(3 * rep_width, n_labels, bias=False)

    def forward(self, x_rep: torch.Tensor, y_rep: torch.Tensor) -> torch.Tensor:
        features = torch.cat([x_rep, y_rep, (x_rep - y_rep).abs()], dim=-1)
        return self.linear(features)

    def classify(self, x_rep: torch.Tensor, y_rep: torch.Tensor) -> torch.Tensor:
        """Class probabilities for the ordered pair."""
        return torch.softmax(self.forward(x_rep, y_rep), dim=-1)


class RationaleHead(nn.Module):
    """Per-sentence 4-way rationale tagger over attention value vectors."""

    N_CLASSES = 4

    def __init__(self, attn_dim: int):
        super().__init__()
        self.linear = nn.Linear(attn_dim, self.N_CLASSES)

    def forward(self, val: torch.Tensor) -> torch.Tensor:
        return self.linear(val)
