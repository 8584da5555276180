"""The full case-matching network.

The model runs up to three interaction branches between a query case and
a candidate case, each producing one fixed-width vector per case:

* semantic: cross-attention over raw sentence embeddings,
* legal: cross-attention over article-attention value vectors, weighted
  by the similarity of the sentences' law distributions,
* article-guided: pooling of the legal interaction states steered by the
  articles the classifier predicts for the case.

The active ablation variant decides which branches run and which pieces
concatenate into the final representation. Retrieval scores a pair by
the cosine of the two final vectors; matching adds a linear head over
``[x | y | |x - y|]``.

Per-case tensors (sentence embeddings, law distributions, value vectors)
do not depend on the other case, so candidates can be precomputed once
and reranked against many queries without re-encoding; see
:meth:`MatchingModel.case_tensors` and :meth:`MatchingModel.interact`.
"""

from __future__ import annotations

import dataclasses
import hashlib
import json
from dataclasses import dataclass
from typing import Optional

import numpy as np
import torch
from torch import nn
from torch.nn import functional as F

from .config import VARIANTS, ConfigError, ModelConfig
from .heads import MatchHead, RationaleHead
from .legal import (ArticleAttention, ArticleGuidedPooling, ContextEncoder,
                    LegalInteraction, PrototypeClassifier, article_summaries,
                    legal_affinity)
from .semantic import SemanticInteraction

# Which branches each ablation variant runs.
_SEMANTIC_VARIANTS = {"full", "no_aia", "no_lim", "legal_unit", "legal_random",
                      "legal_embedding_distance"}
_AIA_VARIANTS = {"full", "no_bim", "only_aia", "legal_unit", "legal_random",
                 "legal_embedding_distance"}
_AFFINITY_KIND = {"legal_unit": "unit", "legal_random": "random",
                  "legal_embedding_distance": "embedding_distance"}


@dataclass
class CaseTensors:
    """Everything computable from one case alone."""

    emb: torch.Tensor                       # [n, emb_dim]
    lam: Optional[torch.Tensor] = None      # [n, n_articles] law distributions
    val: Optional[torch.Tensor] = None      # [n, attn_dim] value vectors
    summaries: Optional[torch.Tensor] = None  # [n_articles, attn_dim]
    probs: Optional[torch.Tensor] = None    # [n_articles] article probabilities
    cosines: Optional[torch.Tensor] = None  # [n_articles] pre-sigmoid cosines
    predicted: Optional[torch.Tensor] = None  # [n_articles] bool, probs > 0.5


@dataclass
class Interaction:
    """One query/candidate pass: fused vectors, score, and diagnostics."""

    x: CaseTensors
    y: CaseTensors
    x_rep: torch.Tensor
    y_rep: torch.Tensor
    score: torch.Tensor                     # cosine of the fused vectors
    sem_affinity: Optional[torch.Tensor] = None    # [n_x, n_y]
    legal_affinity: Optional[torch.Tensor] = None  # [n_x, n_y]
    hidden_x: Optional[torch.Tensor] = None        # [n_x, legal_dim]
    hidden_y: Optional[torch.Tensor] = None
    psi_x: Optional[torch.Tensor] = None           # [n_x] pooling weights
    psi_y: Optional[torch.Tensor] = None


class MatchingModel(nn.Module):
    """Dual-branch interaction model over precomputed sentence embeddings.

    ``article_embeddings`` seeds the trainable article memory; rows must
    follow the sorted order of ``article_ids``. ``n_match_labels``
    attaches the pair-classification head when matching is trained.
    """

    def __init__(self, config: ModelConfig, article_embeddings, article_ids,
                 n_match_labels: Optional[int] = None, dtype=torch.float32):
        super().__init__()
        config.validate()
        self.config = config
        self.variant = config.variant
        self.article_ids = [str(a) for a in article_ids]
        self.use_semantic = self.variant in _SEMANTIC_VARIANTS
        self.use_legal = self.variant != "no_lim"
        self.use_aia = self.variant in _AIA_VARIANTS
        self.affinity_kind = _AFFINITY_KIND.get(self.variant, "law_distribution")

        if self.use_semantic:
            self.semantic = SemanticInteraction(config.emb_dim, config.sem_dim)
        if self.use_legal:
            embs = torch.as_tensor(np.asarray(article_embeddings), dtype=dtype)
            if embs.ndim != 2 or embs.shape != (len(self.article_ids), config.emb_dim):
                raise ValueError(
                    f"article embeddings must be [{len(self.article_ids)}, "
                    f"{config.emb_dim}], got {tuple(embs.shape)}")
            # Trainable per-article memory, seeded from the embeddings.
            self.memory = nn.Parameter(embs.clone())
            self.context = ContextEncoder(config.emb_dim)
            self.article_attention = ArticleAttention(config.emb_dim, config.attn_dim)
            self.prototypes = PrototypeClassifier(config.emb_dim, config.attn_dim)
            self.legal = LegalInteraction(config.attn_dim, config.legal_dim)
            if config.loss.enable_rationale:
                self.rationale_head = RationaleHead(config.attn_dim)
            if self.use_aia:
                # The pooling guide reads the (frozen) article embeddings,
                # not the drifting memory.
                self.register_buffer("article_embeddings", embs.clone())
                self.article_pool = ArticleGuidedPooling(config.emb_dim,
                                                         config.attn_dim,
                                                         config.legal_dim)
        if n_match_labels is not None:
            self.match_head = MatchHead(config.rep_width, n_match_labels)
        self.to(dtype)
        self._dtype = dtype
        self.case_passes = 0   # how often the per-case half has run
        self.zero_rep_hits = 0  # pairs scored with a zero-norm fused vector

    @property
    def n_articles(self) -> int:
        return len(self.article_ids)

    def as_input(self, emb) -> torch.Tensor:
        """Coerce a sentence-embedding array to the model's dtype."""
        return torch.as_tensor(np.asarray(emb)).to(self._dtype)

    def article_outputs(self, lam: torch.Tensor, val: torch.Tensor):
        """Article summaries and probabilities from per-case tensors."""
        summaries = article_summaries(lam, val)
        probs, cosines = self.prototypes(summaries, self.memory)
        return summaries, probs, cosines

    def case_tensors(self, emb: torch.Tensor) -> CaseTensors:
        """Run everything that depends on a single case."""
        self.case_passes += 1
        if not self.use_legal:
            return CaseTensors(emb=emb)
        lam, val = self.article_attention(self.context(emb), self.memory)
        summaries, probs, cosines = self.article_outputs(lam, val)
        return CaseTensors(emb=emb, lam=lam, val=val, summaries=summaries,
                           probs=probs, cosines=cosines, predicted=probs > 0.5)

    def tensors_from_parts(self, emb, lam, val) -> CaseTensors:
        """Rebuild :class:`CaseTensors` from cached per-case arrays."""
        emb, lam, val = self.as_input(emb), self.as_input(lam), self.as_input(val)
        summaries, probs, cosines = self.article_outputs(lam, val)
        return CaseTensors(emb=emb, lam=lam, val=val, summaries=summaries,
                           probs=probs, cosines=cosines, predicted=probs > 0.5)

    def interact(self, x: CaseTensors, y: CaseTensors) -> Interaction:
        """Score a pair from precomputed per-case tensors."""
        parts_x, parts_y = [], []
        sem_aff = leg_aff = hidden_x = hidden_y = psi_x = psi_y = None

        if self.use_semantic:
            sem_x, sem_y, sem_aff = self.semantic(x.emb, y.emb)
            parts_x.append(sem_x)
            parts_y.append(sem_y)

        if self.use_legal:
            leg_aff = legal_affinity(self.affinity_kind, x.lam, y.lam,
                                     x.val, y.val, seed=self.config.seed)
            hidden_x, hidden_y, leg_x, leg_y = self.legal(leg_aff, x.val, y.val)
            if self.variant != "only_aia":
                parts_x.append(leg_x)
                parts_y.append(leg_y)
            if self.use_aia:
                aia_x, psi_x = self.article_pool(hidden_x, self.article_embeddings,
                                                 x.predicted)
                aia_y, psi_y = self.article_pool(hidden_y, self.article_embeddings,
                                                 y.predicted)
                parts_x.append(aia_x)
                parts_y.append(aia_y)

        x_rep = torch.cat(parts_x) if len(parts_x) > 1 else parts_x[0]
        y_rep = torch.cat(parts_y) if len(parts_y) > 1 else parts_y[0]
        if x_rep.shape[-1] != self.config.rep_width:
            raise RuntimeError(f"fused width {x_rep.shape[-1]} != expected "
                               f"{self.config.rep_width} for variant {self.variant}")
        if float(x_rep.detach().norm()) == 0.0 or float(y_rep.detach().norm()) == 0.0:
            self.zero_rep_hits += 1
        score = F.cosine_similarity(x_rep.unsqueeze(0), y_rep.unsqueeze(0)).squeeze(0)
        return Interaction(x=x, y=y, x_rep=x_rep, y_rep=y_rep, score=score,
                           sem_affinity=sem_aff, legal_affinity=leg_aff,
                           hidden_x=hidden_x, hidden_y=hidden_y,
                           psi_x=psi_x, psi_y=psi_y)

    def forward(self, x_emb: torch.Tensor, y_emb: torch.Tensor) -> Interaction:
        return self.interact(self.case_tensors(x_emb), self.case_tensors(y_emb))

    def match_logits(self, inter: Interaction) -> torch.Tensor:
        if not hasattr(self, "match_head"):
            raise RuntimeError("model was built without a matching head")
        return self.match_head(inter.x_rep, inter.y_rep)

    def match_probs(self, inter: Interaction) -> torch.Tensor:
        return torch.softmax(self.match_logits(inter), dim=-1)

    def predict_articles(self, emb: torch.Tensor) -> list[str]:
        """Ids of articles whose probability clears the 0.5 threshold."""
        if not self.use_legal:
            return []
        tensors = self.case_tensors(emb)
        mask = tensors.predicted.tolist()
        return [aid for aid, hit in zip(self.article_ids, mask) if hit]

    def fingerprint(self) -> str:
        """Digest of configuration, article vocabulary, and parameters.

        Cached candidate tensors are only valid for the exact model that
        produced them; this value ties a cache file to that model.
        """
        digest = hashlib.sha256()
        digest.update(json.dumps(self.config.to_dict(), sort_keys=True).encode())
        digest.update("\x00".join(self.article_ids).encode("utf-8"))
        for name, tensor in sorted(self.state_dict().items()):
            digest.update(name.encode())
            array = np.ascontiguousarray(tensor.detach().cpu().numpy())
            digest.update(str(array.dtype).encode())
            digest.update(str(array.shape).encode())
            digest.update(array.tobytes())
        return digest.hexdigest()


# Variants that share the exact same modules and widths; switching among
# them only changes how the legal affinity matrix is computed.
_SWITCHABLE = {"full", "legal_unit", "legal_random", "legal_embedding_distance"}


def apply_variant(model: MatchingModel, variant: str) -> MatchingModel:
    """Re-tag a trained model with a different ablation variant, in place.

    Only works within the group of variants whose parameter shapes are
    identical (the full model and the legal-affinity controls). Anything
    else removes or resizes modules and must be built fresh from a
    config with that variant.
    """
    if variant == model.variant:
        return model
    if variant not in VARIANTS:
        raise ConfigError(f"unknown variant {variant!r}; expected one of {VARIANTS}")
    if model.variant not in _SWITCHABLE or variant not in _SWITCHABLE:
        raise ConfigError(
            f"cannot switch a {model.variant!r} model to {variant!r}: the "
            "variants use different modules; construct a new model with "
            f"config.variant = {variant!r}")
    model.variant = variant
    model.affinity_kind = _AFFINITY_KIND.get(variant, "law_distribution")
    model.config = dataclasses.replace(model.config, variant=variant)
    return model
