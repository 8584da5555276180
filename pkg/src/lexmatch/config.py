"""Run configuration for models, losses, and experiments.

A single ``ModelConfig`` drives model construction, training, and the
CLI. Configs serialize to plain JSON; loading rejects unknown keys so a
typo in a config file fails loudly instead of silently using defaults.
"""

from __future__ import annotations

import dataclasses
import json
from dataclasses import dataclass, field
from pathlib import Path
from typing import Optional

VARIANTS = (
    "full",
    "no_aia",
    "no_lim",
    "no_bim",
    "only_aia",
    "lim_no_aia",
    "legal_unit",
    "legal_random",
    "legal_embedding_distance",
)

TASKS = ("lcr", "lcm")


class ConfigError(ValueError):
    """Invalid or inconsistent configuration."""


@dataclass
class LossConfig:
    """Temperatures and optional auxiliary objectives.

    article_tau scales article-classifier cosines before the multi-label
    rank loss; rank_tau scales pairwise score differences in the ranking
    loss. Rationale/alignment losses only apply when the corpus carries
    the corresponding sentence-level annotations.
    """

    article_tau: float = 10.0
    rank_tau: float = 20.0
    enable_rationale: bool = False
    enable_align: bool = False

    def validate(self) -> None:
        if self.article_tau <= 0 or self.rank_tau <= 0:
            raise ConfigError("loss temperatures must be positive")


@dataclass
class ModelConfig:
    """Dimensions, truncation limits, training knobs, and ablation tag.

    Defaults match the production configuration: 768-wide embeddings and
    attention states, 1536-wide interaction representations, temperatures
    10/20, AdamW at 3e-5, batch 8, 50 epochs, 5 folds.
    """

    emb_dim: int = 768          # sentence-embedding width
    attn_dim: int = 768         # article-attention projection width
    sem_dim: int = 1536         # semantic interaction representation width
    legal_dim: int = 1536       # legal interaction representation width
    max_sentences: int = 15
    max_tokens: int = 150
    variant: str = "full"
    learning_rate: float = 3e-5
    batch_size: int = 8
    epochs: int = 50
    seed: int = 0
    folds: int = 5
    fold: int = 0               # which fold this run trains/evaluates
    encoder: str = "hash"       # "hash" or "transformer"
    encoder_checkpoint: Optional[str] = None
    encoder_trainable: bool = False
    relevant_min_grade: Optional[int] = None  # None = only the top grade counts
    ndcg_gain: str = "exp"      # "exp": 2^rel - 1, "linear": rel
    # Feed gold article sets to the guided pooling while training instead
    # of the classifier's own predictions. Off by default: inference has
    # no gold labels, so training should see the same inputs.
    teacher_force_articles: bool = False
    loss: LossConfig = field(default_factory=LossConfig)

    def validate(self) -> None:
        if self.variant not in VARIANTS:
            raise ConfigError(f"unknown variant {self.variant!r}; expected one of {VARIANTS}")
        for name in ("emb_dim", "attn_dim", "sem_dim", "legal_dim"):
            value = getattr(self, name)
            if value < 2:
                raise ConfigError(f"{name} must be >= 2, got {value}")
        if self.emb_dim % 2 or self.sem_dim % 2 or self.legal_dim % 2:
            raise ConfigError("emb_dim, sem_dim, and legal_dim must be even "
                              "(bidirectional recurrent states concatenate two halves)")
        if self.max_sentences < 1 or self.max_tokens < 1:
            raise ConfigError("truncation limits must be >= 1")
        if self.ndcg_gain not in ("exp", "linear"):
            raise ConfigError(f"unknown ndcg_gain {self.ndcg_gain!r}")
        if self.folds < 2:
            raise ConfigError("folds must be >= 2")
        if not 0 <= self.fold < self.folds:
            raise ConfigError(f"fold {self.fold} out of range for {self.folds} folds")
        if self.encoder not in ("hash", "transformer"):
            raise ConfigError(f"unknown encoder {self.encoder!r}")
        self.loss.validate()

    @property
    def rep_width(self) -> int:
        """Width of the final case representation under the active variant."""
        return variant_rep_width(self.variant, self.sem_dim, self.legal_dim)

    @property
    def uses_legal_branch(self) -> bool:
        """Whether the article branch runs (and its subtask loss applies)."""
        return self.variant != "no_lim"

    def to_dict(self) -> dict:
        return dataclasses.asdict(self)

    def to_json(self, path: str | Path) -> None:
        Path(path).write_text(json.dumps(self.to_dict(), indent=2, sort_keys=True) + "\n")

    @classmethod
    def from_dict(cls, raw: dict) -> "ModelConfig":
        raw = dict(raw)
        loss_raw = raw.pop("loss", {})
        _reject_unknown(raw, cls, "config")
        _reject_unknown(loss_raw, LossConfig, "config.loss")
        config = cls(**raw, loss=LossConfig(**loss_raw))
        config.validate()
        return config

    @classmethod
    def from_json(cls, path: str | Path) -> "ModelConfig":
        try:
            raw = json.loads(Path(path).read_text())
        except json.JSONDecodeError as exc:
            raise ConfigError(f"{path}: not valid JSON ({exc})") from exc
        if not isinstance(raw, dict):
            raise ConfigError(f"{path}: expected a JSON object at top level")
        return cls.from_dict(raw)


def variant_rep_width(variant: str, sem_dim: int, legal_dim: int) -> int:
    """Final representation width implied by an ablation tag."""
    widths = {
        "full": sem_dim + 2 * legal_dim,
        "no_aia": sem_dim + legal_dim,
        "no_lim": sem_dim,
        "no_bim": 2 * legal_dim,
        "only_aia": legal_dim,
        "lim_no_aia": legal_dim,
        "legal_unit": sem_dim + 2 * legal_dim,
        "legal_random": sem_dim + 2 * legal_dim,
        "legal_embedding_distance": sem_dim + 2 * legal_dim,
    }
    if variant not in widths:
        raise ConfigError(f"unknown variant {variant!r}; expected one of {VARIANTS}")
    return widths[variant]


def tiny_config(**overrides) -> ModelConfig:
    """Desk-scale config for tests: small dims, hash encoder, few epochs."""
    defaults = dict(
        emb_dim=16,
        attn_dim=16,
        sem_dim=32,
        legal_dim=32,
        max_sentences=15,
        max_tokens=50,
        learning_rate=3e-3,
        batch_size=8,
        epochs=3,
        folds=5,
    )
    defaults.update(overrides)
    loss = defaults.pop("loss", LossConfig())
    config = ModelConfig(**defaults, loss=loss)
    config.validate()
    return config


def _reject_unknown(raw: dict, cls, where: str) -> None:
    known = {f.name for f in dataclasses.fields(cls)}
    unknown = set(raw) - known
    if unknown:
        raise ConfigError(f"{where}: unknown keys {sorted(unknown)}")
