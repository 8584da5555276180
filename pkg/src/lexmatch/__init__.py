"""Legal case retrieval and matching.

Cases interact on two levels: sentence semantics, and the law articles
the sentences invoke. An article-prediction subtask supervises the legal
level, and an article-guided pooling focuses the final representation.
Retrieval ranks by cosine of the fused representations, matching adds a
pair classifier, and candidate-side tensors can be precomputed so large
pools rerank without re-encoding.
"""

from .config import LossConfig, ModelConfig, VARIANTS, tiny_config
from .data import (Case, CasePair, Corpus, DataError, LawArticle,
                   RankingQuery, filter_articles, load_corpus,
                   make_synthetic_corpus, save_corpus, split_and_truncate)
from .encoders import CachedEncoder, EmbeddingCache, HashingEncoder
from .network import Interaction, MatchingModel, apply_variant
from .pipeline import (CacheMismatchError, CandidateCache, TrainResult,
                       evaluate_matching, evaluate_ranking, kfold_splits,
                       load_cache, load_model, precompute_candidates, rerank,
                       run_experiment, save_model, train)

__version__ = "0.1.0"

__all__ = [
    "Case",
    "CasePair",
    "CacheMismatchError",
    "CachedEncoder",
    "CandidateCache",
    "Corpus",
    "DataError",
    "EmbeddingCache",
    "HashingEncoder",
    "Interaction",
    "LawArticle",
    "LossConfig",
    "MatchingModel",
    "ModelConfig",
    "RankingQuery",
    "TrainResult",
    "VARIANTS",
    "apply_variant",
    "evaluate_matching",
    "evaluate_ranking",
    "filter_articles",
    "kfold_splits",
    "load_cache",
    "load_corpus",
    "load_model",
    "make_synthetic_corpus",
    "precompute_candidates",
    "rerank",
    "run_experiment",
    "save_corpus",
    "save_model",
    "split_and_truncate",
    "tiny_config",
    "train",
]
