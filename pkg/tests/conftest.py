"""Shared fixtures: a small deterministic corpus, encoder, and model."""

import numpy as np
import pytest
import torch

from lexmatch import MatchingModel, make_synthetic_corpus, tiny_config
from lexmatch.encoders import deterministic_test_encoder, encode_articles
from lexmatch.pipeline import embed_corpus


def small_corpus(seed=11, **overrides):
    params = dict(n_cases=24, n_articles=5, n_pairs=30, n_queries=6,
                  n_candidates=8, seed=seed)
    params.update(overrides)
    return make_synthetic_corpus(**params)


def build_model(corpus, encoder, n_match_labels=3, dtype=torch.float32,
                **overrides):
    """Model over the corpus's articles, seeded for reproducibility."""
    config = tiny_config(**overrides)
    ids, art = encode_articles(encoder, corpus.articles)
    torch.manual_seed(config.seed)
    return MatchingModel(config, art, ids, n_match_labels=n_match_labels,
                         dtype=dtype)


@pytest.fixture()
def corpus():
    return small_corpus()


@pytest.fixture()
def encoder():
    return deterministic_test_encoder(dim=16, seed=0)


@pytest.fixture()
def model(corpus, encoder):
    return build_model(corpus, encoder)


@pytest.fixture()
def embeddings(corpus, encoder):
    return embed_corpus(corpus, encoder)


@pytest.fixture()
def case_pair(corpus, embeddings):
    a, b = sorted(corpus.cases)[:2]
    return embeddings[a], embeddings[b]
