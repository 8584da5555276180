"""Lexical retrieval baseline.

Okapi weighting with the positive-by-construction idf
``ln(1 + (N - df + 0.5) / (df + 0.5))``. Scores sum over query tokens
with multiplicity; ranking breaks score ties by ascending document id so
results are reproducible.
"""

from __future__ import annotations

import math
from collections import Counter

from .data import tokenize


class BM25:
    """Index a fixed document collection, then score token queries."""

    def __init__(self, docs: dict[str, list[str]], k1: float = 1.2, b: float = 0.75):
        if not docs:
            raise ValueError("empty document collection")
        self.k1 = k1
        self.b = b
        self.doc_tf: dict[str, Counter] = {did: Counter(toks) for did, toks in docs.items()}
        self.doc_len = {did: len(toks) for did, toks in docs.items()}
        self.n_docs = len(docs)
        self.avg_len = sum(self.doc_len.values()) / self.n_docs
        self.df: Counter = Counter()
        for tf in self.doc_tf.values():
            self.df.update(tf.keys())

    def idf(self, term: str) -> float:
        df = self.df.get(term, 0)
        return math.log(1.0 + (self.n_docs - df + 0.5) / (df + 0.5))

    def score(self, query_tokens: list[str], doc_id: str) -> float:
        tf = self.doc_tf[doc_id]
        length_norm = 1.0 - self.b + self.b * self.doc_len[doc_id] / self.avg_len
        total = 0.0
        for term in query_tokens:
            f = tf.get(term, 0)
            if f == 0:
                continue
            total += self.idf(term) * f * (self.k1 + 1.0) / (f + self.k1 * length_norm)
        return total

    def rank(self, query_tokens: list[str],
             candidate_ids: list[str] | None = None) -> list[tuple[str, float]]:
        """Candidates by descending score, ties by ascending id."""
        pool = candidate_ids if candidate_ids is not None else list(self.doc_tf)
        scored = [(did, self.score(query_tokens, did)) for did in pool]
        scored.sort(key=lambda pair: (-pair[1], pair[0]))
        return scored


def case_tokens(sentences: list[str]) -> list[str]:
    tokens: list[str] = []
    for sentence in sentences:
        tokens.extend(tokenize(sentence))
    return tokens


def bm25_retrieve(query_text: str, corpus, k: int,
                  k1: float = 1.2, b: float = 0.75) -> list[tuple[str, float]]:
    """First-stage retrieval: top-``k`` corpus cases for a raw query text.

    Only documents matching at least one query term appear; a query that
    shares no indexed term with the corpus returns an empty list.
    """
    index = BM25({cid: case_tokens(case.sentences)
                  for cid, case in corpus.cases.items()}, k1=k1, b=b)
    ranked = index.rank(tokenize(query_text))
    return [(did, score) for did, score in ranked if score > 0.0][:k]


def rank_corpus_queries(corpus, k1: float = 1.2, b: float = 0.75) -> dict[str, list[tuple[str, float]]]:
    """Rank every query's candidate pool lexically.

    Each query gets its own index over its candidate pool, matching the
    usual candidate-list evaluation protocol.
    """
    rankings: dict[str, list[tuple[str, float]]] = {}
    for query in corpus.queries:
        pool = {cid: case_tokens(corpus.cases[cid].sentences)
                for cid, _ in query.candidates}
        if not pool:
            rankings[query.query] = []
            continue
        index = BM25(pool, k1=k1, b=b)
        tokens = case_tokens(corpus.cases[query.query].sentences)
        rankings[query.query] = index.rank(tokens)
    return rankings
