"""Corpus loading, preprocessing, and synthetic data generation.

A corpus lives in a directory of JSONL files:

* ``cases.jsonl``    one case per line: ``{"id", "sentences" | "text", "articles"}``
* ``articles.jsonl`` one law article per line: ``{"id", "text"}``
* ``pairs.jsonl``    labelled case pairs for matching: ``{"query", "candidate", "label"}``
* ``queries.jsonl``  graded rankings for retrieval:
  ``{"query", "candidates": [{"id", "rel"}, ...]}``

Malformed lines and duplicate ids raise :class:`DataError` with the file
name and line number. References to unknown cases or articles are dropped
and counted rather than fatal, so a trimmed corpus still loads.
"""

from __future__ import annotations

import json
import logging
import random
import re
from dataclasses import dataclass, field
from pathlib import Path

logger = logging.getLogger(__name__)

# Number of relevance/matching levels fixed by the known dataset schemas.
SCHEMA_LEVELS = {"lecard": 4, "elam": 3, "ecail": 3}

# CJK ideographs tokenize one character at a time; everything else as
# runs of word characters. Tokens are lowercased.
_CJK = "㐀-䶿一-鿿豈-﫿"
_TOKEN_RE = re.compile(rf"[{_CJK}]|[^\W{_CJK}]+")
_SENT_RE = re.compile(r"[^。！？.!?\n]+[。！？.!?]?")


class DataError(ValueError):
    """Malformed corpus file or inconsistent record."""


@dataclass
class Case:
    id: str
    sentences: list[str]
    articles: list[str] = field(default_factory=list)


@dataclass
class LawArticle:
    id: str
    text: str
    support_count: int = 0  # number of cases citing the article


@dataclass
class CasePair:
    query: str
    candidate: str
    label: int
    # Optional sentence-level supervision, when the dataset has it:
    # per-sentence rationale classes and a query-by-candidate sentence
    # alignment map.
    rationale_query: list[int] | None = None
    rationale_candidate: list[int] | None = None
    alignment: list[list[float]] | None = None


@dataclass
class RankingQuery:
    query: str
    candidates: list[tuple[str, int]]  # (candidate case id, relevance grade)


@dataclass
class Corpus:
    """All loaded records plus bookkeeping from the load."""

    cases: dict[str, Case]
    articles: dict[str, LawArticle]
    pairs: list[CasePair] = field(default_factory=list)
    queries: list[RankingQuery] = field(default_factory=list)
    label_levels: int = 2
    schema: str = "generic"
    counters: dict[str, int] = field(default_factory=dict)

    def article_ids(self) -> list[str]:
        """Article ids in the canonical (sorted) column order."""
        return sorted(self.articles)

    def article_index(self) -> dict[str, int]:
        return {aid: k for k, aid in enumerate(self.article_ids())}

    def citation_row(self, case_id: str) -> list[int]:
        """Multi-hot citation vector for one case, in canonical article order."""
        cited = set(self.cases[case_id].articles)
        return [1 if aid in cited else 0 for aid in self.article_ids()]


def tokenize(text: str) -> list[str]:
    """Lowercased word tokens; CJK ideographs count one token each."""
    return [t.lower() for t in _TOKEN_RE.findall(text)]


def split_sentences(text: str) -> list[str]:
    """Split on sentence-final punctuation, keeping the delimiter."""
    return [s.strip() for s in _SENT_RE.findall(text) if s.strip()]


def truncate_sentence(sentence: str, max_tokens: int) -> str:
    """Cut a sentence after its first ``max_tokens`` tokens.

    The cut lands on the original character offset of the last kept
    token, so spacing and punctuation inside the kept span survive.
    Idempotent: truncating an already short sentence returns it as is.
    """
    sentence = sentence.strip()
    spans = [m.span() for m in _TOKEN_RE.finditer(sentence)]
    if len(spans) <= max_tokens:
        return sentence
    return sentence[: spans[max_tokens - 1][1]].strip()


def split_and_truncate(text, max_sentences: int = 15, max_tokens: int = 150) -> list[str]:
    """Normalize a case body to at most ``max_sentences`` bounded sentences.

    Accepts either raw text (which gets sentence-split first) or an
    already split list of sentences. Empty sentences are discarded
    before the sentence cap so trailing content is not lost to blanks.
    A body with no usable sentences at all is an error: every case must
    keep at least one sentence.
    """
    if isinstance(text, str):
        sentences = split_sentences(text)
    else:
        sentences = [str(s) for s in text]
    kept = []
    for sentence in sentences:
        trimmed = truncate_sentence(sentence, max_tokens)
        if trimmed:
            kept.append(trimmed)
        if len(kept) == max_sentences:
            break
    if not kept:
        raise DataError("no sentences left after splitting and truncation")
    return kept


def _iter_jsonl(path: Path):
    with path.open(encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, 1):
            line = line.strip()
            if not line:
                continue
            try:
                record = json.loads(line)
            except json.JSONDecodeError as exc:
                raise DataError(f"{path.name}:{lineno}: invalid JSON ({exc})") from exc
            if not isinstance(record, dict):
                raise DataError(f"{path.name}:{lineno}: expected a JSON object")
            yield lineno, record


def _require(record: dict, key: str, where: str):
    if key not in record:
        raise DataError(f"{where}: missing required key {key!r}")
    return record[key]


def load_corpus(
    directory: str | Path,
    schema: str = "generic",
    max_sentences: int = 15,
    max_tokens: int = 150,
) -> Corpus:
    """Load a corpus directory, applying sentence splitting and truncation.

    ``schema`` names a known dataset family (fixing the number of
    relevance levels) or ``"generic"``, in which case the level count is
    inferred from the labels present.
    """
    directory = Path(directory)
    if not directory.is_dir():
        raise FileNotFoundError(f"{directory}: corpus directory not found")
    if schema != "generic" and schema != "synthetic" and schema not in SCHEMA_LEVELS:
        raise DataError(f"unknown schema {schema!r}; expected one of "
                        f"{sorted(SCHEMA_LEVELS)} or 'generic'")
    counters: dict[str, int] = {
        "citations_dropped_missing_article": 0,
        "pairs_dropped_missing_case": 0,
        "candidates_dropped_missing_case": 0,
        "queries_dropped_missing_case": 0,
    }

    articles_path = directory / "articles.jsonl"
    cases_path = directory / "cases.jsonl"
    pairs_path = directory / "pairs.jsonl"
    queries_path = directory / "queries.jsonl"
    for required in (cases_path, articles_path):
        if not required.exists():
            raise FileNotFoundError(f"{required}: file not found")
    if not pairs_path.exists() and not queries_path.exists():
        raise FileNotFoundError(f"{directory}: need at least one of "
                                "pairs.jsonl or queries.jsonl")

    articles: dict[str, LawArticle] = {}
    for lineno, record in _iter_jsonl(articles_path):
        where = f"{articles_path.name}:{lineno}"
        aid = str(_require(record, "id", where))
        if aid in articles:
            raise DataError(f"{where}: duplicate article id {aid!r}")
        text = str(_require(record, "text", where))
        if not text.strip():
            raise DataError(f"{where}: article text is empty")
        articles[aid] = LawArticle(id=aid, text=text)

    cases: dict[str, Case] = {}
    for lineno, record in _iter_jsonl(cases_path):
        where = f"{cases_path.name}:{lineno}"
        cid = str(_require(record, "id", where))
        if cid in cases:
            raise DataError(f"{where}: duplicate case id {cid!r}")
        if "sentences" in record and "text" in record:
            raise DataError(f"{where}: provide either 'sentences' or 'text', not both")
        if "sentences" in record:
            body = record["sentences"]
            if not isinstance(body, list):
                raise DataError(f"{where}: 'sentences' must be a list")
        elif "text" in record:
            body = str(record["text"])
        else:
            raise DataError(f"{where}: missing 'sentences' or 'text'")
        try:
            sentences = split_and_truncate(body, max_sentences, max_tokens)
        except DataError as exc:
            raise DataError(f"{where}: {exc}") from None
        cited = []
        for aid in record.get("articles", []):
            aid = str(aid)
            if aid not in articles:
                counters["citations_dropped_missing_article"] += 1
                continue
            cited.append(aid)
        cases[cid] = Case(id=cid, sentences=sentences, articles=cited)
    if not cases:
        raise DataError(f"{cases_path.name}: no cases")
    _count_support(cases, articles)

    pairs: list[CasePair] = []
    if pairs_path.exists():
        for lineno, record in _iter_jsonl(pairs_path):
            where = f"{pairs_path.name}:{lineno}"
            query = str(_require(record, "query", where))
            candidate = str(_require(record, "candidate", where))
            label = int(_require(record, "label", where))
            if label < 0:
                raise DataError(f"{where}: negative label {label}")
            if query not in cases or candidate not in cases:
                counters["pairs_dropped_missing_case"] += 1
                continue
            pairs.append(CasePair(
                query=query, candidate=candidate, label=label,
                rationale_query=record.get("rationale_query"),
                rationale_candidate=record.get("rationale_candidate"),
                alignment=record.get("alignment")))

    queries: list[RankingQuery] = []
    if queries_path.exists():
        for lineno, record in _iter_jsonl(queries_path):
            where = f"{queries_path.name}:{lineno}"
            query = str(_require(record, "query", where))
            if query not in cases:
                counters["queries_dropped_missing_case"] += 1
                continue
            raw_candidates = _require(record, "candidates", where)
            if not isinstance(raw_candidates, list):
                raise DataError(f"{where}: 'candidates' must be a list")
            seen: set[str] = set()
            candidates: list[tuple[str, int]] = []
            for entry in raw_candidates:
                cid = str(_require(entry, "id", where))
                rel = int(_require(entry, "rel", where))
                if rel < 0:
                    raise DataError(f"{where}: negative relevance grade {rel}")
                if cid in seen:
                    raise DataError(f"{where}: duplicate candidate id {cid!r}")
                seen.add(cid)
                if cid not in cases:
                    counters["candidates_dropped_missing_case"] += 1
                    continue
                candidates.append((cid, rel))
            queries.append(RankingQuery(query=query, candidates=candidates))

    if schema in SCHEMA_LEVELS:
        levels = SCHEMA_LEVELS[schema]
        _check_levels(pairs, queries, levels)
    else:
        observed = [p.label for p in pairs]
        observed += [rel for q in queries for _, rel in q.candidates]
        levels = max(observed, default=1) + 1
        levels = max(levels, 2)

    dropped = {k: v for k, v in counters.items() if v}
    if dropped:
        logger.warning("dropped records while loading %s: %s", directory, dropped)
    logger.info("loaded %d cases, %d articles, %d pairs, %d queries from %s",
                len(cases), len(articles), len(pairs), len(queries), directory)
    return Corpus(cases=cases, articles=articles, pairs=pairs, queries=queries,
                  label_levels=levels, schema=schema, counters=counters)


def _count_support(cases: dict[str, Case], articles: dict[str, LawArticle]) -> None:
    support = {aid: 0 for aid in articles}
    for case in cases.values():
        for aid in set(case.articles):
            support[aid] += 1
    for aid, article in articles.items():
        article.support_count = support[aid]


def _check_levels(pairs, queries, levels: int) -> None:
    for pair in pairs:
        if pair.label >= levels:
            raise DataError(f"pair {pair.query!r}/{pair.candidate!r}: label "
                            f"{pair.label} out of range for {levels} levels")
    for query in queries:
        for cid, rel in query.candidates:
            if rel >= levels:
                raise DataError(f"query {query.query!r}: relevance grade {rel} for "
                                f"{cid!r} out of range for {levels} levels")


def save_corpus(corpus: Corpus, directory: str | Path) -> None:
    """Write a corpus back out in the directory layout ``load_corpus`` reads."""
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)

    def dump(path: Path, records) -> None:
        with path.open("w", encoding="utf-8") as fh:
            for record in records:
                fh.write(json.dumps(record, ensure_ascii=False, sort_keys=True) + "\n")

    dump(directory / "cases.jsonl",
         ({"id": c.id, "sentences": c.sentences, "articles": c.articles}
          for c in sorted(corpus.cases.values(), key=lambda c: c.id)))
    dump(directory / "articles.jsonl",
         ({"id": a.id, "text": a.text}
          for a in sorted(corpus.articles.values(), key=lambda a: a.id)))
    if corpus.pairs:
        def pair_record(p: CasePair) -> dict:
            record = {"query": p.query, "candidate": p.candidate, "label": p.label}
            if p.rationale_query is not None:
                record["rationale_query"] = p.rationale_query
            if p.rationale_candidate is not None:
                record["rationale_candidate"] = p.rationale_candidate
            if p.alignment is not None:
                record["alignment"] = p.alignment
            return record

        dump(directory / "pairs.jsonl", (pair_record(p) for p in corpus.pairs))
    if corpus.queries:
        dump(directory / "queries.jsonl",
             ({"query": q.query,
               "candidates": [{"id": cid, "rel": rel} for cid, rel in q.candidates]}
              for q in corpus.queries))


def filter_articles(corpus: Corpus, min_support: int = 10) -> Corpus:
    """Drop articles cited by fewer than ``min_support`` cases.

    The bound is inclusive: an article cited by exactly ``min_support``
    cases stays. Citations of dropped articles disappear from the cases;
    everything else is shared with the input corpus. Removing every
    article is an error, since the article subtask would be left with no
    labels at all.
    """
    support: dict[str, int] = {aid: 0 for aid in corpus.articles}
    for case in corpus.cases.values():
        for aid in set(case.articles):
            if aid in support:
                support[aid] += 1
    kept = {
        aid: LawArticle(id=art.id, text=art.text, support_count=support[aid])
        for aid, art in corpus.articles.items() if support[aid] >= min_support
    }
    if corpus.articles and not kept:
        raise DataError(f"min_support={min_support} removes every article; "
                        f"highest support is {max(support.values())}")
    dropped = len(corpus.articles) - len(kept)
    cases = {
        cid: Case(id=case.id, sentences=case.sentences,
                  articles=[aid for aid in case.articles if aid in kept])
        for cid, case in corpus.cases.items()
    }
    counters = dict(corpus.counters)
    counters["articles_dropped_low_support"] = dropped
    if dropped:
        logger.info("filtered %d articles below support %d (%d remain)",
                    dropped, min_support, len(kept))
    return Corpus(cases=cases, articles=kept, pairs=corpus.pairs,
                  queries=corpus.queries, label_levels=corpus.label_levels,
                  schema=corpus.schema, counters=counters)


def make_synthetic_corpus(
    n_cases: int = 200,
    n_articles: int = 8,
    n_levels: int = 3,
    thresholds=None,
    n_pairs: int = 400,
    n_queries: int = 20,
    n_candidates: int = 10,
    seed: int = 0,
    sig_vocab: int = 6,
    sig_per_sentence: int = 3,
    boiler_vocab: int = 40,
    boiler_per_sentence: int = 8,
    extra_sentences: int = 2,
) -> Corpus:
    """Generate a labelled corpus with a crisp article signal.

    Each case is assigned a "charge": a contiguous ring of article ids.
    A pair's label counts how many entries of ``thresholds`` its
    article-set overlap reaches, so labels are a pure function of
    citation overlap. The default thresholds ``(1, ..., n_levels - 1)``
    make the label simply the overlap size; passing explicit thresholds
    (strictly increasing positive integers) overrides ``n_levels``.
    Sentences mix a few tokens from each cited article's private
    vocabulary into a majority of shared boilerplate tokens, which keeps
    surface text across cases similar and makes the citation supervision
    the reliable signal.
    """
    if thresholds is None:
        if n_levels < 2:
            raise ValueError("n_levels must be >= 2")
        thresholds = tuple(range(1, n_levels))
    thresholds = tuple(int(t) for t in thresholds)
    if not thresholds or thresholds[0] < 1 or \
            any(a >= b for a, b in zip(thresholds, thresholds[1:])):
        raise ValueError(f"thresholds must be strictly increasing positive "
                         f"integers, got {thresholds}")
    n_levels = len(thresholds) + 1
    charge_size = thresholds[-1]
    if n_articles < 2 * charge_size:
        raise ValueError(f"need n_articles >= {2 * charge_size} for "
                         f"thresholds up to {charge_size}")
    rng = random.Random(seed)

    article_ids = [f"a{k:03d}" for k in range(n_articles)]
    sig = {aid: [f"{aid}w{t}" for t in range(sig_vocab)] for aid in article_ids}
    boiler = [f"fact{t:02d}" for t in range(boiler_vocab)]
    articles = {aid: LawArticle(id=aid, text=" ".join(sig[aid])) for aid in article_ids}

    def charge(index: int) -> list[str]:
        return [article_ids[(index + t) % n_articles] for t in range(charge_size)]

    def sentence(cited: str | None) -> str:
        tokens = rng.sample(boiler, min(boiler_per_sentence, len(boiler)))
        if cited is not None:
            tokens += rng.sample(sig[cited], min(sig_per_sentence, sig_vocab))
        rng.shuffle(tokens)
        return " ".join(tokens) + "."

    cases: dict[str, Case] = {}
    charge_of: dict[str, int] = {}
    by_charge: dict[int, list[str]] = {c: [] for c in range(n_articles)}
    for i in range(n_cases):
        cid = f"c{i:04d}"
        c = rng.randrange(n_articles)
        cited = charge(c)
        sentences = [sentence(aid) for aid in cited]
        sentences += [sentence(None) for _ in range(extra_sentences)]
        rng.shuffle(sentences)
        cases[cid] = Case(id=cid, sentences=sentences, articles=sorted(cited))
        charge_of[cid] = c
        by_charge[c].append(cid)

    def label_between(x: str, y: str) -> int:
        overlap = len(set(cases[x].articles) & set(cases[y].articles))
        return sum(overlap >= t for t in thresholds)

    def partner_charge(c: int, label: int) -> int:
        # ring distance d gives charge overlap max(0, charge_size - d)
        if label > 0:
            d = charge_size - thresholds[label - 1]
            choices = [d, -d] if d else [0]
        else:
            far = range(charge_size, n_articles - charge_size + 1)
            choices = [d for base in far for d in (base, -base)]
        return (c + rng.choice(choices)) % n_articles

    pairs: list[CasePair] = []
    attempts = 0
    while len(pairs) < n_pairs and attempts < 50 * n_pairs:
        attempts += 1
        label = len(pairs) % n_levels  # round-robin keeps labels balanced
        x = rng.choice(list(cases))
        pool = by_charge[partner_charge(charge_of[x], label)]
        pool = [y for y in pool if y != x]
        if not pool:
            continue
        y = rng.choice(pool)
        assert label_between(x, y) == label
        pairs.append(CasePair(query=x, candidate=y, label=label))

    all_ids = list(cases)
    queries: list[RankingQuery] = []
    for qid in rng.sample(all_ids, min(n_queries, len(all_ids))):
        pool = [cid for cid in all_ids if cid != qid]
        chosen = rng.sample(pool, min(n_candidates, len(pool)))
        queries.append(RankingQuery(
            query=qid,
            candidates=[(cid, label_between(qid, cid)) for cid in chosen]))

    _count_support(cases, articles)
    return Corpus(cases=cases, articles=articles, pairs=pairs, queries=queries,
                  label_levels=n_levels, schema="synthetic")
