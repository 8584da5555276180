"""Training, evaluation, cross-validation, and late-interaction reranking.

Training runs per-pair (matching) or per-query-group (retrieval) with
mini-batches, keeps the checkpoint with the best validation metric, and
aborts loudly on non-finite losses. All randomness flows from
``config.seed``, so repeated runs produce identical models and metric
files.

Candidate caching persists the query-independent half of the model (one
tensor file per candidate plus a manifest) keyed to the exact model
fingerprint, so a reranker can score thousands of candidates without
re-encoding any of them.
"""

from __future__ import annotations

import copy
import dataclasses
import hashlib
import json
import logging
import math
import random
import re
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass
from pathlib import Path

import numpy as np
import torch

from .config import ConfigError, ModelConfig
from .data import CasePair, Corpus, RankingQuery
from .encoders import HashingEncoder, encode_articles
from . import losses as losses_mod
from .losses import (alignment_divergence, graded_rank_loss,
                     label_cross_entropy, multilabel_rank_loss,
                     rationale_loss, total_loss)
from .metrics import matching_metrics, rank_by_score, ranking_metrics
from .network import MatchingModel
from . import bm25 as bm25_mod

logger = logging.getLogger(__name__)

# Published benchmark reference scores, reported next to measured values
# (never used as tolerances). Keyed by corpus schema, values on the 0..1
# scale used internally.
REFERENCE_MAP = {"lecard": 0.5669}

_DTYPES = {"float32": torch.float32, "float64": torch.float64}


def default_encoder(config: ModelConfig):
    if config.encoder == "hash":
        return HashingEncoder(config.emb_dim, seed=config.seed)
    from .encoders import TransformerEncoder

    if not config.encoder_checkpoint:
        raise ConfigError("encoder 'transformer' requires encoder_checkpoint")
    return TransformerEncoder(config.encoder_checkpoint,
                              max_tokens=config.max_tokens,
                              trainable=config.encoder_trainable)


def embed_corpus(corpus: Corpus, encoder) -> dict[str, np.ndarray]:
    """Sentence embeddings for every case, keyed by case id."""
    return {cid: encoder.encode(case.sentences)
            for cid, case in corpus.cases.items()}


def citation_masks(corpus: Corpus) -> dict[str, torch.Tensor]:
    return {cid: torch.tensor(corpus.citation_row(cid), dtype=torch.bool)
            for cid in corpus.cases}


def kfold_splits(n_items: int, folds: int = 5, seed: int = 0):
    """Index splits for cross-validation.

    Items are shuffled once, cut into ``folds`` near-equal chunks, and
    fold ``i`` holds out chunk ``i``, splitting it evenly into validation
    (first half) and test (rest). Chunks never overlap across folds, so
    every item is tested exactly once.
    """
    if n_items < 2 * folds:
        raise ValueError(f"need at least {2 * folds} items for {folds} folds")
    order = list(range(n_items))
    random.Random(seed).shuffle(order)
    base, extra = divmod(n_items, folds)
    chunks, start = [], 0
    for i in range(folds):
        size = base + (1 if i < extra else 0)
        chunks.append(order[start : start + size])
        start += size
    splits = []
    for i in range(folds):
        held = chunks[i]
        val = held[: len(held) // 2]
        test = held[len(held) // 2 :]
        train = [idx for j, chunk in enumerate(chunks) if j != i for idx in chunk]
        splits.append((train, val, test))
    return splits


@dataclass
class TrainResult:
    model: MatchingModel
    encoder: object
    embeddings: dict[str, np.ndarray]
    history: list[dict]
    best_epoch: int
    best_metric: float


def _chunks(items, size):
    for start in range(0, len(items), size):
        yield items[start : start + size]


def _forced_tensors(model, emb, mask, config):
    """Per-case tensors, optionally steering AIA with gold articles."""
    tensors = model.case_tensors(emb)
    if config.teacher_force_articles and model.training and model.use_legal:
        tensors.predicted = mask.to(torch.bool)
    return tensors


def _article_term(tensors, mask, tau):
    return multilabel_rank_loss(tensors.cosines, mask.to(tensors.cosines.device), tau)


def _clip_rationale(labels, n: int):
    """Fit sentence labels to the truncated sentence count, or give up."""
    if labels is None or len(labels) < n:
        losses_mod.diagnostics["rationale_missing_labels"] += 1
        return None
    return labels[:n]


def _pair_losses(model, pair: CasePair, embeddings, masks, config) -> dict:
    """All loss terms for one labelled pair."""
    xt = _forced_tensors(model, model.as_input(embeddings[pair.query]),
                         masks[pair.query], config)
    yt = _forced_tensors(model, model.as_input(embeddings[pair.candidate]),
                         masks[pair.candidate], config)
    inter = model.interact(xt, yt)
    terms = {"match": label_cross_entropy(model.match_probs(inter), pair.label)}
    if model.use_legal:
        tau = config.loss.article_tau
        terms["article"] = [_article_term(inter.x, masks[pair.query], tau),
                            _article_term(inter.y, masks[pair.candidate], tau)]
        extras = []
        if config.loss.enable_rationale and hasattr(model, "rationale_head"):
            for tensors, labels in ((inter.x, pair.rationale_query),
                                    (inter.y, pair.rationale_candidate)):
                labels = _clip_rationale(labels, tensors.val.shape[0])
                if labels is not None:
                    extras.append(rationale_loss(model.rationale_head(tensors.val), labels))
        if config.loss.enable_align:
            align = _alignment_term(pair, inter)
            if align is not None:
                extras.append(align)
        terms["extra"] = extras
    return terms


def _alignment_term(pair: CasePair, inter):
    if pair.alignment is None:
        losses_mod.diagnostics["alignment_missing_map"] += 1
        return None
    affinity = inter.legal_affinity
    human = torch.as_tensor(pair.alignment, dtype=affinity.dtype)
    n_x, n_y = affinity.shape
    if human.ndim != 2 or human.shape[0] < n_x or human.shape[1] < n_y:
        losses_mod.diagnostics["alignment_shape_mismatch"] += 1
        return None
    # Human maps cover the untruncated sentences; crop to what survived.
    return alignment_divergence(human[:n_x, :n_y], affinity)


def _query_losses(model, query: RankingQuery, embeddings, masks, config) -> dict:
    """Loss terms for one query and its graded candidate pool."""
    xt = _forced_tensors(model, model.as_input(embeddings[query.query]),
                         masks[query.query], config)
    scores, article = [], []
    if model.use_legal:
        article.append(_article_term(xt, masks[query.query],
                                     config.loss.article_tau))
    for cid, _ in query.candidates:
        yt = _forced_tensors(model, model.as_input(embeddings[cid]),
                             masks[cid], config)
        scores.append(model.interact(xt, yt).score)
        if model.use_legal:
            article.append(_article_term(yt, masks[cid],
                                         config.loss.article_tau))
    grades = [rel for _, rel in query.candidates]
    terms = {"match": graded_rank_loss(torch.stack(scores), grades,
                                       config.loss.rank_tau)}
    if article:
        terms["article"] = article
    return terms


def _batch_loss(model, units, task, embeddings, masks, config):
    """Total loss for one mini-batch plus its components, for the log."""
    match_terms, article_terms, extra_terms = [], [], []
    for unit in units:
        if task == "lcm":
            terms = _pair_losses(model, unit, embeddings, masks, config)
        else:
            terms = _query_losses(model, unit, embeddings, masks, config)
        match_terms.append(terms["match"])
        article_terms.extend(terms.get("article", []))
        extra_terms.extend(terms.get("extra", []))
    main = torch.stack(match_terms).mean()
    loss = total_loss(article_terms, main)
    parts = {
        "match": float(main.detach()),
        "article": float(loss.detach()) - float(main.detach()),
        "extra": 0.0,
    }
    if extra_terms:
        extra = torch.stack(extra_terms).mean()
        loss = loss + extra
        parts["extra"] = float(extra.detach())
    return loss, parts


def _check_article_labels(model, corpus, task, train_units) -> None:
    """The article subtask needs at least one cited article to learn from."""
    if not model.use_legal:
        return
    involved: set[str] = set()
    for unit in train_units:
        if task == "lcm":
            involved.update((unit.query, unit.candidate))
        else:
            involved.add(unit.query)
            involved.update(cid for cid, _ in unit.candidates)
    if not any(corpus.cases[cid].articles for cid in involved):
        raise ValueError(
            "article subtask is enabled but no training case cites any "
            "article; disable the legal branch (variant no_lim) or fix the data")


def train(corpus: Corpus, config: ModelConfig, task: str,
          encoder=None, train_units=None, val_units=None,
          dtype=torch.float32) -> TrainResult:
    """Fit a model and return it at its best-validation checkpoint.

    ``task`` is ``"lcm"`` (labelled pairs, cross entropy, model selection
    by macro-F1) or ``"lcr"`` (graded query pools, ranking loss, model
    selection by MAP). ``train_units``/``val_units`` default to all
    pairs/queries in the corpus, which is only sensible for smoke tests;
    experiments should pass proper splits.
    """
    if task not in ("lcr", "lcm"):
        raise ValueError(f"unknown task {task!r}")
    config.validate()
    torch.manual_seed(config.seed)
    encoder = encoder if encoder is not None else default_encoder(config)
    embeddings = embed_corpus(corpus, encoder)
    article_ids, article_embs = encode_articles(encoder, corpus.articles)
    model = MatchingModel(
        config, article_embs, article_ids,
        n_match_labels=corpus.label_levels if task == "lcm" else None,
        dtype=dtype)
    masks = citation_masks(corpus)

    if train_units is None:
        train_units = list(corpus.pairs) if task == "lcm" else list(corpus.queries)
    if val_units is None:
        val_units = train_units
    if not train_units:
        raise ValueError("no training units")
    _check_article_labels(model, corpus, task, train_units)

    optimizer = torch.optim.AdamW(model.parameters(), lr=config.learning_rate)
    rng = random.Random(config.seed)
    history: list[dict] = []
    best_metric, best_epoch = -math.inf, -1
    best_state = copy.deepcopy(model.state_dict())

    for epoch in range(config.epochs):
        model.train()
        order = list(train_units)
        rng.shuffle(order)
        sums = {"loss": 0.0, "match": 0.0, "article": 0.0, "extra": 0.0}
        n_batches = 0
        for batch_idx, batch in enumerate(_chunks(order, config.batch_size)):
            optimizer.zero_grad()
            loss, parts = _batch_loss(model, batch, task, embeddings, masks, config)
            loss_value = float(loss.detach())
            if not math.isfinite(loss_value):
                raise RuntimeError(
                    f"non-finite loss {loss_value} at epoch {epoch} "
                    f"batch {batch_idx} (task {task}, variant {config.variant})")
            loss.backward()
            optimizer.step()
            sums["loss"] += loss_value
            for key in ("match", "article", "extra"):
                sums[key] += parts[key]
            n_batches += 1
        denom = max(n_batches, 1)
        val_metric = _validation_metric(model, corpus, task, embeddings, val_units, config)
        history.append({"epoch": epoch,
                        "loss": sums["loss"] / denom,
                        "match_loss": sums["match"] / denom,
                        "article_loss": sums["article"] / denom,
                        "extra_loss": sums["extra"] / denom,
                        "val_metric": val_metric})
        logger.info("epoch %d: loss %.4f (match %.4f, article %.4f), val %.4f",
                    epoch, history[-1]["loss"], history[-1]["match_loss"],
                    history[-1]["article_loss"], val_metric)
        if val_metric > best_metric:
            best_metric, best_epoch = val_metric, epoch
            best_state = copy.deepcopy(model.state_dict())

    model.load_state_dict(best_state)
    model.eval()
    return TrainResult(model=model, encoder=encoder, embeddings=embeddings,
                       history=history, best_epoch=best_epoch,
                       best_metric=best_metric)


def _validation_metric(model, corpus, task, embeddings, val_units, config) -> float:
    if not val_units:
        return 0.0
    if task == "lcm":
        return evaluate_matching(model, corpus, embeddings, val_units)["macro_f1"]
    return evaluate_ranking(model, corpus, embeddings, val_units, config)["MAP"]


def score_pair(model, emb_x, emb_y) -> float:
    with torch.no_grad():
        return float(model(model.as_input(emb_x), model.as_input(emb_y)).score)


def evaluate_matching(model, corpus: Corpus, embeddings,
                      pairs: list[CasePair],
                      symmetrize: bool = False) -> dict[str, float]:
    """Macro classification metrics over labelled pairs.

    ``symmetrize`` averages the class probabilities of both pair orders
    instead of scoring the given order only; the default matches
    training, which always sees ordered pairs.
    """
    if not pairs:
        raise ValueError("no pairs to evaluate")
    model.eval()
    y_true, y_pred = [], []
    with torch.no_grad():
        for pair in pairs:
            xt = model.case_tensors(model.as_input(embeddings[pair.query]))
            yt = model.case_tensors(model.as_input(embeddings[pair.candidate]))
            probs = model.match_probs(model.interact(xt, yt))
            if symmetrize:
                probs = (probs + model.match_probs(model.interact(yt, xt))) / 2
            y_true.append(pair.label)
            y_pred.append(int(probs.argmax()))
    return matching_metrics(y_true, y_pred, corpus.label_levels)


def evaluate_ranking(model, corpus: Corpus, embeddings,
                     queries: list[RankingQuery],
                     config: ModelConfig) -> dict[str, float]:
    """Mean retrieval metrics over query pools, scored by fused cosine."""
    ranked = []
    model.eval()
    with torch.no_grad():
        for query in queries:
            if not query.candidates:
                continue
            xt = model.case_tensors(model.as_input(embeddings[query.query]))
            scores = {}
            for cid, _ in query.candidates:
                yt = model.case_tensors(model.as_input(embeddings[cid]))
                scores[cid] = float(model.interact(xt, yt).score)
            rels = dict(query.candidates)
            ranked.append([rels[cid] for cid in rank_by_score(scores)])
    if not ranked:
        raise ValueError("no queries to evaluate")
    return ranking_metrics(ranked, corpus.label_levels,
                           min_grade=config.relevant_min_grade,
                           gain=config.ndcg_gain)


def evaluate_bm25(corpus: Corpus, queries: list[RankingQuery],
                  config: ModelConfig) -> dict[str, float]:
    """Lexical baseline under the same evaluation protocol."""
    ranked = []
    for query in queries:
        if not query.candidates:
            continue
        pool = {cid: bm25_mod.case_tokens(corpus.cases[cid].sentences)
                for cid, _ in query.candidates}
        index = bm25_mod.BM25(pool)
        tokens = bm25_mod.case_tokens(corpus.cases[query.query].sentences)
        rels = dict(query.candidates)
        ranked.append([rels[cid] for cid, _ in index.rank(tokens)])
    if not ranked:
        raise ValueError("no queries to evaluate")
    return ranking_metrics(ranked, corpus.label_levels,
                           min_grade=config.relevant_min_grade,
                           gain=config.ndcg_gain)


# ---------------------------------------------------------------------------
# Late interaction: precompute candidate tensors once, rerank cheaply.

class CacheMismatchError(ValueError):
    """Candidate cache was produced by a different model."""


@dataclass
class CandidateCache:
    """Per-candidate tensors that do not depend on any query."""

    fingerprint: str
    entries: dict[str, dict[str, np.ndarray]]  # id -> {emb, lam, val}
    reused: int = 0  # entries served from disk instead of recomputed

    def ids(self) -> list[str]:
        return sorted(self.entries)


_CACHE_FIELDS = ("emb", "lam", "val")
_MANIFEST = "manifest.json"


def _entry_name(cid: str) -> str:
    """Readable, filesystem-safe, collision-free file name for a case id."""
    slug = re.sub(r"[^A-Za-z0-9._-]", "_", cid)[:40]
    return f"{slug}-{hashlib.sha1(cid.encode('utf-8')).hexdigest()[:8]}.npz"


def _read_manifest(cache_dir: Path) -> dict | None:
    path = cache_dir / _MANIFEST
    if not path.exists():
        return None
    return json.loads(path.read_text())


def _write_manifest(cache_dir: Path, fingerprint: str, ids) -> None:
    manifest = {"fingerprint": fingerprint,
                "cases": {cid: _entry_name(cid) for cid in sorted(ids)}}
    (cache_dir / _MANIFEST).write_text(json.dumps(manifest, indent=2) + "\n")


def precompute_candidates(model, encoder, corpus: Corpus, ids=None,
                          cache_dir: str | Path | None = None,
                          jobs: int = 1) -> CandidateCache:
    """Run the per-case half of the model for every candidate id.

    With a ``cache_dir``, each candidate is stored as one tensor file
    next to a fingerprint manifest, and candidates already on disk for
    the same model are loaded instead of recomputed (no encoder call, no
    model pass). A manifest from a different model is discarded and the
    directory is rebuilt. ``jobs`` parallelizes candidate processing.
    """
    if not model.use_legal:
        raise ConfigError("candidate caching requires the article branch; "
                          f"variant {model.variant!r} has none")
    ids = list(ids) if ids is not None else sorted(corpus.cases)
    missing = [cid for cid in ids if cid not in corpus.cases]
    if missing:
        raise KeyError(f"unknown case ids: {missing[:5]}")
    fingerprint = model.fingerprint()
    model.eval()

    reusable = False
    if cache_dir is not None:
        cache_dir = Path(cache_dir)
        cache_dir.mkdir(parents=True, exist_ok=True)
        manifest = _read_manifest(cache_dir)
        reusable = manifest is not None and manifest.get("fingerprint") == fingerprint

    def compute(cid: str) -> tuple[str, dict[str, np.ndarray], bool]:
        if reusable:
            path = cache_dir / _entry_name(cid)
            if path.exists():
                with np.load(path) as payload:
                    return cid, {f: payload[f] for f in _CACHE_FIELDS}, True
        emb = encoder.encode(corpus.cases[cid].sentences)
        with torch.no_grad():
            tensors = model.case_tensors(model.as_input(emb))
        entry = {
            "emb": tensors.emb.cpu().numpy().astype(np.float32),
            "lam": tensors.lam.cpu().numpy().astype(np.float32),
            "val": tensors.val.cpu().numpy().astype(np.float32),
        }
        return cid, entry, False

    if jobs > 1:
        with ThreadPoolExecutor(max_workers=jobs) as pool:
            results = list(pool.map(compute, ids))
    else:
        results = [compute(cid) for cid in ids]

    entries = {cid: entry for cid, entry, _ in results}
    reused = sum(1 for _, _, hit in results if hit)
    if cache_dir is not None:
        for cid, entry, hit in results:
            if not hit:
                np.savez(cache_dir / _entry_name(cid), **entry)
        _write_manifest(cache_dir, fingerprint, entries)
    logger.info("precomputed %d candidates (%d reused from cache)",
                len(entries), reused)
    return CandidateCache(fingerprint=fingerprint, entries=entries, reused=reused)


def load_cache(cache_dir: str | Path,
               expected_fingerprint: str | None = None) -> CandidateCache:
    """Load every cached candidate under ``cache_dir``.

    ``expected_fingerprint`` guards against stale caches: a manifest
    written by any other model raises :class:`CacheMismatchError`.
    """
    cache_dir = Path(cache_dir)
    manifest = _read_manifest(cache_dir)
    if manifest is None:
        raise FileNotFoundError(f"{cache_dir / _MANIFEST}: no cache manifest")
    if expected_fingerprint is not None and manifest["fingerprint"] != expected_fingerprint:
        raise CacheMismatchError(
            f"cache {cache_dir} was built by model "
            f"{manifest['fingerprint'][:12]}..., expected "
            f"{expected_fingerprint[:12]}...")
    entries: dict[str, dict[str, np.ndarray]] = {}
    for cid, name in manifest["cases"].items():
        path = cache_dir / name
        if not path.exists():
            raise CacheMismatchError(f"cache entry file missing for {cid!r}: {path}")
        with np.load(path) as payload:
            missing = [f for f in _CACHE_FIELDS if f not in payload.files]
            if missing:
                raise CacheMismatchError(f"cache entry {cid!r} is missing {missing}")
            entries[cid] = {f: payload[f] for f in _CACHE_FIELDS}
    return CandidateCache(fingerprint=manifest["fingerprint"], entries=entries)


def rerank(model, query_emb, cache: CandidateCache,
           candidate_ids=None) -> list[tuple[str, float]]:
    """Score cached candidates against one query, best first.

    The query's tensors are computed once; every candidate is served
    from the cache, so no sentence is re-encoded and the per-case model
    half never runs for candidates. Ties break by ascending id.
    """
    if cache.fingerprint != model.fingerprint():
        raise CacheMismatchError("cache fingerprint does not match this model")
    ids = list(candidate_ids) if candidate_ids is not None else cache.ids()
    missing = [cid for cid in ids if cid not in cache.entries]
    if missing:
        raise KeyError(f"candidates not in cache: {missing[:5]}")
    model.eval()
    with torch.no_grad():
        xt = model.case_tensors(model.as_input(query_emb))
        scores = {}
        for cid in ids:
            entry = cache.entries[cid]
            yt = model.tensors_from_parts(entry["emb"], entry["lam"], entry["val"])
            scores[cid] = float(model.interact(xt, yt).score)
    return [(cid, scores[cid]) for cid in rank_by_score(scores)]


# ---------------------------------------------------------------------------
# Cross-validated experiments and model persistence.

def run_experiment(corpus: Corpus, config: ModelConfig, task: str,
                   csv_path: str | Path | None = None,
                   model_dir: str | Path | None = None,
                   method: str = "model") -> list[dict[str, float]]:
    """Train and test on every fold; return one metric row per fold.

    With ``method="bm25"`` the folds reuse the same test splits but the
    baseline needs no training. When the corpus schema has a published
    reference score, it is added as a ``reference_MAP`` column for
    side-by-side reading; nothing is checked against it.
    """
    units = list(corpus.pairs) if task == "lcm" else list(corpus.queries)
    splits = kfold_splits(len(units), config.folds, config.seed)
    rows = []
    for fold, (train_idx, val_idx, test_idx) in enumerate(splits):
        test_units = [units[i] for i in test_idx]
        if method == "bm25":
            if task != "lcr":
                raise ConfigError("bm25 baseline only applies to ranking")
            row = evaluate_bm25(corpus, test_units, config)
        else:
            fold_config = dataclasses.replace(config, fold=fold)
            result = train(corpus, fold_config, task,
                           train_units=[units[i] for i in train_idx],
                           val_units=[units[i] for i in val_idx])
            if task == "lcm":
                row = evaluate_matching(result.model, corpus, result.embeddings,
                                        test_units)
            else:
                row = evaluate_ranking(result.model, corpus, result.embeddings,
                                       test_units, fold_config)
            if model_dir is not None:
                save_model(result.model, Path(model_dir) / f"fold{fold}")
        if task == "lcr" and corpus.schema in REFERENCE_MAP:
            row["reference_MAP"] = REFERENCE_MAP[corpus.schema]
        rows.append(row)
        logger.info("fold %d (%s): %s", fold, method, row)
    if csv_path is not None:
        from .metrics import write_metrics_csv

        write_metrics_csv(csv_path, rows)
    return rows


def save_model(model: MatchingModel, directory: str | Path) -> Path:
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    n_match = model.match_head.linear.out_features if hasattr(model, "match_head") else None
    payload = {
        "state_dict": model.state_dict(),
        "config": model.config.to_dict(),
        "article_ids": model.article_ids,
        "n_match_labels": n_match,
        "dtype": str(model._dtype).removeprefix("torch."),
    }
    path = directory / "model.pt"
    torch.save(payload, path)
    model.config.to_json(directory / "config.json")
    return path


def load_model(path: str | Path) -> MatchingModel:
    path = Path(path)
    if path.is_dir():
        path = path / "model.pt"
    if not path.exists():
        raise FileNotFoundError(f"{path}: model file not found")
    payload = torch.load(path, map_location="cpu", weights_only=True)
    config = ModelConfig.from_dict(payload["config"])
    dtype = _DTYPES[payload["dtype"]]
    article_ids = list(payload["article_ids"])
    placeholder = np.zeros((len(article_ids), config.emb_dim), dtype=np.float32)
    model = MatchingModel(config, placeholder, article_ids,
                          n_match_labels=payload["n_match_labels"], dtype=dtype)
    model.load_state_dict(payload["state_dict"])
    model.eval()
    return model
