"""Command-line entry points.

Subcommands cover the experiment lifecycle: ``prepare`` builds or trims
corpora, ``train`` fits models, ``evaluate`` writes metric CSVs,
``precompute``/``rerank`` run the late-interaction path, and ``explain``
exports interaction matrices for one pair. Every command drops the
configuration it resolved next to its outputs so a run can be replayed.
Exit codes: 0 on success, 1 when a wrapped operation fails, 2 on usage
or configuration errors (bad flags, unknown config keys, missing paths).
"""

from __future__ import annotations

import argparse
import dataclasses
import json
import logging
import sys
from pathlib import Path

import numpy as np

from .config import ConfigError, ModelConfig
from .data import (DataError, filter_articles, load_corpus,
                   make_synthetic_corpus, save_corpus)
from .metrics import write_metrics_csv
from .network import apply_variant
from .pipeline import (REFERENCE_MAP, CacheMismatchError, default_encoder,
                       embed_corpus, evaluate_matching, evaluate_ranking,
                       kfold_splits, load_cache, load_model,
                       precompute_candidates, rerank, run_experiment,
                       save_model, train)

logger = logging.getLogger(__name__)


def _resolve_config(args) -> ModelConfig:
    """Merge config file, ``--set`` overrides, and explicit flags."""
    raw = {}
    if getattr(args, "config", None):
        try:
            raw = json.loads(Path(args.config).read_text())
        except json.JSONDecodeError as exc:
            raise ConfigError(f"{args.config}: not valid JSON ({exc})") from exc
        if not isinstance(raw, dict):
            raise ConfigError(f"{args.config}: expected a JSON object")
        raw.pop("run", None)  # replay metadata written by _persist_run
    for item in getattr(args, "set", None) or []:
        if "=" not in item:
            raise ConfigError(f"--set expects key=value, got {item!r}")
        key, value = item.split("=", 1)
        try:
            value = json.loads(value)
        except json.JSONDecodeError:
            pass  # keep as string
        target = raw
        if key.startswith("loss."):
            target = raw.setdefault("loss", {})
            key = key[len("loss."):]
        target[key] = value
    for flag in ("seed", "fold", "folds", "variant", "epochs", "batch_size",
                 "learning_rate", "encoder", "encoder_checkpoint",
                 "relevant_min_grade"):
        value = getattr(args, flag, None)
        if value is not None:
            raw[flag] = value
    return ModelConfig.from_dict(raw)


def _persist_run(out_dir: Path, args, config: ModelConfig | None) -> None:
    """Write the resolved settings next to the artifacts they produced."""
    out_dir.mkdir(parents=True, exist_ok=True)
    if config is not None:
        config.to_json(out_dir / "config.json")
    skip = {"func", "config", "set", "verbose"}
    run = {key: value for key, value in sorted(vars(args).items())
           if key not in skip and value is not None}
    run["command"] = args.func.__name__.removeprefix("cmd_")
    (out_dir / "run.json").write_text(
        json.dumps(run, indent=2, sort_keys=True) + "\n")


def _add_config_flags(parser: argparse.ArgumentParser) -> None:
    parser.add_argument("--config", help="JSON config file")
    parser.add_argument("--set", action="append", metavar="KEY=VALUE",
                        help="override a config field (repeatable; use "
                             "loss.<field> for loss settings)")
    parser.add_argument("--seed", type=int)
    parser.add_argument("--fold", type=int)
    parser.add_argument("--folds", type=int)
    parser.add_argument("--variant")
    parser.add_argument("--epochs", type=int)
    parser.add_argument("--batch-size", type=int, dest="batch_size")
    parser.add_argument("--learning-rate", type=float, dest="learning_rate")
    parser.add_argument("--relevant-min-grade", type=int,
                        dest="relevant_min_grade",
                        help="lowest grade that counts as relevant for "
                             "P@k/MAP (default: top grade only)")
    parser.add_argument("--encoder", choices=("hash", "transformer"))
    parser.add_argument("--encoder-checkpoint", dest="encoder_checkpoint")


def _add_corpus_flags(parser: argparse.ArgumentParser) -> None:
    parser.add_argument("--corpus", required=True, help="corpus directory")
    parser.add_argument("--schema", default="generic",
                        help="dataset schema (fixes the grade scale)")


def _load(args, config: ModelConfig):
    return load_corpus(args.corpus, schema=args.schema,
                       max_sentences=config.max_sentences,
                       max_tokens=config.max_tokens)


def _units(corpus, task):
    return list(corpus.pairs) if task == "lcm" else list(corpus.queries)


def _split_units(units, config: ModelConfig, which: str):
    if which == "all":
        return units
    splits = kfold_splits(len(units), config.folds, config.seed)
    train_idx, val_idx, test_idx = splits[config.fold]
    picked = {"train": train_idx, "val": val_idx, "test": test_idx}[which]
    return [units[i] for i in picked]


def cmd_prepare(args) -> int:
    if args.synthetic and args.input:
        raise ConfigError("prepare takes --synthetic or --input, not both")
    if args.synthetic:
        thresholds = None
        if args.thresholds:
            thresholds = [int(t) for t in args.thresholds.split(",")]
        corpus = make_synthetic_corpus(
            n_cases=args.cases, n_articles=args.articles, n_levels=args.levels,
            thresholds=thresholds, n_pairs=args.pairs, n_queries=args.queries,
            n_candidates=args.candidates, seed=args.seed or 0)
    elif args.input:
        corpus = load_corpus(args.input, schema=args.schema)
    else:
        raise ConfigError("prepare needs --synthetic or --input")
    if args.min_support is not None:
        corpus = filter_articles(corpus, args.min_support)
    out = Path(args.out_dir)
    save_corpus(corpus, out)
    _persist_run(out, args, None)
    print(f"wrote {len(corpus.cases)} cases, {len(corpus.articles)} articles, "
          f"{len(corpus.pairs)} pairs, {len(corpus.queries)} queries to {out}")
    return 0


def cmd_train(args) -> int:
    config = _resolve_config(args)
    corpus = _load(args, config)
    out = Path(args.out_dir)
    out.mkdir(parents=True, exist_ok=True)
    if args.all_folds:
        rows = run_experiment(corpus, config, args.task,
                              csv_path=out / "metrics.csv", model_dir=out)
        _persist_run(out, args, config)
        print(f"wrote {len(rows)} fold rows to {out / 'metrics.csv'}")
        return 0
    units = _units(corpus, args.task)
    splits = kfold_splits(len(units), config.folds, config.seed)
    train_idx, val_idx, _ = splits[config.fold]
    result = train(corpus, config, args.task,
                   train_units=[units[i] for i in train_idx],
                   val_units=[units[i] for i in val_idx])
    save_model(result.model, out)
    with (out / "history.jsonl").open("w") as fh:
        for row in result.history:
            fh.write(json.dumps(row) + "\n")
    _persist_run(out, args, config)
    print(f"fold {config.fold}: best val {result.best_metric:.4f} at epoch "
          f"{result.best_epoch}; model saved to {out}")
    return 0


def cmd_evaluate(args) -> int:
    out = Path(args.out_dir)
    csv_path = out / "metrics.csv"
    if args.method == "bm25":
        config = _resolve_config(args)
        corpus = _load(args, config)
        out.mkdir(parents=True, exist_ok=True)
        rows = run_experiment(corpus, config, args.task, csv_path=csv_path,
                              method="bm25")
        _persist_run(out, args, config)
        print(f"bm25 over {len(rows)} folds -> {csv_path}")
        return 0
    if not args.model:
        raise ConfigError("evaluate needs --model (or --method bm25)")
    model = load_model(args.model)
    if args.variant:
        apply_variant(model, args.variant)
    if args.relevant_min_grade is not None:
        model.config = dataclasses.replace(
            model.config, relevant_min_grade=args.relevant_min_grade)
    config = model.config
    corpus = _load(args, config)
    encoder = default_encoder(config)
    embeddings = embed_corpus(corpus, encoder)
    units = _split_units(_units(corpus, args.task), config, args.split)
    if args.task == "lcm":
        row = evaluate_matching(model, corpus, embeddings, units,
                                symmetrize=args.symmetrize)
    else:
        row = evaluate_ranking(model, corpus, embeddings, units, config)
        if corpus.schema in REFERENCE_MAP:
            row["reference_MAP"] = REFERENCE_MAP[corpus.schema]
    out.mkdir(parents=True, exist_ok=True)
    write_metrics_csv(csv_path, [row], labels=[str(config.fold)])
    _persist_run(out, args, config)
    print(f"{args.task} {args.split} metrics -> {csv_path}")
    return 0


def cmd_precompute(args) -> int:
    model = load_model(args.model)
    corpus = _load(args, model.config)
    encoder = default_encoder(model.config)
    ids = args.ids.split(",") if args.ids else None
    cache_dir = Path(args.cache_dir)
    cache = precompute_candidates(model, encoder, corpus, ids=ids,
                                  cache_dir=cache_dir, jobs=args.jobs)
    _persist_run(cache_dir, args, model.config)
    print(f"cached {len(cache.entries)} candidates -> {cache_dir} "
          f"({cache.reused} reused, fingerprint {cache.fingerprint[:12]})")
    return 0


def cmd_rerank(args) -> int:
    model = load_model(args.model)
    corpus = _load(args, model.config)
    cache = load_cache(args.cache_dir, expected_fingerprint=model.fingerprint())
    encoder = default_encoder(model.config)
    query_ids = args.query or [q.query for q in corpus.queries]
    if not query_ids:
        raise DataError("no queries given and the corpus has none")
    pools = {q.query: [cid for cid, _ in q.candidates] for q in corpus.queries}
    out = Path(args.out_dir)
    out.mkdir(parents=True, exist_ok=True)
    path = out / "ranking.jsonl"
    with path.open("w") as fh:
        for qid in query_ids:
            if qid not in corpus.cases:
                raise DataError(f"unknown query case {qid!r}")
            query_emb = encoder.encode(corpus.cases[qid].sentences)
            ranking = rerank(model, query_emb, cache,
                             candidate_ids=pools.get(qid))
            if args.topk is not None:
                ranking = ranking[:args.topk]
            fh.write(json.dumps({
                "query": qid,
                "ranking": [{"id": cid, "score": round(score, 6)}
                            for cid, score in ranking],
            }) + "\n")
    _persist_run(out, args, model.config)
    print(f"reranked {len(query_ids)} queries -> {path}")
    return 0


def export_matrix(path: str | Path, matrix: np.ndarray) -> None:
    """Plain-text matrix: a "rows cols" header, then one row per line."""
    matrix = np.asarray(matrix)
    lines = [f"{matrix.shape[0]} {matrix.shape[1]}"]
    for row in matrix:
        lines.append(" ".join(f"{v:.6f}" for v in row))
    Path(path).write_text("\n".join(lines) + "\n")


def export_heatmap(path: str | Path, matrix: np.ndarray, title: str,
                   xlabel: str = "candidate sentence",
                   ylabel: str = "query sentence") -> None:
    import matplotlib

    matplotlib.use("Agg")
    import matplotlib.pyplot as plt

    fig, ax = plt.subplots(figsize=(6, 5))
    image = ax.imshow(np.asarray(matrix), aspect="auto", cmap="viridis")
    ax.set_title(title)
    ax.set_xlabel(xlabel)
    ax.set_ylabel(ylabel)
    fig.colorbar(image, ax=ax)
    fig.tight_layout()
    fig.savefig(path, dpi=120)
    plt.close(fig)


def cmd_explain(args) -> int:
    import torch

    model = load_model(args.model)
    corpus = _load(args, model.config)
    encoder = default_encoder(model.config)
    for cid in (args.query, args.candidate):
        if cid not in corpus.cases:
            raise DataError(f"unknown case {cid!r}")
    with torch.no_grad():
        inter = model(
            model.as_input(encoder.encode(corpus.cases[args.query].sentences)),
            model.as_input(encoder.encode(corpus.cases[args.candidate].sentences)))
    out = Path(args.out_dir)
    out.mkdir(parents=True, exist_ok=True)
    written = []

    def emit(tag: str, matrix, title: str, xlabel="candidate sentence",
             ylabel="query sentence") -> None:
        array = matrix.detach().cpu().numpy()
        export_matrix(out / f"{tag}.txt", array)
        export_heatmap(out / f"{tag}.png", array, title, xlabel, ylabel)
        written.append(tag)

    if inter.sem_affinity is not None:
        emit("semantic", inter.sem_affinity, "semantic sentence affinity")
    if inter.legal_affinity is not None:
        emit("legal", inter.legal_affinity, "legal sentence affinity")
    if inter.psi_x is not None and inter.legal_affinity is not None:
        weighted = inter.psi_x.unsqueeze(1) * inter.legal_affinity * inter.psi_y.unsqueeze(0)
        emit("weighted", weighted, "article-guided weighted affinity")
    if inter.x.lam is not None:
        emit("query_articles", inter.x.lam, "query sentence-article scores",
             xlabel="article", ylabel="query sentence")
        emit("candidate_articles", inter.y.lam,
             "candidate sentence-article scores",
             xlabel="article", ylabel="candidate sentence")

    summary = {
        "query": args.query,
        "candidate": args.candidate,
        "score": float(inter.score),
        "predicted_articles_query": _predictions(model, inter.x),
        "predicted_articles_candidate": _predictions(model, inter.y),
    }
    if hasattr(model, "match_head"):
        with torch.no_grad():
            summary["match_probs"] = [round(float(p), 6)
                                      for p in model.match_probs(inter)]
    (out / "summary.json").write_text(json.dumps(summary, indent=2) + "\n")
    written.append("summary")
    _persist_run(out, args, model.config)
    print(f"wrote {', '.join(written)} to {out}")
    return 0


def _predictions(model, tensors) -> list[str]:
    if tensors.predicted is None:
        return []
    mask = tensors.predicted.tolist()
    return [aid for aid, hit in zip(model.article_ids, mask) if hit]


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="lexmatch",
        description="legal case retrieval and matching experiments")
    parser.add_argument("--verbose", action="store_true", help="log at INFO")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("prepare", help="generate or trim a corpus directory")
    p.add_argument("--out-dir", required=True, dest="out_dir")
    p.add_argument("--synthetic", action="store_true",
                   help="generate a synthetic corpus")
    p.add_argument("--input", help="existing corpus to trim")
    p.add_argument("--schema", default="generic")
    p.add_argument("--min-support", type=int, dest="min_support",
                   help="drop articles cited by fewer cases than this")
    p.add_argument("--cases", type=int, default=200)
    p.add_argument("--articles", type=int, default=8)
    p.add_argument("--levels", type=int, default=3)
    p.add_argument("--thresholds",
                   help="comma-separated citation-overlap cutoffs that set "
                        "the synthetic pair grades (overrides --levels)")
    p.add_argument("--pairs", type=int, default=400)
    p.add_argument("--queries", type=int, default=20)
    p.add_argument("--candidates", type=int, default=10)
    p.add_argument("--seed", type=int, default=0)
    p.set_defaults(func=cmd_prepare)

    p = sub.add_parser("train", help="train one fold (or all folds)")
    _add_corpus_flags(p)
    p.add_argument("--task", required=True, choices=("lcr", "lcm"))
    p.add_argument("--out-dir", required=True, dest="out_dir")
    p.add_argument("--all-folds", action="store_true", dest="all_folds",
                   help="cross-validate every fold and write metrics.csv")
    _add_config_flags(p)
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("evaluate",
                       help="score a trained model or the bm25 baseline")
    _add_corpus_flags(p)
    p.add_argument("--task", required=True, choices=("lcr", "lcm"))
    p.add_argument("--out-dir", required=True, dest="out_dir")
    p.add_argument("--model", help="directory produced by train")
    p.add_argument("--method", choices=("model", "bm25"), default="model")
    p.add_argument("--split", choices=("train", "val", "test", "all"),
                   default="test")
    p.add_argument("--symmetrize", action="store_true",
                   help="average match probabilities over both pair orders")
    _add_config_flags(p)
    p.set_defaults(func=cmd_evaluate)

    p = sub.add_parser("precompute", help="cache candidate tensors for reranking")
    _add_corpus_flags(p)
    p.add_argument("--model", required=True)
    p.add_argument("--cache-dir", required=True, dest="cache_dir")
    p.add_argument("--ids", help="comma-separated case ids (default: all)")
    p.add_argument("--jobs", type=int, default=1,
                   help="concurrent candidate workers")
    p.set_defaults(func=cmd_precompute)

    p = sub.add_parser("rerank", help="rank cached candidates for queries")
    _add_corpus_flags(p)
    p.add_argument("--model", required=True)
    p.add_argument("--cache-dir", required=True, dest="cache_dir")
    p.add_argument("--out-dir", required=True, dest="out_dir")
    p.add_argument("--query", action="append",
                   help="query case id (repeatable; default: all queries)")
    p.add_argument("--topk", type=int,
                   help="keep only the best k candidates per query")
    p.set_defaults(func=cmd_rerank)

    p = sub.add_parser("explain", help="export interaction matrices for one pair")
    _add_corpus_flags(p)
    p.add_argument("--model", required=True)
    p.add_argument("--query", required=True)
    p.add_argument("--candidate", required=True)
    p.add_argument("--out-dir", required=True, dest="out_dir")
    p.set_defaults(func=cmd_explain)
    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(
        level=logging.INFO if args.verbose else logging.WARNING,
        format="%(levelname)s %(name)s: %(message)s")
    try:
        return args.func(args)
    except (ConfigError, FileNotFoundError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2
    except (DataError, CacheMismatchError, KeyError, ValueError,
            RuntimeError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
