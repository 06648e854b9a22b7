"""Command-line entry point: ``toolsel <subcommand> [options]``."""
from __future__ import annotations

import argparse
import json
import logging
import sys
from dataclasses import replace
from pathlib import Path

from .adapter import AdapterModel, AdapterTrainConfig, save_adapter
from .embed import EmbedderSpec, PrecomputedEmbedder, embed_corpus, make_embedder
from .evaluate import (SplitSpec, bench_latency, evaluate_engine, evaluate_method, reports_to_csv,
                       split_dataset, subsplit, write_report)
from .pipeline import (STAGES, METHOD_ALIASES, Artifacts, FitConfig, fit_adapter, fit_refinement,
                       fit_reranker, resolve_stage)
from .refine import OutcomeLabels, RefineConfig
from .rerank import Reranker, RerankTrainConfig
from .serve import (FILES, ServeConfig, build_engine, data_root, http_serve, load_embedder_spec,
                    save_embedder_spec)
from .store import (Corpus, load_corpus, read_embedding_table, swap_generation, write_embedding_table)

log = logging.getLogger("toolsel")


class CliError(Exception):
    pass


def _root(args) -> Path:
    return data_root(args.data_dir)


def _corpus(args) -> Corpus:
    return load_corpus(_root(args))


def _embedder(args):
    path = _root(args) / FILES["embedder"]
    if not path.exists():
        raise CliError(f"no embedder spec at {path}; run `toolsel embed` first")
    return make_embedder(load_embedder_spec(path))


def _table(args, key: str, fallback: str | None = None):
    path = _root(args) / FILES[key]
    if not path.exists() and fallback:
        path = _root(args) / FILES[fallback]
    if not path.exists():
        raise CliError(f"missing {path}")
    return read_embedding_table(path)


def _split(args, corpus: Corpus):
    train, test = split_dataset(corpus.queries, SplitSpec(args.seed, args.train_frac, args.val_split))
    fit, val = subsplit(train, args.val_split)
    return train, test, fit, val


def _emit(payload: dict, out: str | None) -> None:
    if out:
        write_report(out, payload)
    print(json.dumps(payload, indent=2))


def _ks(text: str) -> tuple[int, ...]:
    try:
        ks = tuple(int(x) for x in text.split(",") if x.strip())
    except ValueError:
        raise argparse.ArgumentTypeError(f"bad K list {text!r}") from None
    if not ks or min(ks) < 1:
        raise argparse.ArgumentTypeError("K values must be positive")
    return ks


def _method(text: str) -> str:
    try:
        resolve_stage(text)
    except ValueError as exc:
        raise argparse.ArgumentTypeError(str(exc)) from None
    return text


# -- subcommands -------------------------------------------------------------

def cmd_ingest(args) -> int:
    corpus = _corpus(args)
    _emit({"tools": len(corpus.tools), "queries": len(corpus.queries), "outcomes": len(corpus.outcomes),
           "queries_without_relevant": sum(1 for q in corpus.queries if not q.relevant)}, None)
    return 0


def cmd_embed(args) -> int:
    corpus = _corpus(args)
    clusters = ()
    if args.clusters:
        with open(args.clusters, encoding="utf-8") as fh:
            clusters = tuple(sorted((k.lower(), v) for k, v in json.load(fh).items()))
    dim = args.dim
    if args.embedder == "precomputed":
        dim = PrecomputedEmbedder.from_files(args.source).dim
    spec = EmbedderSpec(args.embedder, dim, args.source, args.seed, clusters)
    table = embed_corpus(spec, corpus.tools)
    root = _root(args)
    save_embedder_spec(spec, root / FILES["embedder"])
    write_embedding_table(table, root / FILES["base_table"])
    _emit({"table": str(root / FILES["base_table"]), "count": len(table), "dim": table.dim,
           "generation": table.generation}, None)
    return 0


def cmd_refine(args) -> int:
    corpus = _corpus(args)
    embedder = _embedder(args)
    base = _table(args, "base_table")
    _, _, fit, val = _split(args, corpus)
    config = RefineConfig(args.alpha, args.beta, args.iters, args.momentum, args.label_k, args.gate_k)
    labels = None
    if args.labels == "outcomes" or (args.labels == "auto" and corpus.outcomes):
        labels = OutcomeLabels.from_triples(corpus.outcomes, args.unlabeled_negative)
    vecs = {q.id: embedder.embed(q.text) for q in fit + val}
    report = fit_refinement(base, fit, val, vecs, config, labels)
    root = _root(args)
    write_embedding_table(report.table, root / "refined.candidate.emb")
    payload = report.to_dict()
    payload.update(candidate=str(root / "refined.candidate.emb"), label_source="outcomes" if labels else "ground-truth")
    if report.accepted:
        published = swap_generation(base, report.table)
        write_embedding_table(published, root / FILES["refined_table"])
        payload.update(published=str(root / FILES["refined_table"]), generation=published.generation)
    else:
        live = root / FILES["refined_table"]
        if not live.exists():
            # rejected: the unchanged base table stays live for this stage
            write_embedding_table(base, live)
        payload.update(published=str(live), generation=read_embedding_table(live).generation)
    _emit(payload, args.out or str(root / "refine_gate.json"))
    return 0


def cmd_train_rerank(args) -> int:
    corpus = _corpus(args)
    embedder = _embedder(args)
    table = _table(args, "refined_table", fallback="base_table")
    _, _, fit, val = _split(args, corpus)
    vecs = {q.id: embedder.embed(q.text) for q in fit + val}
    config = RerankTrainConfig(args.lr, args.epochs, args.batch_size, args.seed, args.alpha_pool)
    reranker = fit_reranker(table, fit, val, vecs, corpus.tools, config, args.k, args.clusters_k)
    path = _root(args) / FILES["reranker"]
    reranker.save(path)
    _emit({"model": str(path), "params": reranker.model.n_params(), "clusters": reranker.stats.k}, None)
    return 0


def cmd_train_adapter(args) -> int:
    corpus = _corpus(args)
    embedder = _embedder(args)
    table = _table(args, "refined_table", fallback="base_table")
    _, _, fit, val = _split(args, corpus)
    vecs = {q.id: embedder.embed(q.text) for q in fit + val}
    config = AdapterTrainConfig(args.lr, args.tau, args.epochs, args.batch_size, args.seed,
                                include_positive=not args.exclude_positive)
    model, candidate, report = fit_adapter(table, fit, val, vecs, config, args.alpha_pool * args.k, args.gate_k)
    root = _root(args)
    payload = report.to_dict()
    if report.accepted:
        adapted = swap_generation(table, report.table)
    else:
        model, adapted = AdapterModel(table.dim, seed=args.seed), table  # identity rollback
    save_adapter(model, root / FILES["adapter"])
    write_embedding_table(adapted, root / FILES["adapted_table"])
    payload.update(adapter=str(root / FILES["adapter"]), generation=adapted.generation, params=model.n_params())
    _emit(payload, args.out)
    return 0


def _fit_config(args) -> FitConfig:
    return FitConfig(
        refine=RefineConfig(args.alpha, args.beta, args.iters, args.momentum, args.k, args.gate_k),
        rerank=RerankTrainConfig(seed=args.seed),
        adapter=AdapterTrainConfig(seed=args.seed),
        K=args.k,
    )


def cmd_eval(args) -> int:
    corpus = _corpus(args)
    split = SplitSpec(args.seed, args.train_frac, args.val_split)
    stage = resolve_stage(args.method)
    embedder = None if stage in ("bm25", "random") else _embedder(args)
    if args.use_artifacts:
        engine = build_engine(ServeConfig(K=args.k, stage=stage, data_dir=str(_root(args)), seed=args.seed)) \
            if stage != "random" else None
        _, test = split_dataset(corpus.queries, split)
        if engine is None:
            from .pipeline import Engine

            engine = Engine(corpus.tools, stage="random", K=args.k, seed=args.seed)
        report = evaluate_engine(engine, test, args.ks, args.method)
        report.seed = args.seed
    else:
        base = _table(args, "base_table") if embedder is not None else None
        report = evaluate_method(args.method, corpus, split, args.ks, embedder, base, config=_fit_config(args))
    _emit(report.to_dict(per_query=args.per_query), args.out)
    if args.csv:
        Path(args.csv).write_text(reports_to_csv([report]), encoding="utf-8")
    return 0


def cmd_bench(args) -> int:
    corpus = _corpus(args)
    engine = build_engine(ServeConfig(K=args.k, stage=resolve_stage(args.method), data_dir=str(_root(args)),
                                      seed=args.seed))
    texts = [q.text for q in corpus.queries]
    if not texts:
        raise CliError("no queries to benchmark with")
    report = bench_latency(lambda t: engine.select(t, args.k), texts, args.reps, args.warmup, pin=not args.no_pin)
    _emit({"method": args.method, "K": args.k, "tools": len(corpus.tools), **report.to_dict()}, args.out)
    return 0


def _serve_config(args) -> ServeConfig:
    if args.config:
        config = ServeConfig.from_json(args.config)
        if config.data_dir is None and args.data_dir:
            config = replace(config, data_dir=args.data_dir)
        return config
    return ServeConfig(K=args.k, stage=args.stage, alpha_pool=args.alpha_pool, bind=args.bind,
                       data_dir=args.data_dir, seed=args.seed)


def cmd_serve(args) -> int:
    http_serve(_serve_config(args))
    return 0


def cmd_select(args) -> int:
    engine = build_engine(_serve_config(args))
    sel = engine.select(args.query, args.k)
    print(json.dumps({"tools": [{"id": t, "score": s} for t, s in sel.candidates],
                      "generation": sel.generation}))
    return 0


# -- parser ------------------------------------------------------------------

def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--data-dir", help="artifact root (default: $OATS_DATA_DIR or .)")
    common.add_argument("--seed", type=int, default=0)
    common.add_argument("-v", "--verbose", action="store_true")

    split = argparse.ArgumentParser(add_help=False)
    split.add_argument("--train-frac", type=float, default=0.7)
    split.add_argument("--val-split", type=float, default=0.15, help="validation share of the training split")

    refine = argparse.ArgumentParser(add_help=False)
    refine.add_argument("--alpha", type=float, default=0.3)
    refine.add_argument("--beta", type=float, default=0.1)
    refine.add_argument("--iters", type=int, default=3)
    refine.add_argument("--momentum", type=float, default=0.5)
    refine.add_argument("--gate-k", type=int, default=5)

    p = argparse.ArgumentParser(prog="toolsel", description="Select tools for a query; refine embeddings from usage outcomes.")
    sub = p.add_subparsers(dest="command", metavar="command")
    sub.required = True

    s = sub.add_parser("ingest", parents=[common], help="validate corpus files")
    s.set_defaults(func=cmd_ingest)

    s = sub.add_parser("embed", parents=[common], help="embed tool descriptions into base.emb")
    s.add_argument("--embedder", choices=("synthetic", "precomputed"), default="synthetic")
    s.add_argument("--dim", type=int, default=384)
    s.add_argument("--source", help="precomputed *.emb with a .keys.json sidecar")
    s.add_argument("--clusters", help="JSON object keyword -> cluster label (synthetic cluster mode)")
    s.set_defaults(func=cmd_embed)

    s = sub.add_parser("refine", parents=[common, split, refine], help="refine the table and gate it")
    s.add_argument("--label-k", type=int, default=5, help="retrieval depth used to label outcomes")
    s.add_argument("--labels", choices=("auto", "ground-truth", "outcomes"), default="auto")
    s.add_argument("--unlabeled-negative", action="store_true",
                   help="in log replay, treat retrieved tools without a logged outcome as failures")
    s.add_argument("--out", help="gate report path (default: <data-dir>/refine_gate.json)")
    s.set_defaults(func=cmd_refine)

    s = sub.add_parser("train-rerank", parents=[common, split], help="train the re-ranking MLP")
    s.add_argument("--lr", type=float, default=1e-3)
    s.add_argument("--epochs", type=int, default=50)
    s.add_argument("--batch-size", type=int, default=64)
    s.add_argument("--alpha-pool", type=int, default=5)
    s.add_argument("--k", type=int, default=5)
    s.add_argument("--clusters-k", type=int, help="number of query clusters (default: ceil(n/50), max 32)")
    s.set_defaults(func=cmd_train_rerank)

    s = sub.add_parser("train-adapter", parents=[common, split], help="train the contrastive adapter")
    s.add_argument("--lr", type=float, default=1e-5)
    s.add_argument("--tau", type=float, default=0.07)
    s.add_argument("--epochs", type=int, default=5)
    s.add_argument("--batch-size", type=int, default=32)
    s.add_argument("--alpha-pool", type=int, default=5)
    s.add_argument("--k", type=int, default=5)
    s.add_argument("--gate-k", type=int, default=5)
    s.add_argument("--exclude-positive", action="store_true",
                   help="leave the positive out of the InfoNCE denominator")
    s.add_argument("--out")
    s.set_defaults(func=cmd_train_adapter)

    methods = ", ".join(STAGES + tuple(METHOD_ALIASES))
    s = sub.add_parser("eval", parents=[common, split, refine], help="metric report on the test split")
    s.add_argument("--method", type=_method, default="se", help=methods)
    s.add_argument("--k", dest="ks", type=_ks, default=(1, 3, 5), help="comma-separated cutoffs")
    s.add_argument("--use-artifacts", action="store_true", help="serve saved artifacts instead of fitting")
    s.add_argument("--per-query", action="store_true")
    s.add_argument("--out")
    s.add_argument("--csv")
    s.set_defaults(func=cmd_eval, k=5)

    s = sub.add_parser("bench", parents=[common], help="latency percentiles of a served stage")
    s.add_argument("--method", type=_method, default="se", help=methods)
    s.add_argument("--reps", type=int, default=1000)
    s.add_argument("--warmup", type=int, default=20)
    s.add_argument("--k", type=int, default=5)
    s.add_argument("--no-pin", action="store_true")
    s.add_argument("--out")
    s.set_defaults(func=cmd_bench)

    serve_opts = argparse.ArgumentParser(add_help=False)
    serve_opts.add_argument("--config", help="JSON file mirroring ServeConfig")
    serve_opts.add_argument("--stage", default="se", choices=("se", "s1", "s2", "s3", "bm25", "lexical"))
    serve_opts.add_argument("--k", type=int, default=5)
    serve_opts.add_argument("--alpha-pool", type=int, default=5)
    serve_opts.add_argument("--bind", default="127.0.0.1:8080")

    s = sub.add_parser("serve", parents=[common, serve_opts], help="run the HTTP select endpoint")
    s.set_defaults(func=cmd_serve)

    s = sub.add_parser("select", parents=[common, serve_opts], help="one-shot selection")
    s.add_argument("query")
    s.set_defaults(func=cmd_select)
    return p


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)  # exits 2 on usage errors
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        return args.func(args)
    except (CliError, ValueError, KeyError, OSError, RuntimeError) as exc:
        print(f"toolsel {args.command}: error: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
