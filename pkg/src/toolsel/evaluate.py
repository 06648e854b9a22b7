"""Evaluation protocol: seeded splits, method-level metric reports, latency."""
from __future__ import annotations

import csv
import io
import json
import logging
import math
import os
import platform
import time
from dataclasses import dataclass, field
from typing import Callable, Sequence

import numpy as np

from .metrics import ndcg_at_k, nearest_rank, precision_at_k, recall_at_k, reciprocal_rank
from .pipeline import Artifacts, Engine, FitConfig, fit_artifacts, resolve_stage
from .store import Corpus, EmbeddingTable, QueryRecord

log = logging.getLogger(__name__)

DEFAULT_KS = (1, 3, 5)
_EPS = 1e-9


@dataclass(frozen=True)
class SplitSpec:
    seed: int = 0
    train_frac: float = 0.7
    rerank_val_frac: float = 0.15

    def __post_init__(self):
        if not 0.0 < self.train_frac < 1.0:
            raise ValueError("train_frac must lie strictly between 0 and 1")
        if not 0.0 <= self.rerank_val_frac < 1.0:
            raise ValueError("rerank_val_frac must lie in [0, 1)")


def _cut(n: int, frac: float) -> int:
    return int(math.floor(frac * n + _EPS))


def split_dataset(queries: Sequence[QueryRecord], spec: SplitSpec = SplitSpec()):
    """Seeded shuffle, then the first ``floor(train_frac * n)`` queries train."""
    if len(queries) < 10:
        raise ValueError(f"need at least 10 queries to split, got {len(queries)}")
    perm = np.random.default_rng(spec.seed).permutation(len(queries))
    n_train = _cut(len(queries), spec.train_frac)
    return [queries[i] for i in perm[:n_train]], [queries[i] for i in perm[n_train:]]


def subsplit(train: Sequence[QueryRecord], val_frac: float = 0.15):
    """Split an (already shuffled) training list into fit / validation parts."""
    if not 0.0 <= val_frac < 1.0:
        raise ValueError("val_frac must lie in [0, 1)")
    n_val = _cut(len(train), val_frac)
    if val_frac > 0 and n_val == 0 and len(train) > 1:
        n_val = 1
    n_fit = len(train) - n_val
    return list(train[:n_fit]), list(train[n_fit:])


@dataclass
class MetricsReport:
    method: str
    ks: tuple[int, ...]
    recall: dict[int, float]
    precision: dict[int, float]
    ndcg: dict[int, float]
    mrr: float
    n_queries: int
    n_excluded: int = 0
    per_query: list[dict] = field(default_factory=list)
    seed: int | None = None
    latency: "LatencyReport | None" = None

    def metric_fields(self) -> dict[str, float]:
        out = {}
        for name, table in (("recall", self.recall), ("precision", self.precision), ("ndcg", self.ndcg)):
            for k in self.ks:
                out[f"{name}@{k}"] = table[k]
        return out

    def to_dict(self, per_query: bool = False) -> dict:
        d = {
            "method": self.method,
            "split_seed": self.seed,
            "n_queries": self.n_queries,
            "n_excluded": self.n_excluded,
            "metrics": self.metric_fields(),
            "mrr": self.mrr,
        }
        if self.latency is not None:
            d["latency"] = self.latency.to_dict()
        if per_query:
            d["per_query"] = self.per_query
        return d


def evaluate_rankings(
    method: str,
    rankings: Sequence[Sequence[str]],
    queries: Sequence[QueryRecord],
    ks: Sequence[int] = DEFAULT_KS,
) -> MetricsReport:
    """Average metrics over queries; queries with no relevant tool are skipped."""
    ks = tuple(sorted(ks))
    for k in ks:
        if k < 1:
            raise ValueError("K must be positive")
    rows, excluded = [], 0
    for q, ranked in zip(queries, rankings):
        if not q.relevant:
            excluded += 1
            continue
        ranked = list(ranked)
        row = {"query_id": q.id, "ranked": ranked[:max(ks)], "rr": reciprocal_rank(ranked, q.relevant)}
        for k in ks:
            row[f"recall@{k}"] = recall_at_k(ranked, q.relevant, k)
            row[f"precision@{k}"] = precision_at_k(ranked, q.relevant, k)
            row[f"ndcg@{k}"] = ndcg_at_k(ranked, q.relevant, k)
        rows.append(row)
    if excluded:
        log.info("%d queries without relevant tools excluded from %s averages", excluded, method)
    n = len(rows)

    def avg(key: str) -> float:
        return sum(r[key] for r in rows) / n if n else 0.0

    return MetricsReport(
        method=method,
        ks=ks,
        recall={k: avg(f"recall@{k}") for k in ks},
        precision={k: avg(f"precision@{k}") for k in ks},
        ndcg={k: avg(f"ndcg@{k}") for k in ks},
        mrr=avg("rr"),
        n_queries=n,
        n_excluded=excluded,
        per_query=rows,
    )


def evaluate_engine(engine: Engine, queries: Sequence[QueryRecord], ks: Sequence[int] = DEFAULT_KS,
                    method: str | None = None) -> MetricsReport:
    depth = max(ks)
    rankings = [engine.select(q.text, depth, q.id).ids for q in queries]
    return evaluate_rankings(method or engine.stage, rankings, queries, ks)


def evaluate_method(
    method: str,
    corpus: Corpus,
    split: SplitSpec,
    ks: Sequence[int] = DEFAULT_KS,
    embedder=None,
    base_table: EmbeddingTable | None = None,
    artifacts: Artifacts | None = None,
    config: FitConfig = FitConfig(),
) -> MetricsReport:
    """Fit ``method`` on the training split (unless ``artifacts`` are given)
    and score it on the test split."""
    name, method = method, resolve_stage(method)
    train, test = split_dataset(corpus.queries, split)
    if artifacts is None:
        if base_table is None and embedder is not None:
            from .embed import embed_corpus

            base_table = embed_corpus(embedder, corpus.tools)
        if base_table is None and method not in ("bm25", "random"):
            raise ValueError(f"method {method!r} needs an embedder")
        artifacts = fit_artifacts(method, corpus.tools, train, embedder, base_table, config,
                                  split.rerank_val_frac) if base_table is not None else None
    if artifacts is None:
        engine = Engine(corpus.tools, stage=method, K=config.K, seed=split.seed)
    else:
        engine = artifacts.engine(method, corpus.tools, embedder, config.K, seed=split.seed)
    report = evaluate_engine(engine, test, ks, name)
    report.seed = split.seed
    return report


# --------------------------------------------------------------------------
# Latency
# --------------------------------------------------------------------------

@dataclass(frozen=True)
class LatencyReport:
    p50_ms: float
    p99_ms: float
    n_samples: int
    mean_ms: float
    environment: str

    def to_dict(self) -> dict:
        return {"p50_ms": self.p50_ms, "p99_ms": self.p99_ms, "mean_ms": self.mean_ms,
                "samples": self.n_samples, "environment": self.environment}


def pin_single_core() -> str:
    """Restrict this process to one CPU where the platform allows it."""
    if hasattr(os, "sched_setaffinity"):
        try:
            cpus = sorted(os.sched_getaffinity(0))
            os.sched_setaffinity(0, {cpus[0]})
            return f"pinned to cpu {cpus[0]}"
        except OSError as exc:
            return f"pinning failed ({exc})"
    return "pinning unsupported"


def bench_latency(
    fn: Callable[[str], object],
    query_texts: Sequence[str],
    repetitions: int = 1000,
    warmup: int = 20,
    pin: bool = True,
) -> LatencyReport:
    """Per-request wall-clock latency of ``fn`` cycled over ``query_texts``."""
    if repetitions < 100:
        raise ValueError("at least 100 repetitions are required")
    if not query_texts:
        raise ValueError("no queries to benchmark")
    note = pin_single_core() if pin else "unpinned"
    for i in range(warmup):
        fn(query_texts[i % len(query_texts)])
    samples = []
    for i in range(repetitions):
        text = query_texts[i % len(query_texts)]
        t0 = time.perf_counter_ns()
        fn(text)
        samples.append((time.perf_counter_ns() - t0) / 1e6)
    env = f"{platform.processor() or platform.machine()}, python {platform.python_version()}, {note}"
    return LatencyReport(nearest_rank(samples, 50), nearest_rank(samples, 99), len(samples),
                         sum(samples) / len(samples), env)


def reports_to_csv(reports: Sequence[MetricsReport]) -> str:
    """Table layout: method, R@1, R@3, R@5, NDCG@5 (plus MRR)."""
    buf = io.StringIO()
    w = csv.writer(buf)
    w.writerow(["method", "R@1", "R@3", "R@5", "NDCG@5", "MRR"])
    for r in reports:
        w.writerow([r.method] + [f"{r.recall.get(k, float('nan')):.3f}" for k in (1, 3, 5)]
                   + [f"{r.ndcg.get(5, float('nan')):.3f}", f"{r.mrr:.3f}"])
    return buf.getvalue()


def write_report(path, payload: dict) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        json.dump(payload, fh, indent=2)
        fh.write("\n")
