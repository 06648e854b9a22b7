"""Stage composition for serving and the offline fitting that produces artifacts.

Stages:
    se       embed the query, dense top-K over the base table
    s1       the same path over the refined table
    s2       dense pool of ``alpha_pool * K`` from the live table, then MLP re-rank
    s3       adapter on the query vector over the adapter-recomputed table,
             followed by re-ranking when a re-ranker is configured
    bm25     BM25 over descriptions
    lexical  dense cosine blended with name/tag/category token overlap
    random   uniform random tools (evaluation lower bound)
"""
from __future__ import annotations

import hashlib
import logging
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

from .adapter import (AdapterModel, AdapterTrainConfig, adapter_train, mine_triplets,
                      recompute_tool_embeddings)
from .refine import GateReport, RefineConfig, OutcomeLabels, refine_iterate, validation_gate
from .rerank import (ClusterStats, RerankMLP, RerankTrainConfig, Reranker, build_clusters,
                     default_cluster_count, extract_features, mlp_train)
from .retrieval import (BM25Index, CandidateList, LexicalConfig, LexicalScorer, bm25_build,
                        bm25_top_k, dense_top_k, random_select)
from .store import EmbeddingTable, QueryRecord, TableStore, ToolRecord

log = logging.getLogger(__name__)

STAGES = ("se", "s1", "s2", "s3", "bm25", "lexical", "random")
DENSE_STAGES = ("se", "s1", "s2", "s3", "lexical")
METHOD_ALIASES = {"se_lexical": "lexical", "oats_s1": "s1", "oats_s2": "s2", "oats_s3": "s3"}


def resolve_stage(name: str) -> str:
    """Map an evaluation method name (``oats_s1``, ``se_lexical``...) to a stage."""
    stage = METHOD_ALIASES.get(name, name)
    if stage not in STAGES:
        choices = ", ".join(STAGES + tuple(METHOD_ALIASES))
        raise ValueError(f"unknown method {name!r}; choose from {choices}")
    return stage


class MissingArtifactError(ValueError):
    """A stage was requested without the artifact it needs."""


@dataclass(frozen=True)
class Selection:
    candidates: CandidateList
    generation: int

    @property
    def ids(self) -> list[str]:
        return self.candidates.ids


class Engine:
    """Answers select requests against an immutable snapshot of the live table.

    ``table`` is the table the stage serves: base for ``se``/``lexical``,
    refined for ``s1``/``s2``, adapter-recomputed for ``s3``.
    """

    def __init__(
        self,
        tools: Sequence[ToolRecord],
        embedder=None,
        table: EmbeddingTable | None = None,
        stage: str = "se",
        K: int = 5,
        reranker: Reranker | None = None,
        adapter: AdapterModel | None = None,
        alpha_pool: int | None = None,
        lexical: LexicalConfig = LexicalConfig(),
        seed: int = 0,
    ):
        stage = resolve_stage(stage)
        if K < 1:
            raise ValueError("K must be positive")
        self.stage = stage
        self.K = K
        self.tools = list(tools)
        self.tool_map = {t.id: t for t in self.tools}
        self.max_freq = max((t.freq for t in self.tools), default=0)
        self.embedder = embedder
        self.reranker = reranker
        self.adapter = adapter
        self.alpha_pool = alpha_pool or (reranker.alpha_pool if reranker else 5)
        self.seed = seed
        if stage in DENSE_STAGES:
            if embedder is None or table is None:
                raise MissingArtifactError(f"stage {stage!r} needs an embedder and an embedding table")
        if stage == "s2" and reranker is None:
            raise MissingArtifactError("stage 's2' needs a trained re-ranker")
        if stage == "s3" and adapter is None:
            raise MissingArtifactError("stage 's3' needs a trained adapter")
        if table is not None and adapter is not None and adapter.dim != table.dim:
            raise MissingArtifactError("adapter dim does not match the table")
        self.store = TableStore(table) if table is not None else None
        self.bm25: BM25Index | None = bm25_build(self.tools) if stage == "bm25" else None
        self.lexical = LexicalScorer(self.tools, lexical) if stage == "lexical" else None

    @property
    def generation(self) -> int:
        return self.store.generation if self.store else 0

    def query_vector(self, query_text: str) -> np.ndarray:
        v = self.embedder.embed(query_text)
        if self.stage == "s3":
            v = self.adapter(v)
        return v

    def select(self, query_text: str, k: int | None = None, query_id: str | None = None) -> Selection:
        if not query_text or not query_text.strip():
            raise ValueError("empty query")
        k = self.K if k is None else k
        if k < 1:
            raise ValueError("k must be positive")
        table = self.store.current if self.store else None  # one snapshot per request
        gen = table.generation if table is not None else 0
        stage = self.stage
        if stage == "bm25":
            return Selection(bm25_top_k(self.bm25, query_text, k, query_id), gen)
        if stage == "random":
            digest = hashlib.sha256(f"{self.seed}\x00{query_text}".encode()).digest()
            return Selection(random_select(self.tools, k, int.from_bytes(digest[:8], "little"), query_id), gen)
        qv = self.query_vector(query_text)
        if stage == "lexical":
            return Selection(self.lexical.top_k(query_text, qv, table, k, query_id), gen)
        if stage in ("se", "s1") or self.reranker is None:
            return Selection(dense_top_k(qv, table, k, query_id), gen)
        pool = dense_top_k(qv, table, self.alpha_pool * k, query_id)
        return Selection(self.reranker.rerank(query_text, qv, pool, k, self.tool_map, self.max_freq), gen)

    def swap(self, candidate: EmbeddingTable) -> EmbeddingTable:
        return self.store.swap(candidate)


# --------------------------------------------------------------------------
# Offline fitting
# --------------------------------------------------------------------------

@dataclass
class Artifacts:
    base_table: EmbeddingTable
    refined_table: EmbeddingTable | None = None
    reranker: Reranker | None = None
    adapter: AdapterModel | None = None
    adapted_table: EmbeddingTable | None = None
    reports: dict = field(default_factory=dict)

    def serving_table(self, stage: str) -> EmbeddingTable:
        if stage in ("se", "lexical", "bm25", "random"):
            return self.base_table
        if stage == "s3":
            if self.adapted_table is None:
                raise MissingArtifactError("stage 's3' needs an adapter-recomputed table")
            return self.adapted_table
        return self.refined_table if self.refined_table is not None else self.base_table

    def engine(self, stage: str, tools, embedder, K: int = 5, **kw) -> Engine:
        if stage in ("s1",) and self.refined_table is None:
            raise MissingArtifactError("stage 's1' needs a refined table")
        reranker = self.reranker if stage in ("s2", "s3") else None
        return Engine(tools, embedder, self.serving_table(stage), stage, K,
                      reranker=reranker, adapter=self.adapter if stage == "s3" else None, **kw)


@dataclass(frozen=True)
class FitConfig:
    refine: RefineConfig = RefineConfig()
    rerank: RerankTrainConfig = RerankTrainConfig()
    adapter: AdapterTrainConfig = AdapterTrainConfig()
    K: int = 5
    n_clusters: int | None = None


def _vecs(embedder, queries: Sequence[QueryRecord]) -> dict[str, np.ndarray]:
    return {q.id: embedder.embed(q.text) for q in queries}


def fit_refinement(
    base: EmbeddingTable,
    fit_queries: Sequence[QueryRecord],
    val_queries: Sequence[QueryRecord],
    vecs: dict[str, np.ndarray],
    config: RefineConfig,
    labels: OutcomeLabels | None = None,
) -> GateReport:
    candidate = refine_iterate(base, fit_queries, vecs, config, labels)
    report = validation_gate(base, candidate, val_queries, vecs, config.gate_K)
    log.info("refinement gate: %s", report.to_dict())
    return report


def rerank_training_data(
    table: EmbeddingTable,
    queries: Sequence[QueryRecord],
    vecs: dict[str, np.ndarray],
    stats: ClusterStats,
    tools: dict[str, ToolRecord],
    pool_size: int,
) -> tuple[np.ndarray, np.ndarray]:
    max_freq = max((t.freq for t in tools.values()), default=0)
    xs, ys = [], []
    for q in queries:
        pool = dense_top_k(vecs[q.id], table, pool_size, q.id)
        xs.append(extract_features(q.text, vecs[q.id], pool, stats, tools, max_freq))
        ys.append([1.0 if t in q.relevant else 0.0 for t in pool.ids])
    if not xs:
        return np.zeros((0, 7)), np.zeros(0)
    return np.vstack(xs), np.concatenate(ys)


def fit_reranker(
    table: EmbeddingTable,
    fit_queries: Sequence[QueryRecord],
    val_queries: Sequence[QueryRecord],
    vecs: dict[str, np.ndarray],
    tools: Sequence[ToolRecord],
    config: RerankTrainConfig,
    K: int = 5,
    n_clusters: int | None = None,
) -> Reranker:
    tool_map = {t.id: t for t in tools}
    pool_size = config.alpha_pool * K
    fit_mat = np.stack([vecs[q.id] for q in fit_queries])
    k = n_clusters or default_cluster_count(len(fit_queries))
    pools = [dense_top_k(vecs[q.id], table, pool_size, q.id) for q in fit_queries]
    stats = build_clusters(fit_mat, min(k, len(fit_queries)), pools, [q.relevant for q in fit_queries], seed=config.seed)
    x, y = rerank_training_data(table, fit_queries, vecs, stats, tool_map, pool_size)
    xv, yv = rerank_training_data(table, val_queries, vecs, stats, tool_map, pool_size)
    model, train_log = mlp_train(RerankMLP(seed=config.seed, dropout=config.dropout), x, y, config,
                                 xv if len(yv) else None, yv if len(yv) else None)
    log.info("re-ranker trained: best epoch %d, val BCE %s", train_log.best_epoch,
             train_log.val_loss[train_log.best_epoch] if train_log.val_loss else "n/a")
    return Reranker(model, stats, config.alpha_pool)


def fit_adapter(
    table: EmbeddingTable,
    fit_queries: Sequence[QueryRecord],
    val_queries: Sequence[QueryRecord],
    vecs: dict[str, np.ndarray],
    config: AdapterTrainConfig,
    pool_size: int,
    gate_K: int = 5,
) -> tuple[AdapterModel, EmbeddingTable, GateReport]:
    triplets = mine_triplets(table, fit_queries, vecs, pool_size)
    model, _ = adapter_train(AdapterModel(table.dim, seed=config.seed), triplets, table, vecs,
                             config, val_queries, vecs)
    candidate = recompute_tool_embeddings(model, table)
    adapted_vecs = {q.id: model(vecs[q.id]) for q in val_queries}
    report = validation_gate(table, candidate, val_queries, vecs, gate_K, candidate_vecs=adapted_vecs)
    return model, candidate, report


def fit_artifacts(
    stage: str,
    tools: Sequence[ToolRecord],
    train_queries: Sequence[QueryRecord],
    embedder,
    base: EmbeddingTable,
    config: FitConfig = FitConfig(),
    val_frac: float = 0.15,
    labels: OutcomeLabels | None = None,
) -> Artifacts:
    """Train whatever ``stage`` needs from the training split.

    Stages are cumulative: s2 re-ranks over the refined table and s3 adds the
    adapter on top of both. Gated tables that are rejected fall back to the
    table they were meant to replace.
    """
    from .evaluate import subsplit

    art = Artifacts(base)
    if stage not in ("s1", "s2", "s3"):
        return art
    fit_q, val_q = subsplit(train_queries, val_frac)
    vecs = _vecs(embedder, train_queries)

    gate = fit_refinement(base, fit_q, val_q, vecs, config.refine, labels)
    art.reports["refine_gate"] = gate.to_dict()
    live = base
    if gate.accepted:
        live = TableStore(base).swap(gate.table)
    art.refined_table = live

    if stage in ("s2", "s3"):
        art.reranker = fit_reranker(live, fit_q, val_q, vecs, tools, config.rerank, config.K, config.n_clusters)
    if stage == "s3":
        model, candidate, report = fit_adapter(live, fit_q, val_q, vecs, config.adapter,
                                               config.rerank.alpha_pool * config.K, config.refine.gate_K)
        art.reports["adapter_gate"] = report.to_dict()
        if report.accepted:
            art.adapter = model
            art.adapted_table = TableStore(live).swap(report.table)
        else:
            # rollback: an identity adapter over the live table
            art.adapter = AdapterModel(live.dim, seed=config.adapter.seed)
            art.adapted_table = live
    return art
