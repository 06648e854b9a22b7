"""Outcome-guided embedding refinement with momentum and a validation gate.

Each iteration retrieves the top-K tools for every training query against the
current table, labels each retrieved tool as a success or failure, and then
moves every tool with at least one success toward the centroid of its success
queries and away from the centroid of its failure queries::

    e_hat = normalize((1 - alpha) * e + alpha * mean(Q+) - beta * mean(Q-))

From the second iteration on the published row is
``normalize(mu * e_prev + (1 - mu) * e_hat)``. The finished table is served
only if it strictly improves Recall@K on held-out validation queries.
"""
from __future__ import annotations

import logging
import warnings
from collections import defaultdict
from dataclasses import dataclass, field
from typing import Mapping, Sequence

import numpy as np

from .retrieval import dense_top_k_batch
from .store import EmbeddingTable, OutcomeTriple, QueryRecord

log = logging.getLogger(__name__)

DEGENERATE_NORM = 1e-8


class DegenerateUpdateError(ArithmeticError):
    """The update vector collapsed to (near) zero."""


@dataclass(frozen=True)
class RefineConfig:
    alpha: float = 0.3
    beta: float = 0.1
    iterations: int = 3
    momentum: float = 0.5
    K: int = 5
    gate_K: int = 5

    def __post_init__(self):
        if not 0.0 <= self.alpha <= 1.0:
            raise ValueError("alpha must lie in [0, 1]")
        if self.beta < 0.0:
            raise ValueError("beta must be non-negative")
        if not 0.0 <= self.momentum <= 1.0:
            raise ValueError("momentum must lie in [0, 1]")
        if self.iterations < 1 or self.K < 1 or self.gate_K < 1:
            raise ValueError("iterations, K and gate_K must be positive")
        if self.beta >= self.alpha and self.beta > 0:
            warnings.warn("beta >= alpha: repulsion outweighs attraction", stacklevel=2)


@dataclass
class OutcomePartition:
    """Per tool: query ids retrieved with a positive / negative outcome."""

    positives: dict[str, list[str]] = field(default_factory=dict)
    negatives: dict[str, list[str]] = field(default_factory=dict)

    @property
    def tools(self) -> set[str]:
        return set(self.positives) | set(self.negatives)

    def q_plus(self, tool_id: str) -> list[str]:
        return self.positives.get(tool_id, [])

    def q_minus(self, tool_id: str) -> list[str]:
        return self.negatives.get(tool_id, [])


def aggregate_outcomes(outcomes: Sequence[OutcomeTriple]) -> dict[tuple[str, str], int]:
    """Majority label per (query, tool); exact ties are dropped."""
    votes: dict[tuple[str, str], list[int]] = defaultdict(lambda: [0, 0])
    for o in outcomes:
        votes[(o.query_id, o.tool_id)][o.outcome] += 1
    return {key: int(pos > neg) for key, (neg, pos) in votes.items() if pos != neg}


@dataclass(frozen=True)
class OutcomeLabels:
    """Log-replay label source: pairs absent from the log are skipped unless
    ``unlabeled_as_negative`` is set, in which case they count as failures."""

    labels: Mapping[tuple[str, str], int]
    unlabeled_as_negative: bool = False

    @classmethod
    def from_triples(cls, outcomes: Sequence[OutcomeTriple], unlabeled_as_negative: bool = False):
        return cls(aggregate_outcomes(outcomes), unlabeled_as_negative)

    def label(self, query_id: str, tool_id: str) -> int | None:
        o = self.labels.get((query_id, tool_id))
        if o is None and self.unlabeled_as_negative:
            return 0
        return o


def _as_matrix(query_vecs, queries: Sequence[QueryRecord]) -> np.ndarray:
    if isinstance(query_vecs, Mapping):
        return np.stack([np.asarray(query_vecs[q.id], dtype=np.float64) for q in queries])
    mat = np.asarray(query_vecs, dtype=np.float64)
    if mat.shape[0] != len(queries):
        raise ValueError("one embedding per training query is required")
    return mat


def partition_outcomes(
    table: EmbeddingTable,
    train_queries: Sequence[QueryRecord],
    query_vecs,
    K: int,
    labels: OutcomeLabels | None = None,
) -> OutcomePartition:
    """Retrieve top-K per query under ``table`` and split by outcome.

    Without ``labels`` the outcome is ground-truth membership.
    """
    if not train_queries:
        raise ValueError("empty training set")
    mat = _as_matrix(query_vecs, train_queries)
    part = OutcomePartition()
    for q, idx in zip(train_queries, dense_top_k_batch(mat, table, K)):
        for i in idx:
            tid = table.ids[i]
            o = (1 if tid in q.relevant else 0) if labels is None else labels.label(q.id, tid)
            if o is None:
                continue
            (part.positives if o else part.negatives).setdefault(tid, []).append(q.id)
    return part


def refine_step(e: np.ndarray, q_plus: np.ndarray, q_minus: np.ndarray | None, alpha: float, beta: float) -> np.ndarray:
    """One centroid-interpolation update of a unit vector."""
    q_plus = np.atleast_2d(np.asarray(q_plus, dtype=np.float64))
    if q_plus.shape[0] < 1 or q_plus.size == 0:
        raise ValueError("refine_step needs at least one positive query")
    e = np.asarray(e, dtype=np.float64)
    has_neg = q_minus is not None and np.asarray(q_minus).size > 0
    if alpha == 0.0 and (beta == 0.0 or not has_neg):
        # (1 - 0) * e with a unit input; renormalizing would only add round-off
        return e.copy()
    upd = (1.0 - alpha) * e + alpha * q_plus.mean(axis=0)
    if has_neg:
        upd = upd - beta * np.atleast_2d(np.asarray(q_minus, dtype=np.float64)).mean(axis=0)
    n = np.linalg.norm(upd)
    if not np.isfinite(n) or n < DEGENERATE_NORM:
        raise DegenerateUpdateError(f"update vector norm {n:.3g} is degenerate")
    return upd / n


def momentum_blend(prev: np.ndarray, e_hat: np.ndarray, mu: float) -> np.ndarray:
    if mu == 1.0:
        return prev.copy()
    v = mu * prev + (1.0 - mu) * e_hat
    n = np.linalg.norm(v)
    if n < DEGENERATE_NORM:
        raise DegenerateUpdateError("momentum blend collapsed to zero")
    return v / n


@dataclass(frozen=True)
class _WideSnapshot:
    """float64 view of an in-progress table, scored without f32 rounding."""

    ids: tuple[str, ...]
    wide: np.ndarray
    id_rank: np.ndarray


def refine_iterate(
    table: EmbeddingTable,
    train_queries: Sequence[QueryRecord],
    query_vecs,
    config: RefineConfig = RefineConfig(),
    labels: OutcomeLabels | None = None,
    history: list | None = None,
) -> EmbeddingTable:
    """Run all iterations and return the (ungated) candidate table.

    The candidate keeps the input generation; publishing goes through the gate
    and :func:`toolsel.store.swap_generation`. Pass ``history`` to collect each
    iteration's :class:`OutcomePartition`.
    """
    qmat = _as_matrix(query_vecs, train_queries)
    qrow = {q.id: i for i, q in enumerate(train_queries)}
    current = table.wide.copy()
    for n in range(1, config.iterations + 1):
        snapshot = table if n == 1 else _WideSnapshot(table.ids, current, table.id_rank)
        part = partition_outcomes(snapshot, train_queries, qmat, config.K, labels)
        if history is not None:
            history.append(part)
        nxt = current.copy()
        for tid, pos in part.positives.items():
            i = table.index(tid)
            neg = part.q_minus(tid)
            try:
                e_hat = refine_step(
                    current[i],
                    qmat[[qrow[q] for q in pos]],
                    qmat[[qrow[q] for q in neg]] if neg else None,
                    config.alpha,
                    config.beta,
                )
                nxt[i] = e_hat if n == 1 else momentum_blend(current[i], e_hat, config.momentum)
            except DegenerateUpdateError as exc:
                log.warning("tool %s keeps its previous embedding: %s", tid, exc)
        current = nxt
    return EmbeddingTable(table.ids, current, table.generation)


def recall_at_k_table(table: EmbeddingTable, queries: Sequence[QueryRecord], query_vecs, K: int) -> float:
    """Mean Recall@K of dense retrieval over queries with a non-empty relevant set."""
    keep = [i for i, q in enumerate(queries) if q.relevant]
    if not keep:
        raise ValueError("no validation queries with relevant tools")
    mat = _as_matrix(query_vecs, queries)[keep]
    total = 0.0
    for j, idx in zip(keep, dense_top_k_batch(mat, table, K)):
        rel = queries[j].relevant
        total += sum(table.ids[i] in rel for i in idx) / len(rel)
    return total / len(keep)


@dataclass(frozen=True)
class GateReport:
    accepted: bool
    baseline_recall: float
    candidate_recall: float
    K: int
    n_queries: int
    table: EmbeddingTable

    def to_dict(self) -> dict:
        return {
            "decision": "accept" if self.accepted else "reject",
            "K": self.K,
            "n_queries": self.n_queries,
            "baseline_recall": self.baseline_recall,
            "candidate_recall": self.candidate_recall,
        }


def validation_gate(
    baseline: EmbeddingTable,
    candidate: EmbeddingTable,
    val_queries: Sequence[QueryRecord],
    val_vecs,
    gate_K: int,
    candidate_vecs=None,
) -> GateReport:
    """Accept iff Recall@gate_K strictly improves on the validation queries.

    ``candidate_vecs`` scores the candidate with different query vectors (an
    adapted query leg); by default both tables see ``val_vecs``. On acceptance
    the report's table is marked approved for swapping.
    """
    if not val_queries:
        raise ValueError("empty validation set")
    base = recall_at_k_table(baseline, val_queries, val_vecs, gate_K)
    cand = recall_at_k_table(candidate, val_queries,
                             val_vecs if candidate_vecs is None else candidate_vecs, gate_K)
    accepted = cand > base
    table = candidate.with_generation(candidate.generation, approved=True) if accepted else candidate
    n = sum(1 for q in val_queries if q.relevant)
    return GateReport(accepted, base, cand, gate_K, n, table)
