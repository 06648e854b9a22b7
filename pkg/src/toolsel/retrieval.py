"""Serving-path scorers: dense top-K, BM25, lexical combination, random."""
from __future__ import annotations

import math
import re
from collections import Counter, defaultdict
from dataclasses import dataclass, field
from typing import Iterable, Sequence

import numpy as np

from .store import EmbeddingTable, ToolRecord

BM25_K1 = 1.2
BM25_B = 0.75

_TOKEN_RE = re.compile(r"[^\W_]+")


def tokenize(text: str) -> list[str]:
    """Lowercase and split on anything that is not a letter or digit."""
    return _TOKEN_RE.findall(text.lower())


@dataclass(frozen=True)
class CandidateList:
    """Ranked ``(tool_id, score)`` pairs with non-increasing scores.

    Scorers in this module break ties by ascending tool id; re-ranking keeps
    the input order among equal model scores instead.
    """

    entries: tuple[tuple[str, float], ...]
    query_id: str | None = None

    def __post_init__(self):
        entries = tuple((str(t), float(s)) for t, s in self.entries)
        ids = [t for t, _ in entries]
        if len(set(ids)) != len(ids):
            raise ValueError("duplicate tool id in candidate list")
        for (_, a), (_, b) in zip(entries, entries[1:]):
            if b > a:
                raise ValueError("candidate scores must be non-increasing")
        object.__setattr__(self, "entries", entries)

    @classmethod
    def ranked(cls, scored: Iterable[tuple[str, float]], k: int | None = None, query_id=None):
        """Sort by score descending, ties by ascending id, then truncate."""
        ordered = sorted(scored, key=lambda e: (-e[1], e[0]))
        return cls(tuple(ordered[:k] if k is not None else ordered), query_id)

    @property
    def ids(self) -> list[str]:
        return [t for t, _ in self.entries]

    @property
    def scores(self) -> list[float]:
        return [s for _, s in self.entries]

    def __len__(self) -> int:
        return len(self.entries)

    def __iter__(self):
        return iter(self.entries)

    def __getitem__(self, i):
        return self.entries[i]

    def top(self, k: int) -> "CandidateList":
        return CandidateList(self.entries[:k], self.query_id)


def _check_k(k: int) -> None:
    if k < 1:
        raise ValueError(f"K must be >= 1, got {k}")


def top_k_indices(scores: np.ndarray, id_rank: np.ndarray, k: int) -> np.ndarray:
    """Indices of the ``k`` best scores, ties to ascending id."""
    n = scores.shape[0]
    if k < n:
        # keep everything tied with the k-th score so the id tie-break is exact
        kth = np.partition(-scores, k - 1)[k - 1]
        cand = np.flatnonzero(-scores <= kth)
    else:
        cand = np.arange(n)
    order = np.lexsort((id_rank[cand], -scores[cand]))
    return cand[order[:k]]


def dense_top_k(query_vec: np.ndarray, table: EmbeddingTable, k: int, query_id: str | None = None) -> CandidateList:
    """Exhaustive cosine scoring (dot product of unit vectors)."""
    _check_k(k)
    q = np.asarray(query_vec, dtype=np.float64)
    if q.shape != (table.dim,):
        raise ValueError(f"query dim {q.shape} does not match table dim {table.dim}")
    if len(table) == 0:
        return CandidateList((), query_id)
    scores = table.wide @ q
    idx = top_k_indices(scores, table.id_rank, k)
    ids = table.ids
    return CandidateList(tuple((ids[i], float(scores[i])) for i in idx), query_id)


def dense_top_k_batch(query_mat: np.ndarray, table: EmbeddingTable, k: int) -> list[list[int]]:
    """Row indices of each query's top-K, same ordering rule as :func:`dense_top_k`."""
    _check_k(k)
    scores = np.asarray(query_mat, dtype=np.float64) @ table.wide.T
    return [top_k_indices(row, table.id_rank, k).tolist() for row in scores]


# --------------------------------------------------------------------------
# BM25
# --------------------------------------------------------------------------

@dataclass
class BM25Index:
    postings: dict[str, list[tuple[int, int]]]
    doc_lengths: list[int]
    doc_ids: list[str]
    k1: float = BM25_K1
    b: float = BM25_B
    avgdl: float = field(init=False)
    N: int = field(init=False)

    def __post_init__(self):
        self.N = len(self.doc_lengths)
        self.avgdl = sum(self.doc_lengths) / self.N if self.N else 0.0
        self._df = {t: len(p) for t, p in self.postings.items()}
        self._id_rank = np.argsort(np.argsort(np.array(self.doc_ids, dtype=object), kind="stable"))

    def idf(self, term: str) -> float:
        n_t = self._df.get(term, 0)
        return math.log(1.0 + (self.N - n_t + 0.5) / (n_t + 0.5))

    def score_all(self, query_text: str) -> np.ndarray:
        scores = np.zeros(self.N)
        if self.avgdl == 0:
            return scores
        lengths = np.asarray(self.doc_lengths, dtype=np.float64)
        for term in tokenize(query_text):  # repeated query tokens each contribute
            plist = self.postings.get(term)
            if not plist:
                continue
            idf = self.idf(term)
            docs = np.fromiter((d for d, _ in plist), dtype=np.int64, count=len(plist))
            tf = np.fromiter((f for _, f in plist), dtype=np.float64, count=len(plist))
            norm = self.k1 * (1.0 - self.b + self.b * lengths[docs] / self.avgdl)
            scores[docs] += idf * tf * (self.k1 + 1.0) / (tf + norm)
        return scores


def bm25_build(tools: Sequence[ToolRecord], k1: float = BM25_K1, b: float = BM25_B) -> BM25Index:
    """Index tool descriptions."""
    if not tools:
        raise ValueError("cannot build BM25 over an empty corpus")
    postings: dict[str, list[tuple[int, int]]] = defaultdict(list)
    lengths = []
    for i, tool in enumerate(tools):
        toks = tokenize(tool.description)
        lengths.append(len(toks))
        for term, tf in Counter(toks).items():
            postings[term].append((i, tf))
    return BM25Index(dict(postings), lengths, [t.id for t in tools], k1, b)


def bm25_top_k(index: BM25Index, query_text: str, k: int, query_id: str | None = None) -> CandidateList:
    _check_k(k)
    scores = index.score_all(query_text)
    idx = top_k_indices(scores, index._id_rank, k)
    return CandidateList(tuple((index.doc_ids[i], float(scores[i])) for i in idx), query_id)


# --------------------------------------------------------------------------
# Dense + lexical weighted combination
# --------------------------------------------------------------------------

@dataclass(frozen=True)
class LexicalConfig:
    w_desc: float = 0.6
    w_name: float = 0.2
    w_tags: float = 0.1
    w_category: float = 0.1

    def __post_init__(self):
        ws = (self.w_desc, self.w_name, self.w_tags, self.w_category)
        if any(w < 0 for w in ws):
            raise ValueError("lexical weights must be non-negative")
        if abs(sum(ws) - 1.0) > 1e-9:
            raise ValueError(f"lexical weights must sum to 1, got {sum(ws)}")


def token_overlap(query_tokens: set[str], field_tokens: set[str]) -> float:
    if not query_tokens:
        return 0.0
    return min(1.0, len(query_tokens & field_tokens) / len(query_tokens))


def lexical_combo_score(
    query_text: str,
    query_vec: np.ndarray,
    tool: ToolRecord,
    tool_vec: np.ndarray,
    config: LexicalConfig = LexicalConfig(),
) -> float:
    cos = float(np.dot(np.asarray(query_vec, dtype=np.float64), np.asarray(tool_vec, dtype=np.float64)))
    q = set(tokenize(query_text))
    score = config.w_desc * cos
    if config.w_name:
        score += config.w_name * token_overlap(q, set(tokenize(tool.name)))
    if config.w_tags:
        score += config.w_tags * token_overlap(q, {t for tag in tool.tags for t in tokenize(tag)})
    if config.w_category:
        score += config.w_category * token_overlap(q, set(tokenize(tool.category)))
    return score


class LexicalScorer:
    """Precomputes per-tool token sets so the combination runs vectorized."""

    def __init__(self, tools: Sequence[ToolRecord], config: LexicalConfig = LexicalConfig()):
        self.config = config
        self.tools = list(tools)
        self._fields = [
            (set(tokenize(t.name)), {x for tag in t.tags for x in tokenize(tag)}, set(tokenize(t.category)))
            for t in self.tools
        ]

    def top_k(self, query_text: str, query_vec: np.ndarray, table: EmbeddingTable, k: int,
              query_id: str | None = None) -> CandidateList:
        _check_k(k)
        c = self.config
        cos = table.wide @ np.asarray(query_vec, dtype=np.float64)
        q = set(tokenize(query_text))
        scored = []
        for tool, (name, tags, cat) in zip(self.tools, self._fields):
            s = c.w_desc * cos[table.index(tool.id)]
            if q:
                s += (c.w_name * token_overlap(q, name) + c.w_tags * token_overlap(q, tags)
                      + c.w_category * token_overlap(q, cat))
            scored.append((tool.id, float(s)))
        return CandidateList.ranked(scored, k, query_id)


def random_select(tools: Sequence[ToolRecord] | Sequence[str], k: int, seed: int | np.random.Generator,
                  query_id: str | None = None) -> CandidateList:
    """Uniform sample without replacement, kept in sampled order, scores 0."""
    if not tools:
        raise ValueError("cannot sample from an empty tool set")
    _check_k(k)
    ids = [t if isinstance(t, str) else t.id for t in tools]
    rng = seed if isinstance(seed, np.random.Generator) else np.random.default_rng(seed)
    picks = rng.choice(len(ids), size=min(k, len(ids)), replace=False)
    return CandidateList(tuple((ids[i], 0.0) for i in picks), query_id)
