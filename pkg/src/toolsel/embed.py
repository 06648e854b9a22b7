"""Embedding providers.

Two kinds exist. ``precomputed`` looks vectors up in a ``*.emb`` table using a
sidecar JSON map ``{sha256(text): row_id}`` (real-model embeddings arrive this
way). ``synthetic`` is a deterministic hashing embedder: every whitespace token
is hashed with the seed into a Gaussian direction, the directions are summed
and normalized. In cluster mode a text whose tokens hit a declared keyword is
blended with a fixed per-cluster anchor direction (weight 0.85), which gives
controllable topical structure for tests and synthetic scenarios.
"""
from __future__ import annotations

import hashlib
import json
from collections import Counter
from dataclasses import dataclass
from functools import lru_cache
from pathlib import Path
from typing import Mapping, Sequence

import numpy as np

from .retrieval import tokenize
from .store import EmbeddingTable, ToolRecord, read_embedding_table

CLUSTER_WEIGHT = 0.85


class EmbeddingLookupError(KeyError):
    """Text has no precomputed vector."""


@dataclass(frozen=True)
class EmbedderSpec:
    """Which provider to build.

    ``clusters`` is a tuple of ``(keyword, label)`` pairs used by the synthetic
    provider's cluster mode; tokens are matched after lowercasing.
    """

    kind: str = "synthetic"
    dim: int = 384
    source: str | None = None
    seed: int = 0
    clusters: tuple[tuple[str, str], ...] = ()
    sidecar: str | None = None

    def __post_init__(self):
        if self.kind not in ("synthetic", "precomputed"):
            raise ValueError(f"unknown embedder kind {self.kind!r}")
        if self.dim < 2:
            raise ValueError("dim must be >= 2")
        if self.kind == "precomputed" and not self.source:
            raise ValueError("precomputed embedder requires a source table")


def text_key(text: str) -> str:
    return hashlib.sha256(text.encode("utf-8")).hexdigest()


def sidecar_path(source: str | Path) -> Path:
    source = Path(source)
    return source.with_name(source.name + ".keys.json")


def _unit(v: np.ndarray) -> np.ndarray:
    n = np.linalg.norm(v)
    if n == 0.0:
        raise ValueError("cannot normalize a zero vector")
    return v / n


def _seeded_direction(seed: int, key: str, dim: int) -> np.ndarray:
    digest = hashlib.sha256(f"{seed}\x00{key}".encode("utf-8")).digest()
    rng = np.random.Generator(np.random.PCG64(int.from_bytes(digest[:16], "little")))
    return rng.standard_normal(dim)


class SyntheticEmbedder:
    def __init__(self, dim: int = 384, seed: int = 0, clusters: Mapping[str, str] | None = None):
        self.dim = dim
        self.seed = seed
        self.clusters = {k.lower(): v for k, v in (clusters or {}).items()}
        self._token = lru_cache(maxsize=65536)(self._token_vector)
        self._anchor = lru_cache(maxsize=4096)(self._anchor_vector)

    def _token_vector(self, token: str) -> np.ndarray:
        v = _seeded_direction(self.seed, "tok:" + token, self.dim)
        v.setflags(write=False)
        return v

    def _anchor_vector(self, label: str) -> np.ndarray:
        v = _unit(_seeded_direction(self.seed, "cluster:" + label, self.dim))
        v.setflags(write=False)
        return v

    def anchor(self, label: str) -> np.ndarray:
        """Unit anchor direction of a cluster label."""
        return self._anchor(label)

    def text_vector(self, text: str) -> np.ndarray:
        """Pure token-hash vector, ignoring cluster keywords."""
        tokens = text.split()
        if not tokens:
            raise ValueError("cannot embed empty text")
        acc = np.zeros(self.dim)
        for tok in tokens:
            acc += self._token(tok)
        return _unit(acc)

    def cluster_of(self, text: str) -> str | None:
        if not self.clusters:
            return None
        hits = Counter(self.clusters[t] for t in tokenize(text) if t in self.clusters)
        if not hits:
            return None
        # majority label, ties to the smallest label
        best = max(hits.values())
        return min(label for label, c in hits.items() if c == best)

    def embed(self, text: str, cluster: str | None = None) -> np.ndarray:
        base = self.text_vector(text)
        label = cluster if cluster is not None else self.cluster_of(text)
        if label is None:
            return base
        return _unit(CLUSTER_WEIGHT * self._anchor(label) + (1.0 - CLUSTER_WEIGHT) * base)

    def embed_many(self, texts: Sequence[str]) -> np.ndarray:
        if not texts:
            return np.zeros((0, self.dim))
        return np.stack([self.embed(t) for t in texts])


class PrecomputedEmbedder:
    def __init__(self, table: EmbeddingTable, keys: Mapping[str, str]):
        self.table = table
        self.dim = table.dim
        self.keys = dict(keys)

    @classmethod
    def from_files(cls, source: str | Path, sidecar: str | Path | None = None):
        table = read_embedding_table(source)
        with open(sidecar or sidecar_path(source), encoding="utf-8") as fh:
            keys = json.load(fh)
        return cls(table, keys)

    @classmethod
    def from_vectors(cls, vectors: Mapping[str, np.ndarray]):
        """In-memory provider keyed by text; used by synthetic scenarios."""
        ids, keys = [], {}
        for n, text in enumerate(vectors):
            rid = f"r{n}"
            ids.append(rid)
            keys[text_key(text)] = rid
        mat = np.stack([np.asarray(v, dtype=np.float64) for v in vectors.values()]) if ids else np.zeros((0, 2))
        return cls(EmbeddingTable.normalized(ids, mat) if ids else EmbeddingTable((), mat), keys)

    def save(self, source: str | Path) -> None:
        from .store import write_embedding_table

        write_embedding_table(self.table, source)
        with open(sidecar_path(source), "w", encoding="utf-8") as fh:
            json.dump(self.keys, fh)

    def embed(self, text: str) -> np.ndarray:
        if not text:
            raise ValueError("cannot embed empty text")
        rid = self.keys.get(text_key(text))
        if rid is None or rid not in self.table:
            raise EmbeddingLookupError(f"no precomputed embedding for text {text[:60]!r}")
        v = self.table.row(rid).astype(np.float64)
        return v / np.linalg.norm(v)

    def embed_many(self, texts: Sequence[str]) -> np.ndarray:
        if not texts:
            return np.zeros((0, self.dim))
        return np.stack([self.embed(t) for t in texts])


Embedder = SyntheticEmbedder | PrecomputedEmbedder


@lru_cache(maxsize=32)
def make_embedder(spec: EmbedderSpec) -> Embedder:
    if spec.kind == "synthetic":
        return SyntheticEmbedder(spec.dim, spec.seed, dict(spec.clusters))
    emb = PrecomputedEmbedder.from_files(spec.source, spec.sidecar)
    if emb.dim != spec.dim:
        raise ValueError(f"spec dim {spec.dim} but source table has dim {emb.dim}")
    return emb


def _resolve(spec_or_embedder) -> Embedder:
    if isinstance(spec_or_embedder, EmbedderSpec):
        return make_embedder(spec_or_embedder)
    return spec_or_embedder


def embed_text(spec: EmbedderSpec | Embedder, text: str) -> np.ndarray:
    """Unit vector for ``text`` (float64)."""
    if not text or not text.strip():
        raise ValueError("cannot embed empty text")
    return _resolve(spec).embed(text)


def embed_corpus(spec: EmbedderSpec | Embedder, tools: Sequence[ToolRecord]) -> EmbeddingTable:
    """Generation-0 table with one row per tool, embedded from its description."""
    emb = _resolve(spec)
    if not tools:
        return EmbeddingTable((), np.zeros((0, emb.dim)))
    mat = emb.embed_many([t.description for t in tools])
    return EmbeddingTable.normalized([t.id for t in tools], mat)
