"""Corpus records, JSONL ingest, the binary embedding-table format and the
generation-swapped table store shared by offline jobs and the serving path.

Embedding table file layout::

    {"dim": D, "count": N, "dtype": "f32le", "generation": G, "ids": [...]}\\n
    <N * D little-endian float32 values, row-major in ``ids`` order>
"""
from __future__ import annotations

import json
import threading
from collections import Counter
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Iterable, Iterator, Mapping, Sequence

import numpy as np

NORM_TOL = 1e-4
_DTYPE = np.dtype("<f4")


class CorpusError(ValueError):
    """Malformed or inconsistent corpus input."""


class TableFormatError(ValueError):
    """Embedding-table file or payload does not match its header."""


class SwapError(RuntimeError):
    """A candidate table cannot be published."""


@dataclass
class ToolRecord:
    id: str
    name: str
    description: str
    category: str = ""
    tags: list[str] = field(default_factory=list)
    freq: int = 0

    def __post_init__(self):
        if not self.id:
            raise CorpusError("tool id must be non-empty")
        if not self.description or not self.description.strip():
            raise CorpusError(f"tool {self.id!r} has an empty description")
        if self.freq < 0:
            raise CorpusError(f"tool {self.id!r} has negative freq")


@dataclass
class QueryRecord:
    id: str
    text: str
    relevant: frozenset[str] = frozenset()

    def __post_init__(self):
        if not self.id:
            raise CorpusError("query id must be non-empty")
        self.relevant = frozenset(self.relevant)


@dataclass(frozen=True)
class OutcomeTriple:
    query_id: str
    tool_id: str
    outcome: int

    def __post_init__(self):
        if self.outcome not in (0, 1) or isinstance(self.outcome, bool):
            raise CorpusError(f"outcome must be 0 or 1, got {self.outcome!r}")


@dataclass
class Corpus:
    tools: list[ToolRecord]
    queries: list[QueryRecord]
    outcomes: list[OutcomeTriple] = field(default_factory=list)

    def __post_init__(self):
        self.validate()
        self.update_freq()

    @property
    def tool_ids(self) -> set[str]:
        return {t.id for t in self.tools}

    def tool_map(self) -> dict[str, ToolRecord]:
        return {t.id: t for t in self.tools}

    def query_map(self) -> dict[str, QueryRecord]:
        return {q.id: q for q in self.queries}

    def validate(self) -> None:
        """Full scan for uniqueness and referential integrity."""
        _check_unique((t.id for t in self.tools), "tool")
        _check_unique((q.id for q in self.queries), "query")
        tool_ids = self.tool_ids
        query_ids = {q.id for q in self.queries}
        for q in self.queries:
            missing = q.relevant - tool_ids
            if missing:
                raise CorpusError(f"query {q.id!r} references unknown tools {sorted(missing)}")
        for o in self.outcomes:
            if o.tool_id not in tool_ids:
                raise CorpusError(f"outcome references unknown tool {o.tool_id!r}")
            if o.query_id not in query_ids:
                raise CorpusError(f"outcome references unknown query {o.query_id!r}")

    def update_freq(self, outcomes: Iterable[OutcomeTriple] | None = None) -> None:
        """Set each tool's freq to the number of outcome triples naming it."""
        counts = Counter(o.tool_id for o in (self.outcomes if outcomes is None else outcomes))
        for t in self.tools:
            t.freq = counts.get(t.id, 0)


def _check_unique(ids: Iterable[str], kind: str) -> None:
    seen: set[str] = set()
    for i in ids:
        if i in seen:
            raise CorpusError(f"duplicate {kind} id {i!r}")
        seen.add(i)


# --------------------------------------------------------------------------
# JSONL ingest
# --------------------------------------------------------------------------

def _iter_jsonl(path: str | Path) -> Iterator[tuple[int, dict]]:
    with open(path, encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, start=1):
            if not line.strip():
                continue
            try:
                obj = json.loads(line)
            except json.JSONDecodeError as exc:
                raise CorpusError(f"{path}:{lineno}: malformed JSON ({exc.msg})") from None
            if not isinstance(obj, dict):
                raise CorpusError(f"{path}:{lineno}: expected a JSON object")
            yield lineno, obj


def _field(obj: dict, key: str, path, lineno: int, kind=str):
    if key not in obj:
        raise CorpusError(f"{path}:{lineno}: missing field {key!r}")
    value = obj[key]
    if not isinstance(value, kind):
        raise CorpusError(f"{path}:{lineno}: field {key!r} has wrong type")
    return value


def load_tools(path: str | Path) -> list[ToolRecord]:
    tools: list[ToolRecord] = []
    seen: set[str] = set()
    for lineno, obj in _iter_jsonl(path):
        tid = _field(obj, "id", path, lineno)
        if tid in seen:
            raise CorpusError(f"{path}:{lineno}: duplicate tool id {tid!r}")
        seen.add(tid)
        tags = obj.get("tags") or []
        if not isinstance(tags, list) or not all(isinstance(t, str) for t in tags):
            raise CorpusError(f"{path}:{lineno}: tags must be a list of strings")
        try:
            tools.append(
                ToolRecord(
                    id=tid,
                    name=obj.get("name") or tid,
                    description=_field(obj, "description", path, lineno),
                    category=obj.get("category") or "",
                    tags=list(tags),
                )
            )
        except CorpusError as exc:
            raise CorpusError(f"{path}:{lineno}: {exc}") from None
    return tools


def load_queries(path: str | Path) -> list[QueryRecord]:
    queries: list[QueryRecord] = []
    seen: set[str] = set()
    for lineno, obj in _iter_jsonl(path):
        qid = _field(obj, "id", path, lineno)
        if qid in seen:
            raise CorpusError(f"{path}:{lineno}: duplicate query id {qid!r}")
        seen.add(qid)
        relevant = _field(obj, "relevant", path, lineno, list)
        queries.append(QueryRecord(qid, _field(obj, "text", path, lineno), frozenset(relevant)))
    return queries


def load_outcomes(path: str | Path) -> list[OutcomeTriple]:
    out: list[OutcomeTriple] = []
    for lineno, obj in _iter_jsonl(path):
        outcome = obj.get("outcome")
        if isinstance(outcome, bool) or outcome not in (0, 1):
            raise CorpusError(f"{path}:{lineno}: outcome must be 0 or 1, got {outcome!r}")
        out.append(
            OutcomeTriple(
                _field(obj, "query_id", path, lineno),
                _field(obj, "tool_id", path, lineno),
                int(outcome),
            )
        )
    return out


def load_corpus(data_dir: str | Path) -> Corpus:
    """Load ``tools.jsonl``, ``queries.jsonl`` and (optional) ``outcomes.jsonl``."""
    data_dir = Path(data_dir)
    outcomes_path = data_dir / "outcomes.jsonl"
    return Corpus(
        tools=load_tools(data_dir / "tools.jsonl"),
        queries=load_queries(data_dir / "queries.jsonl"),
        outcomes=load_outcomes(outcomes_path) if outcomes_path.exists() else [],
    )


def write_jsonl(path: str | Path, rows: Iterable[Mapping]) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        for row in rows:
            fh.write(json.dumps(row, ensure_ascii=False) + "\n")


def tool_to_json(t: ToolRecord) -> dict:
    return {"id": t.id, "name": t.name, "description": t.description,
            "category": t.category, "tags": list(t.tags)}


def query_to_json(q: QueryRecord) -> dict:
    return {"id": q.id, "text": q.text, "relevant": sorted(q.relevant)}


def save_corpus(corpus: Corpus, data_dir: str | Path) -> None:
    data_dir = Path(data_dir)
    data_dir.mkdir(parents=True, exist_ok=True)
    write_jsonl(data_dir / "tools.jsonl", map(tool_to_json, corpus.tools))
    write_jsonl(data_dir / "queries.jsonl", map(query_to_json, corpus.queries))
    write_jsonl(
        data_dir / "outcomes.jsonl",
        ({"query_id": o.query_id, "tool_id": o.tool_id, "outcome": o.outcome} for o in corpus.outcomes),
    )


# --------------------------------------------------------------------------
# Embedding tables
# --------------------------------------------------------------------------

@dataclass(frozen=True, eq=False)
class EmbeddingTable:
    """Immutable map from tool id to a unit-norm float32 row.

    ``approved`` is set only by the validation gate; :func:`swap_generation`
    refuses tables without it.
    """

    ids: tuple[str, ...]
    matrix: np.ndarray
    generation: int = 0
    approved: bool = False
    dim: int = field(init=False)

    def __post_init__(self):
        ids = tuple(self.ids)
        mat = np.ascontiguousarray(self.matrix, dtype=np.float32)
        if mat.ndim != 2 or mat.shape[0] != len(ids):
            raise TableFormatError(f"matrix shape {mat.shape} does not match {len(ids)} ids")
        if mat.shape[1] < 1:
            raise TableFormatError("dim must be positive")
        if len(set(ids)) != len(ids):
            raise TableFormatError("duplicate ids in table")
        if not np.all(np.isfinite(mat)):
            raise TableFormatError("non-finite value in table")
        if len(ids):
            norms = np.linalg.norm(mat.astype(np.float64), axis=1)
            bad = np.abs(norms - 1.0) > NORM_TOL
            if bad.any():
                i = int(np.argmax(bad))
                raise TableFormatError(f"row {ids[i]!r} has norm {norms[i]:.6f}, expected unit norm")
        mat.setflags(write=False)
        object.__setattr__(self, "ids", ids)
        object.__setattr__(self, "matrix", mat)
        object.__setattr__(self, "dim", mat.shape[1])
        object.__setattr__(self, "_index", {tid: i for i, tid in enumerate(ids)})
        # float64 copy for scoring, and each id's position in ascending-id order
        wide = mat.astype(np.float64)
        wide.setflags(write=False)
        object.__setattr__(self, "wide", wide)
        order = np.empty(len(ids), dtype=np.int64)
        order[np.argsort(np.array(ids, dtype=object), kind="stable")] = np.arange(len(ids))
        order.setflags(write=False)
        object.__setattr__(self, "id_rank", order)

    @classmethod
    def from_rows(cls, rows: Mapping[str, Sequence[float]], generation: int = 0, dim: int | None = None):
        ids = tuple(rows)
        if ids:
            mat = np.stack([np.asarray(rows[i], dtype=np.float64) for i in ids])
        else:
            mat = np.zeros((0, dim or 1))
        return cls(ids, mat, generation)

    @classmethod
    def normalized(cls, ids: Sequence[str], matrix: np.ndarray, generation: int = 0):
        """Build a table after L2-normalizing every row."""
        m = np.asarray(matrix, dtype=np.float64)
        norms = np.linalg.norm(m, axis=1, keepdims=True)
        if np.any(norms == 0):
            raise TableFormatError("cannot normalize a zero row")
        return cls(tuple(ids), m / norms, generation)

    def __len__(self) -> int:
        return len(self.ids)

    def __contains__(self, tool_id: str) -> bool:
        return tool_id in self._index

    def index(self, tool_id: str) -> int:
        return self._index[tool_id]

    def row(self, tool_id: str) -> np.ndarray:
        return self.matrix[self._index[tool_id]]

    @property
    def rows(self) -> dict[str, np.ndarray]:
        return {tid: self.matrix[i] for i, tid in enumerate(self.ids)}

    def with_generation(self, generation: int, approved: bool | None = None) -> "EmbeddingTable":
        return replace(self, generation=generation,
                       approved=self.approved if approved is None else approved)

    def same_payload(self, other: "EmbeddingTable") -> bool:
        return self.ids == other.ids and self.matrix.tobytes() == other.matrix.tobytes()


def write_embedding_table(table: EmbeddingTable, path: str | Path) -> None:
    header = {
        "dim": table.dim,
        "count": len(table),
        "dtype": "f32le",
        "generation": table.generation,
        "ids": list(table.ids),
    }
    path = Path(path)
    tmp = path.with_name(path.name + ".tmp")
    with open(tmp, "wb") as fh:
        fh.write(json.dumps(header, ensure_ascii=False).encode("utf-8") + b"\n")
        fh.write(table.matrix.astype(_DTYPE, copy=False).tobytes())
    tmp.replace(path)


def read_embedding_table(path: str | Path) -> EmbeddingTable:
    data = Path(path).read_bytes()
    nl = data.find(b"\n")
    if nl < 0:
        raise TableFormatError(f"{path}: missing header line")
    try:
        header = json.loads(data[:nl].decode("utf-8"))
        dim, count, ids = int(header["dim"]), int(header["count"]), list(header["ids"])
        generation = int(header.get("generation", 0))
    except (ValueError, KeyError, TypeError) as exc:
        raise TableFormatError(f"{path}: bad header ({exc})") from None
    if header.get("dtype", "f32le") != "f32le":
        raise TableFormatError(f"{path}: unsupported dtype {header.get('dtype')!r}")
    if dim < 1:
        raise TableFormatError(f"{path}: dim must be positive")
    if len(ids) != count:
        raise TableFormatError(f"{path}: header lists {len(ids)} ids but count is {count}")
    payload = data[nl + 1:]
    expected = count * dim * _DTYPE.itemsize
    if len(payload) != expected:
        raise TableFormatError(
            f"{path}: payload holds {len(payload)} bytes, header implies {expected} "
            f"({count} rows x {dim} dims)"
        )
    mat = np.frombuffer(payload, dtype=_DTYPE).reshape(count, dim)
    if not np.all(np.isfinite(mat)):
        raise TableFormatError(f"{path}: non-finite float in payload")
    return EmbeddingTable(tuple(ids), mat.astype(np.float32), generation)


def swap_generation(current: EmbeddingTable, candidate: EmbeddingTable) -> EmbeddingTable:
    """Return the table to publish next: ``candidate`` stamped with the next generation."""
    if not candidate.approved:
        raise SwapError("candidate table was not approved by the validation gate")
    if candidate.dim != current.dim:
        raise SwapError(f"dim mismatch: serving {current.dim}, candidate {candidate.dim}")
    return candidate.with_generation(current.generation + 1, approved=True)


class TableStore:
    """Holds the live table; readers grab ``store.current`` once per request.

    Publication is a single reference assignment, so a reader sees either the
    old or the new table in full. The lock only serializes writers.
    """

    def __init__(self, table: EmbeddingTable):
        self._table = table
        self._write_lock = threading.Lock()

    @property
    def current(self) -> EmbeddingTable:
        return self._table

    @property
    def generation(self) -> int:
        return self._table.generation

    def swap(self, candidate: EmbeddingTable) -> EmbeddingTable:
        with self._write_lock:
            published = swap_generation(self._table, candidate)
            self._table = published
            return published
