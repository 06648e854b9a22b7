"""Serving: engine assembly from an artifact directory and a JSON HTTP endpoint.

Artifact directory layout (default root: ``$OATS_DATA_DIR``, else ``.``)::

    tools.jsonl  queries.jsonl  outcomes.jsonl   corpus
    embedder.json                                EmbedderSpec used to build tables
    base.emb                                     description embeddings (generation 0)
    refined.emb                                  gated refinement output
    rerank.bin + rerank.bin.stats.json           re-ranker weights and cluster stats
    adapter.bin  adapted.emb                     adapter weights and recomputed table
"""
from __future__ import annotations

import json
import logging
import os
import threading
import time
from dataclasses import asdict, dataclass, fields
from http import HTTPStatus
from http.server import BaseHTTPRequestHandler, ThreadingHTTPServer
from pathlib import Path

from .adapter import load_adapter
from .embed import EmbedderSpec, make_embedder
from .pipeline import Engine, MissingArtifactError, resolve_stage
from .rerank import Reranker
from .store import load_tools, read_embedding_table

log = logging.getLogger(__name__)

DATA_ENV = "OATS_DATA_DIR"
SERVE_STAGES = ("se", "s1", "s2", "s3", "bm25", "lexical")
FILES = {
    "tools": "tools.jsonl",
    "queries": "queries.jsonl",
    "outcomes": "outcomes.jsonl",
    "embedder": "embedder.json",
    "base_table": "base.emb",
    "refined_table": "refined.emb",
    "reranker": "rerank.bin",
    "adapter": "adapter.bin",
    "adapted_table": "adapted.emb",
}


def data_root(explicit: str | os.PathLike | None = None) -> Path:
    return Path(explicit or os.environ.get(DATA_ENV) or ".")


def save_embedder_spec(spec: EmbedderSpec, path) -> None:
    d = asdict(spec)
    d["clusters"] = [list(p) for p in spec.clusters]
    with open(path, "w", encoding="utf-8") as fh:
        json.dump(d, fh, indent=2)


def load_embedder_spec(path) -> EmbedderSpec:
    with open(path, encoding="utf-8") as fh:
        d = json.load(fh)
    d["clusters"] = tuple(tuple(p) for p in d.get("clusters", ()))
    return EmbedderSpec(**d)


@dataclass(frozen=True)
class ServeConfig:
    K: int = 5
    stage: str = "se"
    alpha_pool: int = 5
    bind: str = "127.0.0.1:8080"
    data_dir: str | None = None
    tools_path: str | None = None
    embedder_path: str | None = None
    base_table_path: str | None = None
    refined_table_path: str | None = None
    reranker_path: str | None = None
    adapter_path: str | None = None
    adapted_table_path: str | None = None
    seed: int = 0

    def __post_init__(self):
        if self.K < 1:
            raise ValueError("K must be positive")
        if self.alpha_pool < 1:
            raise ValueError("alpha_pool must be positive")
        if resolve_stage(self.stage) not in SERVE_STAGES:
            raise ValueError(f"stage {self.stage!r} cannot be served; choose from {', '.join(SERVE_STAGES)}")
        host, _, port = self.bind.rpartition(":")
        if not host or not port.isdigit():
            raise ValueError(f"bind must look like host:port, got {self.bind!r}")

    @classmethod
    def from_json(cls, path) -> "ServeConfig":
        with open(path, encoding="utf-8") as fh:
            d = json.load(fh)
        known = {f.name for f in fields(cls)}
        unknown = set(d) - known
        if unknown:
            raise ValueError(f"unknown config keys: {', '.join(sorted(unknown))}")
        return cls(**d)

    def path(self, key: str) -> Path:
        explicit = getattr(self, f"{key}_path", None)
        if explicit:
            return Path(explicit)
        return data_root(self.data_dir) / FILES[key]

    @property
    def address(self) -> tuple[str, int]:
        host, _, port = self.bind.rpartition(":")
        return host, int(port)


def _require(path: Path, what: str, stage: str) -> Path:
    if not path.exists():
        raise MissingArtifactError(f"stage {stage!r} needs {what} at {path}")
    return path


def build_engine(config: ServeConfig) -> Engine:
    """Load the artifacts ``config.stage`` needs and assemble an engine."""
    stage = resolve_stage(config.stage)
    tools = load_tools(_require(config.path("tools"), "a tool catalogue", stage))
    if stage == "bm25":
        return Engine(tools, stage=stage, K=config.K, seed=config.seed)
    spec = load_embedder_spec(_require(config.path("embedder"), "an embedder spec", stage))
    embedder = make_embedder(spec)
    table_key = {"se": "base_table", "lexical": "base_table", "s3": "adapted_table"}.get(stage, "refined_table")
    table_path = config.path(table_key)
    if table_key == "refined_table" and not table_path.exists() and stage == "s2":
        table_path = config.path("base_table")  # s2 over the base table when refinement was never run
    table = read_embedding_table(_require(table_path, "an embedding table", stage))
    reranker = adapter = None
    if stage == "s2" or (stage == "s3" and config.path("reranker").exists()):
        reranker = Reranker.load(_require(config.path("reranker"), "a re-ranker", stage))
    if stage == "s3":
        adapter = load_adapter(_require(config.path("adapter"), "an adapter", stage))
    return Engine(tools, embedder, table, stage, config.K, reranker=reranker, adapter=adapter,
                  alpha_pool=config.alpha_pool, seed=config.seed)


class BadRequest(ValueError):
    pass


def parse_select_body(raw: bytes, default_k: int) -> tuple[str, int]:
    try:
        body = json.loads(raw.decode("utf-8") or "null")
    except (UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise BadRequest(f"body is not valid JSON: {exc}") from None
    if not isinstance(body, dict):
        raise BadRequest("body must be a JSON object")
    query = body.get("query")
    if not isinstance(query, str) or not query.strip():
        raise BadRequest("'query' must be a non-empty string")
    k = body.get("k", default_k)
    if isinstance(k, bool) or not isinstance(k, int) or k < 1:
        raise BadRequest("'k' must be a positive integer")
    return query, k


def handle_select(engine: Engine, query: str, k: int) -> dict:
    t0 = time.perf_counter()
    sel = engine.select(query, k)
    return {
        "tools": [{"id": tid, "score": float(score)} for tid, score in sel.candidates],
        "generation": sel.generation,
        "latency_ms": (time.perf_counter() - t0) * 1e3,
    }


class SelectServer(ThreadingHTTPServer):
    daemon_threads = True

    def __init__(self, address, engine: Engine | None, K: int = 5):
        super().__init__(address, _Handler)
        self.engine = engine
        self.K = K


class _Handler(BaseHTTPRequestHandler):
    protocol_version = "HTTP/1.1"
    server: SelectServer

    def log_message(self, fmt, *args):
        log.debug("%s - " + fmt, self.address_string(), *args)

    def _send(self, status: int, payload: dict) -> None:
        data = json.dumps(payload).encode("utf-8")
        self.send_response(status)
        self.send_header("Content-Type", "application/json")
        self.send_header("Content-Length", str(len(data)))
        self.end_headers()
        self.wfile.write(data)

    def do_GET(self):
        if self.path != "/v1/health":
            return self._send(HTTPStatus.NOT_FOUND, {"error": f"no route {self.path}"})
        engine = self.server.engine
        if engine is None:
            return self._send(HTTPStatus.SERVICE_UNAVAILABLE, {"error": "engine not ready"})
        self._send(HTTPStatus.OK, {"generation": engine.generation, "stage": engine.stage})

    def do_POST(self):
        if self.path != "/v1/select":
            return self._send(HTTPStatus.NOT_FOUND, {"error": f"no route {self.path}"})
        length = int(self.headers.get("Content-Length") or 0)
        raw = self.rfile.read(length) if length else b""
        engine = self.server.engine
        if engine is None:
            return self._send(HTTPStatus.SERVICE_UNAVAILABLE, {"error": "engine not ready"})
        try:
            query, k = parse_select_body(raw, self.server.K)
            payload = handle_select(engine, query, k)
        except BadRequest as exc:
            return self._send(HTTPStatus.BAD_REQUEST, {"error": str(exc)})
        except KeyError as exc:  # e.g. a precomputed embedder without this text
            return self._send(HTTPStatus.BAD_REQUEST, {"error": str(exc)})
        self._send(HTTPStatus.OK, payload)


def make_server(config: ServeConfig, engine: Engine | None = None) -> SelectServer:
    """Bind a server; pass ``engine`` to skip loading artifacts from disk."""
    return SelectServer(config.address, engine if engine is not None else build_engine(config), config.K)


def start_background(server: SelectServer) -> threading.Thread:
    t = threading.Thread(target=server.serve_forever, name="select-server", daemon=True)
    t.start()
    return t


def http_serve(config: ServeConfig) -> None:
    server = make_server(config)
    host, port = server.server_address[:2]
    log.info("serving stage %s on http://%s:%d", config.stage, host, port)
    try:
        server.serve_forever()
    except KeyboardInterrupt:
        pass
    finally:
        server.server_close()
