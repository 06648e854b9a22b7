"""Synthetic corpora with controlled embedding geometry.

Directions come from :class:`~toolsel.embed.SyntheticEmbedder` anchors so every
scenario is a pure function of its seed. Vectors are exposed through an
in-memory precomputed embedder keyed by the generated texts.
"""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .embed import PrecomputedEmbedder, SyntheticEmbedder
from .store import Corpus, QueryRecord, ToolRecord


def _unit(v):
    return v / np.linalg.norm(v)


def _noisy(anchor: np.ndarray, scale: float, rng: np.random.Generator) -> np.ndarray:
    """``anchor`` plus isotropic noise of expected norm ``scale``, normalized."""
    d = anchor.shape[0]
    return _unit(anchor + scale * rng.standard_normal(d) / np.sqrt(d))


def _rotated(anchor: np.ndarray, degrees: float, rng: np.random.Generator) -> np.ndarray:
    """Unit vector at exactly ``degrees`` from ``anchor`` in a random direction."""
    u = rng.standard_normal(anchor.shape[0])
    u -= (u @ anchor) * anchor
    u = _unit(u)
    t = np.deg2rad(degrees)
    return np.cos(t) * anchor + np.sin(t) * u


@dataclass
class Scenario:
    corpus: Corpus
    embedder: PrecomputedEmbedder
    vectors: dict[str, np.ndarray]
    notes: dict = field(default_factory=dict)

    def query_vecs(self, queries=None) -> dict[str, np.ndarray]:
        qs = self.corpus.queries if queries is None else queries
        return {q.id: self.vectors[q.text] for q in qs}


def _finish(tools, queries, vectors, notes=None) -> Scenario:
    return Scenario(Corpus(tools, queries), PrecomputedEmbedder.from_vectors(vectors), vectors, notes or {})


def topic_corpus(
    n_topics: int = 6,
    tools_per_topic: int = 2,
    queries_per_topic: int = 10,
    dim: int = 32,
    seed: int = 0,
    tool_noise: float = 0.5,
    query_noise: float = 0.8,
) -> Scenario:
    """Topics with a few tools each; each query's ground truth is one tool of its topic."""
    gen = SyntheticEmbedder(dim, seed)
    rng = np.random.default_rng(seed)
    tools, queries, vectors = [], [], {}
    for t in range(n_topics):
        anchor = gen.anchor(f"topic-{t}")
        members = []
        for j in range(tools_per_topic):
            tid = f"tool_{t}_{j}"
            desc = f"tool {j} for topic {t}"
            vectors[desc] = _noisy(anchor, tool_noise, rng)
            tools.append(ToolRecord(tid, tid, desc, category=f"cat{t}", tags=[f"topic{t}"]))
            members.append((tid, vectors[desc]))
        for j in range(queries_per_topic):
            text = f"query {j} about topic {t}"
            target, tvec = members[j % len(members)]
            vectors[text] = _unit(_noisy(anchor, query_noise, rng) + 0.3 * tvec)
            queries.append(QueryRecord(f"q_{t}_{j}", text, frozenset({target})))
    return _finish(tools, queries, vectors)


def opaque_decoy_scenario(
    n_topics: int = 10,
    n_opaque: int = 5,
    queries_per_topic: int = 30,
    n_distractors: int = 20,
    dim: int = 128,
    displacement_deg: float = 65.0,
    decoy_weight: float = 0.72,
    query_noise: float = 0.6,
    seed: int = 0,
) -> Scenario:
    """Opaque-description tools hidden behind lexical decoys.

    Each of the first ``n_opaque`` topics has a correct tool whose embedding
    sits ``displacement_deg`` away from the topic direction (a description
    that says nothing about what the tool does) and a decoy tool that leans
    toward the topic but serves its own, separate query cluster. Static
    retrieval ranks the decoy first and the correct tool second for those
    topics; the remaining topics are easy.
    """
    gen = SyntheticEmbedder(dim, seed)
    rng = np.random.default_rng(seed + 1)
    tools, queries, vectors = [], [], {}
    opaque, decoys = [], []

    def add_tool(tid, desc, vec, category=""):
        vectors[desc] = vec
        tools.append(ToolRecord(tid, tid, desc, category=category))

    def add_queries(prefix, anchor, target, words):
        for j in range(queries_per_topic):
            text = f"{words} request {j} ({prefix})"
            vectors[text] = _noisy(anchor, query_noise, rng)
            queries.append(QueryRecord(f"{prefix}_q{j}", text, frozenset({target})))

    for t in range(n_topics):
        a = gen.anchor(f"topic-{t}")
        tid = f"tool{t}"
        if t < n_opaque:
            add_tool(tid, f"{tid}: start for free at {tid}.ai", _rotated(a, displacement_deg, rng), "saas")
            b = gen.anchor(f"decoy-topic-{t}")
            did = f"decoy{t}"
            add_tool(did, f"{did}: strategy executives analysis for topic {t}",
                     _unit(decoy_weight * a + np.sqrt(1 - decoy_weight ** 2) * b), "finance")
            add_queries(f"decoy{t}", b, did, f"decoy topic {t}")
            opaque.append(tid)
            decoys.append(did)
        else:
            add_tool(tid, f"{tid}: does topic {t} things", _noisy(a, 0.3, rng), f"cat{t}")
        add_queries(f"topic{t}", a, tid, f"strategy call topic {t}")
    for j in range(n_distractors):
        add_tool(f"misc{j}", f"misc tool {j}", _unit(rng.standard_normal(dim)), "misc")
    return _finish(tools, queries, vectors, {"opaque": opaque, "decoys": decoys,
                                             "anchors": {t: gen.anchor(f"topic-{t}") for t in range(n_opaque)}})


def decoy_pair_scenario(
    n_pairs: int = 4,
    queries_per_side: int = 40,
    dim: int = 32,
    pair_cos: float = 0.95,
    query_noise: float = 0.6,
    n_distractors: int = 8,
    seed: int = 0,
) -> Scenario:
    """Pairs of tools with near-identical descriptions but disjoint ground truth.

    For pair i, tool ``a{i}`` serves queries leaning toward A_i and ``b{i}``
    serves queries leaning toward B_i, while both descriptions embed next to
    the midpoint of A_i and B_i, split along a direction orthogonal to A_i - B_i.
    Static retrieval cannot tell the twins apart; a learned map can.
    """
    gen = SyntheticEmbedder(dim, seed)
    rng = np.random.default_rng(seed + 7)
    tools, queries, vectors = [], [], {}
    for i in range(n_pairs):
        a, b = gen.anchor(f"pair{i}-a"), gen.anchor(f"pair{i}-b")
        mid = _unit(a + b)
        half = np.arccos(pair_cos) / 2
        # the twins differ along a direction unrelated to which queries they serve
        tilt = rng.standard_normal(dim)
        for basis in (mid, _unit(a - b)):
            tilt -= (tilt @ basis) * basis
        tilt = _unit(tilt)
        va = np.cos(half) * mid + np.sin(half) * tilt
        vb = np.cos(half) * mid - np.sin(half) * tilt
        for name, vec, anchor in ((f"a{i}", va, a), (f"b{i}", vb, b)):
            desc = f"{name}: manage calls and meetings"
            vectors[desc] = _unit(vec)
            tools.append(ToolRecord(name, name, desc, category="calls"))
            for j in range(queries_per_side):
                text = f"{name} style request {j}"
                # queries share the pair's midpoint component, so both twins rank high
                vectors[text] = _noisy(_unit(0.8 * mid + 0.35 * anchor), query_noise, rng)
                queries.append(QueryRecord(f"{name}_q{j}", text, frozenset({name})))
    for j in range(n_distractors):
        desc = f"unrelated tool {j}"
        vectors[desc] = _unit(rng.standard_normal(dim))
        tools.append(ToolRecord(f"misc{j}", f"misc{j}", desc, category="misc"))
    return _finish(tools, queries, vectors)


def random_instance(n_tools: int, n_queries: int, dim: int, seed: int, max_relevant: int = 2):
    """Unstructured random tools/queries (unit vectors) with random ground truth."""
    rng = np.random.default_rng(seed)
    ids = [f"t{i:02d}" for i in range(n_tools)]
    tmat = rng.standard_normal((n_tools, dim))
    tmat /= np.linalg.norm(tmat, axis=1, keepdims=True)
    qmat = rng.standard_normal((n_queries, dim))
    qmat /= np.linalg.norm(qmat, axis=1, keepdims=True)
    queries = []
    for j in range(n_queries):
        n_rel = int(rng.integers(1, max_relevant + 1))
        rel = rng.choice(n_tools, size=min(n_rel, n_tools), replace=False)
        queries.append(QueryRecord(f"q{j:02d}", f"query {j}", frozenset(ids[i] for i in rel)))
    return ids, tmat, queries, qmat


_VOCAB = ("search web news weather stock price currency convert translate image audio video "
          "calendar meeting transcript email send schedule flight hotel booking map route "
          "recipe food music playlist game quiz code review document summarize pdf chart "
          "data finance crypto health fitness travel shopping coupon discount job resume").split()


def bench_tools(n_tools: int = 2500, words: int = 12, seed: int = 0) -> list[ToolRecord]:
    """Tools with random-word descriptions for latency benchmarks."""
    rng = np.random.default_rng(seed)
    tools = []
    for i in range(n_tools):
        desc = " ".join(rng.choice(_VOCAB, size=words)) + f" api{i}"
        tools.append(ToolRecord(f"api{i:05d}", f"api{i}", desc, category=str(rng.choice(_VOCAB)),
                                tags=list(rng.choice(_VOCAB, size=2))))
    return tools


def bench_queries(n: int = 200, words: int = 10, seed: int = 1) -> list[str]:
    rng = np.random.default_rng(seed)
    return [" ".join(rng.choice(_VOCAB, size=words)) for _ in range(n)]


EXCHANGE_CLUSTERS = (
    ("usd", "currency"), ("eur", "currency"), ("currency", "currency"), ("currencies", "currency"),
    ("exchange", "currency"), ("convert", "currency"),
    ("weather", "weather"), ("forecast", "weather"), ("rain", "weather"),
    ("transcript", "meetings"), ("meeting", "meetings"), ("call", "meetings"),
    ("flight", "travel"), ("hotel", "travel"), ("booking", "travel"),
)


def router_tools() -> list[ToolRecord]:
    """A small tool catalogue for serving demos and HTTP tests."""
    return [
        ToolRecord("ExchangeTool", "ExchangeTool",
                   "Seamlessly convert currencies with our integrated currency conversion tool.", "finance"),
        ToolRecord("WeatherTool", "WeatherTool", "Get the weather forecast and rain alerts for any city.", "weather"),
        ToolRecord("buildbetter", "buildbetter",
                   "Chat with the knowledge of all your calls in BuildBetter (Zoom, GMeet, Webex). "
                   "Start for free @ BuildBetter.ai", "productivity"),
        ToolRecord("TripTool", "TripTool", "Search flight and hotel booking deals.", "travel"),
        ToolRecord("QuiverQuantitative", "QuiverQuantitative",
                   "Access data on congressional stock trading, lobbying, insider trading, and proposed legislation.",
                   "finance"),
        ToolRecord("speechki_tts", "speechki_tts", "The easiest way to convert texts to ready-to-use audio.", "audio"),
        ToolRecord("MemoryTool", "MemoryTool", "A learning application with spaced repetition functionality.", "education"),
        ToolRecord("StrologyTool", "StrologyTool", "Provides astrology services for you.", "lifestyle"),
    ]
