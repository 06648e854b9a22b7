"""Tool selection by dense retrieval, with offline embedding refinement from
usage outcomes plus optional re-ranking and adapter stages."""

from .embed import EmbedderSpec, SyntheticEmbedder, PrecomputedEmbedder, embed_corpus, embed_text
from .pipeline import Engine, fit_artifacts
from .refine import RefineConfig, refine_iterate, validation_gate
from .retrieval import CandidateList, dense_top_k
from .store import EmbeddingTable, TableStore, ToolRecord, QueryRecord, Corpus

__version__ = "0.1.0"

__all__ = [
    "CandidateList", "Corpus", "EmbedderSpec", "EmbeddingTable", "Engine", "PrecomputedEmbedder",
    "QueryRecord", "RefineConfig", "SyntheticEmbedder", "TableStore", "ToolRecord", "dense_top_k",
    "embed_corpus", "embed_text", "fit_artifacts", "refine_iterate", "validation_gate",
]
