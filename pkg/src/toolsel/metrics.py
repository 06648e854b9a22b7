"""Binary-relevance ranking metrics and nearest-rank percentiles."""
from __future__ import annotations

import math
from typing import Collection, Sequence


def _check(k: int) -> None:
    if k < 1:
        raise ValueError(f"K must be >= 1, got {k}")


def recall_at_k(ranked: Sequence[str], relevant: Collection[str], k: int) -> float:
    """Fraction of the relevant tools found in the first ``k`` ranks."""
    _check(k)
    if not relevant:
        return 0.0
    rel = set(relevant)
    return len(rel.intersection(ranked[:k])) / len(rel)


def precision_at_k(ranked: Sequence[str], relevant: Collection[str], k: int) -> float:
    """Hits in the first ``k`` ranks divided by ``k`` (short lists are not rescaled)."""
    _check(k)
    rel = set(relevant)
    return sum(1 for t in ranked[:k] if t in rel) / k


def dcg_at_k(ranked: Sequence[str], relevant: Collection[str], k: int) -> float:
    rel = set(relevant)
    return sum(1.0 / math.log2(i + 2) for i, t in enumerate(ranked[:k]) if t in rel)


def ndcg_at_k(ranked: Sequence[str], relevant: Collection[str], k: int) -> float:
    _check(k)
    if not relevant:
        return 0.0
    ideal = sum(1.0 / math.log2(i + 2) for i in range(min(k, len(set(relevant)))))
    return dcg_at_k(ranked, relevant, k) / ideal


def reciprocal_rank(ranked: Sequence[str], relevant: Collection[str]) -> float:
    rel = set(relevant)
    for i, t in enumerate(ranked):
        if t in rel:
            return 1.0 / (i + 1)
    return 0.0


def mean_reciprocal_rank(rankings: Sequence[Sequence[str]], relevants: Sequence[Collection[str]]) -> float:
    if not rankings:
        return 0.0
    return sum(reciprocal_rank(r, rel) for r, rel in zip(rankings, relevants)) / len(rankings)


def nearest_rank(samples: Sequence[float], pct: float) -> float:
    """Nearest-rank percentile: the ``ceil(pct/100 * n)``-th smallest sample."""
    if not samples:
        raise ValueError("no samples")
    if not 0 < pct <= 100:
        raise ValueError("percentile must lie in (0, 100]")
    ordered = sorted(samples)
    rank = max(1, math.ceil(pct / 100.0 * len(ordered) - 1e-12))
    return ordered[rank - 1]
