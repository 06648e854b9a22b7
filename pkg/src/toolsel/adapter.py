"""Residual projection head trained with InfoNCE on mined hard negatives.

``adapter(x) = normalize(x + W2 relu(W1 x + b1) + b2)`` with the second layer
zero-initialized, so a fresh adapter is the identity on unit vectors and the
output dimension always equals the input dimension.
"""
from __future__ import annotations

import json
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Mapping, Sequence

import numpy as np

from .metrics import ndcg_at_k
from .refine import _as_matrix
from .rerank import Adam, TrainingError, read_weight_file
from .retrieval import dense_top_k_batch
from .store import EmbeddingTable, QueryRecord

HIDDEN = 256


class AdapterModel:
    def __init__(self, dim: int, hidden: int = HIDDEN, seed: int = 0):
        self.dim, self.hidden, self.seed = dim, hidden, seed
        rng = np.random.default_rng(seed)
        self.w1 = rng.standard_normal((dim, hidden)) * math.sqrt(2.0 / dim)
        self.b1 = np.zeros(hidden)
        self.w2 = np.zeros((hidden, dim))
        self.b2 = np.zeros(dim)
        self.enabled = True

    @property
    def arch(self) -> tuple[int, int, int]:
        return (self.dim, self.hidden, self.dim)

    @property
    def params(self) -> list[np.ndarray]:
        return [self.w1, self.b1, self.w2, self.b2]

    def n_params(self) -> int:
        return sum(p.size for p in self.params)

    def copy(self) -> "AdapterModel":
        m = AdapterModel.__new__(AdapterModel)
        m.dim, m.hidden, m.seed, m.enabled = self.dim, self.hidden, self.seed, self.enabled
        m.w1, m.b1, m.w2, m.b2 = (p.copy() for p in self.params)
        return m

    def forward_batch(self, x: np.ndarray):
        x = np.atleast_2d(np.asarray(x, dtype=np.float64))
        if x.shape[1] != self.dim:
            raise ValueError(f"adapter expects dim {self.dim}, got {x.shape[1]}")
        pre = x @ self.w1 + self.b1
        h = np.maximum(pre, 0.0)
        r = h @ self.w2 + self.b2
        u = x + r
        norm = np.linalg.norm(u, axis=1, keepdims=True)
        y = u / norm
        # a zero residual leaves the (unit) input untouched bit for bit
        untouched = ~np.any(r, axis=1)
        if untouched.any():
            y[untouched] = x[untouched]
        return y, (x, pre, h, u, norm)

    def backward(self, dy: np.ndarray, cache) -> list[np.ndarray]:
        x, pre, h, u, norm = cache
        y = u / norm
        du = (dy - y * np.sum(y * dy, axis=1, keepdims=True)) / norm
        gw2 = h.T @ du
        gb2 = du.sum(axis=0)
        dh = (du @ self.w2.T) * (pre > 0)
        return [x.T @ dh, dh.sum(axis=0), gw2, gb2]

    def __call__(self, x: np.ndarray) -> np.ndarray:
        x = np.asarray(x, dtype=np.float64)
        if not self.enabled:
            return x
        y, _ = self.forward_batch(x)
        return y[0] if x.ndim == 1 else y

    def round_to_f32(self) -> None:
        self.w1, self.b1, self.w2, self.b2 = (p.astype(np.float32).astype(np.float64) for p in self.params)


def adapter_forward(model: AdapterModel, x: np.ndarray) -> np.ndarray:
    return model(x)


# --------------------------------------------------------------------------
# Triplet mining
# --------------------------------------------------------------------------

@dataclass(frozen=True)
class Triplet:
    query_id: str
    positive: str
    negatives: tuple[str, ...]


def mine_triplets(
    table: EmbeddingTable,
    train_queries: Sequence[QueryRecord],
    query_vecs,
    pool_C: int,
) -> list[Triplet]:
    """One triplet per (query, relevant tool); negatives are the non-relevant
    tools among the query's top-``pool_C`` dense candidates."""
    mat = _as_matrix(query_vecs, train_queries)
    out = []
    for q, idx in zip(train_queries, dense_top_k_batch(mat, table, pool_C)):
        if not q.relevant:
            continue
        negs = tuple(table.ids[i] for i in idx if table.ids[i] not in q.relevant)
        if not negs:
            continue
        for pos in sorted(q.relevant):
            if pos in table:
                out.append(Triplet(q.id, pos, negs))
    if not out:
        raise ValueError("no triplets could be mined (no query has both a positive and a negative)")
    return out


# --------------------------------------------------------------------------
# InfoNCE
# --------------------------------------------------------------------------

def _logsumexp(v: np.ndarray) -> float:
    m = np.max(v)
    return float(m + np.log(np.sum(np.exp(v - m))))


def infonce_loss(
    model: AdapterModel | None,
    query_vec: np.ndarray,
    pos_vec: np.ndarray,
    neg_vecs: np.ndarray,
    in_batch_negs: np.ndarray | None = None,
    tau: float = 0.07,
    include_positive: bool = True,
) -> float:
    """InfoNCE for one query. ``model=None`` scores the raw vectors."""
    if tau <= 0:
        raise ValueError("temperature must be positive")
    negs = [np.atleast_2d(neg_vecs)] if np.size(neg_vecs) else []
    if in_batch_negs is not None and np.size(in_batch_negs):
        negs.append(np.atleast_2d(in_batch_negs))
    docs = np.vstack([np.atleast_2d(pos_vec)] + negs)
    f = model if model is not None else (lambda v: np.asarray(v, dtype=np.float64))
    q = f(np.asarray(query_vec, dtype=np.float64))
    d = f(docs)
    logits = (d @ q) / tau
    denom = logits if include_positive else logits[1:]
    if denom.size == 0:
        raise ValueError("no negatives to contrast against")
    return _logsumexp(denom) - float(logits[0])


def batch_infonce(
    model: AdapterModel,
    q: np.ndarray,
    docs: np.ndarray,
    pos: np.ndarray,
    cands: Sequence[np.ndarray],
    tau: float,
    include_positive: bool = True,
    with_grads: bool = True,
):
    """Mean InfoNCE over a batch, and gradients w.r.t. adapter parameters.

    ``q`` holds the batch's query vectors, ``docs`` every tool vector the batch
    touches, ``pos[j]`` the row of query j's positive in ``docs`` and
    ``cands[j]`` the rows of its negatives.
    """
    if tau <= 0:
        raise ValueError("temperature must be positive")
    nq = q.shape[0]
    y, cache = model.forward_batch(np.vstack([q, docs]))
    aq, ad = y[:nq], y[nq:]
    d_aq = np.zeros_like(aq)
    d_ad = np.zeros_like(ad)
    total = 0.0
    for j in range(nq):
        rows = np.concatenate([[pos[j]], np.asarray(cands[j], dtype=np.int64)])
        logits = ad[rows] @ aq[j] / tau
        if include_positive:
            lse = _logsumexp(logits)
            p = np.exp(logits - lse)
            g = p.copy()
            g[0] -= 1.0
        else:
            lse = _logsumexp(logits[1:])
            g = np.zeros_like(logits)
            g[1:] = np.exp(logits[1:] - lse)
            g[0] = -1.0
        total += lse - logits[0]
        if with_grads:
            g = g / (tau * nq)
            d_aq[j] += g @ ad[rows]
            np.add.at(d_ad, rows, g[:, None] * aq[j][None, :])
    loss = total / nq
    if not with_grads:
        return loss, None
    return loss, model.backward(np.vstack([d_aq, d_ad]), cache)


# --------------------------------------------------------------------------
# Training
# --------------------------------------------------------------------------

@dataclass(frozen=True)
class AdapterTrainConfig:
    lr: float = 1e-5
    tau: float = 0.07
    epochs: int = 5
    batch_size: int = 32
    seed: int = 0
    patience: int = 2
    eval_k: int = 5
    include_positive: bool = True

    def __post_init__(self):
        if self.tau <= 0:
            raise ValueError("tau must be positive")
        if self.epochs < 0 or self.batch_size < 1:
            raise ValueError("bad epoch count or batch size")


@dataclass
class EpochLog:
    train_loss: list[float] = field(default_factory=list)
    val_ndcg: list[float] = field(default_factory=list)
    best_epoch: int = 0  # 0 = the untrained adapter


def recompute_tool_embeddings(model: AdapterModel, base_table: EmbeddingTable) -> EmbeddingTable:
    """Candidate table with every row passed through the adapter (ungated)."""
    if model.dim != base_table.dim:
        raise ValueError(f"adapter dim {model.dim} does not match table dim {base_table.dim}")
    if len(base_table) == 0:
        return base_table.with_generation(base_table.generation, approved=False)
    adapted = model(base_table.wide)
    return EmbeddingTable.normalized(base_table.ids, adapted, base_table.generation)


def adapted_ndcg(model: AdapterModel, table: EmbeddingTable, queries: Sequence[QueryRecord], query_vecs, k: int) -> float:
    keep = [q for q in queries if q.relevant]
    if not keep:
        return 0.0
    rows = {q.id: i for i, q in enumerate(queries)}
    qmat = _as_matrix(query_vecs, queries)[[rows[q.id] for q in keep]]
    adapted_table = recompute_tool_embeddings(model, table)
    hits = dense_top_k_batch(model(qmat), adapted_table, k)
    return float(np.mean([ndcg_at_k([table.ids[i] for i in idx], q.relevant, k) for q, idx in zip(keep, hits)]))


def adapter_train(
    model: AdapterModel,
    triplets: Sequence[Triplet],
    table: EmbeddingTable,
    query_vecs: Mapping[str, np.ndarray],
    config: AdapterTrainConfig = AdapterTrainConfig(),
    val_queries: Sequence[QueryRecord] = (),
    val_vecs=None,
) -> tuple[AdapterModel, EpochLog]:
    """Adam on mean InfoNCE with in-batch and mined negatives.

    After every epoch validation NDCG@``eval_k`` is measured with the adapter on
    both legs; the best epoch's weights are returned (the untrained adapter
    counts as epoch 0, so training never returns something worse on
    validation than where it started).
    """
    model = model.copy()
    log = EpochLog()
    if config.epochs == 0:
        return model, log
    if not triplets:
        raise ValueError("no triplets to train on")
    if not val_queries:
        raise ValueError("a validation split is required for early stopping")
    rng = np.random.default_rng(config.seed)
    opt = Adam(model.params, config.lr)
    positives_of: dict[str, set[str]] = {}
    for t in triplets:
        positives_of.setdefault(t.query_id, set()).add(t.positive)

    best = model.copy()
    best_score = adapted_ndcg(model, table, val_queries, val_vecs, config.eval_k)
    log.val_ndcg.append(best_score)
    bad = 0
    for epoch in range(1, config.epochs + 1):
        order = rng.permutation(len(triplets))
        total, count = 0.0, 0
        for start in range(0, len(order), config.batch_size):
            batch = [triplets[i] for i in order[start:start + config.batch_size]]
            doc_ids: dict[str, int] = {}
            for t in batch:
                for tid in (t.positive, *t.negatives):
                    doc_ids.setdefault(tid, len(doc_ids))
            batch_pos = {t.positive for t in batch}
            cands = []
            for t in batch:
                mined = [doc_ids[n] for n in t.negatives]
                seen = set(t.negatives) | positives_of[t.query_id]
                in_batch = [doc_ids[p] for p in sorted(batch_pos - seen)]
                cands.append(np.array(mined + in_batch, dtype=np.int64))
            q = np.stack([np.asarray(query_vecs[t.query_id], dtype=np.float64) for t in batch])
            docs = np.stack([table.wide[table.index(tid)] for tid in doc_ids])
            pos = np.array([doc_ids[t.positive] for t in batch])
            loss, grads = batch_infonce(model, q, docs, pos, cands, config.tau, config.include_positive)
            if not math.isfinite(loss):
                raise TrainingError(f"non-finite InfoNCE loss at epoch {epoch}")
            opt.step(model.params, grads)
            total += loss * len(batch)
            count += len(batch)
        log.train_loss.append(total / count)
        score = adapted_ndcg(model, table, val_queries, val_vecs, config.eval_k)
        log.val_ndcg.append(score)
        if score > best_score:
            best, best_score, bad, log.best_epoch = model.copy(), score, 0, epoch
        else:
            bad += 1
            if bad >= config.patience:
                break
    best.round_to_f32()
    return best, log


def save_adapter(model: AdapterModel, path: str | Path) -> None:
    header = {"arch": list(model.arch), "seed": model.seed, "residual": True, "dtype": "f32le"}
    with open(path, "wb") as fh:
        fh.write(json.dumps(header).encode("utf-8") + b"\n")
        for p in model.params:
            fh.write(p.astype("<f4").tobytes())


def load_adapter(path: str | Path) -> AdapterModel:
    header, arrays = read_weight_file(path)
    if not header.get("residual", False):
        raise ValueError(f"{path}: not a residual adapter file")
    d, h, _ = header["arch"]
    model = AdapterModel(d, h, header.get("seed", 0))
    model.w1, model.b1, model.w2, model.b2 = arrays
    return model
