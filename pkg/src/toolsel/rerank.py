"""Outcome-feature re-ranking with a [7, 64, 32, 1] MLP.

Feature order (one row per candidate in a dense pool of size C):

0. ``sim``        cosine of query and candidate
1. ``delta_sim``  score gap to the next candidate (0 for the last one)
2. ``cat``        1 if the candidate's category is the pool's modal category
3. ``sr``         success rate of the tool on the query's cluster (0.5 if unseen)
4. ``freq``       tool frequency divided by the corpus maximum
5. ``qlen``       query token count / 100, clipped to [0, 1]
6. ``rank_norm``  0-based pool rank / (C - 1)
"""
from __future__ import annotations

import json
import math
from collections import Counter
from dataclasses import dataclass, field
from pathlib import Path
from typing import Mapping, Sequence

import numpy as np

from .retrieval import CandidateList, tokenize
from .store import ToolRecord

FEATURE_NAMES = ("sim", "delta_sim", "cat", "sr", "freq", "qlen", "rank_norm")
ARCH = (7, 64, 32, 1)
SR_PRIOR = 0.5


class TrainingError(RuntimeError):
    """Training diverged (non-finite loss)."""


# --------------------------------------------------------------------------
# Query clusters and success-rate statistics
# --------------------------------------------------------------------------

def kmeans(x: np.ndarray, k: int, seed: int = 0, max_iter: int = 50) -> tuple[np.ndarray, np.ndarray]:
    """Spherical k-means with k-means++ seeding. Returns (unit centroids, labels)."""
    x = np.asarray(x, dtype=np.float64)
    n = x.shape[0]
    if k <= 0:
        raise ValueError("k must be positive")
    if k > n:
        raise ValueError(f"k={k} exceeds the number of points ({n})")
    rng = np.random.default_rng(seed)
    centers = [x[rng.integers(n)]]
    for _ in range(1, k):
        d2 = np.min(2.0 - 2.0 * (x @ np.array(centers).T), axis=1).clip(min=0.0)
        total = d2.sum()
        idx = rng.choice(n, p=d2 / total) if total > 0 else rng.integers(n)
        centers.append(x[idx])
    c = np.array(centers)
    labels = np.full(n, -1)
    for _ in range(max_iter):
        new = np.argmax(x @ c.T, axis=1)
        if np.array_equal(new, labels):
            break
        labels = new
        for j in range(k):
            members = x[labels == j]
            if len(members):
                m = members.sum(axis=0)
                norm = np.linalg.norm(m)
                if norm > 0:
                    c[j] = m / norm
    return c / np.linalg.norm(c, axis=1, keepdims=True), labels


@dataclass
class ClusterStats:
    centroids: np.ndarray
    success: dict[tuple[int, str], int] = field(default_factory=dict)
    total: dict[tuple[int, str], int] = field(default_factory=dict)

    @property
    def k(self) -> int:
        return self.centroids.shape[0]

    def assign(self, query_vec: np.ndarray) -> int:
        return int(np.argmax(self.centroids @ np.asarray(query_vec, dtype=np.float64)))

    def record(self, cluster: int, tool_id: str, outcome: int) -> None:
        key = (cluster, tool_id)
        self.total[key] = self.total.get(key, 0) + 1
        self.success[key] = self.success.get(key, 0) + int(outcome)

    def success_rate(self, cluster: int, tool_id: str) -> float:
        n = self.total.get((cluster, tool_id), 0)
        if n == 0:
            return SR_PRIOR
        return self.success.get((cluster, tool_id), 0) / n

    def to_json(self) -> dict:
        return {
            "centroids": self.centroids.tolist(),
            "counts": [[c, t, self.success.get((c, t), 0), n] for (c, t), n in sorted(self.total.items())],
        }

    @classmethod
    def from_json(cls, obj: Mapping) -> "ClusterStats":
        stats = cls(np.asarray(obj["centroids"], dtype=np.float64))
        for c, t, s, n in obj["counts"]:
            stats.success[(int(c), t)] = int(s)
            stats.total[(int(c), t)] = int(n)
        return stats


def default_cluster_count(n_train: int) -> int:
    return max(1, min(32, math.ceil(n_train / 50)))


def build_clusters(
    train_query_vecs: np.ndarray,
    k: int,
    pools: Sequence[CandidateList] | None = None,
    relevant: Sequence[frozenset[str]] | None = None,
    seed: int = 0,
) -> ClusterStats:
    """Cluster training queries and tally outcomes of their retrieved candidates.

    ``pools[i]`` holds query i's retrieved candidates and ``relevant[i]`` its
    ground truth; without them only centroids are fitted.
    """
    centroids, labels = kmeans(train_query_vecs, k, seed=seed)
    stats = ClusterStats(centroids)
    if pools is not None:
        for c, pool, rel in zip(labels, pools, relevant):
            for tid in pool.ids:
                stats.record(int(c), tid, int(tid in rel))
    return stats


# --------------------------------------------------------------------------
# Features
# --------------------------------------------------------------------------

def extract_features(
    query_text: str,
    query_vec: np.ndarray,
    candidates: CandidateList,
    stats: ClusterStats,
    tools: Mapping[str, ToolRecord],
    max_freq: int | None = None,
) -> np.ndarray:
    """Feature matrix of shape (len(candidates), 7)."""
    n = len(candidates)
    if n == 0:
        return np.zeros((0, len(FEATURE_NAMES)))
    if max_freq is None:
        max_freq = max((t.freq for t in tools.values()), default=0)
    scores = np.asarray(candidates.scores, dtype=np.float64)
    cluster = stats.assign(query_vec)
    cats = [tools[t].category for t in candidates.ids]
    named = Counter(c for c in cats if c)
    modal = named.most_common(1)[0][0] if named else None
    qlen = min(1.0, len(tokenize(query_text)) / 100.0)

    feats = np.empty((n, len(FEATURE_NAMES)))
    feats[:, 0] = scores
    feats[:-1, 1] = scores[:-1] - scores[1:]
    feats[-1, 1] = 0.0
    for i, tid in enumerate(candidates.ids):
        feats[i, 2] = 1.0 if modal is not None and cats[i] == modal else 0.0
        feats[i, 3] = stats.success_rate(cluster, tid)
        feats[i, 4] = tools[tid].freq / max_freq if max_freq > 0 else 0.0
    feats[:, 5] = qlen
    feats[:, 6] = np.arange(n) / (n - 1) if n > 1 else 0.0
    return feats


# --------------------------------------------------------------------------
# MLP
# --------------------------------------------------------------------------

def _sigmoid(z):
    return 0.5 * (1.0 + np.tanh(0.5 * z))


def bce_with_logits(z: np.ndarray, y: np.ndarray) -> float:
    # log(1 + e^z) - y z, stable for both signs
    return float(np.mean(np.logaddexp(0.0, z) - y * z))


class RerankMLP:
    """Dense ReLU network with a sigmoid output. Parameters are float64 while
    training and rounded to float32 when training finishes or on save."""

    def __init__(self, arch: Sequence[int] = ARCH, seed: int = 0, dropout: float = 0.1):
        self.arch = tuple(arch)
        self.seed = seed
        self.dropout = dropout
        rng = np.random.default_rng(seed)
        self.weights: list[np.ndarray] = []
        self.biases: list[np.ndarray] = []
        for fan_in, fan_out in zip(self.arch[:-1], self.arch[1:]):
            self.weights.append(rng.standard_normal((fan_in, fan_out)) * math.sqrt(2.0 / fan_in))
            self.biases.append(np.zeros(fan_out))

    @classmethod
    def zeros(cls, arch: Sequence[int] = ARCH) -> "RerankMLP":
        m = cls(arch)
        m.weights = [np.zeros_like(w) for w in m.weights]
        return m

    @property
    def params(self) -> list[np.ndarray]:
        out = []
        for w, b in zip(self.weights, self.biases):
            out += [w, b]
        return out

    def n_params(self) -> int:
        return sum(p.size for p in self.params)

    def copy(self) -> "RerankMLP":
        m = RerankMLP.__new__(RerankMLP)
        m.arch, m.seed, m.dropout = self.arch, self.seed, self.dropout
        m.weights = [w.copy() for w in self.weights]
        m.biases = [b.copy() for b in self.biases]
        return m

    def round_to_f32(self) -> None:
        self.weights = [w.astype(np.float32).astype(np.float64) for w in self.weights]
        self.biases = [b.astype(np.float32).astype(np.float64) for b in self.biases]

    def _forward(self, x: np.ndarray, rng: np.random.Generator | None = None):
        """Logits plus the cache backprop needs; ``rng`` enables dropout."""
        a = np.asarray(x, dtype=np.float64)
        cache = []
        last = len(self.weights) - 1
        for i, (w, b) in enumerate(zip(self.weights, self.biases)):
            z = a @ w + b
            if i == last:
                cache.append((a, None, None))
                return z[:, 0], cache
            h = np.maximum(z, 0.0)
            mask = None
            if rng is not None and self.dropout > 0:
                mask = (rng.random(h.shape) >= self.dropout) / (1.0 - self.dropout)
                h = h * mask
            cache.append((a, z, mask))
            a = h

    def logits(self, x: np.ndarray) -> np.ndarray:
        return self._forward(np.atleast_2d(x))[0]

    def forward(self, x: np.ndarray) -> np.ndarray:
        """Probabilities in (0, 1); dropout is never applied here."""
        return _sigmoid(self.logits(x))

    def loss_and_grads(self, x: np.ndarray, y: np.ndarray, rng: np.random.Generator | None = None):
        """Mean BCE and its gradient for every parameter, ordered like ``params``."""
        y = np.asarray(y, dtype=np.float64)
        z, cache = self._forward(np.atleast_2d(x), rng)
        loss = bce_with_logits(z, y)
        delta = ((_sigmoid(z) - y) / len(y))[:, None]
        grads: list[np.ndarray] = []
        for i in range(len(self.weights) - 1, -1, -1):
            a, _, _ = cache[i]
            gw = a.T @ delta
            gb = delta.sum(axis=0)
            grads = [gw, gb] + grads
            if i > 0:
                _, z_prev, mask = cache[i - 1]
                delta = delta @ self.weights[i].T
                if mask is not None:
                    delta = delta * mask
                delta = delta * (z_prev > 0)
        return loss, grads


def mlp_forward(model: RerankMLP, features: np.ndarray) -> np.ndarray:
    return model.forward(features)


@dataclass(frozen=True)
class RerankTrainConfig:
    lr: float = 1e-3
    epochs: int = 50
    batch_size: int = 64
    seed: int = 0
    alpha_pool: int = 5
    patience: int = 5
    dropout: float = 0.1

    def __post_init__(self):
        if self.alpha_pool < 1:
            raise ValueError("alpha_pool must be >= 1")
        if self.batch_size < 1 or self.epochs < 0:
            raise ValueError("bad batch size or epoch count")


class Adam:
    def __init__(self, params: list[np.ndarray], lr: float, b1=0.9, b2=0.999, eps=1e-8):
        self.lr, self.b1, self.b2, self.eps = lr, b1, b2, eps
        self.m = [np.zeros_like(p) for p in params]
        self.v = [np.zeros_like(p) for p in params]
        self.t = 0

    def step(self, params: list[np.ndarray], grads: list[np.ndarray]) -> None:
        self.t += 1
        c1 = 1.0 - self.b1 ** self.t
        c2 = 1.0 - self.b2 ** self.t
        for p, g, m, v in zip(params, grads, self.m, self.v):
            m *= self.b1
            m += (1.0 - self.b1) * g
            v *= self.b2
            v += (1.0 - self.b2) * g * g
            p -= self.lr * (m / c1) / (np.sqrt(v / c2) + self.eps)


@dataclass
class TrainLog:
    train_loss: list[float] = field(default_factory=list)
    val_loss: list[float] = field(default_factory=list)
    best_epoch: int = 0


def mlp_train(
    model: RerankMLP,
    x: np.ndarray,
    y: np.ndarray,
    config: RerankTrainConfig = RerankTrainConfig(),
    x_val: np.ndarray | None = None,
    y_val: np.ndarray | None = None,
) -> tuple[RerankMLP, TrainLog]:
    """Mini-batch Adam on mean BCE, early-stopped on validation BCE if given."""
    x = np.asarray(x, dtype=np.float64)
    y = np.asarray(y, dtype=np.float64)
    if not np.all(np.isfinite(x)):
        raise ValueError("non-finite training features")
    if not np.all((y == 0) | (y == 1)):
        raise ValueError("labels must be 0 or 1")
    model = model.copy()
    model.dropout = config.dropout
    rng = np.random.default_rng(config.seed)
    opt = Adam(model.params, config.lr)
    log = TrainLog()
    best, best_val, bad = model.copy(), math.inf, 0
    for epoch in range(config.epochs):
        order = rng.permutation(len(y))
        total = 0.0
        for start in range(0, len(y), config.batch_size):
            idx = order[start:start + config.batch_size]
            loss, grads = model.loss_and_grads(x[idx], y[idx], rng)
            if not math.isfinite(loss):
                raise TrainingError(f"non-finite loss at epoch {epoch}, batch starting {start}")
            opt.step(model.params, grads)
            total += loss * len(idx)
        log.train_loss.append(total / max(1, len(y)))
        if x_val is not None and len(y_val):
            val = bce_with_logits(model.logits(x_val), np.asarray(y_val, dtype=np.float64))
            log.val_loss.append(val)
            if val < best_val - 1e-9:
                best, best_val, bad, log.best_epoch = model.copy(), val, 0, epoch
            else:
                bad += 1
                if bad >= config.patience:
                    break
    if x_val is None or not log.val_loss:
        best, log.best_epoch = model, max(0, len(log.train_loss) - 1)
    best.round_to_f32()
    return best, log


def save_mlp(model: RerankMLP, path: str | Path, extra: Mapping | None = None) -> None:
    header = {"arch": list(model.arch), "seed": model.seed, "dropout": model.dropout, "dtype": "f32le"}
    header.update(extra or {})
    with open(path, "wb") as fh:
        fh.write(json.dumps(header).encode("utf-8") + b"\n")
        for w, b in zip(model.weights, model.biases):
            fh.write(w.astype("<f4").tobytes())
            fh.write(b.astype("<f4").tobytes())


def read_weight_file(path: str | Path) -> tuple[dict, list[np.ndarray]]:
    """Header and layer-major (W, b, W, b, ...) arrays of a weight file."""
    data = Path(path).read_bytes()
    nl = data.find(b"\n")
    header = json.loads(data[:nl].decode("utf-8"))
    arch = header["arch"]
    arrays, off = [], nl + 1
    for fan_in, fan_out in zip(arch[:-1], arch[1:]):
        for shape in ((fan_in, fan_out), (fan_out,)):
            n = int(np.prod(shape)) * 4
            if off + n > len(data):
                raise ValueError(f"{path}: truncated weight payload")
            arrays.append(np.frombuffer(data[off:off + n], dtype="<f4").reshape(shape).astype(np.float64))
            off += n
    if off != len(data):
        raise ValueError(f"{path}: trailing bytes after weight payload")
    return header, arrays


def load_mlp(path: str | Path) -> RerankMLP:
    header, arrays = read_weight_file(path)
    model = RerankMLP(header["arch"], seed=header.get("seed", 0), dropout=header.get("dropout", 0.1))
    model.weights = arrays[0::2]
    model.biases = arrays[1::2]
    return model


# --------------------------------------------------------------------------
# Re-ranking
# --------------------------------------------------------------------------

def rerank_candidates(
    model: RerankMLP,
    query_text: str,
    query_vec: np.ndarray,
    pool: CandidateList,
    K: int,
    stats: ClusterStats,
    tools: Mapping[str, ToolRecord],
    max_freq: int | None = None,
) -> CandidateList:
    """Re-score a dense pool with the MLP and keep the best ``K``.

    The sort is stable, so candidates with equal model scores keep their
    dense order.
    """
    if len(pool) == 0:
        return CandidateList((), pool.query_id)
    probs = model.forward(extract_features(query_text, query_vec, pool, stats, tools, max_freq))
    order = sorted(range(len(pool)), key=lambda i: -probs[i])
    return CandidateList(tuple((pool.ids[i], float(probs[i])) for i in order[:K]), pool.query_id)


@dataclass
class Reranker:
    """A trained model bundled with the statistics its features need."""

    model: RerankMLP
    stats: ClusterStats
    alpha_pool: int = 5

    def rerank(self, query_text, query_vec, pool, K, tools: Mapping[str, ToolRecord], max_freq=None):
        return rerank_candidates(self.model, query_text, query_vec, pool, K, self.stats, tools, max_freq)

    def save(self, path: str | Path) -> None:
        save_mlp(self.model, path, {"alpha_pool": self.alpha_pool})
        with open(str(path) + ".stats.json", "w", encoding="utf-8") as fh:
            json.dump(self.stats.to_json(), fh)

    @classmethod
    def load(cls, path: str | Path) -> "Reranker":
        header, _ = read_weight_file(path)
        with open(str(path) + ".stats.json", encoding="utf-8") as fh:
            stats = ClusterStats.from_json(json.load(fh))
        return cls(load_mlp(path), stats, header.get("alpha_pool", 5))
