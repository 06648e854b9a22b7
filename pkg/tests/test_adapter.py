import math
import time

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from oracles import central_difference, rel_error, unit_rows
from toolsel.adapter import (AdapterModel, AdapterTrainConfig, adapter_forward, adapter_train, batch_infonce,
                             infonce_loss, load_adapter, mine_triplets, recompute_tool_embeddings,
                             save_adapter)
from toolsel.embed import embed_corpus
from toolsel.evaluate import SplitSpec, split_dataset, subsplit
from toolsel.retrieval import dense_top_k
from toolsel.store import EmbeddingTable, QueryRecord
from toolsel.synth import decoy_pair_scenario


def _perturbed(dim, hidden, seed, scale=0.3):
    m = AdapterModel(dim, hidden, seed)
    rng = np.random.default_rng(seed + 1)
    m.b1[:] = rng.normal(0, 0.1, hidden)
    m.w2[:] = rng.normal(0, scale / math.sqrt(hidden), (hidden, dim))
    m.b2[:] = rng.normal(0, 0.05, dim)
    return m


def test_parameter_count_d384():
    m = AdapterModel(384)
    assert m.arch == (384, 256, 384)
    assert m.n_params() == 197_248


def test_zero_init_is_exact_identity():
    m = AdapterModel(32, seed=3)
    x = unit_rows(np.random.default_rng(0), 10, 32)
    assert adapter_forward(m, x).tobytes() == x.tobytes()
    assert adapter_forward(m, x[0]).tobytes() == x[0].tobytes()


def test_output_dim_and_norm():
    m = _perturbed(12, 16, 0)
    y = m(unit_rows(np.random.default_rng(1), 5, 12))
    assert y.shape == (5, 12)
    np.testing.assert_allclose(np.linalg.norm(y, axis=1), 1.0, atol=1e-12)


def test_infonce_ln2_when_tied():
    q = np.array([1.0, 0.0, 0.0])
    pos = np.array([0.6, 0.8, 0.0])
    neg = np.array([0.6, 0.0, 0.8])
    assert infonce_loss(None, q, pos, neg[None]) == pytest.approx(math.log(2))


@given(st.integers(1, 12), st.floats(0.01, 1.0))
def test_infonce_ln_n_when_all_equal(n_neg, tau):
    v = np.array([1.0, 0.0])
    loss = infonce_loss(None, v, v, np.tile(v, (n_neg, 1)), tau=tau)
    assert loss == pytest.approx(math.log(n_neg + 1))


@given(st.integers(0, 2**32), st.integers(1, 10))
@settings(max_examples=60, deadline=None)
def test_infonce_non_negative(seed, n_neg):
    rng = np.random.default_rng(seed)
    q, p, *negs = unit_rows(rng, n_neg + 2, 8)
    assert infonce_loss(None, q, p, np.array(negs)) >= 0.0


def test_infonce_tau_validation():
    v = np.array([1.0, 0.0])
    with pytest.raises(ValueError):
        infonce_loss(None, v, v, v[None], tau=0.0)


def test_conventions_share_ordering():
    rng = np.random.default_rng(0)
    q = unit_rows(rng, 1, 6)[0]
    configs = [unit_rows(rng, 4, 6) for _ in range(25)]
    incl = [infonce_loss(None, q, c[0], c[1:], include_positive=True) for c in configs]
    excl = [infonce_loss(None, q, c[0], c[1:], include_positive=False) for c in configs]
    assert list(np.argsort(incl)) == list(np.argsort(excl))


def test_identity_adapter_has_nonzero_gradients():
    m = AdapterModel(8, 16, 0)
    rng = np.random.default_rng(0)
    q, docs = unit_rows(rng, 2, 8), unit_rows(rng, 5, 8)
    loss, grads = batch_infonce(m, q, docs, np.array([0, 1]), [np.array([2, 3]), np.array([4])], 0.07)
    assert loss > 0
    assert np.any(grads[2] != 0) and np.any(grads[3] != 0)


def test_batch_matches_single_query_loss():
    m = _perturbed(8, 16, 2)
    rng = np.random.default_rng(3)
    q, docs = unit_rows(rng, 2, 8), unit_rows(rng, 5, 8)
    cands = [np.array([2, 3]), np.array([4, 0])]
    loss, _ = batch_infonce(m, q, docs, np.array([0, 1]), cands, 0.1, with_grads=False)
    single = [infonce_loss(m, q[0], docs[0], docs[[2, 3]], tau=0.1),
              infonce_loss(m, q[1], docs[1], docs[[4, 0]], tau=0.1)]
    assert loss == pytest.approx(np.mean(single), rel=1e-12)


def _grad_check(dim, hidden, draws, coords_per_param, include_positive, seed=0):
    rng = np.random.default_rng(seed)
    worst = 0.0
    for draw in range(draws):
        m = _perturbed(dim, hidden, seed * 1000 + draw)
        nq, nd = 3, 6
        q, docs = unit_rows(rng, nq, dim), unit_rows(rng, nd, dim)
        pos = rng.choice(nd, nq)
        cands = [np.array([i for i in rng.permutation(nd)[:3] if i != pos[j]]) for j in range(nq)]
        tau = rng.uniform(0.05, 0.5)

        def loss():
            return batch_infonce(m, q, docs, pos, cands, tau, include_positive, with_grads=False)[0]

        _, grads = batch_infonce(m, q, docs, pos, cands, tau, include_positive)
        for i, p in enumerate(m.params):
            idx = range(p.size) if coords_per_param is None else rng.choice(p.size, coords_per_param, replace=False)
            for j in idx:
                num = central_difference(loss, m.params, i, j)
                worst = max(worst, rel_error(grads[i].reshape(-1)[j], num))
    return worst


@pytest.mark.parametrize("include_positive", [True, False])
def test_gradients_all_parameters_small_width(include_positive):
    assert _grad_check(6, 8, 100, None, include_positive) <= 1e-3


def test_gradients_sampled_full_width():
    assert _grad_check(384, 256, 100, 3, True, seed=1) <= 1e-3


# -- mining and training ----------------------------------------------------

@pytest.fixture(scope="module")
def decoys():
    sc = decoy_pair_scenario()
    table = embed_corpus(sc.embedder, sc.corpus.tools)
    train, test = split_dataset(sc.corpus.queries, SplitSpec(0))
    fit, val = subsplit(train)
    return sc, table, fit, val, test


def _twin(tool_id):
    return ("b" if tool_id[0] == "a" else "a") + tool_id[1:]


def test_mining_finds_the_decoy(decoys):
    sc, table, fit, _, _ = decoys
    triplets = mine_triplets(table, fit, sc.query_vecs(), 5)
    assert triplets
    for t in triplets:
        assert t.positive not in t.negatives
        assert _twin(t.positive) in t.negatives


def test_mining_skips_fully_relevant_pool():
    table = EmbeddingTable(("a", "b"), np.eye(2))
    q_all = QueryRecord("q1", "x", frozenset({"a", "b"}))
    q_ok = QueryRecord("q2", "y", frozenset({"a"}))
    vecs = {"q1": np.array([1.0, 0.0]), "q2": np.array([1.0, 0.0])}
    trips = mine_triplets(table, [q_all, q_ok], vecs, 2)
    assert [t.query_id for t in trips] == ["q2"]
    with pytest.raises(ValueError):
        mine_triplets(table, [q_all], vecs, 2)


def _margin(model, table, queries, vecs):
    out = []
    for q in queries:
        (pos,) = q.relevant
        aq = model(vecs[q.id])
        out.append(aq @ model(table.wide[table.index(pos)]) - aq @ model(table.wide[table.index(_twin(pos))]))
    return float(np.mean(out))


def test_training_widens_decoy_margin(decoys):
    sc, table, fit, val, test = decoys
    vecs = sc.query_vecs()
    triplets = mine_triplets(table, fit, vecs, 5)
    m0 = AdapterModel(table.dim, seed=0)
    m, log = adapter_train(m0, triplets, table, vecs, AdapterTrainConfig(lr=1e-3, epochs=5), val, vecs)
    assert log.best_epoch > 0
    assert _margin(m, table, test, vecs) > _margin(m0, table, test, vecs) + 0.05


def test_training_default_lr_moves_in_right_direction(decoys):
    sc, table, fit, val, test = decoys
    vecs = sc.query_vecs()
    m0 = AdapterModel(table.dim)
    m, log = adapter_train(m0, mine_triplets(table, fit, vecs, 5), table, vecs, AdapterTrainConfig(), val, vecs)
    assert log.val_ndcg[log.best_epoch] >= log.val_ndcg[0]


def test_zero_epochs_returns_unchanged(decoys):
    sc, table, fit, val, _ = decoys
    m0 = _perturbed(table.dim, 16, 0)
    m, log = adapter_train(m0, [], table, sc.query_vecs(), AdapterTrainConfig(epochs=0), val, sc.query_vecs())
    for a, b in zip(m.params, m0.params):
        np.testing.assert_array_equal(a, b)
    assert log.train_loss == []


def test_best_epoch_never_worse_than_start(decoys):
    sc, table, fit, val, _ = decoys
    vecs = sc.query_vecs()
    # a destructive learning rate: early stopping must fall back to the identity
    m, log = adapter_train(AdapterModel(table.dim), mine_triplets(table, fit, vecs, 5), table, vecs,
                           AdapterTrainConfig(lr=5.0, epochs=3), val, vecs)
    assert log.val_ndcg[log.best_epoch] == max(log.val_ndcg)
    assert log.val_ndcg[log.best_epoch] >= log.val_ndcg[0]


# -- table recompute, rollback, files ---------------------------------------

def test_identity_recompute_matches_table():
    rng = np.random.default_rng(0)
    t = EmbeddingTable.normalized([f"t{i}" for i in range(20)], rng.standard_normal((20, 16)))
    out = recompute_tool_embeddings(AdapterModel(16), t)
    np.testing.assert_allclose(out.wide, t.wide, atol=1e-7)
    assert out.ids == t.ids


def test_recompute_is_drop_in():
    rng = np.random.default_rng(1)
    t = EmbeddingTable.normalized([f"t{i}" for i in range(30)], rng.standard_normal((30, 16)))
    m = _perturbed(16, 256, 0)
    out = recompute_tool_embeddings(m, t)
    assert out.dim == t.dim
    res = dense_top_k(m(unit_rows(rng, 1, 16)[0]), out, 5)
    assert len(res) == 5


def test_recompute_2413_rows_under_two_seconds():
    rng = np.random.default_rng(2)
    t = EmbeddingTable.normalized([f"t{i}" for i in range(2413)], rng.standard_normal((2413, 384)))
    m = _perturbed(384, 256, 0)
    t0 = time.perf_counter()
    recompute_tool_embeddings(m, t)
    assert time.perf_counter() - t0 < 2.0


def test_disabled_adapter_restores_rankings_bit_exact():
    rng = np.random.default_rng(3)
    t = EmbeddingTable.normalized([f"t{i}" for i in range(40)], rng.standard_normal((40, 16)))
    m = _perturbed(16, 32, 0)
    m.enabled = False
    for q in unit_rows(rng, 20, 16):
        a, b = dense_top_k(m(q), t, 5), dense_top_k(q, t, 5)
        assert a.entries == b.entries


def test_save_load_round_trip(tmp_path):
    m = _perturbed(10, 12, 0)
    m.round_to_f32()
    save_adapter(m, tmp_path / "a.bin")
    back = load_adapter(tmp_path / "a.bin")
    assert back.arch == (10, 12, 10)
    for a, b in zip(m.params, back.params):
        np.testing.assert_array_equal(a, b)


def test_load_rejects_non_residual(tmp_path):
    from toolsel.rerank import RerankMLP, save_mlp

    save_mlp(RerankMLP(), tmp_path / "m.bin")
    with pytest.raises(ValueError):
        load_adapter(tmp_path / "m.bin")
