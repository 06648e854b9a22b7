import csv
import io
import time

import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from toolsel.embed import embed_corpus
from toolsel.evaluate import (SplitSpec, bench_latency, evaluate_method, evaluate_rankings, reports_to_csv,
                              split_dataset, subsplit)
from toolsel.store import Corpus, QueryRecord, ToolRecord
from toolsel.synth import topic_corpus


def _queries(n):
    return [QueryRecord(f"q{i}", f"text {i}", frozenset()) for i in range(n)]


def test_split_sizes():
    train, test = split_dataset(_queries(4287), SplitSpec(0))
    assert (len(train), len(test)) == (3000, 1287)
    train, test = split_dataset(_queries(10), SplitSpec(0))
    assert (len(train), len(test)) == (7, 3)


@given(st.integers(10, 500), st.integers(0, 2**32), st.floats(0.05, 0.95))
@settings(max_examples=50, deadline=None)
def test_split_deterministic_disjoint_covering(n, seed, frac):
    qs = _queries(n)
    a = split_dataset(qs, SplitSpec(seed, frac))
    b = split_dataset(qs, SplitSpec(seed, frac))
    assert [q.id for q in a[0]] == [q.id for q in b[0]]
    ids_train, ids_test = {q.id for q in a[0]}, {q.id for q in a[1]}
    assert not ids_train & ids_test
    assert ids_train | ids_test == {q.id for q in qs}


def test_split_errors():
    with pytest.raises(ValueError):
        split_dataset(_queries(9))
    with pytest.raises(ValueError):
        SplitSpec(train_frac=1.0)
    with pytest.raises(ValueError):
        SplitSpec(rerank_val_frac=1.0)


def test_subsplit_prefix_cut():
    train, _ = split_dataset(_queries(4287), SplitSpec(0))
    fit, val = subsplit(train, 0.15)
    assert (len(fit), len(val)) == (2550, 450)
    assert fit + val == train


def test_report_has_nine_metric_fields_and_excludes_empty():
    qs = [QueryRecord("a", "x", frozenset({"t1"})), QueryRecord("b", "y", frozenset()),
          QueryRecord("c", "z", frozenset({"t2", "t3"}))]
    rep = evaluate_rankings("se", [["t1", "t2"], ["t1"], ["t3", "t9", "t2"]], qs)
    fields = rep.metric_fields()
    assert sorted(fields) == sorted(f"{m}@{k}" for m in ("recall", "precision", "ndcg") for k in (1, 3, 5))
    assert rep.n_queries == 2 and rep.n_excluded == 1
    assert fields["recall@1"] == pytest.approx((1 + 0.5) / 2)
    assert fields["recall@3"] == pytest.approx(1.0)
    assert rep.mrr == pytest.approx(1.0)
    assert len(rep.per_query) == 2
    assert all(0 <= v <= 1 for v in fields.values())


def test_random_baseline_four_tools():
    tools = [ToolRecord(f"t{i}", f"t{i}", f"tool {i}") for i in range(4)]
    queries = [QueryRecord(f"q{i}", f"query number {i}", frozenset({f"t{i % 4}"})) for i in range(10_000)]
    rep = evaluate_method("random", Corpus(tools, queries), SplitSpec(0, train_frac=0.01), ks=(1,))
    assert rep.recall[1] == pytest.approx(0.25, abs=0.02)


def test_evaluate_method_deterministic_and_ordered():
    sc = topic_corpus(seed=5, queries_per_topic=20)
    base = embed_corpus(sc.embedder, sc.corpus.tools)
    a = evaluate_method("oats_s1", sc.corpus, SplitSpec(3), embedder=sc.embedder, base_table=base)
    b = evaluate_method("oats_s1", sc.corpus, SplitSpec(3), embedder=sc.embedder, base_table=base)
    assert a.to_dict(per_query=True) == b.to_dict(per_query=True)
    assert a.method == "oats_s1" and a.seed == 3
    assert a.recall[1] <= a.recall[3] <= a.recall[5]


def test_evaluate_method_needs_embedder():
    sc = topic_corpus(seed=5)
    with pytest.raises(ValueError):
        evaluate_method("se", sc.corpus, SplitSpec(0))
    with pytest.raises(ValueError):
        evaluate_method("s7", sc.corpus, SplitSpec(0))


def test_csv_layout():
    qs = [QueryRecord("a", "x", frozenset({"t1"}))]
    text = reports_to_csv([evaluate_rankings("bm25", [["t1"]], qs)])
    rows = list(csv.reader(io.StringIO(text)))
    assert rows[0] == ["method", "R@1", "R@3", "R@5", "NDCG@5", "MRR"]
    assert rows[1][0] == "bm25"


def test_bench_latency_report():
    rep = bench_latency(lambda q: time.sleep(0), ["a", "b"], repetitions=150, warmup=2, pin=False)
    assert rep.n_samples == 150
    assert rep.p50_ms <= rep.p99_ms
    with pytest.raises(ValueError):
        bench_latency(lambda q: None, ["a"], repetitions=99)
