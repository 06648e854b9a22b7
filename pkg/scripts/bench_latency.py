"""Selection latency percentiles over a synthetic catalogue on one core.

    python scripts/bench_latency.py --tools 2500 --dim 384 --reps 1000
"""
import argparse
import json

import numpy as np

from toolsel.embed import SyntheticEmbedder, embed_corpus
from toolsel.evaluate import bench_latency
from toolsel.pipeline import Engine
from toolsel.rerank import ClusterStats, Reranker, RerankMLP
from toolsel.synth import bench_queries, bench_tools


def main(argv=None):
    p = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    p.add_argument("--tools", type=int, default=2500)
    p.add_argument("--dim", type=int, default=384)
    p.add_argument("--k", type=int, default=5)
    p.add_argument("--reps", type=int, default=1000)
    p.add_argument("--warmup", type=int, default=20)
    p.add_argument("--stages", nargs="+", default=["se", "s2", "bm25", "lexical"])
    args = p.parse_args(argv)

    tools = bench_tools(args.tools)
    emb = SyntheticEmbedder(args.dim, 0)
    table = embed_corpus(emb, tools)
    queries = bench_queries(200)
    stats = ClusterStats(np.random.default_rng(0).standard_normal((8, args.dim)))
    reranker = Reranker(RerankMLP(seed=0), stats, alpha_pool=5)
    results = {}
    for stage in args.stages:
        engine = Engine(tools, emb, table, stage, args.k, reranker=reranker if stage == "s2" else None)
        rep = bench_latency(lambda q: engine.select(q, args.k), queries, args.reps, args.warmup)
        results[stage] = rep.to_dict()
        print(f"{stage:<8} p50 {rep.p50_ms:7.3f} ms   p99 {rep.p99_ms:7.3f} ms   mean {rep.mean_ms:7.3f} ms")
    print(json.dumps({"tools": args.tools, "dim": args.dim, "K": args.k, "results": results}, indent=2))


if __name__ == "__main__":
    main()
