"""Write a synthetic topic corpus (tools.jsonl, queries.jsonl) to a data directory.

    python scripts/make_synthetic_data.py /tmp/toolsel-demo
"""
import argparse

from toolsel.store import save_corpus
from toolsel.synth import topic_corpus


def main(argv=None):
    p = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    p.add_argument("data_dir")
    p.add_argument("--topics", type=int, default=8)
    p.add_argument("--queries-per-topic", type=int, default=40)
    p.add_argument("--seed", type=int, default=0)
    args = p.parse_args(argv)
    sc = topic_corpus(n_topics=args.topics, queries_per_topic=args.queries_per_topic, seed=args.seed)
    save_corpus(sc.corpus, args.data_dir)
    print(f"wrote {len(sc.corpus.tools)} tools and {len(sc.corpus.queries)} queries to {args.data_dir}")


if __name__ == "__main__":
    main()
