"""Parallel-chunk capacity and score-pair counts across KV budgets.

    python3 scripts/throughput.py --chunk-width 120 --query-len 8 --budgets full,90,60,30
"""

import argparse

import numpy as np

from chunkcomp import bench
from chunkcomp.model import ModelConfig, init_from_seed
from chunkcomp.pipeline import PipelineSettings, run_pipeline


def main():
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--chunk-width", type=int, default=120)
    ap.add_argument("--query-len", type=int, default=8)
    ap.add_argument("--context-len", type=int, default=960)
    ap.add_argument("--budgets", default="full,90,60,30")
    ap.add_argument("--memory-mib", type=int, default=64)
    ap.add_argument("--seed", type=int, default=0)
    args = ap.parse_args()

    cfg = ModelConfig()
    weights = init_from_seed(cfg, args.seed)
    rng = np.random.default_rng(args.seed)
    context = rng.integers(0, cfg.vocab_size, args.context_len)
    query = rng.integers(0, cfg.vocab_size, args.query_len)
    memory = args.memory_mib * 2 ** 20

    print(f"{'budget':>6} {'rows':>5} {'bytes/chunk':>11} {'kv share':>8} {'chunks':>6} {'ratio':>6} "
          f"{'prefill pairs':>13} {'mono pairs':>11} {'prefill ms':>10}")
    base = None
    for text in args.budgets.split(","):
        budget = None if text == "full" else int(text)
        res = run_pipeline(weights, context, query,
                           PipelineSettings(chunk_width=args.chunk_width, kv_budget=budget, mode="compression"))
        rep = bench.cost_report(cfg, res, budget, memory)
        base = base or rep.max_parallel_chunks
        print(f"{text:>6} {rep.retained_rows_per_chunk:5d} {rep.per_chunk_bytes:11d} {rep.kv_fraction:8.3f} "
              f"{rep.max_parallel_chunks:6d} {rep.max_parallel_chunks / base:6.3f} {rep.score_pairs_prefill:13d} "
              f"{rep.score_pairs_monolithic:11d} {rep.wall_prefill_ms:10.1f}")


if __name__ == "__main__":
    main()
