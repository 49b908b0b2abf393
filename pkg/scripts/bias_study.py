"""Attention-pattern census and outlier counts under each eviction mode.

Encodes random token streams with a seeded toy model, then reports how many
heads fall into each pattern and how many high-score outliers survive.

    python3 scripts/bias_study.py --seed 0 --gain 2.0
"""

import argparse
from collections import Counter

import numpy as np

from chunkcomp import analysis
from chunkcomp.model import ModelConfig, init_from_seed
from chunkcomp.pipeline import PipelineSettings, run_pipeline


def main():
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--seed", type=int, default=0)
    ap.add_argument("--gain", type=float, default=1.0)
    ap.add_argument("--context-len", type=int, default=480)
    ap.add_argument("--query-len", type=int, default=16)
    ap.add_argument("--chunk-width", type=int, default=96)
    ap.add_argument("--lambda-mult", type=float, default=5.0)
    args = ap.parse_args()

    cfg = ModelConfig()
    weights = init_from_seed(cfg, args.seed, args.gain)
    rng = np.random.default_rng(args.seed)
    context = rng.integers(0, cfg.vocab_size, args.context_len)
    query = rng.integers(0, cfg.vocab_size, args.query_len)

    for mode in ("none", "calibration"):
        res = run_pipeline(weights, context, query,
                           PipelineSettings(chunk_width=args.chunk_width, mode=mode, lambda_mult=args.lambda_mult,
                                            layer_schedule="all", capture=True))
        reports = analysis.local_profiles(res.states, 8)
        census = Counter(r.label for r in reports)
        outliers = sum(c for _, _, c in analysis.outlier_counts(res.states, res.compressed, args.lambda_mult))
        print(f"[{mode}] ppl {res.ppl:.3f}  outliers {outliers}  " +
              ", ".join(f"{k}: {census.get(k, 0)}" for k in analysis.PATTERNS))

    res = run_pipeline(weights, context, query,
                       PipelineSettings(chunk_width=args.chunk_width, queue_capacity=3, capture=True))
    print(f"{'layer':>5} {'head':>4} {'local head':>10} {'global head':>11} {'local tail':>10} {'global tail':>11}")
    for layer, head, lh, gh, lt, gt in analysis.parallel_vs_local(res, 8):
        print(f"{layer:5d} {head:4d} {lh:10.3f} {gh:11.3f} {lt:10.3f} {gt:11.3f}")


if __name__ == "__main__":
    main()
