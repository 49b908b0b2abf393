import dataclasses

import numpy as np
import pytest

from chunkcomp import bench
from chunkcomp.chunker import split_chunks
from chunkcomp.model import ModelConfig, init_from_seed
from chunkcomp.pipeline import PipelineSettings, run_pipeline


def test_byte_model_by_hand():
    cfg = ModelConfig(n_layers=2, n_heads=3, d_head=4)
    assert bench.kv_row_bytes(cfg) == 2 * 3 * 4 * 8 * 2
    assert bench.activation_bytes(cfg, 10) == 2 * 10 * 12 * 8
    assert bench.retained_rows(96, 32, None) == 128
    assert bench.retained_rows(96, 32, 48) == 80
    assert bench.retained_rows(96, 32, 500) == 128
    assert bench.per_chunk_bytes(cfg, 10, 2, 5) == 7 * 384 + 2 * 12 * 12 * 8
    assert bench.max_parallel_chunks(1000, 300) == 3
    with pytest.raises(ValueError):
        bench.max_parallel_chunks(0, 10)
    with pytest.raises(ValueError):
        bench.max_parallel_chunks(10, 0)


def test_halving_budget_on_default_model():
    cfg = ModelConfig()
    full = bench.max_parallel_chunks(64 * 2**20, bench.per_chunk_bytes(cfg, 120, 8, 120))
    half = bench.max_parallel_chunks(64 * 2**20, bench.per_chunk_bytes(cfg, 120, 8, 60))
    assert bench.kv_fraction(cfg, 120, 8, 120) >= 0.8
    assert half / full >= 1.7


def _run(n_layers, rng_seed=0):
    cfg = ModelConfig(n_layers=n_layers, n_heads=2, d_head=8, vocab_size=32, max_train_positions=48)
    w = init_from_seed(cfg, 1)
    rng = np.random.default_rng(rng_seed)
    return cfg, run_pipeline(w, rng.integers(0, 32, 60), rng.integers(0, 32, 4),
                             PipelineSettings(chunk_width=12, kv_budget=5, mode="compression",
                                              queue_capacity=2, max_new=3))


def test_peak_rows_scale_with_layers():
    _, two = _run(2)
    _, four = _run(4)
    assert four.cache_rows_peak == 2 * two.cache_rows_peak


def test_score_counter_matches_closed_form():
    cfg, res = _run(2)
    assert res.score_pairs_prefill == bench.prefill_pairs_closed_form(cfg, res.plan)
    # global pass: each query row sees retained rows plus the causal query prefix
    retained = res.row_counts["retained_context_rows"]
    assert res.score_pairs_global > 0
    report = bench.cost_report(cfg, res, 5, 2**20)
    assert report.score_pairs_closed_form == res.score_pairs_prefill
    assert report.score_pairs_monolithic == 2 * 2 * 64 ** 2
    assert retained == 2 * 5 * 4


def test_report_determinism_drops_wall_times():
    cfg, res = _run(2)
    d = bench.cost_report(cfg, res, 5, 2**20).deterministic()
    assert "wall_prefill_ms" not in d and "wall_per_token_ms" not in d
    fields = {f.name for f in dataclasses.fields(bench.CostReport)}
    assert set(d) == fields - {"wall_prefill_ms", "wall_per_token_ms"}


@pytest.mark.parametrize("n,w,wq", [(960, 96, 32), (2000, 112, 16), (1500, 100, 28)])
def test_pair_ratio_close_to_chunk_formula(n, w, wq):
    cfg = ModelConfig()
    plan = split_chunks(np.zeros(n, dtype=int), np.zeros(wq, dtype=int), w, cfg.max_train_positions)
    ratio = bench.prefill_pairs_closed_form(cfg, plan) / bench.monolithic_pairs(cfg, n, wq)
    approx = plan.chunk_count * (w + wq) ** 2 / n ** 2
    assert abs(ratio / approx - 1) <= 0.10
