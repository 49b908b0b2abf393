"""Acceptance suite: one test per criterion, each printing a PASS/FAIL line.

Run alone with ``pytest tests/test_acceptance.py -v`` or ``python3 tests/test_acceptance.py``.
"""

import math
import time

import numpy as np
import pytest

from chunkcomp import analysis, bench, model
from chunkcomp.analysis import MOUNTAIN, U_SHAPE, UNIFORM, classify_pattern, count_outliers, decay_fit
from chunkcomp.chunk_queue import ChunkQueue
from chunkcomp.chunker import split_chunks
from chunkcomp.eviction import EvictionPolicy, evict_high_calibration, evict_low, parse_schedule
from chunkcomp.local import ChunkState, encode_chunk
from chunkcomp.model import ModelConfig, apply_rope, init_from_seed, rope_table
from chunkcomp.pipeline import PipelineSettings, run_pipeline
from chunkcomp.reference import monolithic_run
from chunkcomp.tensor import log_softmax_row


@pytest.fixture
def verdict(capsys):
    def report(label: str, ok: bool, detail: str = "") -> None:
        with capsys.disabled():
            print(f"\n[{'PASS' if ok else 'FAIL'}] {label}: {detail}")
        assert ok, f"{label}: {detail}"
    return report


def _score_state(scores, query_len=1):
    s = np.asarray(scores, dtype=np.float64)
    n = s.size + query_len
    kv = np.zeros((n, 2))
    return ChunkState(0, s.size, query_len, np.zeros(n, dtype=int), [[kv]], [[kv]], None, None, [[s]], 0.0)


def _entropy(p):
    p = np.asarray(p, dtype=np.float64)
    p = p[p > 0] / p.sum()
    return float(-(p * np.log(p)).sum())


# 1 -------------------------------------------------------------------------

def test_full_attention_oracle(verdict):
    cfg = ModelConfig()
    t0 = time.perf_counter()
    worst_logit = worst_ppl = 0.0
    token_mismatch = 0
    for seed in range(50):
        rng = np.random.default_rng(1000 + seed)
        n = int(rng.integers(1, 97))
        wq = int(rng.integers(1, 17))
        width = int(rng.integers(n, cfg.max_train_positions - wq + 1))
        settings = PipelineSettings(chunk_width=width, queue_capacity=int(rng.integers(1, 4)),
                                    mode="none", max_new=int(rng.integers(0, 13)))
        weights = init_from_seed(cfg, seed)
        ctx, q = rng.integers(0, cfg.vocab_size, n), rng.integers(0, cfg.vocab_size, wq)
        res = run_pipeline(weights, ctx, q, settings)
        ref = monolithic_run(weights, ctx, q, settings.max_new)
        scale = np.abs(ref.query_logits).max(axis=1, keepdims=True)
        worst_logit = max(worst_logit, float((np.abs(res.query_logits - ref.query_logits) / scale).max()))
        worst_ppl = max(worst_ppl, abs(res.ppl - ref.ppl) / ref.ppl)
        token_mismatch += (res.generated != ref.generated) or (res.truncated != ref.truncated)
    elapsed = time.perf_counter() - t0
    ok = worst_logit <= 1e-6 and worst_ppl <= 1e-6 and token_mismatch == 0 and elapsed < 60
    verdict("1 full-attention oracle", ok,
            f"max rel logit err {worst_logit:.2e}, max rel ppl err {worst_ppl:.2e}, "
            f"token mismatches {token_mismatch}/50, {elapsed:.1f}s")


# 2 -------------------------------------------------------------------------

def test_eviction_oracle(verdict):
    rng = np.random.default_rng(2)
    t0 = time.perf_counter()
    low_bad = cal_bad = 0
    for _ in range(1000):
        n = int(rng.integers(1, 120))
        s = rng.integers(0, 6, n).astype(float)  # small integer range forces ties
        k = int(rng.integers(1, n + 2))
        kept = evict_low(_score_state(s), kv_budget=k).context_rows(0, 0)[0].tolist()
        order = sorted(range(n), key=lambda i: (-s[i], i))
        low_bad += kept != sorted(order[:min(k, n)])
    for _ in range(1000):
        n = int(rng.integers(2, 150))
        s = rng.exponential(size=n) ** 3
        names = [r for r in ("sink", "middle", "recency") if rng.random() < 0.5]
        policy = EvictionPolicy(kv_budget=1, lambda_mult=float(rng.uniform(1.5, 6)),
                                layer_schedule={0: frozenset(names)},
                                sink_len=int(rng.integers(0, n)), recency_len=int(rng.integers(0, n)))
        kept = set(evict_high_calibration(_score_state(s), policy=policy).context_rows(0, 0)[0].tolist())
        lam = policy.lambda_mult * s.mean()
        regions = set(policy.regions(n).union(names).tolist())
        predicate = {i for i in range(n) if s[i] > lam and i in regions}
        cal_bad += kept != set(range(n)) - predicate
    elapsed = time.perf_counter() - t0
    verdict("2 eviction oracle", low_bad == 0 and cal_bad == 0 and elapsed < 10,
            f"top-k mismatches {low_bad}/1000, calibration mismatches {cal_bad}/1000, {elapsed:.2f}s")


# 3 -------------------------------------------------------------------------

def test_queue_online_offline(verdict):
    rng = np.random.default_rng(3)
    t0 = time.perf_counter()
    bad = 0
    for _ in range(500):
        n = int(rng.integers(0, 60))
        cap = int(rng.integers(1, 12))
        scores = np.round(rng.normal(size=n), 1)  # rounding produces ties
        q = ChunkQueue(cap)
        for i, s in enumerate(scores):
            q.push(i, float(s))
        offline = sorted(sorted(range(n), key=lambda i: (scores[i], i))[:cap])
        bad += q.indices() != offline
    elapsed = time.perf_counter() - t0
    verdict("3 queue online/offline", bad == 0 and elapsed < 5, f"mismatches {bad}/500, {elapsed:.2f}s")


# 4 -------------------------------------------------------------------------

def test_normalization_suite(verdict, monkeypatch):
    worst = {"softmax": 0.0}
    original = model.softmax_rows

    def checked(*args, **kwargs):
        out = original(*args, **kwargs)
        worst["softmax"] = max(worst["softmax"], float(np.abs(out.sum(axis=-1) - 1).max()))
        return out

    monkeypatch.setattr(model, "softmax_rows", checked)
    cfg = ModelConfig()
    rng = np.random.default_rng(4)
    worst_prob = worst_profile = 0.0
    max_pos = -1
    runs = [
        (400, 16, dict(chunk_width=96, mode="none", max_new=30)),
        (700, 8, dict(chunk_width=120, kv_budget=40, mode="compression", max_new=10)),
        (300, 32, dict(chunk_width=96, kv_budget=30, mode="both", layer_schedule="all", max_new=5)),
        (250, 4, dict(chunk_width=50, mode="calibration", lambda_mult=2.0, max_new=80)),
    ]
    for i, (n, wq, kw) in enumerate(runs):
        weights = init_from_seed(cfg, i, gain=1.0 + i)
        res = run_pipeline(weights, rng.integers(0, 256, n), rng.integers(0, 256, wq),
                           PipelineSettings(capture=True, **kw))
        max_pos = max(max_pos, res.max_position)
        for row in np.vstack([res.query_logits] + [s.logits for s in res.states]):
            worst_prob = max(worst_prob, abs(float(np.exp(log_softmax_row(row)).sum()) - 1))
        for r in analysis.local_profiles(res.states, 8):
            worst_profile = max(worst_profile, abs(float(r.profile.sum()) - 1))
        for layer in res.global_attention:
            for a in layer:
                p = analysis.attention_profile(a, np.arange(a.shape[0]))
                worst_profile = max(worst_profile, abs(float(p.sum()) - 1))
    table = rope_table(cfg)
    x = rng.standard_normal((cfg.max_train_positions, cfg.d_head)) * 10
    rotated = apply_rope(x, np.arange(cfg.max_train_positions), table)
    worst_norm = float(np.abs(np.linalg.norm(rotated, axis=1) - np.linalg.norm(x, axis=1)).max())
    ok = (worst["softmax"] <= 1e-6 and worst_prob <= 1e-6 and worst_profile <= 1e-6
          and worst_norm <= 1e-9 and max_pos < cfg.max_train_positions)
    verdict("4 normalization suite", ok,
            f"attention row-sum err {worst['softmax']:.1e}, token-prob row-sum err {worst_prob:.1e}, "
            f"profile err {worst_profile:.1e}, rope norm err {worst_norm:.1e}, "
            f"max position {max_pos} < {cfg.max_train_positions}")


# 5 -------------------------------------------------------------------------

def test_sparsity_trend(verdict):
    t0 = time.perf_counter()
    curve = analysis.sparsity_sweep((64, 128, 256, 512), 0.01, 20, "synthetic-decay", seed=5)
    elapsed = time.perf_counter() - t0
    votes = curve.trend_votes()
    fracs = ", ".join(f"{r.w}:{r.fraction:.3f}" for r in curve.records)
    verdict("5 effective-entry sparsity trend", curve.trend_passes() and elapsed < 60,
            f"fractions {fracs}; {int(votes.sum())}/{votes.size} trials non-increasing, {elapsed:.2f}s")


# 6 -------------------------------------------------------------------------

def test_decay_fit_recovery(verdict):
    rng = np.random.default_rng(6)
    worst_rate = 0.0
    worst_clean = worst_noisy = 1.0
    for rate in (0.05, 0.1, 0.25, 0.5):
        row = analysis.synthetic_decay_attention(64, rate, rng, noise=0.0)[-1]
        dist = np.arange(64)[::-1]
        fit, r2 = decay_fit(dist, row)
        worst_rate = max(worst_rate, abs(fit - rate) / rate)
        worst_clean = min(worst_clean, r2)
        for _ in range(20):
            noisy = row * np.clip(1 + 0.05 * rng.standard_normal(64), 1e-3, None)
            worst_noisy = min(worst_noisy, decay_fit(dist, noisy)[1])
    ok = worst_rate <= 0.05 and worst_clean >= 0.99 and worst_noisy >= 0.9
    verdict("6 exponential decay fit", ok,
            f"max rate err {worst_rate:.1e}, min clean r2 {worst_clean:.6f}, min noisy r2 {worst_noisy:.4f}")


# 7 -------------------------------------------------------------------------

def test_throughput_and_pair_counts(verdict):
    cfg = ModelConfig()
    weights = init_from_seed(cfg, 7)
    rng = np.random.default_rng(7)
    ctx, q = rng.integers(0, 256, 480), rng.integers(0, 256, 8)
    budget = 64 * 2 ** 20
    reports = []
    for kv_budget in (120, 60):
        res = run_pipeline(weights, ctx, q, PipelineSettings(chunk_width=120, kv_budget=kv_budget,
                                                             mode="compression"))
        reports.append(bench.cost_report(cfg, res, kv_budget, budget))
    ratio = reports[1].max_parallel_chunks / reports[0].max_parallel_chunks
    kv_share = reports[0].kv_fraction

    # exact counts: the chunked prefill against a monolithic forward of the same sequence
    small = ModelConfig(n_layers=2, n_heads=2)
    errs = []
    for n, w, wq in ((960, 96, 32), (2000, 112, 16), (1500, 100, 28)):
        ctx, q = rng.integers(0, 256, n), rng.integers(0, 256, wq)
        res = run_pipeline(init_from_seed(small, 0), ctx, q, PipelineSettings(chunk_width=w))
        wide = ModelConfig(n_layers=2, n_heads=2, max_train_positions=n + wq)
        before = model.SCORE_COUNTER.pairs
        model.forward_local(init_from_seed(wide, 0), np.concatenate([ctx, q]), np.arange(n + wq))
        mono = model.SCORE_COUNTER.pairs - before
        predicted = res.plan.chunk_count * (w + wq) ** 2 / n ** 2
        errs.append(abs(res.score_pairs_prefill / mono / predicted - 1))
    ok = kv_share >= 0.8 and ratio >= 1.7 and max(errs) <= 0.10
    verdict("7 throughput and pair counts", ok,
            f"{reports[0].max_parallel_chunks} -> {reports[1].max_parallel_chunks} chunks (x{ratio:.3f}), "
            f"KV share {kv_share:.3f}; pair-ratio errors " + ", ".join(f"{e:.3f}" for e in errs))


# 8 -------------------------------------------------------------------------

def test_calibration_flattens(verdict):
    cfg = ModelConfig()
    lam = 5.0
    policy = EvictionPolicy(kv_budget=cfg.max_train_positions, lambda_mult=lam,
                            layer_schedule=parse_schedule("all", cfg.n_layers))
    qualified = heads = entropy_drops = leftovers = 0
    seed = 0
    while qualified < 200 and seed < 2000:
        rng = np.random.default_rng(8000 + seed)
        weights = init_from_seed(cfg, seed)
        seed += 1
        plan = split_chunks(rng.integers(0, 256, 96), rng.integers(0, 256, 8), 96, cfg.max_train_positions)
        state = encode_chunk(weights, plan, 0)
        kv = evict_high_calibration(state, policy=policy)
        evicted_any = False
        for layer in range(cfg.n_layers):
            for head in range(cfg.n_heads):
                s = state.scores[layer][head]
                keep = kv.context_rows(layer, head)[0]
                if keep.size == s.size:
                    continue
                evicted_any = True
                heads += 1
                entropy_drops += _entropy(s[keep]) < _entropy(s) - 1e-12
                # same absolute threshold as the one calibration applied
                leftovers += count_outliers(s[keep], lam, threshold=lam * s.mean()).size
        qualified += evicted_any
    ok = qualified == 200 and entropy_drops == 0 and leftovers == 0
    verdict("8 calibration flattens scores", ok,
            f"{qualified} qualifying states ({seed} sampled), {heads} evicting heads, "
            f"entropy decreases {entropy_drops}, remaining outliers {leftovers}")


# 9 -------------------------------------------------------------------------

def _u_profile(rng):
    n = int(rng.integers(20, 200))
    p = 1 + 0.2 * rng.random(n)
    k = max(1, math.ceil(0.1 * n))
    p[:k] += rng.uniform(3, 20) * rng.random(k)
    p[-k:] += rng.uniform(3, 20) * rng.random(k)
    p[0] += rng.uniform(0, 5) * n / k
    p[-1] += rng.uniform(0, 5) * n / k
    return p


def _mountain_profile(rng):
    n = int(rng.integers(20, 200))
    centre = rng.uniform(0.3, 0.7) * n
    width = rng.uniform(0.03, 0.1) * n
    return np.exp(-0.5 * ((np.arange(n) - centre) / width) ** 2) + 0.02 * rng.random(n)


def _uniform_profile(rng):
    n = int(rng.integers(20, 200))
    return 1 + 0.25 * rng.uniform(-1, 1, n)


def test_pattern_classifier(verdict):
    rng = np.random.default_rng(9)
    wrong = scale_breaks = 0
    for label, make in ((U_SHAPE, _u_profile), (MOUNTAIN, _mountain_profile), (UNIFORM, _uniform_profile)):
        for _ in range(30):
            p = make(rng)
            got = classify_pattern(p)
            wrong += got != label
            for c in (1e-9, 0.37, 3.0, 1e9):
                scale_breaks += classify_pattern(c * p) != got
    verdict("9 pattern classifier", wrong == 0 and scale_breaks == 0,
            f"wrong labels {wrong}/90, rescaling changes {scale_breaks}/360")


if __name__ == "__main__":
    raise SystemExit(pytest.main([__file__, "-v"]))
