"""Deterministic memory and compute tallies for chunked prefill.

All byte figures assume float64 K and V rows. Activation memory per chunk
is two hidden-state buffers of ``tokens x d_model``; it does not depend on
the KV budget, so budgets compare on equal footing.
"""

from __future__ import annotations

from dataclasses import asdict, dataclass

from .chunker import ChunkPlan
from .model import ModelConfig
from .pipeline import PipelineResult

BYTES_PER_VALUE = 8


def kv_row_bytes(cfg: ModelConfig) -> int:
    """Bytes for one token's K and V across every layer and head."""
    return cfg.n_layers * cfg.n_heads * cfg.d_head * BYTES_PER_VALUE * 2


def activation_bytes(cfg: ModelConfig, tokens: int) -> int:
    return 2 * tokens * cfg.d_model * BYTES_PER_VALUE


def retained_rows(chunk_width: int, query_len: int, kv_budget: int | None) -> int:
    keep = chunk_width if kv_budget is None else min(kv_budget, chunk_width)
    return keep + query_len


def per_chunk_bytes(cfg: ModelConfig, chunk_width: int, query_len: int, kv_budget: int | None) -> int:
    return (retained_rows(chunk_width, query_len, kv_budget) * kv_row_bytes(cfg)
            + activation_bytes(cfg, chunk_width + query_len))


def kv_fraction(cfg: ModelConfig, chunk_width: int, query_len: int, kv_budget: int | None) -> float:
    kv = retained_rows(chunk_width, query_len, kv_budget) * kv_row_bytes(cfg)
    return kv / per_chunk_bytes(cfg, chunk_width, query_len, kv_budget)


def max_parallel_chunks(memory_budget_bytes: int, chunk_bytes: int) -> int:
    if memory_budget_bytes <= 0:
        raise ValueError("memory budget must be positive")
    if chunk_bytes <= 0:
        raise ValueError("per-chunk footprint must be positive")
    return memory_budget_bytes // chunk_bytes


def prefill_pairs_closed_form(cfg: ModelConfig, plan: ChunkPlan) -> int:
    """Query-key products of the local encodings: each chunk is a full (w_c + w_q)^2 score matrix per head."""
    per_head = sum((plan.chunk_len(c) + plan.query_len) ** 2 for c in range(plan.chunk_count))
    return cfg.n_layers * cfg.n_heads * per_head


def monolithic_pairs(cfg: ModelConfig, context_len: int, query_len: int) -> int:
    return cfg.n_layers * cfg.n_heads * (context_len + query_len) ** 2


@dataclass(frozen=True)
class CostReport:
    kv_budget: int | None
    retained_rows_per_chunk: int
    per_chunk_bytes: int
    kv_fraction: float
    max_parallel_chunks: int
    score_pairs_prefill: int
    score_pairs_closed_form: int
    score_pairs_monolithic: int
    cache_rows_peak: int
    simulated_memory_bytes_peak: int
    wall_prefill_ms: float
    wall_per_token_ms: float

    def deterministic(self) -> dict:
        d = asdict(self)
        d.pop("wall_prefill_ms")
        d.pop("wall_per_token_ms")
        return d


def cost_report(cfg: ModelConfig, result: PipelineResult, kv_budget: int | None,
                memory_budget_bytes: int) -> CostReport:
    plan = result.plan
    width = plan.query_offset
    chunk_bytes = per_chunk_bytes(cfg, width, plan.query_len, kv_budget)
    return CostReport(
        kv_budget=kv_budget,
        retained_rows_per_chunk=retained_rows(width, plan.query_len, kv_budget),
        per_chunk_bytes=chunk_bytes,
        kv_fraction=kv_fraction(cfg, width, plan.query_len, kv_budget),
        max_parallel_chunks=max_parallel_chunks(memory_budget_bytes, chunk_bytes),
        score_pairs_prefill=result.score_pairs_prefill,
        score_pairs_closed_form=prefill_pairs_closed_form(cfg, plan),
        score_pairs_monolithic=monolithic_pairs(cfg, plan.context_len, plan.query_len),
        cache_rows_peak=result.cache_rows_peak,
        simulated_memory_bytes_peak=(result.cache_rows_peak * cfg.d_head * BYTES_PER_VALUE * 2
                                     + activation_bytes(cfg, width + plan.query_len)),
        wall_prefill_ms=result.wall_prefill_ms,
        wall_per_token_ms=result.wall_per_token_ms,
    )
