"""Global attention over the concatenated compressed caches, decoding, and the end-to-end run.

Retained chunk keys keep the rotation they received during local encoding.
The query is re-encoded once against the concatenated cache at positions
``query_offset .. query_offset + w_q - 1`` (the positions it would occupy
after a full-width chunk), and generated tokens continue from there.
"""

from __future__ import annotations

import copy
import math
import time
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from typing import NamedTuple

import numpy as np

from .chunk_queue import ChunkQueue
from .chunker import ChunkPlan, split_chunks
from .eviction import MODES, CompressedKV, EvictionPolicy, apply_policy, parse_schedule
from .local import DEFAULT_Q_OBS, ChunkState, encode_chunk
from .model import (
    POSITION_MONITOR,
    SCORE_COUNTER,
    ModelConfig,
    ModelWeights,
    attention_forward,
    embed,
    feed_forward,
    lm_logits,
)
from .tensor import log_softmax_row


class Segment(NamedTuple):
    kind: str  # "chunk" | "query" | "generated"
    chunk: int | None
    position: int


@dataclass
class GlobalCache:
    config: ModelConfig
    keys: list[list[np.ndarray]]
    values: list[list[np.ndarray]]
    segments: list[list[list[Segment]]]
    last_logits: np.ndarray | None = None
    next_position: int | None = None

    def rows(self, layer: int, head: int) -> int:
        return self.keys[layer][head].shape[0]

    def total_rows(self) -> int:
        return sum(k.shape[0] for layer in self.keys for k in layer)

    def past(self, layer: int) -> list[tuple[np.ndarray, np.ndarray]]:
        return list(zip(self.keys[layer], self.values[layer]))

    def append(self, layer: int, keys, values, kind: str, positions) -> None:
        for h, (k, v) in enumerate(zip(keys, values)):
            self.keys[layer][h] = np.concatenate([self.keys[layer][h], k])
            self.values[layer][h] = np.concatenate([self.values[layer][h], v])
            self.segments[layer][h].extend(Segment(kind, None, int(p)) for p in positions)


def concat_kv(survivors: list[CompressedKV], config: ModelConfig, query_kv=None) -> GlobalCache:
    """Concatenate retained context rows in the given (document) order.

    ``query_kv`` is an optional ``(keys[l][h], values[l][h], positions)``
    triple appended last; the pipeline instead appends query rows layer by
    layer while running the global pass.
    """
    L, H, d = config.n_layers, config.n_heads, config.d_head
    keys = [[np.empty((0, d)) for _ in range(H)] for _ in range(L)]
    values = [[np.empty((0, d)) for _ in range(H)] for _ in range(L)]
    segments = [[[] for _ in range(H)] for _ in range(L)]
    for kv in survivors:
        if len(kv.keys) != L or any(len(layer) != H for layer in kv.keys):
            raise ValueError(f"chunk {kv.chunk_index}: cache layout does not match the model config")
        for layer in range(L):
            for h in range(H):
                idx, k, v = kv.context_rows(layer, h)
                if k.shape[1] != d:
                    raise ValueError(f"chunk {kv.chunk_index}: head width {k.shape[1]} != {d}")
                keys[layer][h] = np.concatenate([keys[layer][h], k])
                values[layer][h] = np.concatenate([values[layer][h], v])
                segments[layer][h].extend(Segment("chunk", kv.chunk_index, int(i)) for i in idx)
    cache = GlobalCache(config, keys, values, segments)
    if query_kv is not None:
        qk, qv, positions = query_kv
        for layer in range(L):
            cache.append(layer, qk[layer], qv[layer], "query", positions)
    return cache


def global_attention(weights: ModelWeights, cache: GlobalCache, layer: int, hidden: np.ndarray,
                     positions, kind: str = "query") -> tuple[np.ndarray, list[np.ndarray]]:
    """Attend ``hidden`` rows against the cache at ``layer`` and append their K/V.

    Returns the projected head outputs (before the residual) and, per head,
    the attention matrix of shape ``rows x (cached rows + rows)``.
    """
    out = attention_forward(weights, layer, hidden, positions, past=cache.past(layer))
    cache.append(layer, out.keys, out.values, kind, positions)
    return out.projected, out.attention


def global_forward(weights: ModelWeights, cache: GlobalCache, tokens, positions, kind: str = "query",
                   capture: bool = False):
    """Push ``tokens`` through every layer against the cache; returns (logits, per-layer attention)."""
    positions = np.asarray(positions, dtype=np.int64)
    x = embed(weights, tokens)
    attns = []
    for layer in range(weights.config.n_layers):
        proj, a = global_attention(weights, cache, layer, x, positions, kind)
        x = x + proj
        x = x + feed_forward(weights, layer, x)
        if capture:
            attns.append(a)
    logits = lm_logits(weights, x)
    cache.last_logits = logits[-1]
    cache.next_position = int(positions[-1]) + 1
    return logits, attns


@dataclass
class DecodeResult:
    tokens: list[int]
    truncated: bool


def decode(weights: ModelWeights, cache: GlobalCache, max_new: int) -> DecodeResult:
    """Greedy decoding from the cache's last logits.

    Stops early with ``truncated=True`` when the next token would need a
    position outside the trained range.
    """
    if max_new < 0:
        raise ValueError("max_new must be >= 0")
    if max_new and cache.last_logits is None:
        raise ValueError("cache has not been primed with a query")
    out: list[int] = []
    logits = cache.last_logits
    for step in range(max_new):
        tok = int(np.argmax(logits))
        out.append(tok)
        if step == max_new - 1:
            break
        if cache.next_position >= weights.config.max_train_positions:
            return DecodeResult(out, True)
        logits = global_forward(weights, cache, [tok], [cache.next_position], kind="generated")[0][-1]
    return DecodeResult(out, False)


def perplexity_from_logits(query_logits: np.ndarray, query, first_logits: np.ndarray | None = None) -> float:
    """exp of the mean negative log-likelihood of ``query``.

    ``query_logits[t]`` predicts ``query[t + 1]``; ``first_logits`` (if
    given) predicts ``query[0]``. Without it the first token is not scored.
    """
    query = np.asarray(query, dtype=np.int64)
    nll = [-log_softmax_row(query_logits[t])[query[t + 1]] for t in range(query.size - 1)]
    if first_logits is not None:
        nll.insert(0, -log_softmax_row(first_logits)[query[0]])
    if not nll:
        raise ValueError("no query tokens to score")
    return float(math.exp(max(np.mean(nll), 0.0)))


def query_perplexity(weights: ModelWeights, cache: GlobalCache, query, query_offset: int,
                     first_logits: np.ndarray | None = None) -> float:
    """Query perplexity against a cache that does not yet hold the query (the cache is not modified)."""
    query = np.asarray(query, dtype=np.int64)
    if query.size < 1:
        raise ValueError("query must contain at least one token")
    work = copy.deepcopy(cache)
    logits, _ = global_forward(weights, work, query, np.arange(query_offset, query_offset + query.size))
    return perplexity_from_logits(logits, query, first_logits)


# --- end-to-end -------------------------------------------------------------

@dataclass
class PipelineSettings:
    chunk_width: int
    q_obs: int = DEFAULT_Q_OBS
    kv_budget: int | None = None  # None: the chunk width, i.e. no compression
    queue_capacity: int = 3
    epsilon: float = math.inf
    lambda_mult: float = 5.0
    mode: str = "none"
    layer_schedule: str = "default"
    sink_len: int | None = None
    recency_len: int | None = None
    max_new: int = 0
    workers: int = 1
    capture: bool = False

    def __post_init__(self):
        if self.mode not in MODES:
            raise ValueError(f"mode must be one of {MODES}, got {self.mode!r}")
        if self.q_obs < 1:
            raise ValueError("q_obs must be >= 1")
        if self.queue_capacity < 1:
            raise ValueError("queue_capacity must be >= 1")
        if self.max_new < 0:
            raise ValueError("max_new must be >= 0")
        if self.workers < 1:
            raise ValueError("workers must be >= 1")
        if math.isnan(self.epsilon):
            raise ValueError("epsilon must be a number")

    def policy(self, n_layers: int) -> EvictionPolicy:
        return EvictionPolicy(
            kv_budget=self.kv_budget if self.kv_budget is not None else self.chunk_width,
            lambda_mult=self.lambda_mult,
            layer_schedule=parse_schedule(self.layer_schedule, n_layers),
            sink_len=self.sink_len,
            recency_len=self.recency_len,
        )


@dataclass
class PipelineResult:
    plan: ChunkPlan
    generated: list[int]
    truncated: bool
    ppl: float
    retained_chunks: list[int]
    self_information: list[float]
    row_counts: dict[str, int]
    query_logits: np.ndarray
    score_pairs_prefill: int
    score_pairs_global: int
    cache_rows_peak: int
    max_position: int
    wall_prefill_ms: float
    wall_per_token_ms: float
    states: list[ChunkState] = field(default_factory=list)
    compressed: list[CompressedKV] = field(default_factory=list)
    global_attention: list[list[np.ndarray]] = field(default_factory=list)
    cache: GlobalCache | None = None


def _rows(kv: CompressedKV) -> int:
    return sum(idx.size for layer in kv.retained for idx in layer)


def run_pipeline(weights: ModelWeights, context, query, settings: PipelineSettings) -> PipelineResult:
    """Chunk, encode locally, evict, rank chunks, then attend globally and decode.

    With ``settings.capture`` every chunk state, compressed cache and the
    global attention matrices are kept on the result for analysis.
    """
    cfg = weights.config
    plan = split_chunks(context, query, settings.chunk_width, cfg.max_train_positions)
    policy = settings.policy(cfg.n_layers)
    q_obs = min(settings.q_obs, plan.query_len)
    queue = ChunkQueue(settings.queue_capacity)
    POSITION_MONITOR.reset()
    pairs0 = SCORE_COUNTER.pairs

    t0 = time.perf_counter()
    indices = range(plan.chunk_count)

    def encode(c):
        return encode_chunk(weights, plan, c, q_obs)

    if settings.workers > 1:
        pool = ThreadPoolExecutor(settings.workers)
        stream = pool.map(encode, indices)
    else:
        pool = None
        stream = map(encode, indices)

    infos: list[float] = []
    states, compressed = [], []
    first_logits = None
    rows_peak = 0
    encoded_rows = compressed_rows = 0
    unit = cfg.n_layers * cfg.n_heads
    try:
        # arrival order is chunk order, so the queue sees the same push sequence for any worker count
        for state in stream:
            held = sum(_rows(kv) for _, _, kv in queue.entries)
            rows_peak = max(rows_peak, held + state.length * unit)
            kv = apply_policy(state, policy, settings.mode)
            encoded_rows += state.length * unit
            compressed_rows += sum(kv.context_counts()[l][h] for l in range(cfg.n_layers) for h in range(cfg.n_heads))
            infos.append(state.self_information)
            if state.self_information <= settings.epsilon:
                queue.push(state.chunk_index, state.self_information, kv)
            if state.chunk_index == plan.chunk_count - 1:
                first_logits = state.logits[state.context_len - 1].copy()
            if settings.capture:
                states.append(state)
                compressed.append(kv)
    finally:
        if pool is not None:
            pool.shutdown()
    prefill_pairs = SCORE_COUNTER.pairs - pairs0

    survivors = queue.retained_chunks()
    cache = concat_kv([kv for _, kv in survivors], cfg)
    retained_context_rows = cache.total_rows()
    offset = plan.query_offset
    pairs1 = SCORE_COUNTER.pairs
    query_logits, g_attn = global_forward(weights, cache, plan.query,
                                          np.arange(offset, offset + plan.query_len),
                                          capture=settings.capture)
    wall_prefill = (time.perf_counter() - t0) * 1000.0
    global_rows = cache.total_rows()
    ppl = perplexity_from_logits(query_logits, plan.query, first_logits)

    t1 = time.perf_counter()
    dec = decode(weights, cache, settings.max_new)
    wall_decode = (time.perf_counter() - t1) * 1000.0
    rows_peak = max(rows_peak, cache.total_rows())

    return PipelineResult(
        plan=plan,
        generated=dec.tokens,
        truncated=dec.truncated,
        ppl=ppl,
        retained_chunks=[c for c, _ in survivors],
        self_information=infos,
        row_counts={
            "context_tokens": plan.context_len,
            "chunks": plan.chunk_count,
            "encoded_rows": encoded_rows,
            "compressed_context_rows": compressed_rows,
            "retained_context_rows": retained_context_rows,
            "global_rows": global_rows,
            "final_rows": cache.total_rows(),
        },
        query_logits=query_logits,
        score_pairs_prefill=prefill_pairs,
        score_pairs_global=SCORE_COUNTER.pairs - pairs1,
        cache_rows_peak=rows_peak,
        max_position=POSITION_MONITOR.max_seen,
        wall_prefill_ms=wall_prefill,
        wall_per_token_ms=wall_decode / max(len(dec.tokens), 1),
        states=states,
        compressed=compressed,
        global_attention=g_attn,
        cache=cache,
    )
