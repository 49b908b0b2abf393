"""Per-head KV eviction inside a chunk.

Two selection rules work on the cumulative query scores of each head:

* compression keeps the ``kv_budget`` context tokens with the largest scores;
* calibration drops tokens whose score exceeds ``lambda_mult`` times the
  head's mean score, but only inside the bias regions (sink / middle /
  recency) scheduled for that layer.

Query rows are never evicted.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from .local import ChunkState
from .tensor import top_k_indices

REGIONS = ("sink", "middle", "recency")
MODES = ("none", "compression", "calibration", "both")


@dataclass(frozen=True)
class BiasRegions:
    sink: np.ndarray
    middle: np.ndarray
    recency: np.ndarray

    def union(self, names) -> np.ndarray:
        parts = [getattr(self, n) for n in names]
        if not parts:
            return np.empty(0, dtype=np.int64)
        return np.sort(np.concatenate(parts))


def classify_bias_regions(context_len: int, sink_len: int, recency_len: int) -> BiasRegions:
    """Split ``range(context_len)`` into leading sink, middle and trailing recency spans.

    When ``sink_len + recency_len`` exceeds the context the two spans are
    shrunk proportionally to fill it and the middle is empty.
    """
    if context_len < 0 or sink_len < 0 or recency_len < 0:
        raise ValueError("region sizes must be non-negative")
    if sink_len + recency_len > context_len:
        total = sink_len + recency_len
        sink_len = context_len * sink_len // total
        recency_len = context_len - sink_len
    idx = np.arange(context_len)
    return BiasRegions(idx[:sink_len], idx[sink_len: context_len - recency_len],
                       idx[context_len - recency_len:])


def default_region_len(context_len: int) -> int:
    return math.ceil(context_len / 10)


def default_schedule(n_layers: int) -> dict[int, frozenset[str]]:
    """Map the 32-layer reference schedule proportionally onto ``n_layers``.

    Reference bands: layers 1-8 evict middle tokens, 9-16 recency tokens,
    17-24 nothing, 25-32 sink tokens.
    """
    sched = {}
    for layer in range(n_layers):
        band = layer * 32 // n_layers
        if band < 8:
            sched[layer] = frozenset({"middle"})
        elif band < 16:
            sched[layer] = frozenset({"recency"})
        elif band >= 24:
            sched[layer] = frozenset({"sink"})
    return sched


def parse_schedule(text: str, n_layers: int) -> dict[int, frozenset[str]]:
    """Parse ``"default"``, ``"none"``, ``"all"`` or ``"0-1:middle,2-3:recency+sink"``."""
    text = text.strip()
    if text == "default":
        return default_schedule(n_layers)
    if text in ("none", ""):
        return {}
    if text == "all":
        return {layer: frozenset(REGIONS) for layer in range(n_layers)}
    sched: dict[int, set[str]] = {}
    for item in text.split(","):
        try:
            span, names = item.split(":")
            lo, _, hi = span.partition("-")
            lo, hi = int(lo), int(hi or lo)
        except ValueError:
            raise ValueError(f"bad layer_schedule entry {item!r}; expected 'lo-hi:region[+region]'") from None
        regions = set(names.split("+"))
        unknown = regions - set(REGIONS)
        if unknown:
            raise ValueError(f"unknown bias region(s) {sorted(unknown)} in {item!r}")
        if not 0 <= lo <= hi < n_layers:
            raise ValueError(f"layer range {lo}-{hi} outside [0, {n_layers})")
        for layer in range(lo, hi + 1):
            sched.setdefault(layer, set()).update(regions)
    return {k: frozenset(v) for k, v in sched.items()}


@dataclass(frozen=True)
class EvictionPolicy:
    kv_budget: int
    lambda_mult: float = 5.0
    layer_schedule: dict[int, frozenset[str]] = field(default_factory=dict)
    sink_len: int | None = None
    recency_len: int | None = None

    def __post_init__(self):
        if self.kv_budget < 1:
            raise ValueError("kv_budget must be >= 1")
        if not self.lambda_mult > 1:
            raise ValueError("lambda_mult must be > 1")
        for name in ("sink_len", "recency_len"):
            v = getattr(self, name)
            if v is not None and v < 0:
                raise ValueError(f"{name} must be >= 0")

    def regions(self, context_len: int) -> BiasRegions:
        d = default_region_len(context_len)
        sink = d if self.sink_len is None else self.sink_len
        recency = d if self.recency_len is None else self.recency_len
        return classify_bias_regions(context_len, sink, recency)

    def scheduled(self, layer: int) -> frozenset[str]:
        return self.layer_schedule.get(layer, frozenset())


@dataclass
class CompressedKV:
    """Retained rows of one chunk's cache; ``retained[l][h]`` indexes the chunk's rows."""

    chunk_index: int
    context_len: int
    query_len: int
    retained: list[list[np.ndarray]]
    keys: list[list[np.ndarray]]
    values: list[list[np.ndarray]]

    def context_rows(self, layer: int, head: int) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
        idx = self.retained[layer][head]
        n = int(np.searchsorted(idx, self.context_len))
        return idx[:n], self.keys[layer][head][:n], self.values[layer][head][:n]

    def context_counts(self) -> list[list[int]]:
        return [[int(np.searchsorted(idx, self.context_len)) for idx in layer] for layer in self.retained]


def _gather(state: ChunkState, keep_context: list[list[np.ndarray]]) -> CompressedKV:
    query_idx = np.arange(state.context_len, state.length)
    retained, keys, values = [], [], []
    for layer in range(state.n_layers):
        r_l, k_l, v_l = [], [], []
        for head in range(state.n_heads):
            idx = np.concatenate([np.sort(np.asarray(keep_context[layer][head], dtype=np.int64)), query_idx])
            r_l.append(idx)
            k_l.append(state.keys[layer][head][idx])
            v_l.append(state.values[layer][head][idx])
        retained.append(r_l)
        keys.append(k_l)
        values.append(v_l)
    return CompressedKV(state.chunk_index, state.context_len, state.query_len, retained, keys, values)


def _candidates(state: ChunkState, within: CompressedKV | None, layer: int, head: int) -> np.ndarray:
    if within is None:
        return np.arange(state.context_len)
    return within.context_rows(layer, head)[0]


def _scores(state: ChunkState, scores):
    scores = state.scores if scores is None else scores
    if scores is None:
        raise ValueError("chunk state has no cumulative scores")
    return scores


def identity_kv(state: ChunkState) -> CompressedKV:
    full = [[np.arange(state.context_len)] * state.n_heads for _ in range(state.n_layers)]
    return _gather(state, full)


def evict_low(state: ChunkState, scores=None, kv_budget: int = 1,
              within: CompressedKV | None = None) -> CompressedKV:
    """Keep the ``kv_budget`` highest-scoring context tokens per head (ties to the lower index).

    ``within`` restricts the candidates to rows an earlier eviction kept.
    """
    scores = _scores(state, scores)
    keep = []
    for layer in range(state.n_layers):
        row = []
        for head in range(state.n_heads):
            cand = _candidates(state, within, layer, head)
            k = min(kv_budget, cand.size)
            row.append(cand[top_k_indices(scores[layer][head][cand], k)])
        keep.append(row)
    return _gather(state, keep)


def outlier_threshold(scores, lambda_mult: float) -> float:
    """Score above which a token counts as an outlier: ``lambda_mult`` times the mean."""
    s = np.asarray(scores, dtype=np.float64)
    return float(lambda_mult * s.mean()) if s.size else math.inf


def outlier_indices(scores, threshold: float) -> np.ndarray:
    return np.flatnonzero(np.asarray(scores, dtype=np.float64) > threshold)


def calibration_evicted(scores_lh: np.ndarray, regions: BiasRegions, names, lambda_mult: float) -> np.ndarray:
    """Indices calibration removes for one head: outliers that fall in a scheduled region."""
    if not names:
        return np.empty(0, dtype=np.int64)
    hot = outlier_indices(scores_lh, outlier_threshold(scores_lh, lambda_mult))
    return np.intersect1d(hot, regions.union(sorted(names)))


def evict_high_calibration(state: ChunkState, scores=None, policy: EvictionPolicy | None = None,
                           layer: int | None = None) -> CompressedKV:
    """Drop abnormally high-score tokens inside the scheduled bias regions.

    With ``layer`` given only that layer is touched; otherwise every layer
    follows the policy's schedule.
    """
    if policy is None:
        raise ValueError("calibration eviction needs a policy")
    if layer is not None and not 0 <= layer < state.n_layers:
        raise IndexError(f"layer {layer} outside [0, {state.n_layers})")
    scores = _scores(state, scores)
    regions = policy.regions(state.context_len)
    everything = np.arange(state.context_len)
    keep = []
    for l_ in range(state.n_layers):
        names = policy.scheduled(l_) if layer is None or layer == l_ else frozenset()
        keep.append([np.setdiff1d(everything, calibration_evicted(scores[l_][h], regions, names, policy.lambda_mult))
                     for h in range(state.n_heads)])
    return _gather(state, keep)


def apply_policy(state: ChunkState, policy: EvictionPolicy, mode: str, scores=None) -> CompressedKV:
    """Evict according to ``mode``; ``both`` runs calibration first, then compression on the survivors."""
    if mode not in MODES:
        raise ValueError(f"unknown eviction mode {mode!r}; expected one of {MODES}")
    if mode == "none":
        return identity_kv(state)
    if mode == "compression":
        return evict_low(state, scores, policy.kv_budget)
    calibrated = evict_high_calibration(state, scores, policy)
    if mode == "calibration":
        return calibrated
    return evict_low(state, scores, policy.kv_budget, within=calibrated)
