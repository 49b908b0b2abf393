"""Per-chunk local encoding, query-to-context relevance scores and chunk self-information."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .chunker import ChunkPlan, assemble_chunk_input
from .model import ModelWeights, forward_local
from .tensor import log_softmax_row

DEFAULT_Q_OBS = 8


@dataclass
class ChunkState:
    chunk_index: int
    context_len: int
    query_len: int
    tokens: np.ndarray
    keys: list[list[np.ndarray]]
    values: list[list[np.ndarray]]
    attention: list[list[np.ndarray]]
    logits: np.ndarray
    scores: list[list[np.ndarray]] | None = None
    self_information: float | None = None

    @property
    def n_layers(self) -> int:
        return len(self.keys)

    @property
    def n_heads(self) -> int:
        return len(self.keys[0])

    @property
    def length(self) -> int:
        return self.context_len + self.query_len


def cumulative_scores(state: ChunkState, q_obs: int) -> list[list[np.ndarray]]:
    """Attention mass each context token receives from the last ``q_obs`` query rows.

    Uses post-softmax rows and drops the query-to-query columns, so each
    head's vector has length ``context_len`` and sums to at most ``q_obs``.
    """
    if not 1 <= q_obs <= state.query_len:
        raise ValueError(f"q_obs={q_obs} outside [1, {state.query_len}]")
    rows = slice(state.length - q_obs, state.length)
    return [[a[rows, : state.context_len].sum(axis=0) for a in layer] for layer in state.attention]


def self_information(state: ChunkState, logits: np.ndarray | None = None) -> float:
    """Negative log-likelihood (nats) of the query tokens given the chunk.

    The first query token is predicted from the last context row, each later
    one from the preceding query row.
    """
    logits = state.logits if logits is None else logits
    if not np.all(np.isfinite(logits)):
        raise ValueError("non-finite logits")
    query = state.tokens[state.context_len:]
    total = 0.0
    for t, tok in enumerate(query):
        total -= log_softmax_row(logits[state.context_len - 1 + t])[tok]
    # round-off can push a near-certain prediction a hair below zero
    return max(total, 0.0)


def encode_chunk(weights: ModelWeights, plan: ChunkPlan, c: int, q_obs: int = DEFAULT_Q_OBS) -> ChunkState:
    """Run the chunk ``c ++ query`` locally and attach scores and self-information.

    ``q_obs`` is clamped to the query length.
    """
    tokens, positions = assemble_chunk_input(plan, c)
    fwd = forward_local(weights, tokens, positions)
    state = ChunkState(
        chunk_index=c,
        context_len=plan.chunk_len(c),
        query_len=plan.query_len,
        tokens=tokens,
        keys=fwd.keys,
        values=fwd.values,
        attention=fwd.attention,
        logits=fwd.logits,
    )
    state.scores = cumulative_scores(state, min(q_obs, plan.query_len))
    state.self_information = self_information(state)
    return state
