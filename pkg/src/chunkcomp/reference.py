"""Monolithic full-attention run used as the correctness anchor for the chunked pipeline.

No chunking, no cache: every step re-runs a causal forward pass over the
whole sequence with positions ``0 .. len-1``.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .model import ModelWeights, forward_local
from .tensor import log_softmax_row


@dataclass
class MonolithicResult:
    query_logits: np.ndarray
    ppl: float
    generated: list[int]
    truncated: bool


def monolithic_run(weights: ModelWeights, context, query, max_new: int = 0) -> MonolithicResult:
    context = np.asarray(context, dtype=np.int64)
    query = np.asarray(query, dtype=np.int64)
    seq = np.concatenate([context, query])
    n = context.size
    logits = forward_local(weights, seq, np.arange(seq.size)).logits
    nll = [-log_softmax_row(logits[n - 1 + t])[query[t]] for t in range(query.size)]
    ppl = float(np.exp(np.mean(nll)))

    generated: list[int] = []
    truncated = False
    last = logits[-1]
    for step in range(max_new):
        tok = int(np.argmax(last))
        generated.append(tok)
        if step == max_new - 1:
            break
        if seq.size >= weights.config.max_train_positions:
            truncated = True
            break
        seq = np.append(seq, tok)
        last = forward_local(weights, seq, np.arange(seq.size)).logits[-1]
    return MonolithicResult(logits[n:], ppl, generated, truncated)
