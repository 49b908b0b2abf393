"""Context chunking with per-chunk position reuse.

The context is cut into consecutive slices of ``chunk_width`` tokens (the
last may be short). Each slice is encoded with the query appended, and every
assembled chunk uses positions ``0 .. len-1`` so that no position ever leaves
the trained range.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from pathlib import Path

import numpy as np


@dataclass(frozen=True)
class ChunkPlan:
    context: np.ndarray
    query: np.ndarray
    chunk_width: int
    max_train_positions: int

    @property
    def query_len(self) -> int:
        return int(self.query.size)

    @property
    def context_len(self) -> int:
        return int(self.context.size)

    @property
    def chunk_count(self) -> int:
        return math.ceil(self.context_len / self.chunk_width)

    @property
    def ranges(self) -> list[tuple[int, int]]:
        w, n = self.chunk_width, self.context_len
        return [(s, min(s + w, n)) for s in range(0, n, w)]

    def chunk_len(self, c: int) -> int:
        start, stop = self.ranges[c]
        return stop - start

    @property
    def query_offset(self) -> int:
        """Position of the first query token when it follows a full-width chunk."""
        return min(self.chunk_width, self.context_len)


def split_chunks(context, query, chunk_width: int, max_train_positions: int) -> ChunkPlan:
    context = np.asarray(context, dtype=np.int64).ravel()
    query = np.asarray(query, dtype=np.int64).ravel()
    if query.size < 1:
        raise ValueError("query must contain at least one token")
    if context.size < 1:
        raise ValueError("context must contain at least one token")
    if chunk_width < 1:
        raise ValueError("chunk_width must be >= 1")
    if chunk_width + query.size > max_train_positions:
        raise ValueError(
            f"chunk_width {chunk_width} + query length {query.size} exceeds the "
            f"position budget {max_train_positions}"
        )
    context.setflags(write=False)
    query.setflags(write=False)
    return ChunkPlan(context, query, chunk_width, max_train_positions)


def assemble_chunk_input(plan: ChunkPlan, c: int) -> tuple[np.ndarray, np.ndarray]:
    """Tokens ``chunk_c ++ query`` and their reused positions ``0 .. len-1``."""
    if not 0 <= c < plan.chunk_count:
        raise IndexError(f"chunk {c} outside [0, {plan.chunk_count})")
    start, stop = plan.ranges[c]
    tokens = np.concatenate([plan.context[start:stop], plan.query])
    return tokens, np.arange(tokens.size)


def read_tokens(path, binary: bool = False) -> np.ndarray:
    """Read token ids: one decimal id per line, or raw little-endian uint32 when ``binary``."""
    p = Path(path)
    if binary:
        raw = p.read_bytes()
        if len(raw) % 4:
            raise ValueError(f"{path}: binary token file length {len(raw)} is not a multiple of 4")
        return np.frombuffer(raw, dtype="<u4").astype(np.int64)
    ids = []
    for lineno, line in enumerate(p.read_text().splitlines(), 1):
        line = line.strip()
        if not line:
            continue
        try:
            ids.append(int(line))
        except ValueError:
            raise ValueError(f"{path}:{lineno}: not a token id: {line!r}") from None
    return np.asarray(ids, dtype=np.int64)


def write_tokens(path, ids, binary: bool = False) -> None:
    ids = np.asarray(ids, dtype=np.int64)
    if binary:
        Path(path).write_bytes(ids.astype("<u4").tobytes())
    else:
        Path(path).write_text("".join(f"{int(i)}\n" for i in ids))
