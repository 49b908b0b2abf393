"""Fixed-capacity queue of chunks ranked by self-information (lower is better)."""

from __future__ import annotations

import bisect
import math
from dataclasses import dataclass, field
from typing import Any


@dataclass
class ChunkQueue:
    capacity: int
    entries: list[tuple[float, int, Any]] = field(default_factory=list)

    def __post_init__(self):
        if self.capacity < 1:
            raise ValueError("queue capacity must be >= 1")

    def __len__(self) -> int:
        return len(self.entries)

    def push(self, idx: int, score: float, kv: Any = None) -> "ChunkQueue":
        """Insert a chunk; past capacity the worst (largest score, then largest index) is dropped."""
        if not math.isfinite(score):
            raise ValueError(f"chunk {idx}: non-finite self-information {score}")
        keys = [(s, i) for s, i, _ in self.entries]
        pos = bisect.bisect(keys, (score, idx))
        self.entries.insert(pos, (score, idx, kv))
        if len(self.entries) > self.capacity:
            self.entries.pop()
        return self

    def threshold_filter(self, epsilon: float) -> "ChunkQueue":
        self.entries = [e for e in self.entries if e[0] <= epsilon]
        return self

    def retained_chunks(self) -> list[tuple[int, Any]]:
        """Survivors in document order."""
        return [(i, kv) for _, i, kv in sorted(self.entries, key=lambda e: e[1])]

    def indices(self) -> list[int]:
        return sorted(i for _, i, _ in self.entries)

    def merge(self, other: "ChunkQueue") -> "ChunkQueue":
        for s, i, kv in other.entries:
            self.push(i, s, kv)
        return self


def push_chunk(q: ChunkQueue, idx: int, score: float, kv: Any = None) -> ChunkQueue:
    return q.push(idx, score, kv)


def threshold_filter(q: ChunkQueue, epsilon: float) -> ChunkQueue:
    return q.threshold_filter(epsilon)


def retained_chunks(q: ChunkQueue) -> list[tuple[int, Any]]:
    return q.retained_chunks()
