"""A small deterministic decoder transformer with rotary positions.

Pre-norm residual blocks (RMS norm without gain), multi-head causal
attention, a SiLU feed-forward and an untied LM head. Everything is float64
numpy and the weights are immutable once built.
"""

from __future__ import annotations

import struct
import threading
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .tensor import Matrix, ShapeError, softmax_rows

NORM_EPS = 1e-6
WEIGHT_MAGIC = b"CCKVWT01"


@dataclass(frozen=True)
class ModelConfig:
    n_layers: int = 8
    n_heads: int = 4
    d_head: int = 16
    vocab_size: int = 256
    max_train_positions: int = 128
    ff_mult: int = 2
    rope_base: float = 10000.0

    def __post_init__(self):
        for name in ("n_layers", "n_heads", "d_head", "vocab_size", "max_train_positions", "ff_mult"):
            if getattr(self, name) < 1:
                raise ValueError(f"{name} must be >= 1")
        if self.d_head % 2:
            raise ValueError("d_head must be even for rotary embedding")
        if self.rope_base <= 1:
            raise ValueError("rope_base must be > 1")

    @property
    def d_model(self) -> int:
        return self.n_heads * self.d_head

    @property
    def d_ff(self) -> int:
        return self.ff_mult * self.d_model


@dataclass(frozen=True)
class LayerWeights:
    w_q: Matrix
    w_k: Matrix
    w_v: Matrix
    w_o: Matrix
    w_up: Matrix
    w_down: Matrix

    def matrices(self) -> tuple[Matrix, ...]:
        return (self.w_q, self.w_k, self.w_v, self.w_o, self.w_up, self.w_down)


@dataclass(frozen=True)
class ModelWeights:
    config: ModelConfig
    token_embedding: Matrix
    layers: tuple[LayerWeights, ...]
    lm_head: Matrix

    def __post_init__(self):
        cfg = self.config
        d, f, v = cfg.d_model, cfg.d_ff, cfg.vocab_size
        expected = [("token_embedding", self.token_embedding, (v, d)), ("lm_head", self.lm_head, (d, v))]
        if len(self.layers) != cfg.n_layers:
            raise ShapeError(f"expected {cfg.n_layers} layers, got {len(self.layers)}")
        for i, lw in enumerate(self.layers):
            for name, shape in zip(("w_q", "w_k", "w_v", "w_o", "w_up", "w_down"),
                                   ((d, d),) * 4 + ((d, f), (f, d))):
                expected.append((f"layers[{i}].{name}", getattr(lw, name), shape))
        for name, m, shape in expected:
            if m.shape != shape:
                raise ShapeError(f"{name} has shape {m.shape}, expected {shape}")
            if not np.all(np.isfinite(m)):
                raise ValueError(f"{name} contains non-finite values")
            m.setflags(write=False)

    def matrices(self) -> list[Matrix]:
        out = [self.token_embedding]
        for lw in self.layers:
            out.extend(lw.matrices())
        out.append(self.lm_head)
        return out


def _frozen(m: np.ndarray) -> np.ndarray:
    m = np.array(m, dtype=np.float64)
    m.setflags(write=False)
    return m


def build_weights(cfg: ModelConfig, token_embedding, layers, lm_head) -> ModelWeights:
    layers = tuple(LayerWeights(*(_frozen(m) for m in lw)) for lw in layers)
    return ModelWeights(cfg, _frozen(token_embedding), layers, _frozen(lm_head))


def init_from_seed(cfg: ModelConfig, seed: int, gain: float = 1.0) -> ModelWeights:
    """Gaussian weights from ``numpy.random.default_rng(seed)``, scaled by gain/sqrt(d_model).

    Matrices are drawn in declaration order (embedding, then per layer
    Q, K, V, O, up, down, then the LM head), so the result is a pure
    function of ``(cfg, seed, gain)``.
    """
    rng = np.random.default_rng(seed)
    d, f, v = cfg.d_model, cfg.d_ff, cfg.vocab_size
    s = gain / np.sqrt(d)

    def draw(shape):
        return rng.standard_normal(shape) * s

    emb = draw((v, d))
    layers = [[draw((d, d)) for _ in range(4)] + [draw((d, f)), draw((f, d))] for _ in range(cfg.n_layers)]
    head = draw((d, v))
    return build_weights(cfg, emb, layers, head)


def zero_weights(cfg: ModelConfig, embedding: np.ndarray | None = None) -> ModelWeights:
    """All projections zero: uniform causal attention and uniform next-token logits."""
    d, f, v = cfg.d_model, cfg.d_ff, cfg.vocab_size
    emb = np.zeros((v, d)) if embedding is None else embedding
    layers = [[np.zeros((d, d)) for _ in range(4)] + [np.zeros((d, f)), np.zeros((f, d))]
              for _ in range(cfg.n_layers)]
    return build_weights(cfg, emb, layers, np.zeros((d, v)))


def majority_copy_weights(cfg: ModelConfig, mix: float = 4.0, sharpness: float = 8.0) -> ModelWeights:
    """Hand-built weights whose next-token argmax is the most frequent token seen so far.

    Embeddings are one-hot, Q/K are zero (uniform causal attention), V is the
    identity and O scales the averaged one-hots into the residual stream.
    The LM head reads the one-hot coordinates back out. Needs
    ``vocab_size <= d_model``.
    """
    d, f, v = cfg.d_model, cfg.d_ff, cfg.vocab_size
    if v > d:
        raise ValueError("majority_copy_weights needs vocab_size <= d_model")
    emb = np.eye(v, d)
    eye = np.eye(d)
    layers = [[np.zeros((d, d)), np.zeros((d, d)), eye, mix * eye, np.zeros((d, f)), np.zeros((f, d))]
              for _ in range(cfg.n_layers)]
    head = sharpness * np.eye(d, v)
    return build_weights(cfg, emb, layers, head)


# --- weight files -----------------------------------------------------------

_HEADER = struct.Struct("<7Id")


def save_weights(weights: ModelWeights, path) -> None:
    cfg = weights.config
    with open(path, "wb") as fh:
        fh.write(WEIGHT_MAGIC)
        fh.write(_HEADER.pack(cfg.n_layers, cfg.n_heads, cfg.d_model, cfg.d_head, cfg.vocab_size,
                              cfg.max_train_positions, cfg.ff_mult, cfg.rope_base))
        for m in weights.matrices():
            fh.write(np.ascontiguousarray(m, dtype="<f8").tobytes())


def load_weights(path) -> ModelWeights:
    raw = Path(path).read_bytes()
    if raw[: len(WEIGHT_MAGIC)] != WEIGHT_MAGIC:
        raise ValueError(f"{path}: not a weight file (bad magic)")
    off = len(WEIGHT_MAGIC)
    n_layers, n_heads, d_model, d_head, vocab, max_pos, ff_mult, base = _HEADER.unpack_from(raw, off)
    off += _HEADER.size
    if d_model != n_heads * d_head:
        raise ValueError(f"{path}: d_model {d_model} != n_heads*d_head {n_heads * d_head}")
    cfg = ModelConfig(n_layers, n_heads, d_head, vocab, max_pos, ff_mult, base)
    d, f = cfg.d_model, cfg.d_ff

    def take(shape):
        nonlocal off
        n = shape[0] * shape[1] * 8
        if off + n > len(raw):
            raise ValueError(f"{path}: truncated weight file")
        m = np.frombuffer(raw, dtype="<f8", count=shape[0] * shape[1], offset=off).reshape(shape)
        off += n
        return m

    emb = take((vocab, d))
    layers = [[take((d, d)) for _ in range(4)] + [take((d, f)), take((f, d))] for _ in range(n_layers)]
    head = take((d, vocab))
    if off != len(raw):
        raise ValueError(f"{path}: {len(raw) - off} trailing bytes")
    return build_weights(cfg, emb, layers, head)


# --- instrumentation --------------------------------------------------------

class PositionMonitor:
    """Tracks the largest position id ever handed to the rotary embedding."""

    def __init__(self):
        self._lock = threading.Lock()
        self.max_seen = -1
        self.calls = 0

    def record(self, positions: np.ndarray) -> None:
        if positions.size == 0:
            return
        with self._lock:
            self.calls += 1
            self.max_seen = max(self.max_seen, int(positions.max()))

    def reset(self) -> None:
        with self._lock:
            self.max_seen = -1
            self.calls = 0


class ScoreCounter:
    """Counts query-key dot products evaluated inside the attention kernel."""

    def __init__(self):
        self._lock = threading.Lock()
        self.pairs = 0

    def add(self, n: int) -> None:
        with self._lock:
            self.pairs += n

    def reset(self) -> None:
        with self._lock:
            self.pairs = 0


POSITION_MONITOR = PositionMonitor()
SCORE_COUNTER = ScoreCounter()


# --- rotary embedding -------------------------------------------------------

@dataclass(frozen=True)
class RopeTable:
    d_head: int
    max_positions: int
    base: float = 10000.0
    cos: np.ndarray = field(init=False, repr=False)
    sin: np.ndarray = field(init=False, repr=False)

    def __post_init__(self):
        inv_freq = self.base ** (-np.arange(0, self.d_head, 2) / self.d_head)
        angles = np.outer(np.arange(self.max_positions), inv_freq)
        object.__setattr__(self, "cos", np.cos(angles))
        object.__setattr__(self, "sin", np.sin(angles))


_ROPE_CACHE: dict[tuple[int, int, float], RopeTable] = {}


def rope_table(cfg: ModelConfig) -> RopeTable:
    key = (cfg.d_head, cfg.max_train_positions, cfg.rope_base)
    if key not in _ROPE_CACHE:
        _ROPE_CACHE[key] = RopeTable(*key)
    return _ROPE_CACHE[key]


def apply_rope(x, positions, table: RopeTable) -> Matrix:
    """Rotate consecutive feature pairs of each row by its position's angles.

    Raises ``IndexError`` for any position outside ``[0, max_positions)``;
    this is the extrapolation boundary.
    """
    x = np.asarray(x, dtype=np.float64)
    positions = np.asarray(positions, dtype=np.int64)
    if x.ndim != 2 or x.shape[1] != table.d_head:
        raise ShapeError(f"expected (tokens, {table.d_head}), got {x.shape}")
    if positions.shape != (x.shape[0],):
        raise ShapeError(f"{positions.shape[0] if positions.ndim else 0} positions for {x.shape[0]} rows")
    if positions.size and (positions.min() < 0 or positions.max() >= table.max_positions):
        raise IndexError(
            f"position {int(positions.max())} outside the trained range [0, {table.max_positions})"
        )
    POSITION_MONITOR.record(positions)
    cos, sin = table.cos[positions], table.sin[positions]
    even, odd = x[:, 0::2], x[:, 1::2]
    out = np.empty_like(x)
    out[:, 0::2] = even * cos - odd * sin
    out[:, 1::2] = even * sin + odd * cos
    return out


# --- forward ----------------------------------------------------------------

def rms_norm(x: np.ndarray) -> np.ndarray:
    return x / np.sqrt(np.mean(x * x, axis=-1, keepdims=True) + NORM_EPS)


def silu(x: np.ndarray) -> np.ndarray:
    return x / (1.0 + np.exp(-x))


@dataclass
class AttentionOutput:
    projected: np.ndarray  # concatenated head outputs after W_O, (rows, d_model)
    keys: list[np.ndarray]  # per head, rotated keys of the new rows
    values: list[np.ndarray]
    attention: list[np.ndarray]  # per head, new rows x (past rows + new rows)


def attention_forward(weights: ModelWeights, layer: int, x: np.ndarray, positions,
                      past: list[tuple[np.ndarray, np.ndarray]] | None = None) -> AttentionOutput:
    """Multi-head attention of the rows ``x`` (pre-residual) at ``positions``.

    ``past`` optionally gives, per head, (keys, values) already in a cache;
    heads may hold different numbers of rows. New rows see every past row
    plus the new rows at or before themselves.
    """
    cfg = weights.config
    lw = weights.layers[layer]
    table = rope_table(cfg)
    positions = np.asarray(positions, dtype=np.int64)
    t = x.shape[0]
    h = rms_norm(x)
    q_all, k_all, v_all = h @ lw.w_q, h @ lw.w_k, h @ lw.w_v
    scale = 1.0 / np.sqrt(cfg.d_head)
    causal = np.tril(np.ones((t, t), dtype=bool))
    heads_out, keys, values, attns = [], [], [], []
    for hd in range(cfg.n_heads):
        sl = slice(hd * cfg.d_head, (hd + 1) * cfg.d_head)
        q = apply_rope(q_all[:, sl], positions, table)
        k = apply_rope(k_all[:, sl], positions, table)
        v = v_all[:, sl]
        keys.append(k)
        values.append(v)
        if past is not None:
            pk, pv = past[hd]
            k = np.concatenate([pk, k])
            v = np.concatenate([pv, v])
            mask = np.concatenate([np.ones((t, pk.shape[0]), dtype=bool), causal], axis=1)
        else:
            mask = causal
        scores = q @ k.T
        SCORE_COUNTER.add(scores.size)
        a = softmax_rows(scores, scale, mask)
        attns.append(a)
        heads_out.append(a @ v)
    return AttentionOutput(np.concatenate(heads_out, axis=1) @ lw.w_o, keys, values, attns)


def feed_forward(weights: ModelWeights, layer: int, x: np.ndarray) -> np.ndarray:
    lw = weights.layers[layer]
    return silu(rms_norm(x) @ lw.w_up) @ lw.w_down


def embed(weights: ModelWeights, tokens) -> np.ndarray:
    tokens = np.asarray(tokens, dtype=np.int64)
    v = weights.config.vocab_size
    if tokens.size and (tokens.min() < 0 or tokens.max() >= v):
        raise ValueError(f"token id outside vocabulary [0, {v})")
    return weights.token_embedding[tokens].copy()


def lm_logits(weights: ModelWeights, x: np.ndarray) -> np.ndarray:
    return rms_norm(x) @ weights.lm_head


@dataclass
class LocalForward:
    keys: list[list[np.ndarray]]  # [layer][head] -> (T, d_head), rotated
    values: list[list[np.ndarray]]
    attention: list[list[np.ndarray]]  # [layer][head] -> (T, T), lower triangular
    logits: np.ndarray  # (T, vocab)


def forward_local(weights: ModelWeights, tokens, positions) -> LocalForward:
    """Causal forward pass over one self-contained sequence."""
    tokens = np.asarray(tokens, dtype=np.int64)
    positions = np.asarray(positions, dtype=np.int64)
    if tokens.shape != positions.shape or tokens.ndim != 1:
        raise ShapeError(f"{tokens.shape} tokens vs {positions.shape} positions")
    if tokens.size == 0:
        raise ValueError("empty token sequence")
    if tokens.size > weights.config.max_train_positions:
        raise ValueError(
            f"{tokens.size} tokens exceed the position budget {weights.config.max_train_positions}"
        )
    x = embed(weights, tokens)
    keys, values, attns = [], [], []
    for layer in range(weights.config.n_layers):
        out = attention_forward(weights, layer, x, positions)
        x = x + out.projected
        x = x + feed_forward(weights, layer, x)
        keys.append(out.keys)
        values.append(out.values)
        attns.append(out.attention)
    return LocalForward(keys, values, attns, lm_logits(weights, x))
