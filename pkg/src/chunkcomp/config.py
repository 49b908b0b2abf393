"""Run configuration: flat ``key = value`` files with ``#`` comments, overridable from the CLI."""

from __future__ import annotations

import dataclasses
import math
from dataclasses import dataclass
from pathlib import Path

from .eviction import MODES, parse_schedule
from .model import ModelConfig
from .pipeline import PipelineSettings


class ConfigError(ValueError):
    """Invalid configuration value; maps to exit code 1."""


def _opt_int(text: str) -> int | None:
    t = text.strip().lower()
    if t in ("", "none", "auto", "full"):
        return None
    return int(t)


def _float(text: str) -> float:
    t = text.strip().lower()
    if t in ("inf", "+inf", "infinity"):
        return math.inf
    return float(t)


def _opt_str(text: str) -> str | None:
    t = text.strip()
    return None if t.lower() in ("", "none") else t


def _int_list(text: str) -> tuple[int, ...]:
    return tuple(int(x) for x in text.split(",") if x.strip())


def _budget_list(text: str) -> tuple[int | None, ...]:
    return tuple(_opt_int(x) for x in text.split(",") if x.strip())


def _bool(text: str) -> bool:
    t = text.strip().lower()
    if t in ("1", "true", "yes", "on"):
        return True
    if t in ("0", "false", "no", "off"):
        return False
    raise ValueError(f"not a boolean: {text!r}")


@dataclass(frozen=True)
class RunConfig:
    # model: either a weight file or dims + seed
    weights: str | None = None
    n_layers: int = 8
    n_heads: int = 4
    d_head: int = 16
    vocab_size: int = 256
    max_train_positions: int = 128
    ff_mult: int = 2
    seed: int = 0
    init_gain: float = 1.0
    # inputs
    context: str | None = None
    query: str | None = None
    token_format: str = "text"
    # pipeline
    chunk_width: int = 96
    q_obs: int = 8
    kv_budget: int | None = None
    queue_capacity: int = 3
    epsilon: float = math.inf
    lambda_mult: float = 5.0
    mode: str = "none"
    layer_schedule: str = "default"
    sink_len: int | None = None
    recency_len: int | None = None
    max_new: int = 0
    workers: int = 1
    bias_report: bool = False
    out: str = "out"
    # bench
    memory_budget_bytes: int = 64 * 1024 * 1024
    budgets: tuple[int | None, ...] = (None, 48)
    # sparsity verification
    widths: tuple[int, ...] = (64, 128, 256, 512)
    sparsity_epsilon: float = 0.01
    trials: int = 20
    sweep_mode: str = "synthetic-decay"
    decay_rate: float = 0.25

    def model_config(self) -> ModelConfig:
        return ModelConfig(self.n_layers, self.n_heads, self.d_head, self.vocab_size,
                           self.max_train_positions, self.ff_mult)

    def settings(self, **overrides) -> PipelineSettings:
        kw = dict(chunk_width=self.chunk_width, q_obs=self.q_obs, kv_budget=self.kv_budget,
                  queue_capacity=self.queue_capacity, epsilon=self.epsilon, lambda_mult=self.lambda_mult,
                  mode=self.mode, layer_schedule=self.layer_schedule, sink_len=self.sink_len,
                  recency_len=self.recency_len, max_new=self.max_new, workers=self.workers)
        kw.update(overrides)
        return PipelineSettings(**kw)

    def validate(self) -> "RunConfig":
        try:
            if self.weights is None:
                cfg = self.model_config()
                if self.chunk_width + 1 > cfg.max_train_positions:
                    raise ValueError(f"chunk_width {self.chunk_width} leaves no room for a query "
                                     f"within {cfg.max_train_positions} positions")
                parse_schedule(self.layer_schedule, cfg.n_layers)
            if self.chunk_width < 1:
                raise ValueError("chunk_width must be >= 1")
            if self.mode not in MODES:
                raise ValueError(f"mode must be one of {MODES}")
            if self.kv_budget is not None and self.kv_budget < 1:
                raise ValueError("kv_budget must be >= 1")
            if not self.lambda_mult > 1:
                raise ValueError("lambda_mult must be > 1")
            if self.token_format not in ("text", "binary"):
                raise ValueError("token_format must be 'text' or 'binary'")
            if self.memory_budget_bytes <= 0:
                raise ValueError("memory_budget_bytes must be > 0")
            if not self.budgets:
                raise ValueError("budgets must list at least one kv budget")
            if any(b is not None and b < 1 for b in self.budgets):
                raise ValueError("every bench budget must be >= 1 (or 'full')")
            if not self.widths or list(self.widths) != sorted(self.widths) or min(self.widths) < 1:
                raise ValueError("widths must be positive and ascending")
            if self.trials < 1:
                raise ValueError("trials must be >= 1")
            if self.sweep_mode not in ("synthetic-decay", "toy-model"):
                raise ValueError("sweep_mode must be 'synthetic-decay' or 'toy-model'")
            for name in ("sink_len", "recency_len"):
                v = getattr(self, name)
                if v is not None and v < 0:
                    raise ValueError(f"{name} must be >= 0")
            self.settings()
        except ValueError as exc:
            raise ConfigError(str(exc)) from None
        return self


_CONVERTERS = {
    "int": int,
    "float": _float,
    "str": str,
    "bool": _bool,
    "int | None": _opt_int,
    "str | None": _opt_str,
    "tuple[int, ...]": _int_list,
    "tuple[int | None, ...]": _budget_list,
}

FIELDS = {f.name: _CONVERTERS[f.type] for f in dataclasses.fields(RunConfig)}


def parse_value(key: str, text: str):
    if key not in FIELDS:
        raise ConfigError(f"unknown config key {key!r}")
    try:
        return FIELDS[key](text.strip())
    except ValueError as exc:
        raise ConfigError(f"{key}: {exc}") from None


def parse_config_text(text: str, source: str = "<config>") -> dict:
    values = {}
    for lineno, raw in enumerate(text.splitlines(), 1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        key, sep, val = line.partition("=")
        if not sep:
            raise ConfigError(f"{source}:{lineno}: expected 'key = value', got {raw.strip()!r}")
        key = key.strip()
        values[key] = parse_value(key, val)
    return values


def load_config(path=None, overrides: dict[str, str] | None = None) -> RunConfig:
    """Build a validated RunConfig from an optional file plus string overrides.

    Raises ``OSError`` if the file cannot be read and ``ConfigError`` for bad values.
    """
    values = {}
    if path is not None:
        values.update(parse_config_text(Path(path).read_text(), str(path)))
    for key, text in (overrides or {}).items():
        values[key] = parse_value(key, text)
    return RunConfig(**values).validate()


def dump_config(cfg: RunConfig) -> str:
    """Serialize every field except ``out`` so results do not depend on where they are written."""
    lines = []
    for f in dataclasses.fields(cfg):
        if f.name == "out":
            continue
        v = getattr(cfg, f.name)
        if isinstance(v, tuple):
            v = ",".join("full" if x is None else str(x) for x in v)
        elif v is None:
            v = "none"
        lines.append(f"{f.name} = {v}")
    return "\n".join(lines) + "\n"
