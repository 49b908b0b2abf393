"""Attention-bias and sparsity measurements.

Profiles and pattern labels for attention over key positions, outlier
counting (shared with calibration eviction), effective-entry counts, the
width sweep for the sparsity trend and an exponential-decay fit.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .eviction import outlier_indices, outlier_threshold
from .model import ModelWeights, forward_local
from .tensor import softmax_rows

U_SHAPE = "U-shape"
MOUNTAIN = "Mountain-shape"
UNIFORM = "Uniform-shape"
PATTERNS = (U_SHAPE, MOUNTAIN, UNIFORM)


def attention_profile(a, rows, columns=None) -> np.ndarray:
    """Mean attention per key position over ``rows``, renormalized to sum to one.

    ``columns`` optionally restricts the key positions (e.g. context only).
    """
    a = np.asarray(a, dtype=np.float64)
    rows = np.asarray(rows, dtype=np.int64)
    if rows.size == 0:
        raise ValueError("attention_profile needs at least one row")
    if rows.min() < 0 or rows.max() >= a.shape[0]:
        raise IndexError(f"row index outside [0, {a.shape[0]})")
    sub = a[rows] if columns is None else a[rows][:, columns]
    prof = sub.mean(axis=0)
    total = prof.sum()
    if total <= 0:
        raise ValueError("selected attention has no mass")
    return prof / total


def _band_sizes(n: int, head_frac: float, tail_frac: float) -> tuple[int, int]:
    nh = max(1, math.ceil(head_frac * n))
    nt = max(1, math.ceil(tail_frac * n))
    if nh + nt > n:
        nh, nt = n // 2, n - n // 2
    return nh, nt


def band_masses(profile, head_frac: float = 0.1, tail_frac: float = 0.1) -> tuple[float, float, float]:
    """(head, middle, tail) mass fractions of a profile; it is normalized first."""
    p = np.asarray(profile, dtype=np.float64)
    p = p / p.sum()
    nh, nt = _band_sizes(p.size, head_frac, tail_frac)
    h, t = float(p[:nh].sum()), float(p[p.size - nt:].sum())
    return h, 1.0 - h - t, t


def classify_pattern(profile, head_frac: float = 0.1, tail_frac: float = 0.1) -> str:
    """Label a profile U-shape, Mountain-shape or Uniform-shape.

    Rules, in order, with u_* the masses a uniform profile would put in each band:
    head and tail both above twice their uniform share -> U-shape; middle above
    twice its share with the argmax inside the middle band -> Mountain-shape;
    every entry within 50% of the uniform level -> Uniform-shape; otherwise the
    most over-represented band decides (head or tail -> U-shape, middle -> Mountain).
    """
    p = np.asarray(profile, dtype=np.float64)
    if p.size < 3 or np.any(p < 0) or p.sum() <= 0:
        raise ValueError("profile needs >= 3 non-negative entries with positive mass")
    p = p / p.sum()
    n = p.size
    nh, nt = _band_sizes(n, head_frac, tail_frac)
    nm = n - nh - nt
    h, m, t = band_masses(p, head_frac, tail_frac)
    uh, um, ut = nh / n, nm / n, nt / n
    if h > 2 * uh and t > 2 * ut:
        return U_SHAPE
    if nm and m > 2 * um and nh <= int(np.argmax(p)) < n - nt:
        return MOUNTAIN
    if np.max(np.abs(p - 1.0 / n)) < 0.5 / n:
        return UNIFORM
    ratios = [h / uh, m / um if nm else -math.inf, t / ut]
    return MOUNTAIN if int(np.argmax(ratios)) == 1 else U_SHAPE


def count_outliers(scores, lambda_mult: float, threshold: float | None = None) -> np.ndarray:
    """Indices whose score exceeds ``lambda_mult * mean(scores)`` (or an explicit threshold)."""
    s = np.asarray(scores, dtype=np.float64)
    if s.size == 0:
        raise ValueError("count_outliers needs a non-empty score vector")
    if threshold is None:
        threshold = outlier_threshold(s, lambda_mult)
    return outlier_indices(s, threshold)


def effective_entries(row, epsilon: float) -> int:
    return int(np.count_nonzero(np.asarray(row) > epsilon))


# --- sparsity sweep ---------------------------------------------------------

def synthetic_decay_attention(width: int, rate: float, rng: np.random.Generator,
                              noise: float = 1.0) -> np.ndarray:
    """Softmax attention whose logits fall linearly with distance plus Gaussian noise.

    logit[i, j] = -rate * |i - j| + noise * N(0, 1)
    """
    d = np.abs(np.subtract.outer(np.arange(width), np.arange(width)))
    logits = -rate * d + noise * rng.standard_normal((width, width))
    return softmax_rows(logits)


@dataclass(frozen=True)
class SparsityRecord:
    w: int
    epsilon: float
    effective_mean: float
    effective_std: float

    @property
    def ineffective_mean(self) -> float:
        return self.w - self.effective_mean

    @property
    def fraction(self) -> float:
        return self.effective_mean / self.w


@dataclass
class SparsityCurve:
    records: list[SparsityRecord]
    per_trial: np.ndarray  # (trials, widths) mean effective count per trial

    def trend_votes(self) -> np.ndarray:
        """Per trial, whether the effective fraction is non-increasing along the width ladder."""
        widths = np.array([r.w for r in self.records], dtype=np.float64)
        frac = self.per_trial / widths
        return np.all(np.diff(frac, axis=1) <= 0, axis=1)

    def trend_passes(self) -> bool:
        votes = self.trend_votes()
        return bool(votes.sum() * 2 > votes.size)


def _toy_rows(weights: ModelWeights, width: int, rng: np.random.Generator) -> list[np.ndarray]:
    tokens = rng.integers(0, weights.config.vocab_size, width)
    fwd = forward_local(weights, tokens, np.arange(width))
    return [a[-1] for layer in fwd.attention for a in layer]


def sparsity_sweep(widths, epsilon: float, trials: int, mode: str = "synthetic-decay",
                   weights: ModelWeights | None = None, rate: float = 0.25, noise: float = 1.0,
                   seed: int = 0) -> SparsityCurve:
    """Mean number of attention entries above ``epsilon`` per row, for each width.

    ``synthetic-decay`` averages every row of :func:`synthetic_decay_attention`;
    ``toy-model`` averages the last (full-length) causal row of every head of a
    forward pass over random tokens, so widths must fit the position budget.
    """
    widths = [int(w) for w in widths]
    if trials < 1:
        raise ValueError("trials must be >= 1")
    if mode not in ("synthetic-decay", "toy-model"):
        raise ValueError(f"unknown sweep mode {mode!r}")
    if mode == "toy-model":
        if weights is None:
            raise ValueError("toy-model sweep needs weights")
        limit = weights.config.max_train_positions
        if max(widths) > limit:
            raise ValueError(f"toy-model widths must be <= the position budget {limit}")
    rng = np.random.default_rng(seed)
    per_trial = np.zeros((trials, len(widths)))
    for t in range(trials):
        for k, w in enumerate(widths):
            if mode == "synthetic-decay":
                a = synthetic_decay_attention(w, rate, rng, noise)
                per_trial[t, k] = np.count_nonzero(a > epsilon) / w
            else:
                per_trial[t, k] = np.mean([effective_entries(r, epsilon) for r in _toy_rows(weights, w, rng)])
    records = [SparsityRecord(w, epsilon, float(per_trial[:, k].mean()), float(per_trial[:, k].std()))
               for k, w in enumerate(widths)]
    return SparsityCurve(records, per_trial)


# --- decay ------------------------------------------------------------------

def decay_fit(distances, attention) -> tuple[float, float]:
    """Least-squares fit of log(attention) against distance; returns (decay rate, r^2)."""
    x = np.asarray(distances, dtype=np.float64)
    y = np.asarray(attention, dtype=np.float64)
    if x.size != y.size:
        raise ValueError("distances and attention differ in length")
    if x.size < 8:
        raise ValueError("decay_fit needs at least 8 points")
    if np.any(y <= 0):
        raise ValueError("attention values must be positive")
    if np.ptp(x) == 0:
        raise ValueError("all distances are equal")
    ly = np.log(y)
    slope, intercept = np.polyfit(x, ly, 1)
    resid = ly - (slope * x + intercept)
    ss_tot = float(np.sum((ly - ly.mean()) ** 2))
    # a flat profile has nothing to explain
    r2 = 0.0 if ss_tot <= 1e-24 else 1.0 - float(np.sum(resid ** 2)) / ss_tot
    return float(-slope), r2


def attention_by_distance(a, causal: bool = True) -> tuple[np.ndarray, np.ndarray]:
    """Mean attention at each query-key distance (keys at or before the query when ``causal``)."""
    a = np.asarray(a, dtype=np.float64)
    n = max(a.shape)
    i, j = np.indices(a.shape)
    d = (i - j) if causal else np.abs(i - j)
    valid = d >= 0
    dist = np.arange(n)
    sums = np.bincount(d[valid], weights=a[valid], minlength=n)
    counts = np.bincount(d[valid], minlength=n)
    keep = counts > 0
    return dist[keep], sums[keep] / counts[keep]


# --- pipeline-level reports -------------------------------------------------

@dataclass(frozen=True)
class HeadReport:
    layer: int
    head: int
    profile: np.ndarray
    label: str
    head_mass: float
    middle_mass: float
    tail_mass: float


def local_profiles(states, q_obs: int, head_frac: float = 0.1, tail_frac: float = 0.1) -> list[HeadReport]:
    """Per (layer, head) profile of the trailing query rows over context positions.

    Chunks shorter than the first chunk are skipped so profiles share one
    position axis.
    """
    if not states:
        raise ValueError("no chunk states captured")
    width = states[0].context_len
    full = [s for s in states if s.context_len == width]
    reports = []
    for layer in range(full[0].n_layers):
        for head in range(full[0].n_heads):
            profs = []
            for s in full:
                rows = np.arange(s.length - min(q_obs, s.query_len), s.length)
                profs.append(attention_profile(s.attention[layer][head], rows, np.arange(width)))
            prof = np.mean(profs, axis=0)
            prof = prof / prof.sum()
            h, m, t = band_masses(prof, head_frac, tail_frac)
            reports.append(HeadReport(layer, head, prof, classify_pattern(prof, head_frac, tail_frac), h, m, t))
    return reports


def outlier_counts(states, compressed, lambda_mult: float) -> list[tuple[int, int, int]]:
    """Per (layer, head): outliers among retained context rows, summed over chunks.

    The threshold is fixed from each head's original scores, so rows
    removed by calibration no longer count.
    """
    L, H = states[0].n_layers, states[0].n_heads
    out = []
    for layer in range(L):
        for head in range(H):
            total = 0
            for s, kv in zip(states, compressed):
                sc = s.scores[layer][head]
                idx = kv.context_rows(layer, head)[0]
                thr = outlier_threshold(sc, lambda_mult)
                total += int(np.count_nonzero(sc[idx] > thr))
            out.append((layer, head, total))
    return out


def parallel_vs_local(result, q_obs: int, tail_frac: float = 0.1) -> list[tuple[int, int, float, float, float, float]]:
    """Compare local and global attention bias per (layer, head).

    For each, reports the mass share on the first and last ``tail_frac`` of
    every chunk's context rows, under local attention (trailing query rows,
    averaged over chunks) and under global attention (query rows over the
    concatenated retained rows). Returns (layer, head, local_head, global_head,
    local_tail, global_tail).
    """
    plan = result.plan
    states = result.states
    rows_out = []
    for layer, g_heads in enumerate(result.global_attention):
        for head, ag in enumerate(g_heads):
            lh = lt = 0.0
            for s in states:
                rows = np.arange(s.length - min(q_obs, s.query_len), s.length)
                p = attention_profile(s.attention[layer][head], rows, np.arange(s.context_len))
                nh, nt = _band_sizes(s.context_len, tail_frac, tail_frac)
                lh += p[:nh].sum()
                lt += p[s.context_len - nt:].sum()
            lh /= len(states)
            lt /= len(states)
            segs = result.cache.segments[layer][head]
            ctx = [i for i, sg in enumerate(segs[: ag.shape[1]]) if sg.kind == "chunk"]
            if ctx:
                mass = ag[:, ctx].mean(axis=0)
                mass = mass / mass.sum() if mass.sum() > 0 else mass
                gh = gt = 0.0
                for m, i in zip(mass, ctx):
                    sg = segs[i]
                    nh, nt = _band_sizes(plan.chunk_len(sg.chunk), tail_frac, tail_frac)
                    if sg.position < nh:
                        gh += m
                    if sg.position >= plan.chunk_len(sg.chunk) - nt:
                        gt += m
            else:
                gh = gt = float("nan")
            rows_out.append((layer, head, float(lh), float(gh), float(lt), float(gt)))
    return rows_out
