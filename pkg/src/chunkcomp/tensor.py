"""Dense float64 primitives: checked matmul, stable softmax, top/bottom-k.

Matrices are plain 2-D ``numpy.ndarray`` objects in row-major float64.
"""

from __future__ import annotations

import numpy as np

Matrix = np.ndarray


class ShapeError(ValueError):
    """Raised when operand shapes are incompatible."""


def as_matrix(a) -> Matrix:
    m = np.asarray(a, dtype=np.float64)
    if m.ndim != 2:
        raise ShapeError(f"expected a 2-D matrix, got shape {m.shape}")
    return m


def _check_finite(m: np.ndarray, what: str) -> None:
    if not np.all(np.isfinite(m)):
        raise ValueError(f"{what} contains non-finite values")


def matmul(a, b) -> Matrix:
    """Return ``a @ b`` after validating that the inner dimensions agree."""
    a = as_matrix(a)
    b = as_matrix(b)
    if a.shape[1] != b.shape[0]:
        raise ShapeError(
            f"cannot multiply {a.shape[0]}x{a.shape[1]} by {b.shape[0]}x{b.shape[1]}"
        )
    return a @ b


def softmax_rows(m, scale: float = 1.0, mask: np.ndarray | None = None) -> Matrix:
    """Row-wise softmax of ``scale * m``.

    ``mask`` is an optional boolean array of the same shape; ``False``
    entries are excluded and come out as exact zeros. Every row must keep at
    least one entry.
    """
    m = as_matrix(m)
    if scale <= 0:
        raise ValueError(f"scale must be positive, got {scale}")
    _check_finite(m, "softmax input")
    z = m * scale
    if mask is not None:
        mask = np.asarray(mask, dtype=bool)
        if mask.shape != m.shape:
            raise ShapeError(f"mask shape {mask.shape} != input shape {m.shape}")
        if not np.all(mask.any(axis=1)):
            raise ValueError("every softmax row needs at least one unmasked entry")
        z = np.where(mask, z, -np.inf)
    z = z - z.max(axis=1, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=1, keepdims=True)


def logsumexp(v) -> float:
    v = np.asarray(v, dtype=np.float64)
    hi = v.max()
    return float(hi + np.log(np.exp(v - hi).sum()))


def log_softmax_row(v) -> np.ndarray:
    v = np.asarray(v, dtype=np.float64).ravel()
    if v.size == 0:
        raise ValueError("log_softmax_row of an empty vector")
    _check_finite(v, "log_softmax input")
    return v - logsumexp(v)


def _check_k(v: np.ndarray, k: int) -> None:
    if k < 0 or k > v.size:
        raise ValueError(f"k={k} outside [0, {v.size}]")


def top_k_indices(v, k: int) -> np.ndarray:
    """Indices of the ``k`` largest values, ties to the lower index, sorted ascending."""
    v = np.asarray(v, dtype=np.float64).ravel()
    _check_k(v, k)
    # stable argsort on -v keeps lower indices first among equal values
    order = np.argsort(-v, kind="stable")
    return np.sort(order[:k])


def bottom_k_indices(v, k: int) -> np.ndarray:
    """Indices of the ``k`` smallest values, ties to the lower index, sorted ascending."""
    v = np.asarray(v, dtype=np.float64).ravel()
    _check_k(v, k)
    order = np.argsort(v, kind="stable")
    return np.sort(order[:k])
