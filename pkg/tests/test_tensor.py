import math

import mpmath
import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from chunkcomp.tensor import (
    ShapeError,
    bottom_k_indices,
    log_softmax_row,
    matmul,
    softmax_rows,
    top_k_indices,
)


def triple_loop(a, b):
    out = [[0.0] * len(b[0]) for _ in a]
    for i in range(len(a)):
        for j in range(len(b[0])):
            out[i][j] = math.fsum(a[i][k] * b[k][j] for k in range(len(b)))
    return np.array(out)


def test_matmul_identity():
    m = np.array([[1.5, -2.0], [0.25, 4.0]])
    assert np.array_equal(matmul(np.eye(2), m), m)


def test_matmul_hand_case():
    assert matmul([[1, 2], [3, 4]], [[0], [1]]).tolist() == [[2], [4]]


def test_matmul_matches_triple_loop(rng):
    a, b = rng.standard_normal((7, 5)), rng.standard_normal((5, 3))
    np.testing.assert_allclose(matmul(a, b), triple_loop(a.tolist(), b.tolist()), rtol=1e-12, atol=1e-12)


@given(st.integers(1, 16), st.integers(1, 16), st.integers(1, 16), st.integers(0, 2**31))
def test_matmul_oracle_random_dims(n, k, m, seed):
    r = np.random.default_rng(seed)
    a, b = r.standard_normal((n, k)), r.standard_normal((k, m))
    ref = triple_loop(a.tolist(), b.tolist())
    scale = np.abs(a) @ np.abs(b)
    assert np.all(np.abs(matmul(a, b) - ref) <= 1e-12 * np.maximum(scale, 1e-300))


def test_matmul_shape_error_names_both_shapes():
    with pytest.raises(ShapeError, match="2x3 by 2x2"):
        matmul(np.ones((2, 3)), np.ones((2, 2)))


def test_softmax_examples():
    np.testing.assert_allclose(softmax_rows([[0.0, 0.0]]), [[0.5, 0.5]])
    big = softmax_rows([[1000.0, 0.0]])
    assert np.all(np.isfinite(big))
    np.testing.assert_allclose(big, [[1.0, 0.0]], atol=1e-300)
    np.testing.assert_allclose(softmax_rows([[math.log(2), 0.0]], 1.0), [[2 / 3, 1 / 3]], rtol=1e-14)


def test_softmax_rejects_nonfinite_and_bad_scale():
    with pytest.raises(ValueError):
        softmax_rows([[np.inf, 0.0]])
    with pytest.raises(ValueError):
        softmax_rows([[np.nan, 0.0]])
    with pytest.raises(ValueError):
        softmax_rows([[0.0, 0.0]], scale=0.0)


def test_softmax_mask_zeroes_entries():
    out = softmax_rows(np.zeros((2, 2)), mask=np.tril(np.ones((2, 2), dtype=bool)))
    assert out.tolist() == [[1.0, 0.0], [0.5, 0.5]]


finite = st.floats(-1e6, 1e6, allow_nan=False)


@given(arrays(np.float64, st.tuples(st.integers(1, 8), st.integers(1, 12)), elements=finite),
       st.floats(1e-3, 10.0))
def test_softmax_rows_sum_to_one(m, scale):
    out = softmax_rows(m, scale)
    assert np.all(np.isfinite(out))
    assert np.all((out >= 0) & (out <= 1))
    np.testing.assert_allclose(out.sum(axis=1), 1.0, atol=1e-6)


@given(arrays(np.float64, st.integers(2, 12), elements=st.floats(-50, 50)))
def test_softmax_monotone_within_row(v):
    out = softmax_rows(v[None, :])[0]
    order = np.argsort(v, kind="stable")
    assert np.all(np.diff(out[order]) >= 0)


def test_log_softmax_examples():
    np.testing.assert_allclose(log_softmax_row([0.0, 0.0]), [-math.log(2)] * 2, rtol=1e-15)
    out = log_softmax_row([1000.0, 0.0])
    assert abs(out[0]) < 1e-300 and abs(out[1] + 1000.0) < 1e-9
    with pytest.raises(ValueError):
        log_softmax_row([])


def test_log_softmax_wide_accumulator_oracle(rng):
    v = rng.standard_normal(9) * 5
    mpmath.mp.dps = 50
    lse = mpmath.log(mpmath.fsum(mpmath.exp(mpmath.mpf(float(x))) for x in v))
    ref = [float(mpmath.mpf(float(x)) - lse) for x in v]
    np.testing.assert_allclose(log_softmax_row(v), ref, rtol=0, atol=1e-10)
    assert abs(np.exp(log_softmax_row(v)).sum() - 1) < 1e-6


def full_sort_top(v, k):
    return sorted(sorted(range(len(v)), key=lambda i: (-v[i], i))[:k])


def test_top_k_examples():
    assert top_k_indices([0.1, 0.4, 0.3, 0.2], 2).tolist() == full_sort_top([0.1, 0.4, 0.3, 0.2], 2) == [1, 2]
    assert bottom_k_indices([0.3, 0.1], 0).tolist() == []
    assert top_k_indices([0.5, 0.5, 0.1], 1).tolist() == [0]
    assert bottom_k_indices([0.5, 0.1, 0.1], 1).tolist() == [1]
    with pytest.raises(ValueError):
        top_k_indices([1.0], 2)


@given(st.lists(st.integers(0, 5), min_size=1, max_size=30), st.data())
def test_top_k_matches_full_sort_with_ties(values, data):
    v = [float(x) for x in values]
    k = data.draw(st.integers(0, len(v)))
    assert top_k_indices(v, k).tolist() == full_sort_top(v, k)
    bottom = sorted(sorted(range(len(v)), key=lambda i: (v[i], i))[:k])
    assert bottom_k_indices(v, k).tolist() == bottom


@given(st.lists(st.floats(-100, 100), min_size=1, max_size=30, unique=True), st.data())
def test_top_and_bottom_partition(v, data):
    k = data.draw(st.integers(0, len(v)))
    top = set(top_k_indices(v, k).tolist())
    bottom = set(bottom_k_indices(v, len(v) - k).tolist())
    assert top.isdisjoint(bottom) and top | bottom == set(range(len(v)))
