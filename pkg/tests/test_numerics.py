import warnings

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

import oracles
from stlayout.errors import NumericalError, ShapeError
from stlayout.numerics import (
    Axis,
    ZeroNormWarning,
    as_matrix,
    cosine_similarity,
    matmul,
    rowwise_extreme,
    softmax_rows,
)

finite = st.floats(-1e3, 1e3, allow_nan=False, allow_infinity=False)


def test_identity_product():
    x = np.arange(6.0).reshape(2, 3)
    assert np.array_equal(matmul([[1, 0], [0, 1]], x), x)


def test_hand_product():
    assert matmul([[1, 2]], [[3], [4]]).tolist() == [[11.0]]


def test_product_matches_triple_loop(rng):
    a = rng.standard_normal((7, 5))
    b = rng.standard_normal((5, 3))
    np.testing.assert_allclose(matmul(a, b), oracles.matmul(a, b), rtol=0, atol=1e-12)


def test_product_shape_error_names_both_shapes():
    with pytest.raises(ShapeError, match=r"\(2, 3\).*\(2, 3\)"):
        matmul(np.ones((2, 3)), np.ones((2, 3)))


def test_non_finite_input_rejected():
    with pytest.raises(NumericalError):
        as_matrix([[1.0, np.nan]])
    with pytest.raises(NumericalError):
        matmul([[np.inf]], [[1.0]])


def test_non_matrix_rejected():
    with pytest.raises(ShapeError):
        as_matrix([1.0, 2.0])


@given(
    st.integers(2, 16).flatmap(
        lambda n: st.tuples(
            arrays(np.float64, (n, 3), elements=finite),
            arrays(np.float64, (3, 4), elements=finite),
            arrays(np.float64, (4, 2), elements=finite),
        )
    )
)
@settings(max_examples=50, deadline=None)
def test_associativity_against_oracle(mats):
    a, b, c = mats
    left = matmul(matmul(a, b), c)
    right = oracles.matmul(a, oracles.matmul(b, c))
    scale = np.abs(a).max() * np.abs(b).max() * np.abs(c).max() * 12 + 1.0
    np.testing.assert_allclose(left, right, rtol=0, atol=1e-10 * scale)


def test_softmax_uniform_row():
    np.testing.assert_allclose(softmax_rows([[0, 0, 0]]), [[1 / 3] * 3], atol=1e-15)


def test_softmax_large_equal_logits():
    assert softmax_rows([[1000.0, 1000.0]]).tolist() == [[0.5, 0.5]]


def test_softmax_matches_direct_formula():
    np.testing.assert_allclose(softmax_rows([[1, 2, 3]])[0], oracles.softmax([1, 2, 3]), atol=1e-12)


@given(arrays(np.float64, st.tuples(st.integers(1, 6), st.integers(1, 9)),
              elements=st.floats(-1e6, 1e6, allow_nan=False)))
@settings(max_examples=100, deadline=None)
def test_softmax_rows_sum_to_one(x):
    p = softmax_rows(x)
    assert np.all(p >= 0)
    np.testing.assert_allclose(p.sum(axis=1), 1.0, atol=1e-9)


def test_softmax_needs_a_column():
    with pytest.raises(ShapeError):
        softmax_rows(np.empty((2, 0)))


def test_rowwise_extremes():
    m = [[1, 3], [5, 2]]
    assert rowwise_extreme(m, "max").tolist() == [3, 5]
    assert rowwise_extreme(m, "min").tolist() == [1, 2]
    assert rowwise_extreme(m, "max", Axis.COLS).tolist() == [5, 3]


def test_rowwise_extreme_constant_matrix():
    m = np.full((3, 4), 2.5)
    assert (rowwise_extreme(m, "max") == 2.5).all()
    assert (rowwise_extreme(m, "min") == 2.5).all()


def test_rowwise_extreme_errors():
    with pytest.raises(ShapeError):
        rowwise_extreme(np.empty((0, 3)), "max")
    with pytest.raises(ValueError):
        rowwise_extreme([[1.0]], "median")


@given(arrays(np.float64, st.tuples(st.integers(1, 5), st.integers(1, 7)), elements=finite))
@settings(max_examples=60, deadline=None)
def test_rowwise_extreme_bounds(m):
    assert (rowwise_extreme(m, "max")[:, None] >= m).all()
    assert (rowwise_extreme(m, "min")[:, None] <= m).all()


def test_cosine_examples():
    v = np.array([0.3, -1.2, 2.0])
    assert cosine_similarity(v, v) == pytest.approx(1.0, abs=1e-15)
    assert cosine_similarity([1, 0], [0, 1]) == 0.0
    assert cosine_similarity([1, 0], [-1, 0]) == -1.0


def test_cosine_zero_norm_warns_and_returns_zero():
    with pytest.warns(ZeroNormWarning):
        assert cosine_similarity([0, 0], [1, 2]) == 0.0


def test_cosine_length_mismatch():
    with pytest.raises(ShapeError):
        cosine_similarity([1, 2], [1, 2, 3])


vec = arrays(np.float64, 5, elements=st.floats(-100, 100, allow_nan=False))


@given(vec, vec, st.floats(1e-3, 1e3))
@settings(max_examples=100, deadline=None)
def test_cosine_symmetric_and_scale_invariant(a, b, alpha):
    if np.linalg.norm(a) < 1e-6 or np.linalg.norm(b) < 1e-6:
        return
    with warnings.catch_warnings():
        warnings.simplefilter("error")
        base = cosine_similarity(a, b)
        assert cosine_similarity(b, a) == pytest.approx(base, abs=1e-12)
        assert cosine_similarity(alpha * a, b) == pytest.approx(base, abs=1e-12)
    assert base == pytest.approx(max(-1.0, min(1.0, oracles.cosine(a, b))), abs=1e-12)
