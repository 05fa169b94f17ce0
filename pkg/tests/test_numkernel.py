import math

import numpy as np
import pytest

from hypothesis import given, seed, settings
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from pyfedattn.errors import ShapeError, DegenerateRowError, ExitCode
from pyfedattn.numkernel import (
    as_mat,
    matmul,
    row_sum,
    softmax_rows,
    layernorm,
    frob_norm,
    frob_dist,
)

from tests import naive

finite = st.floats(min_value=-10.0, max_value=10.0, allow_nan=False, allow_infinity=False)


@st.composite
def matrix_pair(draw):
    n = draw(st.integers(1, 6))
    k = draw(st.integers(1, 6))
    m = draw(st.integers(1, 6))
    a = draw(arrays(np.float64, (n, k), elements=finite))
    b = draw(arrays(np.float64, (k, m), elements=finite))
    return a, b


def test_matmul_small_example():
    assert matmul([[1, 2], [3, 4]], [[5, 6], [7, 8]]).tolist() == [[19.0, 22.0], [43.0, 50.0]]


def test_matmul_identity():
    a = np.arange(12, dtype=np.float64).reshape(3, 4)

    assert np.array_equal(matmul(a, np.eye(4)), a)


def test_matmul_dimension_mismatch():
    with pytest.raises(ShapeError) as e:
        matmul(np.zeros((2, 3)), np.zeros((2, 3)))

    assert e.value.code == ExitCode.INTERNAL
    assert e.value.details == {'a': [2, 3], 'b': [2, 3]}


@seed(1)
@settings(max_examples=100, deadline=None)
@given(pair=matrix_pair())
def test_matmul_matches_naive(pair):
    a, b = pair

    assert naive.max_abs_diff(matmul(a, b), naive.matmul(naive.rows(a), naive.rows(b))) <= 1e-9


@seed(2)
@settings(max_examples=50, deadline=None)
@given(pair=matrix_pair())
def test_matmul_rows_do_not_depend_on_other_rows(pair):
    a, b = pair
    full = matmul(a, b)

    for i in range(a.shape[0]):
        assert np.array_equal(matmul(a[i:i + 1, :], b), full[i:i + 1, :])


@st.composite
def matrix_triple(draw):
    n, k, l, m = (draw(st.integers(1, 5)) for _ in range(4))
    return (
        draw(arrays(np.float64, (n, k), elements=finite)),
        draw(arrays(np.float64, (k, l), elements=finite)),
        draw(arrays(np.float64, (l, m), elements=finite))
    )


@seed(5)
@settings(max_examples=100, deadline=None)
@given(triple=matrix_triple())
def test_matmul_is_associative(triple):
    a, b, c = triple
    left = matmul(matmul(a, b), c)
    right = matmul(a, matmul(b, c))

    # entries reach 10^4, so the tolerance is relative to the largest
    scale = max(1.0, float(np.max(np.abs(left))))
    assert np.max(np.abs(left - right)) <= 1e-9 * scale


def test_row_sum():
    assert row_sum([[1.0, 2.0, 3.0], [-1.0, 1.0, 0.5]]).tolist() == [6.0, 0.5]


def test_softmax_uniform_row():
    assert softmax_rows([[0.0, 0.0]]).tolist() == [[0.5, 0.5]]


def test_softmax_masked_entry_is_exactly_zero():
    out = softmax_rows([[1.0, 2.0, 3.0]], np.array([[False, True, False]]))

    assert out[0, 1] == 0.0
    assert out[0, 0] == pytest.approx(1.0 / (1.0 + math.e ** 2))
    assert out[0, 2] == pytest.approx(math.e ** 2 / (1.0 + math.e ** 2))


def test_softmax_is_shift_invariant_and_stable():
    out = softmax_rows([[1000.0, 1000.0, 1000.0]])

    assert np.allclose(out, [[1 / 3, 1 / 3, 1 / 3]])


def test_softmax_all_masked_row_raises():
    with pytest.raises(DegenerateRowError) as e:
        softmax_rows([[1.0, 2.0], [3.0, 4.0]], np.array([[False, False], [True, True]]))

    assert e.value.code == ExitCode.DEGENERATE
    assert e.value.details['rows'] == [1]


def test_softmax_mask_shape_mismatch():
    with pytest.raises(ShapeError):
        softmax_rows([[1.0, 2.0]], np.array([[False]]))


def test_softmax_empty_input():
    assert softmax_rows(np.zeros((0, 3))).shape == (0, 3)


@seed(3)
@settings(max_examples=100, deadline=None)
@given(x=arrays(np.float64, st.tuples(st.integers(1, 6), st.integers(1, 6)), elements=finite), data=st.data())
def test_softmax_rows_sum_to_one_and_match_naive(x, data):
    mask = data.draw(arrays(np.bool_, x.shape))
    mask[:, 0] = False

    out = softmax_rows(x, mask)

    assert np.allclose(out.sum(axis=1), 1.0, atol=1e-12)
    assert np.all(out[mask] == 0.0)
    assert naive.max_abs_diff(out, naive.softmax(naive.rows(x), mask.tolist())) <= 1e-12


def test_layernorm_constant_row_gives_beta():
    out = layernorm([[3.0, 3.0, 3.0]], [2.0, 2.0, 2.0], [0.5, -0.5, 1.0])

    assert out.tolist() == [[0.5, -0.5, 1.0]]


def test_layernorm_rejects_non_positive_eps():
    with pytest.raises(ShapeError):
        layernorm([[1.0, 2.0]], [1.0, 1.0], [0.0, 0.0], eps=0.0)


def test_layernorm_rejects_wrong_gamma():
    with pytest.raises(ShapeError):
        layernorm([[1.0, 2.0]], [1.0], [0.0, 0.0])


@seed(4)
@settings(max_examples=100, deadline=None)
@given(x=arrays(np.float64, st.tuples(st.integers(1, 6), st.integers(2, 6)), elements=finite))
def test_layernorm_matches_naive(x):
    d = x.shape[1]
    gamma = np.linspace(0.5, 1.5, d)
    beta = np.linspace(-0.1, 0.1, d)

    out = layernorm(x, gamma, beta, 1e-5)

    assert naive.max_abs_diff(out, naive.layernorm(naive.rows(x), gamma.tolist(), beta.tolist(), 1e-5)) <= 1e-9


def test_frob_norm_and_dist():
    assert frob_norm([[3.0, 4.0]]) == 5.0
    assert frob_dist([[1.0, 1.0]], [[4.0, 5.0]]) == 5.0
    assert frob_dist(np.zeros((0, 2)), np.zeros((0, 2))) == 0.0

    with pytest.raises(ShapeError):
        frob_dist(np.zeros((1, 2)), np.zeros((2, 1)))


@seed(6)
@settings(max_examples=100, deadline=None)
@given(shape=st.tuples(st.integers(1, 5), st.integers(1, 5)), data=st.data())
def test_frob_dist_is_a_metric(shape, data):
    a, b, c = (data.draw(arrays(np.float64, shape, elements=finite)) for _ in range(3))

    assert frob_dist(a, a) == 0.0
    assert frob_dist(a, b) == frob_dist(b, a)
    assert frob_dist(a, c) <= frob_dist(a, b) + frob_dist(b, c) + 1e-12


def test_as_mat_rejects_vectors():
    with pytest.raises(ShapeError):
        as_mat([1.0, 2.0])
