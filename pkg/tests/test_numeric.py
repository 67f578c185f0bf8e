import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from nccl_lab.errors import DegenerateInputError, DimensionError, ParameterError
from nccl_lab.numeric import dot, finite_diff_grad, l2_normalize, make_rng, softmax, zero_pad


def test_dot_examples():
    assert dot([1, 0], [0, 1]) == 0
    assert dot([1, 2], [3, 4]) == 11
    u = l2_normalize([0.3, -1.2, 2.0])
    assert dot(u, u) == pytest.approx(1.0, abs=1e-15)
    with pytest.raises(DimensionError):
        dot([1, 2], [1, 2, 3])


def test_l2_normalize_examples():
    np.testing.assert_allclose(l2_normalize([3, 4]), [0.6, 0.8])
    np.testing.assert_array_equal(l2_normalize([0.0, 1.0]), [0.0, 1.0])
    with pytest.raises(DegenerateInputError):
        l2_normalize([0, 0])


def test_softmax_examples():
    np.testing.assert_allclose(softmax([2.5, 2.5], 0.3), [0.5, 0.5])
    np.testing.assert_allclose(softmax([1, 0], 1.0), [0.73106, 0.26894], atol=1e-4)
    np.testing.assert_allclose(softmax([1, 0], 1e6), [0.5, 0.5], atol=1e-6)
    with pytest.raises(ParameterError):
        softmax([1, 2], 0.0)


finite_vecs = arrays(np.float64, st.integers(1, 12), elements=st.floats(-1e3, 1e3))


@settings(max_examples=200, deadline=None)
@given(finite_vecs, st.floats(1e-2, 1e6))
def test_softmax_sums_to_one(z, tau):
    p = softmax(z, tau)
    assert np.all(p >= 0)
    assert abs(p.sum() - 1.0) < 1e-9


def test_softmax_shift_invariance():
    rng = np.random.default_rng(0)
    for _ in range(200):
        z = rng.normal(0, 3, size=rng.integers(1, 10))
        c = float(rng.normal(0, 10))
        tau = float(rng.uniform(0.1, 5))
        np.testing.assert_allclose(softmax(z, tau), softmax(z + c, tau), atol=1e-12, rtol=0)


@settings(max_examples=200, deadline=None)
@given(arrays(np.float64, st.integers(1, 10), elements=st.floats(-1e3, 1e3)).filter(
    lambda a: np.linalg.norm(a) > 1e-3))
def test_normalize_idempotent(a):
    u = l2_normalize(a)
    np.testing.assert_allclose(l2_normalize(u), u, atol=1e-12, rtol=0)


def test_finite_diff_examples():
    np.testing.assert_allclose(finite_diff_grad(lambda x: x @ x, [1.0, 2.0], 1e-5), [2, 4], atol=1e-6)
    np.testing.assert_array_equal(finite_diff_grad(lambda x: 3.0, [1.0, 2.0, 3.0]), np.zeros(3))
    a = np.array([0.5, -2.0, 7.0])
    np.testing.assert_allclose(finite_diff_grad(lambda x: a @ x, np.ones(3)), a, atol=1e-6)


def test_finite_diff_quadratics():
    rng = np.random.default_rng(1)
    for _ in range(50):
        n = int(rng.integers(1, 6))
        A = rng.normal(size=(n, n))
        b = rng.normal(size=n)
        x = rng.normal(size=n)
        f = lambda v: v @ A @ v + b @ v + 1.5  # noqa: E731
        np.testing.assert_allclose(finite_diff_grad(f, x, 1e-5), (A + A.T) @ x + b, atol=1e-6, rtol=0)


def test_rng_reproducible_and_keyed():
    a = make_rng(7, "x").integers(0, 2**32, size=5)
    b = make_rng(7, "x").integers(0, 2**32, size=5)
    c = make_rng(7, "y").integers(0, 2**32, size=5)
    np.testing.assert_array_equal(a, b)
    assert not np.array_equal(a, c)
    with pytest.raises(ParameterError):
        make_rng(-1)


def test_zero_pad():
    np.testing.assert_array_equal(zero_pad([1.0, 2.0], 4), [1, 2, 0, 0])
    with pytest.raises(DimensionError):
        zero_pad([1.0, 2.0, 3.0], 2)
