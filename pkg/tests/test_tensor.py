import mpmath
import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from trafficgan.tensor import (
    ShapeError,
    concat,
    hadamard,
    matvec,
    sigmoid,
    sigmoid_grad_from_output,
    split_columns,
    tanh_fn,
    tanh_grad_from_output,
)

finite = st.floats(min_value=-700, max_value=700, allow_nan=False)


def test_sigmoid_symmetry_point():
    assert sigmoid(0.0) == 0.5


def test_sigmoid_reflection():
    assert sigmoid(1.7) == pytest.approx(1.0 - sigmoid(-1.7), abs=1e-15)


def test_sigmoid_matches_high_precision():
    with mpmath.workdps(50):
        for x in (2.0, -2.0, 0.37, -15.0, 30.0):
            exact = float(1 / (1 + mpmath.exp(-mpmath.mpf(x))))
            # a couple of ulps: two roundings in 1 / (1 + e^-x)
            assert abs(sigmoid(x) - exact) <= 4 * np.finfo(float).eps * exact


@given(finite)
def test_sigmoid_range_and_no_overflow(x):
    s = sigmoid(x)
    assert 0.0 <= s <= 1.0
    assert np.isfinite(s)


def test_sigmoid_extreme_inputs_do_not_warn():
    with np.errstate(over="raise"):
        out = sigmoid(np.array([-1000.0, 1000.0]))
    assert out[0] == 0.0 and out[1] == 1.0


def test_sigmoid_monotone():
    x = np.linspace(-30, 30, 2001)
    assert np.all(np.diff(sigmoid(x)) >= 0)


def test_tanh_examples():
    assert tanh_fn(0.0) == 0.0
    assert tanh_fn(-0.3) == -tanh_fn(0.3)
    assert tanh_fn(1.0) == pytest.approx(2 * sigmoid(2.0) - 1, abs=1e-15)


@pytest.mark.parametrize("fn,grad", [(sigmoid, sigmoid_grad_from_output), (tanh_fn, tanh_grad_from_output)])
def test_derivative_identities_against_finite_differences(fn, grad):
    rng = np.random.default_rng(3)
    x = rng.uniform(-5, 5, size=100)
    h = 1e-6
    numeric = (fn(x + h) - fn(x - h)) / (2 * h)
    assert np.max(np.abs(grad(fn(x)) - numeric)) < 1e-9
    # a 1e-12 tolerance is reachable only with a higher-order stencil
    h = 1e-3
    five_point = (-fn(x + 2 * h) + 8 * fn(x + h) - 8 * fn(x - h) + fn(x - 2 * h)) / (12 * h)
    assert np.max(np.abs(grad(fn(x)) - five_point)) < 1e-11


def test_matvec_examples():
    assert np.array_equal(matvec(np.eye(2), [3.0, 4.0]), [3.0, 4.0])
    assert np.array_equal(matvec(np.zeros((3, 2)), [5.0, -1.0]), np.zeros(3))
    assert np.array_equal(matvec([[1, 2], [3, 4]], [1, 1]), [3.0, 7.0])


def test_matvec_shape_error():
    with pytest.raises(ShapeError):
        matvec(np.eye(2), [1.0, 2.0, 3.0])


def test_concat_examples():
    assert np.array_equal(concat([1, 2], [3]), [1.0, 2.0, 3.0])
    assert np.array_equal(concat([], [5]), [5.0])


def test_partition_identity():
    rng = np.random.default_rng(0)
    for _ in range(50):
        W = rng.normal(size=(3, 5))
        h, x = rng.normal(size=2), rng.normal(size=3)
        Wh, Wx = split_columns(W, 2)
        assert np.max(np.abs(matvec(W, concat(h, x)) - (matvec(Wh, h) + matvec(Wx, x)))) < 1e-12


@settings(max_examples=50)
@given(st.integers(min_value=1, max_value=8), st.integers(min_value=0, max_value=2**31))
def test_hadamard_commutes_and_distributes(size, seed):
    rng = np.random.default_rng(seed)
    a, b, c = rng.normal(size=(3, size))
    assert np.array_equal(hadamard(a, b), hadamard(b, a))
    assert np.allclose(hadamard(a, b + c), hadamard(a, b) + hadamard(a, c), atol=1e-12)


def test_hadamard_shape_error():
    with pytest.raises(ShapeError):
        hadamard(np.ones(2), np.ones(3))
