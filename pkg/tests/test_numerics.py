import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from lipvae.numerics import (SeededRng, ShapeError, as_vector, finite_diff_grad, l2_norm,
                             sample_std_gaussian)

finite = st.floats(-1e6, 1e6, allow_nan=False)


# -- oracles ----------------------------------------------------------------


def compensated_norm(v):
    """Neumaier-compensated sum of squares, independent of numpy's reductions."""
    total, comp = 0.0, 0.0
    for x in v:
        sq = float(x) * float(x)
        t = total + sq
        comp += (total - t) + sq if abs(total) >= sq else (sq - t) + total
        total = t
    return math.sqrt(total + comp)


# -- l2_norm ----------------------------------------------------------------


def test_l2_norm_zero_vector():
    assert l2_norm([0.0, 0.0, 0.0]) == 0.0


def test_l2_norm_pythagorean():
    assert l2_norm([3.0, 4.0]) == 5.0


def test_l2_norm_matches_compensated_sum():
    v = np.full(1000, 0.1)
    assert abs(l2_norm(v) - compensated_norm(v)) <= 1e-12
    assert abs(l2_norm(v) - 3.16228) < 1e-5


def test_l2_norm_rejects_non_finite():
    with pytest.raises(FloatingPointError):
        l2_norm([1.0, np.nan])


@settings(max_examples=200, deadline=None)
@given(st.lists(finite, min_size=1, max_size=40), st.floats(-1e3, 1e3, allow_nan=False))
def test_l2_norm_homogeneous(v, alpha):
    lhs = l2_norm(alpha * np.asarray(v))
    rhs = abs(alpha) * l2_norm(v)
    assert lhs == pytest.approx(rhs, rel=1e-12, abs=1e-300)


@settings(max_examples=200, deadline=None)
@given(st.lists(st.tuples(finite, finite), min_size=1, max_size=40))
def test_l2_norm_triangle(pairs):
    u, v = np.array(pairs).T
    assert l2_norm(u + v) <= l2_norm(u) + l2_norm(v) + 1e-12 * (1 + l2_norm(u) + l2_norm(v))


def test_as_vector_rejects_matrices():
    with pytest.raises(ShapeError):
        as_vector(np.zeros((2, 2)))


# -- randomness -------------------------------------------------------------


def test_gaussian_determinism():
    a = sample_std_gaussian(SeededRng(7), 5)
    b = sample_std_gaussian(SeededRng(7), 5)
    assert np.array_equal(a, b)


def test_gaussian_moments():
    n = 10**6
    x = sample_std_gaussian(SeededRng(3), n)
    assert abs(x.mean()) < 4 / math.sqrt(n)
    assert abs(x.var() - 1.0) < 0.01


def test_gaussian_rejects_empty():
    with pytest.raises(ValueError):
        sample_std_gaussian(SeededRng(0), 0)


def test_substreams_are_independent_and_reproducible():
    root = SeededRng(11)
    a1, a2 = root.spawn(1).normal(100), SeededRng(11).spawn(1).normal(100)
    b = root.spawn(2).normal(100)
    assert np.array_equal(a1, a2)
    assert not np.array_equal(a1, b)
    # spawning never advances the parent
    assert np.array_equal(SeededRng(11).normal(3), root.normal(3))


def test_rng_state_round_trip():
    rng = SeededRng(5, (1, 2))
    rng.normal(10)
    clone = SeededRng.from_state(rng.get_state())
    assert np.array_equal(rng.normal(20), clone.normal(20))


# -- finite differences -----------------------------------------------------


def test_fd_quadratic():
    g = finite_diff_grad(lambda x: float(np.sum(x**2)), np.array([1.0, 2.0]), h=1e-5)
    assert np.allclose(g, [2.0, 4.0], atol=1e-6)


def test_fd_constant():
    assert np.array_equal(finite_diff_grad(lambda x: 3.0, np.ones(4)), np.zeros(4))


def test_fd_sine_against_analytic():
    x = np.array([0.0, math.pi / 2])
    g = finite_diff_grad(lambda v: float(np.sum(np.sin(v))), x)
    assert np.allclose(g, np.cos(x), atol=1e-8)


def test_fd_reports_non_finite():
    with pytest.raises(FloatingPointError, match="coordinate"):
        finite_diff_grad(lambda v: math.inf if v[0] > 0 else 0.0, np.array([0.0]), h=1e-3)
