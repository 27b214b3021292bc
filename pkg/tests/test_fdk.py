import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from flexihorizon.errors import InvalidInputError
from flexihorizon.fdk import (
    FdkParams,
    fdk_distance,
    fdk_distance_batch,
    fdk_distance_grad,
    fdk_similarity,
    huber,
    soft_min_harmonic,
    soft_min_weighted,
)
from flexihorizon.trajgeo import discrete_frechet


def naive_fdk(X, Y, beta, delta):
    """Path-by-path recursion in plain floats, no lattice table."""
    d = lambda i, j: math.hypot(X[i][0] - Y[j][0], X[i][1] - Y[j][1])  # noqa: E731
    H = lambda z: 0.5 * z * z if abs(z) <= delta else delta * (abs(z) - 0.5 * delta)  # noqa: E731

    def smin(vals):
        if 0.0 in vals:
            return 0.0
        logw = [-beta * H(v) for v in vals]
        top = max(logw)
        w = [math.exp(lw - top) for lw in logw]
        total = sum(w)
        return 1 / sum(wi / total / v for wi, v in zip(w, vals))

    def R(i, j):
        if i == j == 0:
            return d(0, 0)
        preds = [(a, b) for a, b in ((i - 1, j), (i, j - 1), (i - 1, j - 1)) if a >= 0 and b >= 0]
        s = R(*preds[0]) if len(preds) == 1 else smin([R(a, b) for a, b in preds])
        return max(d(i, j), s)

    return R(len(X) - 1, len(Y) - 1)


def test_huber_branches():
    assert huber(0.05, 0.1) == pytest.approx(0.00125)
    assert huber(0.0, 0.1) == 0.0
    assert huber(1.0, 0.1) == pytest.approx(0.1 * (1.0 - 0.05))
    assert huber(-1.0, 0.1) == huber(1.0, 0.1)
    with pytest.raises(InvalidInputError):
        huber(1.0, 0.0)


def test_params_validation():
    for kw in [{"beta": 0}, {"gamma": -1}, {"delta": 0}, {"epsilon": -0.1}]:
        with pytest.raises(InvalidInputError):
            FdkParams(**kw)


def test_soft_min_operators():
    assert soft_min_weighted([2.0, 2.0, 2.0], 5.0, 0.1) == pytest.approx(2.0)
    assert soft_min_harmonic([2.0, 2.0], 5.0, 0.1) == pytest.approx(2.0)
    assert soft_min_harmonic([0.0, 3.0], 5.0, 0.1) == 0.0
    # harmonic mean of positives never undershoots the minimum
    assert soft_min_harmonic([1.0, 4.0], 1.0, 0.1) >= 1.0
    assert soft_min_harmonic([1.0, 4.0], 1000.0, 0.1) == pytest.approx(1.0, abs=1e-9)
    with pytest.raises(InvalidInputError):
        soft_min_harmonic([], 1.0, 0.1)
    with pytest.raises(InvalidInputError):
        soft_min_harmonic([-1.0], 1.0, 0.1)


def test_identity_and_single_points():
    X = np.array([[0.0, 0.0], [1.0, 2.0], [3.0, 1.0]])
    assert fdk_distance(X, X) == 0.0
    assert fdk_similarity(X, X) == 1.0
    for beta in (1.0, 50.0, 500.0):
        assert fdk_distance([[0, 0]], [[3, 4]], FdkParams(beta=beta)) == 5.0


def test_three_by_three_matches_naive_recursion():
    X = [(0.0, 0.0), (1.0, 0.0), (2.0, 0.0)]
    Y = [(0.0, 1.0), (1.0, 1.5), (2.0, 1.0)]
    # frozen from the naive recursion above
    assert fdk_distance(X, Y, FdkParams(beta=10)) == pytest.approx(1.6464764155069143, rel=1e-12)
    assert fdk_distance(X, Y, FdkParams(beta=100)) == pytest.approx(1.5118627490687637, rel=1e-12)


@settings(max_examples=40, deadline=None)
@given(arrays(np.float64, (3, 2), elements=st.floats(-5, 5)), arrays(np.float64, (3, 2), elements=st.floats(-5, 5)),
       st.sampled_from([1.0, 10.0, 100.0]))
def test_lattice_equals_naive_recursion(X, Y, beta):
    assert fdk_distance(X, Y, FdkParams(beta=beta)) == pytest.approx(naive_fdk(X.tolist(), Y.tolist(), beta, 0.1),
                                                                      rel=1e-10, abs=1e-12)


@settings(max_examples=60, deadline=None)
@given(st.integers(1, 7).flatmap(lambda n: arrays(np.float64, (n, 2), elements=st.floats(-10, 10))),
       st.integers(1, 7).flatmap(lambda n: arrays(np.float64, (n, 2), elements=st.floats(-10, 10))))
def test_upper_bounds_exact_and_is_symmetric(X, Y):
    exact = discrete_frechet(X, Y)
    smooth = fdk_distance(X, Y)
    assert smooth >= exact - 1e-12
    assert smooth == fdk_distance(Y, X)


def test_converges_as_beta_grows(rng):
    X, Y = rng.uniform(-10, 10, (10, 2)), rng.uniform(-10, 10, (10, 2))
    exact = discrete_frechet(X, Y)
    errs = [fdk_distance(X, Y, FdkParams(beta=b)) - exact for b in (25, 50, 100, 200, 400)]
    assert all(b <= a + 1e-12 for a, b in zip(errs, errs[1:]))
    assert errs[-1] / exact < 0.01


def test_similarity_form_and_epsilon_bonus():
    X = np.array([[0.0, 0.0], [1.0, 0.0]])
    Y = np.array([[0.0, 0.0], [1.0, 2.0]])
    d = fdk_distance(X, Y)
    assert fdk_similarity(X, Y, FdkParams(gamma=2.0)) == pytest.approx(math.exp(-d / 2.0))
    # one coincident pair out of max(m, n) = 2
    bonus = fdk_similarity(X, Y, FdkParams(epsilon=0.5)) / fdk_similarity(X, Y)
    assert bonus == pytest.approx(math.exp(0.5 * 1 / 2))


def test_batch_matches_single(rng):
    X, Y = rng.normal(size=(5, 6, 2)), rng.normal(size=(5, 6, 2))
    batch = fdk_distance_batch(X, Y)
    assert [fdk_distance(x, y) for x, y in zip(X, Y)] == pytest.approx(batch.tolist(), rel=0, abs=0)


def test_rejects_bad_shapes():
    with pytest.raises(InvalidInputError):
        fdk_distance(np.zeros((0, 2)), [[0, 0]])
    with pytest.raises(InvalidInputError):
        fdk_distance_batch(np.zeros((2, 3, 2)), np.zeros((3, 3, 2)))


def test_gradient_matches_central_differences(rng):
    X, Y = rng.uniform(-5, 5, (7, 2)), rng.uniform(-5, 5, (6, 2))
    g = fdk_distance_grad(X, Y)
    XL, h = X.astype(np.longdouble), np.longdouble(1e-5)
    for i in range(7):
        for k in range(2):
            up, down = XL.copy(), XL.copy()
            up[i, k] += h
            down[i, k] -= h
            cd = float((fdk_distance(up, Y) - fdk_distance(down, Y)) / (2 * h))
            assert abs(g[i, k] - cd) <= 1e-4 * max(1e-8, abs(cd))


def test_gradient_of_translation_is_sum_zero_for_identity_shift(rng):
    # d(X + t, Y + t) is translation invariant, so grads wrt X and Y cancel
    X, Y = rng.normal(size=(5, 2)), rng.normal(size=(4, 2))
    gx = fdk_distance_grad(X, Y).sum(axis=0)
    gy = fdk_distance_grad(Y, X).sum(axis=0)
    assert np.allclose(gx + gy, 0, atol=1e-10)
