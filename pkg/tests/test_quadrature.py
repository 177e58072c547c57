import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from nonlocal_design import PairClass, ParameterError, gauss_simplex, singular_pair_rule


@pytest.mark.parametrize("dim,measure", [(1, 1.0), (2, 0.5)])
@pytest.mark.parametrize("order", [1, 2, 3, 5, 8, 12, 20])
def test_simplex_weights(dim, measure, order):
    rule = gauss_simplex(dim, order)
    assert np.all(rule.weights > 0)
    assert rule.weights.sum() == pytest.approx(measure, abs=1e-14)
    np.testing.assert_allclose(rule.points.sum(axis=1), 1.0, atol=1e-15)


@settings(max_examples=40, deadline=None)
@given(order=st.integers(1, 20), i=st.integers(0, 20), j=st.integers(0, 20))
def test_simplex_exactness_2d(order, i, j):
    if i + j > order:
        return
    rule = gauss_simplex(2, order)
    x, y = rule.cartesian.T
    exact = math.factorial(i) * math.factorial(j) / math.factorial(i + j + 2)
    assert rule.weights @ (x**i * y**j) == pytest.approx(exact, rel=1e-12, abs=1e-15)


@pytest.mark.parametrize("order", [1, 4, 9, 20])
def test_simplex_exactness_1d(order):
    rule = gauss_simplex(1, order)
    t = rule.cartesian[:, 0]
    for k in range(order + 1):
        assert rule.weights @ t**k == pytest.approx(1.0 / (k + 1), rel=1e-12)


def test_simplex_rejects_bad_order():
    with pytest.raises(ParameterError):
        gauss_simplex(2, 0)
    with pytest.raises(ParameterError):
        gauss_simplex(3, 2)


def _identical_exact(s):
    # int_0^1 int_0^1 |x - y|^(1 - 2s)
    return 2.0 / ((2 - 2 * s) * (3 - 2 * s))


def _vertex_exact(s):
    # x in [0, 1], y in [1, 2], shared vertex 1
    return (2 ** (3 - 2 * s) - 2) / ((2 - 2 * s) * (3 - 2 * s))


def _identical_value(rule, s):
    x, y = rule.x[:, 1], rule.y[:, 1]
    return rule.weights @ np.abs(x - y) ** (1 - 2 * s)


def _vertex_value(rule, s):
    x = rule.x @ np.array([1.0, 0.0])
    y = rule.y @ np.array([1.0, 2.0])
    return rule.weights @ np.abs(x - y) ** (1 - 2 * s)


@pytest.mark.parametrize("s", [0.1, 0.25, 0.5, 0.75, 0.9, 0.99])
def test_pair_rules_1d_closed_form(s):
    for cls, value, exact in (
        (PairClass.IDENTICAL, _identical_value, _identical_exact),
        (PairClass.VERTEX_TOUCH, _vertex_value, _vertex_exact),
    ):
        rule = singular_pair_rule(cls, s, 6, 1)
        assert value(rule, s) == pytest.approx(exact(s), rel=1e-10)


@pytest.mark.parametrize("s", [0.25, 0.5, 0.75])
def test_pair_rule_refinement_is_monotone(s):
    for cls, value, exact in (
        (PairClass.IDENTICAL, _identical_value, _identical_exact),
        (PairClass.VERTEX_TOUCH, _vertex_value, _vertex_exact),
    ):
        errs = [abs(value(singular_pair_rule(cls, s, k, 1), s) - exact(s)) for k in range(1, 9)]
        for k in range(len(errs) - 2):
            assert errs[k + 2] <= max(errs[k], 1e-13)


@pytest.mark.parametrize("cls", list(PairClass))
@pytest.mark.parametrize("dim", [1, 2])
def test_pair_rule_nodes(cls, dim):
    if dim == 1 and cls == PairClass.EDGE_TOUCH:
        with pytest.raises(ParameterError):
            singular_pair_rule(cls, 0.5, 2, dim)
        return
    rule = singular_pair_rule(cls, 0.5, 2, dim)
    assert np.all(rule.weights > 0)
    np.testing.assert_allclose(rule.x.sum(axis=1), 1.0, atol=1e-14)
    assert np.all(rule.x >= -1e-14) and np.all(rule.y >= -1e-14)
    if cls == PairClass.IDENTICAL:
        diff = rule.x - rule.y
    else:
        # shared vertices come first in both simplices
        m = {PairClass.VERTEX_TOUCH: 1, PairClass.EDGE_TOUCH: 2, PairClass.DISJOINT: 0}[cls]
        diff = np.concatenate([rule.x[:, :m] - rule.y[:, :m], rule.x[:, m:], rule.y[:, m:]], axis=1)
    assert np.all(np.abs(diff).max(axis=1) > 0)  # the diagonal is never sampled


@pytest.mark.parametrize("cls", [PairClass.IDENTICAL, PairClass.VERTEX_TOUCH, PairClass.EDGE_TOUCH])
@pytest.mark.parametrize("s", [0.3, 0.7])
def test_pair_rule_self_convergence_2d(cls, s):
    # squared difference of a continuous P1 function across the pair
    A, B, C = np.array([0.0, 0.0]), np.array([1.0, 0.2]), np.array([0.3, 0.9])
    tri1, tri2 = {
        PairClass.IDENTICAL: (np.array([A, B, C]), np.array([A, B, C])),
        PairClass.EDGE_TOUCH: (np.array([B, C, A]), np.array([B, C, [1.2, 1.1]])),
        PairClass.VERTEX_TOUCH: (np.array([A, B, C]), np.array([A, [-0.8, -0.5], [0.2, -1.0]])),
    }[cls]

    def value(order):
        rule = singular_pair_rule(cls, s, order, 2)
        X, Y = rule.x @ tri1, rule.y @ tri2
        f = lambda P: np.sin(P[:, 0]) + P[:, 1] ** 2  # noqa: E731
        r = np.linalg.norm(X - Y, axis=1)
        return rule.weights @ ((f(X) - f(Y)) ** 2 * r ** (-2 - 2 * s))

    assert value(3) == pytest.approx(value(6), rel=1e-4)


def test_pair_rule_rejects_bad_input():
    with pytest.raises(ParameterError):
        singular_pair_rule(PairClass.IDENTICAL, 1.0, 2, 1)
    with pytest.raises(ParameterError):
        singular_pair_rule(PairClass.IDENTICAL, 0.5, 0, 1)
