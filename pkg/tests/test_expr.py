"""Expression AST: parsing, evaluation, differentiation, brackets."""

import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from foliops.errors import DimensionMismatch, EvalError, ParseError
from foliops.expr import (
    ScalarExpr,
    VectorFieldExpr,
    jacobian,
    lie_bracket,
    parse_field,
    parse_scalar,
)


def test_parse_field_round_trip():
    f = parse_field("[-x2, x1]", 2)
    assert isinstance(f, VectorFieldExpr)
    again = parse_field(str(f), 2)
    pts = np.array([[0.3, -1.2], [1.0, 0.0], [-0.7, 0.4]])
    assert np.array_equal(f(pts), again(pts))


def test_rotation_field_value():
    f = parse_field("[-x2, x1]", 2)
    assert np.allclose(f([1.0, 0.0]), [0.0, 1.0])


def test_parse_errors():
    with pytest.raises(ParseError):
        parse_field("[x1,]", 2)
    with pytest.raises(DimensionMismatch):
        parse_field("[x1]", 2)
    with pytest.raises(ParseError):
        parse_field("[x3]", 2)
    with pytest.raises(ParseError):
        parse_scalar("sin x1", 1)
    with pytest.raises(ParseError):
        parse_scalar("x1 ^ x1", 1)  # exponent must fold to a constant


def test_evaluation_deterministic():
    e = parse_scalar("exp(-x1^2)*sin(x2) + x1/x2", 2)
    p = np.array([0.7, -1.3])
    assert e(p) == e(p)


def test_eval_error_on_singularity():
    e = parse_scalar("1/x1", 1)
    with pytest.raises(EvalError):
        e([0.0])
    f = parse_field("[x1^2]", 1)
    with pytest.raises(EvalError):
        jacobian(parse_field("[1/x1]", 1), [0.0])
    assert np.allclose(jacobian(f, [2.0]), [[4.0]])


def test_jacobian_examples():
    rot = parse_field("[-x2, x1]", 2)
    assert np.allclose(jacobian(rot, [0.4, 2.2]), [[0.0, -1.0], [1.0, 0.0]])
    assert np.allclose(jacobian(parse_field("[x1]", 1), [3.0]), [[1.0]])


def _fd_jacobian(field, p, h=1e-5):
    """Central-difference oracle for the symbolic Jacobian."""
    p = np.asarray(p, float)
    n = len(p)
    J = np.empty((n, n))
    for j in range(n):
        dp = np.zeros(n)
        dp[j] = h
        J[:, j] = (field(p + dp) - field(p - dp)) / (2 * h)
    return J


@pytest.mark.parametrize(
    "text,dim",
    [
        ("[-x2, x1]", 2),
        ("[x1*x2, sin(x1)]", 2),
        ("[exp(-x1^2)*x2, x1 + cos(x2)]", 2),
        ("[x1^3 - 2*x1]", 1),
    ],
)
def test_jacobian_matches_finite_differences(text, dim):
    field = parse_field(text, dim)
    rng = np.random.default_rng(42)
    for p in rng.uniform(-1.5, 1.5, size=(100, dim)):
        J = field.jacobian_at(p)
        Jfd = _fd_jacobian(field, p)
        scale = 1.0 + np.max(np.abs(J))
        assert np.max(np.abs(J - Jfd)) <= 1e-6 * scale


def test_lie_bracket_examples():
    X = parse_field("[1, 0]", 2)
    Y = parse_field("[0, x1]", 2)
    br = lie_bracket(X, Y)
    pts = np.random.default_rng(0).uniform(-2, 2, size=(20, 2))
    assert np.allclose(br(pts), np.tile([0.0, 1.0], (20, 1)))

    same = lie_bracket(X, X)
    assert np.allclose(same(pts), 0.0)

    Z = parse_field("[0, 1]", 2)
    assert np.allclose(lie_bracket(X, Z)(pts), 0.0)


def test_lie_bracket_antisymmetry():
    X = parse_field("[x1*x2, -x2]", 2)
    Y = parse_field("[sin(x1), x1^2]", 2)
    pts = np.random.default_rng(1).uniform(-1, 1, size=(50, 2))
    assert np.array_equal(lie_bracket(X, Y)(pts), -lie_bracket(Y, X)(pts))


def test_bracket_dim_mismatch():
    with pytest.raises(DimensionMismatch):
        lie_bracket(parse_field("[x1]", 1), parse_field("[x1, x2]", 2))


# -- randomized round trips ---------------------------------------------------

_leaf = st.one_of(
    st.floats(min_value=-3, max_value=3, allow_nan=False).map(
        lambda v: repr(round(v, 3))
    ),
    st.sampled_from(["x1", "x2"]),
)


def _combine(children):
    ops = ["+", "-", "*"]
    out = children[0]
    for i, c in enumerate(children[1:]):
        out = f"({out} {ops[i % 3]} {c})"
    return out


_exprs = st.recursive(
    _leaf,
    lambda inner: st.one_of(
        st.tuples(inner, inner).map(lambda t: _combine(list(t))),
        inner.map(lambda s: f"sin({s})"),
        inner.map(lambda s: f"exp(-({s})^2)"),
    ),
    max_leaves=8,
)


@settings(max_examples=60, deadline=None)
@given(_exprs)
def test_print_parse_round_trip_preserves_evaluation(text):
    e = parse_scalar(text, 2)
    again = parse_scalar(str(e), 2)
    pts = np.array([[0.25, -0.75], [1.5, 0.5], [-1.0, 2.0]])
    a = e(pts, check_finite=False)
    b = again(pts, check_finite=False)
    finite = np.isfinite(a)
    assert np.array_equal(finite, np.isfinite(b))
    scale = 1.0 + np.abs(a[finite])
    assert np.all(np.abs(a[finite] - b[finite]) <= 1e-15 * scale)


def test_scalar_algebra_helpers():
    e = parse_scalar("x1^2", 1)
    f = parse_scalar("x1", 1)
    combo = 2.0 * e + f - 1.0
    assert combo([3.0]) == pytest.approx(2 * 9 + 3 - 1)
    assert (-e)([2.0]) == pytest.approx(-4.0)


def test_diff_of_constant_exponent_power():
    e = parse_scalar("x1^-2.0", 1)
    d = e.diff(0)
    assert d([2.0]) == pytest.approx(-2.0 * 2.0 ** (-3.0))
