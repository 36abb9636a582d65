"""Bisubmersion terms, bisections, translations, morphisms."""

import math

import numpy as np
import pytest

from foliops.errors import (
    BaseMismatch,
    BracketNotZero,
    EmptyTranslate,
    NotABisection,
)
from foliops.expr import parse_field
from foliops.foliation import SingularFoliation
from foliops.bisubmersion import (
    Composition,
    bisection_diffeo,
    compose,
    compose_bisections,
    constant_bisection,
    fibre_param,
    general_bisection,
    identity_bisection,
    invert,
    make_addition_morphism,
    make_path_holonomy,
    translate,
    transpose_bisection,
    Morphism,
)


@pytest.fixture(scope="module")
def rotF():
    return SingularFoliation(dim=2, chart_box=[[-2, 2], [-2, 2]],
                             generators=[parse_field("[-x2, x1]", 2)],
                             xi_radius=[2.5])


@pytest.fixture(scope="module")
def U(rotF):
    return make_path_holonomy(rotF)


@pytest.fixture(scope="module")
def planeF():
    return SingularFoliation(
        dim=2, chart_box=[[-2, 2], [-2, 2]],
        generators=[parse_field("[1, 0]", 2), parse_field("[0, 1]", 2)],
        xi_radius=[1.5, 1.5],
    )


def test_source_map_is_projection(U):
    rng = np.random.default_rng(0)
    params = U.sample_params(50, rng)
    assert np.array_equal(U.s(params), params[:, 1:])


def test_range_at_zero_xi(U):
    x = np.array([[0.4, -1.1]])
    params = np.concatenate([np.zeros((1, 1)), x], axis=1)
    assert np.array_equal(U.r(params), x)


def test_range_closed_form(U):
    params = np.array([[math.pi / 2, 1.0, 0.0]])
    assert np.linalg.norm(U.r(params) - [0.0, 1.0]) <= 1e-8


def test_compose_dimension(U):
    C = compose(U, U)
    assert C.dim == U.dim + U.dim - U.base_dim
    assert C.param_len == 2 * U.param_len


def test_compose_base_mismatch(U, planeF):
    with pytest.raises(BaseMismatch):
        compose(U, make_path_holonomy(planeF))


def test_compose_membership(U):
    C = compose(U, U)
    rng = np.random.default_rng(1)
    good = C.sample_params(20, rng)
    assert np.all(C.contains(good, tol=1e-6))
    broken = good.copy()
    broken[:, U.param_len + 1 :] += 0.5  # break the gluing constraint
    assert not np.any(C.contains(broken, tol=1e-6))


def test_compose_range_rule(U):
    C = compose(U, U)
    rng = np.random.default_rng(2)
    params = C.sample_params(30, rng)
    u = params[:, : U.param_len]
    assert np.allclose(C.r(params), U.r(u))
    assert np.array_equal(C.s(params), U.s(params[:, U.param_len :]))


def test_inverse_swaps_and_involution(U):
    rng = np.random.default_rng(3)
    params = U.sample_params(30, rng)
    Ut = invert(U)
    assert np.array_equal(Ut.r(params), U.s(params))
    assert np.allclose(Ut.s(params), U.r(params))
    back = invert(Ut)
    assert back is U
    assert np.allclose(back.r(params), U.r(params))


def test_fibre_charts(U, rotF):
    x = np.array([0.8, -0.3])
    s_chart = fibre_param(U, "s", x)
    xis = np.linspace(-1.5, 1.5, 9)[:, None]
    params = s_chart.map(xis)
    assert np.max(np.abs(U.s(params) - x)) == 0.0
    r_chart = fibre_param(U, "r", x)
    params_r = r_chart.map(xis)
    assert np.max(np.linalg.norm(U.r(params_r) - x, axis=1)) <= 1e-7
    assert s_chart.dim == rotF.num_generators


def test_fibre_chart_of_composition_is_product_box(U):
    C = compose(U, U)
    ch = fibre_param(C, "s", np.array([0.5, 0.5]))
    assert ch.dim == 2
    assert np.array_equal(ch.box, np.concatenate([U.xi_box(), U.xi_box()]))
    xis = np.array([[0.3, -0.2], [0.1, 0.4]])
    params = ch.map(xis)
    assert np.all(C.contains(params, tol=1e-6))


def test_constant_bisection_diffeo(U):
    S = constant_bisection(U, [math.pi / 2])
    d = bisection_diffeo(S)
    assert np.linalg.norm(d(np.array([1.0, 0.0])) - [0.0, 1.0]) <= 1e-8
    x = np.array([0.3, 0.9])
    assert np.linalg.norm(d.inverse(d(x)) - x) <= 1e-7


def test_identity_bisection(U):
    S = identity_bisection(U)
    d = bisection_diffeo(S)
    pts = np.random.default_rng(4).uniform(-1.5, 1.5, size=(20, 2))
    assert np.allclose(d(pts), pts)


def test_translate_rules(U):
    S = constant_bisection(U, [0.6])
    rng = np.random.default_rng(5)
    params = U.sample_params(40, rng)

    right = translate(U, S, "right")
    assert np.array_equal(right.r(params), U.r(params))
    expected = S.phi_inv(U.s(params))
    assert np.max(np.linalg.norm(right.s(params) - expected, axis=1)) <= 1e-9

    left = translate(U, S, "left")
    assert np.array_equal(left.s(params), U.s(params))
    expected = S.phi(U.r(params))
    assert np.max(np.linalg.norm(left.r(params) - expected, axis=1)) <= 1e-7


def test_translate_by_identity_keeps_maps(U):
    S = identity_bisection(U)
    tr = translate(U, S, "right")
    rng = np.random.default_rng(6)
    params = U.sample_params(30, rng)
    assert np.allclose(tr.s(params), U.s(params))
    assert np.allclose(tr.r(params), U.r(params))


def test_empty_translate(U):
    # a bisection whose range misses the sampled source image
    S = constant_bisection(U, [0.0], base_box=[[5.0, 6.0], [5.0, 6.0]])
    with pytest.raises(EmptyTranslate):
        translate(U, S, "right")


def test_maps_never_silently_nan(U):
    rng = np.random.default_rng(7)
    box = U.param_box()
    wide = box.copy()
    wide[0] = [-2.5, 2.5]
    params = wide[:, 0] + (wide[:, 1] - wide[:, 0]) * rng.random((100, 3))
    for side in ("r", "s"):
        vals, ok = getattr(U, side)(params, allow_escape=True)
        assert np.all(np.isfinite(vals[ok]))
        eb = U.foliation.escape_box
        inside = np.all((vals[ok] >= eb[:, 0]) & (vals[ok] <= eb[:, 1]), axis=1)
        assert np.all(inside)


def test_morphism_compatibility_invariant(U):
    C = compose(U, U)
    # projection onto the left factor is NOT a morphism; the constructor
    # must reject it
    def bad_map(params):
        return params[:, : U.param_len]

    with pytest.raises(BaseMismatch):
        Morphism(C, U, bad_map, label="bad")


def test_addition_morphism_commuting(planeF):
    Up = make_path_holonomy(planeF)
    pi = make_addition_morphism(Up)
    assert pi.compatibility_residual(100) <= 1e-7
    # explicit example on translations: r(pi(eta,xi,x)) = x + xi + eta
    line = SingularFoliation(dim=1, chart_box=[[-3, 3]],
                             generators=[parse_field("[1]", 1)],
                             xi_radius=[1.0])
    Ul = make_path_holonomy(line)
    pil = make_addition_morphism(Ul)
    params = np.array([[0.3, 1.2, 0.5], [0.1, -0.4, 1.0]])  # (eta, y; xi, x)
    # composition parameters: u = (eta, y) with y = x + xi
    comp = np.array([[0.3, 0.7 + 0.5, 0.7, 0.5], [0.1, 0.2 + 1.0, 0.2, 1.0]])
    mapped = pil.map(comp)
    assert np.allclose(mapped[:, 0], comp[:, 0] + comp[:, 2])
    assert np.allclose(mapped[:, 1], comp[:, 3])


def test_addition_morphism_rejects_noncommuting():
    bad = SingularFoliation(
        dim=2, chart_box=[[-2, 2], [-2, 2]],
        generators=[parse_field("[1, 0]", 2), parse_field("[0, x1]", 2)],
        xi_radius=[1.0, 1.0],
    )
    with pytest.raises(BracketNotZero):
        make_addition_morphism(make_path_holonomy(bad))


def test_compose_bisections(U):
    S = constant_bisection(U, [0.5])
    T = constant_bisection(U, [0.3])
    ST = compose_bisections(S, T)
    x = np.array([[0.4, 0.2]])
    combined = ST.phi(x)
    direct = S.phi(T.phi(x))
    assert np.linalg.norm(combined - direct) <= 1e-9
    back = ST.phi_inv(combined)
    assert np.linalg.norm(back - x) <= 1e-7


def test_transpose_bisection_inverts_diffeo(U):
    S = constant_bisection(U, [0.9])
    St = transpose_bisection(S)
    x = np.array([[0.5, -0.2]])
    assert np.allclose(St.phi(x), S.phi_inv(x))
    assert np.allclose(St.phi_inv(x), S.phi(x))


def test_general_bisection_newton(U, rotF):
    # same constant section, but with the Newton-based inverse
    def section(x):
        return np.concatenate([np.full((len(x), 1), 0.7), x], axis=1)

    S = general_bisection(U, section, rotF.chart_box, label="newton")
    x = np.array([[0.6, 0.1]])
    fwd = S.phi(x)
    assert np.linalg.norm(S.phi_inv(fwd) - x) <= 1e-8


def test_not_a_bisection(U):
    # a "section" that is not a section of the source map
    def broken(x):
        return np.concatenate([np.zeros((len(x), 1)), x + 1.0], axis=1)

    S = general_bisection(U, broken, U.foliation.chart_box)
    with pytest.raises(NotABisection):
        bisection_diffeo(S)
