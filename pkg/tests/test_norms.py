import math

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st
from scipy.optimize import brentq

from conftest import square_mesh
from polybous.norms import (
    YoungFunction,
    gamma_star_embedding_check,
    h1_seminorm,
    integrate,
    lp_norm,
    luxemburg_norm,
    orlicz_endpoint_ratio,
    orlicz_holder_check,
    w2p_norm,
    w2p_ratio,
)


def test_lp_of_constants(tri16):
    c = np.full(tri16.n_nodes, -3.0)
    area = 0.5
    for p in (1, 2, 4.5, 8):
        assert lp_norm(tri16, c, p) == pytest.approx(3.0 * area ** (1 / p), rel=1e-14)
    assert lp_norm(tri16, c, np.inf) == 3.0
    assert lp_norm(tri16, np.zeros(tri16.n_nodes), 3) == 0.0


def test_lp_large_p_no_overflow(mesh16):
    f = np.full(mesh16.n_nodes, 1e200)
    assert lp_norm(mesh16, f, 50) == pytest.approx(1e200, rel=1e-12)


def test_lp_rejects_bad_input(mesh16):
    with pytest.raises(ValueError):
        lp_norm(mesh16, np.ones(mesh16.n_nodes), 0.5)
    with pytest.raises(ValueError):
        lp_norm(mesh16, np.ones(3), 2)
    f = np.ones(mesh16.n_nodes)
    f[0] = np.inf
    with pytest.raises(ValueError):
        lp_norm(mesh16, f, 2)


def test_quadrature_integrates_linears_exactly(tri16):
    x, y = tri16.nodes.T
    # int over the unit right triangle of 1 + x + 2y = 1/2 + 1/6 + 1/3
    assert integrate(tri16, 1 + x + 2 * y) == pytest.approx(1.0, rel=1e-13)


def test_h1_seminorm_of_linear(mesh16):
    x, y = mesh16.nodes.T
    assert h1_seminorm(mesh16, 3 * x - 4 * y) == pytest.approx(5.0, rel=1e-13)


@pytest.mark.parametrize("c", [1e-3, 0.7, 1.0, 42.0])
def test_luxemburg_constant_closed_forms(mesh16, c):
    f = np.full(mesh16.n_nodes, c)
    # |Omega| = 1: exp(c/l) - 1 = 1 and (c/l) log(c/l) - c/l + 1 = 1
    assert luxemburg_norm(mesh16, f, YoungFunction.exp()) == pytest.approx(c / math.log(2), rel=1e-9)
    assert luxemburg_norm(mesh16, f, YoungFunction.exp_conjugate()) == pytest.approx(c / math.e,
                                                                                  rel=1e-9)


def test_luxemburg_power_equals_lp(tri16, rng):
    f = rng.normal(size=tri16.n_nodes)
    for p in (2, 3.5, 7):
        got = luxemburg_norm(tri16, f, YoungFunction.power(p))
        assert got == pytest.approx(lp_norm(tri16, f, p), rel=1e-9)


def test_luxemburg_matches_root_finder(mesh16, rng):
    f = np.exp(rng.normal(size=mesh16.n_nodes))
    m = mesh16.lumped_mass
    with np.errstate(over="ignore"):
        lam = brentq(lambda t: m @ np.expm1(f / t) - 1.0, 1e-3, 1e3, xtol=1e-14, rtol=1e-14)
    rep = luxemburg_norm(mesh16, f, YoungFunction.exp(), full_output=True)
    assert rep.value == pytest.approx(lam, rel=1e-9)
    assert rep.iterations > 0 and rep.quadrature == "vertex"


def test_luxemburg_homogeneous_and_zero(mesh16, rng):
    f = rng.normal(size=mesh16.n_nodes)
    g = YoungFunction.exp()
    assert luxemburg_norm(mesh16, 1e5 * f, g) == pytest.approx(1e5 * luxemburg_norm(mesh16, f, g),
                                                                rel=1e-9)
    assert luxemburg_norm(mesh16, np.zeros(mesh16.n_nodes), g) == 0.0


def test_young_functions():
    s = np.array([0.0, 0.5, 1.0, 2.0])
    np.testing.assert_allclose(YoungFunction.exp()(s), np.exp(s) - 1)
    np.testing.assert_allclose(YoungFunction.exp_conjugate()(s), [0, 0, 0, 2 * math.log(2) - 1])
    np.testing.assert_allclose(YoungFunction.power(3)(s), s**3)
    with pytest.raises(ValueError):
        YoungFunction.power(1)
    with pytest.raises(ValueError):
        YoungFunction("cosh")


_MESH = square_mesh(8)
fields = st.lists(st.floats(-1e3, 1e3, allow_subnormal=False), min_size=_MESH.n_nodes,
                  max_size=_MESH.n_nodes).map(np.array)


@given(fields, fields)
@settings(max_examples=60, deadline=None)
def test_holder_property(f, g):
    r = orlicz_holder_check(_MESH, f, g)
    assert r.passed, r


@given(fields, st.floats(1e-3, 1.0))
@settings(max_examples=60, deadline=None)
def test_embedding_property(f, eps):
    assert gamma_star_embedding_check(_MESH, f, eps).passed


def test_embedding_rejects_eps(mesh16):
    with pytest.raises(ValueError):
        gamma_star_embedding_check(mesh16, np.ones(mesh16.n_nodes), 0.0)


def test_w2p_of_eigenfunction():
    # f = 2 pi^2 s, G f = s = sin(pi x) sin(pi y):
    # ||s||_2^2 = 1/4, ||grad s||_2^2 = pi^2/2, || |D^2 s|_F ||_2^2 = pi^4
    exact = math.sqrt(0.25 + math.pi**2 / 2 + math.pi**4) / (2 * 2 * math.pi**2 * 0.5)
    vals = []
    for n in (16, 32, 64):
        m = square_mesh(n)
        x, y = m.nodes.T
        vals.append(w2p_ratio(m, 2 * math.pi**2 * np.sin(math.pi * x) * np.sin(math.pi * y), 2))
    err = np.abs(np.array(vals) / exact - 1)
    assert err[-1] < 0.02
    assert np.all(np.diff(err) < 0)


def test_w2p_norm_of_zero_and_bad_p(mesh16):
    assert w2p_norm(mesh16, np.zeros(mesh16.n_nodes), 4) == 0.0
    with pytest.raises(ValueError):
        w2p_ratio(mesh16, np.ones(mesh16.n_nodes), 1.5)
    with pytest.raises(ValueError):
        w2p_ratio(mesh16, np.zeros(mesh16.n_nodes), 2)
    with pytest.raises(ValueError):
        orlicz_endpoint_ratio(mesh16, np.zeros(mesh16.n_nodes))


def test_endpoint_ratio_interior_bump_converges():
    vals = []
    for n in (16, 32, 64):
        m = square_mesh(n)
        x, y = m.nodes.T
        vals.append(orlicz_endpoint_ratio(m, np.exp(-((x - 0.5) ** 2 + (y - 0.5) ** 2) / 0.02)))
    growth = np.array(vals[1:]) / vals[:-1] - 1
    assert np.all(growth < 0.1)
    assert growth[1] < growth[0]
