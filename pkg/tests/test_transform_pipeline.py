import numpy as np
import pytest
from hypothesis import given, settings, strategies as st
from scipy import integrate

from boltzscat.maxwellian_core import MaxwellianParams, evaluate, sample_params
from boltzscat.ssbe_solver import transport_matrix
from boltzscat.transform_pipeline import (FrameMap, collision_exponent, inverse_map_point,
                                          map_point, push_density, regime_classify,
                                          standard_maxwellian, tau, transport_clock)

seeds = st.integers(0, 2 ** 32 - 1)


@settings(max_examples=40, deadline=None)
@given(seeds, st.sampled_from([2, 3]), st.floats(-3.0, 6.0))
def test_traveling_maxwellian_maps_to_standard(seed, d, t):
    rng = np.random.default_rng(seed)
    p = sample_params(rng, d)
    x = rng.normal(size=(200, d)) * 1.5
    v = rng.normal(size=(200, d)) * 1.5
    G = push_density(FrameMap(p, "lab->scaled"), t, lambda X, V: evaluate(p, t, X, V))(x, v)
    ref = standard_maxwellian(d)(x, v)
    assert np.max(np.abs(G / ref - 1.0)) <= 1e-10


@settings(max_examples=40, deadline=None)
@given(seeds, st.sampled_from([2, 3]), st.floats(-3.0, 6.0))
def test_point_map_roundtrip(seed, d, t):
    rng = np.random.default_rng(seed)
    fm = FrameMap(sample_params(rng, d))
    x = rng.normal(size=(50, d))
    v = rng.normal(size=(50, d))
    xb, vb = inverse_map_point(fm, t, *map_point(fm, t, x, v))
    assert np.max(np.abs(xb - x)) <= 1e-12 * max(1.0, np.abs(x).max())
    assert np.max(np.abs(vb - v)) <= 1e-12 * max(1.0, np.abs(v).max())
    X, V = fm(t, x, v)
    xi, vi = fm.inverted()(t, X, V)
    assert np.allclose(xi, x, atol=1e-12) and np.allclose(vi, v, atol=1e-12)


@pytest.mark.parametrize("d", [2, 3])
def test_map_jacobian_is_inverse_det_B(d):
    p = sample_params(np.random.default_rng(4), d)
    fm = FrameMap(p)
    t = 0.9
    J = np.empty((2 * d, 2 * d))
    for k in range(2 * d):
        e = np.zeros(2 * d)
        e[k] = 1.0
        X1, V1 = map_point(fm, t, e[:d], e[d:])
        X0, V0 = map_point(fm, t, np.zeros(d), np.zeros(d))
        J[:, k] = np.concatenate([X1 - X0, V1 - V0])
    assert np.linalg.det(J) == pytest.approx(1.0 / p.det_B, rel=1e-12)


@pytest.mark.parametrize("d", [2, 3])
def test_free_streaming_becomes_scaled_transport(d):
    """F(t, X, V) = F0(X - t V, V) in the lab frame gives G(t1, z) = G(t0, E z)."""
    rng = np.random.default_rng(9)
    p = sample_params(rng, d, centered=True)
    fm = FrameMap(p, "lab->scaled")
    c0 = rng.normal(size=2 * d)

    def F(t):
        def f(X, V):
            z = np.concatenate([X - t * V, V], -1) - c0
            return np.exp(-0.5 * np.sum(z * z, -1) / 0.7)
        return f

    t0, t1 = 0.4, 2.3
    z = rng.normal(size=(100, 2 * d))
    E = transport_matrix(p, t0, t1)
    G1 = push_density(fm, t1, F(t1))(z[:, :d], z[:, d:])
    ze = z @ E.T
    G0 = push_density(fm, t0, F(t0))(ze[:, :d], ze[:, d:])
    assert np.max(np.abs(G1 - G0)) <= 1e-12 * np.max(np.abs(G1))


def test_scaled_to_lab_inverts():
    p = sample_params(np.random.default_rng(2), 3)
    M = standard_maxwellian(3)
    F = push_density(FrameMap(p, "scaled->lab"), 1.1, M)
    rng = np.random.default_rng(0)
    X = rng.normal(size=(30, 3))
    V = rng.normal(size=(30, 3))
    assert np.allclose(F(X, V), evaluate(p, 1.1, X, V), rtol=1e-10)


def test_regime_classify():
    assert regime_classify(-1.0, 3) == "weak"
    assert regime_classify(-1.99, 3) == "weak"
    assert regime_classify(-2.5, 3) == "strong"
    assert regime_classify(-0.5, 2) == "weak"
    assert regime_classify(-1.0, 2) == "strong"
    assert collision_exponent(-0.5, 2) == 1.5
    with pytest.raises(ValueError):
        regime_classify(0.5, 3)


@settings(max_examples=30, deadline=None)
@given(seeds, st.floats(-5.0, 5.0), st.floats(0.0, 20.0))
def test_transport_clock_matches_quadrature(seed, t0, dt):
    p = sample_params(np.random.default_rng(seed), 2)
    ref, _ = integrate.quad(lambda s: 1.0 / tau(p, s) ** 2, t0, t0 + dt, epsabs=1e-14,
                            epsrel=1e-12)
    assert transport_clock(p, t0, t0 + dt) == pytest.approx(ref, rel=1e-9, abs=1e-13)


def test_transport_clock_to_infinity():
    p = MaxwellianParams.standard(2)
    assert transport_clock(p, 0.0, np.inf) == pytest.approx(0.5 * np.pi)
    assert transport_clock(p, -np.inf, np.inf) == pytest.approx(np.pi)


def test_frame_map_dict_and_validation():
    fm = FrameMap(sample_params(np.random.default_rng(8), 2), "lab->scaled")
    back = FrameMap.from_dict(fm.to_dict())
    assert back.direction == fm.direction and np.allclose(back.params.B, fm.params.B)
    with pytest.raises(ValueError):
        FrameMap(fm.params, "sideways")
