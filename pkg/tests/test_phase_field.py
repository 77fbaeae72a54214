import csv
import math

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st
from scipy import integrate

from boltzscat.collision_kernel import VelocityGrid
from boltzscat.maxwellian_core import MaxwellianParams, moments_of_params, sample_params
from boltzscat.phase_field import (DistributionField, NormConfig, PhaseGrid, an_norm, apply_X,
                                   apply_Y, boundary_mass_fraction, bracket_integral, bracket_tail,
                                   clock, conserved_moments, energy_norm, lp_distance, ma_norm,
                                   p_weight, q_weight, relative_entropy, write_diagnostics_csv)
from boltzscat.ssbe_solver import stationary_maxwellian


def _grid(d=2, n=8, L=5.0):
    return PhaseGrid(d, n, L, VelocityGrid(d, n, L))


@settings(max_examples=60, deadline=None)
@given(st.floats(-50.0, 50.0), st.floats(1.05, 4.0))
def test_bracket_integral_matches_quad(eta, e):
    ref, _ = integrate.quad(lambda x: (1 + x * x) ** (-e / 2), 0.0, eta, epsabs=1e-14,
                            epsrel=1e-12, limit=200)
    assert bracket_integral(eta, e) == pytest.approx(ref, rel=1e-9, abs=1e-13)


@settings(max_examples=40, deadline=None)
@given(st.floats(0.0, 1e6), st.floats(1.05, 4.0))
def test_bracket_tail_complements(eta, e):
    total = bracket_integral(math.inf, e)
    assert bracket_integral(eta, e) + bracket_tail(eta, e) == pytest.approx(total, rel=1e-12)


def test_bracket_tail_relative_accuracy_far_out():
    # int_eta^inf xi^-2 (1 + xi^-2)^-1 = arccot(eta) for exponent 2
    for eta in (1e3, 1e6, 1e9):
        assert bracket_tail(eta, 2.0) == pytest.approx(math.atan(1.0 / eta), rel=1e-12)


def test_clock_total_exponent_two():
    assert clock(math.inf, 2.0) == pytest.approx(0.5 * math.pi, rel=1e-14)


@settings(max_examples=60, deadline=None)
@given(st.floats(0.0, 1e6), st.floats(0.0, 1e6), st.sampled_from([(3, -1.0), (2, -0.5), (3, -0.3)]))
def test_q_p_weights(t1, t2, dg):
    d, g = dg
    cfg = NormConfig(d=d, gamma=g)
    a, b = sorted((t1, t2))
    assert 0.75 < q_weight(b, cfg) <= q_weight(a, cfg) <= 1.0
    assert 0.25 <= p_weight(a, cfg) <= p_weight(b, cfg) < 0.5
    assert q_weight(a, cfg) + p_weight(a, cfg) == pytest.approx(1.25, rel=1e-14)


def test_q_p_endpoints():
    cfg = NormConfig()
    assert q_weight(0.0, cfg) == 1.0 and p_weight(0.0, cfg) == 0.25
    assert q_weight(1e12, cfg) == pytest.approx(0.75, abs=1e-11)
    assert p_weight(1e12, cfg) == pytest.approx(0.5, abs=1e-11)


def test_vector_fields_on_polynomials():
    g = _grid(2, 9, 4.0)
    x, v = g.points()
    f = DistributionField(g, x[..., 0] ** 2 + 3 * v[..., 0] * x[..., 1] + v[..., 1] ** 3)
    t = 1.7
    bt = math.sqrt(1 + t * t)
    X0 = apply_X(f, t, 0).values
    Y1 = apply_Y(f, t, 1).values
    assert np.allclose(X0, (2 * x[..., 0] - 3 * t * x[..., 1]) / bt, atol=1e-10)
    assert np.allclose(Y1, (3 * t * v[..., 0] + 3 * v[..., 1] ** 2) / bt, atol=1e-10)


def test_vector_fields_need_space():
    g = PhaseGrid(2, 1, 1.0, VelocityGrid(2, 8, 4.0))
    with pytest.raises(ValueError):
        apply_X(DistributionField(g, np.ones(g.shape)), 0.0)


@settings(max_examples=20, deadline=None)
@given(st.integers(0, 2 ** 32 - 1), st.floats(0.0, 100.0), st.floats(0.1, 10.0))
def test_norm_structure(seed, t, lam):
    g = _grid(2, 6, 4.0)
    rng = np.random.default_rng(seed)
    f = DistributionField(g, rng.normal(size=g.shape) * np.exp(-g.z_bracket_sq()))
    cfg = NormConfig(d=2, gamma=-0.5, order=2)
    an, ma, en = an_norm(f, t, cfg), ma_norm(f, t, cfg), energy_norm(f, t, cfg)
    assert 0 <= ma <= an and en >= 0
    scaled = DistributionField(g, lam * f.values)
    assert energy_norm(scaled, t, cfg) == pytest.approx(lam * lam * en, rel=1e-12)


def test_norm_config_validation():
    with pytest.raises(ValueError):
        NormConfig(d=3, gamma=-2.5)
    with pytest.raises(ValueError):
        NormConfig(m_w=2)
    with pytest.raises(ValueError):
        NormConfig(delta=5.0)


def test_composed_moments_of_stationary_state():
    g = PhaseGrid(2, 16, 6.0, VelocityGrid(2, 16, 6.0))
    M = DistributionField(g, stationary_maxwellian(g))
    ref = moments_of_params(MaxwellianParams.standard(2)).as_vector()
    for t in (0.0, 3.0):
        got = conserved_moments(M, t).as_vector()
        assert np.max(np.abs(got - ref)) < 1e-5


def test_composed_moments_general_params():
    g = PhaseGrid(2, 20, 7.0, VelocityGrid(2, 20, 7.0))
    p = sample_params(np.random.default_rng(6), 2)
    M = DistributionField(g, stationary_maxwellian(g))
    ref = moments_of_params(p).as_vector()
    got = conserved_moments(M, 1.2, "scaled", p).as_vector()
    assert np.max(np.abs(got - ref)) < 1e-5 * np.max(np.abs(ref))


def test_relative_entropy_and_distance():
    g = _grid(2, 8, 5.0)
    M = DistributionField(g, stationary_maxwellian(g))
    assert relative_entropy(M, M) == pytest.approx(0.0, abs=1e-15)
    F = DistributionField(g, M.values * (1 + 0.3 * np.cos(g.points()[1][..., 0])))
    assert relative_entropy(F, M) > 0
    Z = DistributionField(g, np.zeros(g.shape))
    assert relative_entropy(Z, M) == pytest.approx(M.mass())
    assert lp_distance(F, M, 1.0) == pytest.approx(np.sum(np.abs(F.values - M.values))
                                                   * g.cell_volume)
    assert lp_distance(F, M, math.inf) == pytest.approx(np.max(np.abs(F.values - M.values)))


def test_interpolate_nodes_and_outside():
    g = _grid(2, 8, 4.0)
    M = DistributionField(g, stationary_maxwellian(g))
    x, v = g.points()
    assert np.allclose(M.interpolate(x, v), M.values, atol=1e-14)
    assert M.interpolate(np.array([[10.0, 0.0]]), np.zeros((1, 2)))[0] == 0.0


def test_boundary_fraction():
    g = _grid(2, 8, 4.0)
    vals = np.zeros(g.shape)
    vals[0, 3, 3, 3] = 1.0
    vals[3, 3, 3, 3] = 1.0
    assert boundary_mass_fraction(DistributionField(g, vals)) == pytest.approx(0.5)


def test_csv_writer(tmp_path):
    rows = [{"t": 0.0, "mass": 1.0, "momentum": np.array([0.1, 0.2]), "extra": 3},
            {"t": 0.5, "mass": 1.0 - 1e-17, "momentum": [0.0, 0.0], "energy": None}]
    write_diagnostics_csv(tmp_path / "d.csv", rows)
    with open(tmp_path / "d.csv") as fh:
        data = list(csv.reader(fh))
    head = data[0]
    assert head[:2] == ["t", "mass"] and head[-1] == "extra"
    assert data[1][head.index("momentum")] == "0.1 0.2"
    assert float(data[2][1]) == 1.0 - 1e-17
    assert data[2][head.index("energy")] == ""
