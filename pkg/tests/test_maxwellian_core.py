import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from boltzscat.maxwellian_core import (ConservedMoments, InfeasibleMomentsError, MaxwellianParams,
                                       evaluate, log_span_check, matrix_sqrt, moments_of_params,
                                       params_from_moments, sample_params)
from boltzscat.phase_field import PhaseGrid, DistributionField
from boltzscat.collision_kernel import VelocityGrid

from oracles import gaussian_quadrature, moment_polynomials

seeds = st.integers(0, 2 ** 32 - 1)


def _density(params, t):
    d = params.d
    return lambda z: evaluate(params, t, z[:, :d], z[:, d:])


@settings(max_examples=200, deadline=None)
@given(seeds, st.sampled_from([2, 3]))
def test_det_P_equals_det_Q(seed, d):
    p = sample_params(np.random.default_rng(seed), d)
    assert np.linalg.det(p.P) == pytest.approx(np.linalg.det(p.Q), rel=1e-10)
    assert np.all(np.linalg.eigvalsh(p.P) > 0)


@pytest.mark.parametrize("d", [2, 3])
@pytest.mark.parametrize("t", [0.0, 1.3])
def test_unit_mass_against_gauss_hermite(d, t):
    rng = np.random.default_rng(11 + d)
    for _ in range(5):
        p = sample_params(rng, d)
        mass, = gaussian_quadrature(_density(p, t), 2 * d)
        assert mass == pytest.approx(p.m, rel=1e-8)


@pytest.mark.parametrize("d", [2, 3])
def test_closed_form_moments_against_quadrature(d):
    rng = np.random.default_rng(5 + d)
    for t in (0.0, 0.8):
        p = sample_params(rng, d)
        ref = np.array(gaussian_quadrature(_density(p, t), 2 * d, moment_polynomials(d, t)))
        got = moments_of_params(p).as_vector()
        assert np.max(np.abs(got - ref)) <= 1e-8 * np.max(np.abs(ref))


@settings(max_examples=60, deadline=None)
@given(seeds, st.sampled_from([2, 3]))
def test_moment_inversion_roundtrip(seed, d):
    p = sample_params(np.random.default_rng(seed), d)
    q = params_from_moments(moments_of_params(p), tol=1e-12)
    a = np.concatenate([[p.a, p.b, p.c, p.m], p.A.ravel(), p.u, p.y])
    b = np.concatenate([[q.a, q.b, q.c, q.m], q.A.ravel(), q.u, q.y])
    assert np.max(np.abs(a - b)) <= 1e-8 * np.max(np.abs(a))


def test_infeasible_moments_rejected():
    mom = ConservedMoments(m0=1.0, u0=np.zeros(3), y0=np.zeros(3), a0=1.0, b0=2.0, c0=1.0,
                           A0=np.zeros((3, 3)))
    with pytest.raises(InfeasibleMomentsError):
        params_from_moments(mom)
    with pytest.raises(InfeasibleMomentsError):
        params_from_moments(ConservedMoments(0.0, np.zeros(2), np.zeros(2), 1, 0, 1,
                                             np.zeros((2, 2))))


def test_standard_moments():
    m = moments_of_params(MaxwellianParams.standard(3))
    assert (m.m0, m.a0, m.b0, m.c0) == pytest.approx((1.0, 3.0, 0.0, 3.0))


def test_invalid_params():
    with pytest.raises(ValueError):
        MaxwellianParams(a=1.0, b=1.0, c=1.0, A=np.zeros((3, 3)))
    with pytest.raises(ValueError):
        MaxwellianParams(a=1.0, b=0.0, c=1.0, A=np.ones((2, 2)))
    big = np.array([[0.0, -2.0], [2.0, 0.0]])
    with pytest.raises(ValueError):
        MaxwellianParams(a=1.0, b=0.0, c=1.0, A=big)


@settings(max_examples=50, deadline=None)
@given(seeds)
def test_matrix_sqrt(seed):
    rng = np.random.default_rng(seed)
    X = rng.normal(size=(3, 3))
    Q = X @ X.T + 0.1 * np.eye(3)
    B = matrix_sqrt(Q)
    assert np.allclose(B, B.T)
    assert np.allclose(B @ B, Q, rtol=1e-12, atol=1e-12 * np.abs(Q).max())
    assert np.all(np.linalg.eigvalsh(B) > 0)


def test_matrix_sqrt_rejects():
    with pytest.raises(ValueError):
        matrix_sqrt(np.array([[1.0, 2.0], [0.0, 1.0]]))
    with pytest.raises(ValueError):
        matrix_sqrt(-np.eye(2))


def test_dict_roundtrip():
    p = sample_params(np.random.default_rng(3), 3)
    q = MaxwellianParams.from_dict(p.to_dict())
    assert np.allclose(q.A, p.A) and (q.a, q.b, q.c, q.m) == (p.a, p.b, p.c, p.m)
    m = moments_of_params(p)
    assert np.allclose(ConservedMoments.from_dict(m.to_dict()).as_vector(), m.as_vector())


def test_log_span_detects_maxwellians():
    grid = PhaseGrid(2, 8, 3.0, VelocityGrid(2, 8, 3.0))
    x, v = grid.points()
    p = sample_params(np.random.default_rng(1), 2)
    t = 0.4
    field = DistributionField(grid, evaluate(p, t, x, v))
    assert log_span_check(field, t) < 1e-10
    bumpy = DistributionField(grid, field.values * (1.5 + np.cos(v[..., 0])))
    assert log_span_check(bumpy, t) > 1e-3
