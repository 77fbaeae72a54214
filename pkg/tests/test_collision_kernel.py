import math

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from boltzscat.collision_kernel import (CollisionKernel, VelocityGrid, cancellation_constant,
                                        change_of_variable_check, collision_parts,
                                        dissipation_Dg, entropy_dissipation, eval_Q_eta_direct,
                                        hyperoctahedral_average, is_hyperoctahedral,
                                        load_velocity_field, loss_convolution, loss_rate_bound,
                                        orbit_representatives, post_collision,
                                        q2_convolution_quadrature, q2_direct_quadrature,
                                        save_velocity_field, symmetry_check, weak_form)

from oracles import brute_force_Q


def _bump(grid, R=2.6, tilt=0.2):
    v = grid.points()
    r2 = np.sum(v * v, 1)
    return np.where(r2 < R * R, (1 - r2 / R ** 2) ** 4, 0.0) * (1 + tilt * v[:, 0])


def _maxwellian(grid, T=1.0, u=0.0):
    v = grid.points() - u
    return np.exp(-0.5 * np.sum(v * v, 1) / T) / (2 * np.pi * T) ** (grid.d / 2)


def _invariants(grid, Q):
    v = grid.points()
    w = grid.weight
    return np.array([Q.sum() * w, *(v * Q[:, None]).sum(0) * w, (np.sum(v * v, 1) * Q).sum() * w])


@pytest.mark.parametrize("d,gamma", [(2, -0.5), (3, -1.0)])
def test_matches_brute_force_oracle(d, gamma):
    grid = VelocityGrid(d, 8, 4.0)
    k = CollisionKernel(gamma=gamma, d=d)
    f = _bump(grid)
    g = _bump(grid, R=3.0, tilt=-0.3)
    Q, gain, loss = eval_Q_eta_direct(k, grid, f, g, return_parts=True)
    ref = brute_force_Q(k, grid, f, g)
    assert np.max(np.abs(Q - ref)) <= 1e-12 * np.max(np.abs(loss))


@pytest.mark.parametrize("d,gamma", [(2, -0.5), (3, -1.0)])
def test_collision_invariants(d, gamma):
    grid = VelocityGrid(d, 10 if d == 3 else 16, 5.0)
    k = CollisionKernel(gamma=gamma, d=d)
    f = _bump(grid, R=3.5)
    Q, gain, loss = eval_Q_eta_direct(k, grid, f, return_parts=True)
    scale = np.abs(_invariants(grid, loss)).max()
    assert np.max(np.abs(_invariants(grid, Q))) <= 1e-12 * scale


def test_symmetric_path_matches_full():
    grid = VelocityGrid(3, 8, 4.0)
    k = CollisionKernel(gamma=-1.0, d=3)
    f = _maxwellian(grid, 0.8) * (1 + 0.1 * np.sum(grid.points() ** 4, 1))
    assert is_hyperoctahedral(f, grid, rtol=1e-14)
    a, _, loss = eval_Q_eta_direct(k, grid, f, return_parts=True)
    b = eval_Q_eta_direct(k, grid, f, symmetric=True)
    assert np.max(np.abs(a - b)) <= 1e-12 * np.max(loss)


def test_batched_columns_are_independent():
    grid = VelocityGrid(2, 12, 5.0)
    k = CollisionKernel(gamma=-0.5, d=2)
    F = np.stack([_maxwellian(grid), _bump(grid, 3.0), _maxwellian(grid, 1.3, 0.4)], 1)
    batch = eval_Q_eta_direct(k, grid, F)
    for c in range(3):
        assert np.allclose(batch[:, c], eval_Q_eta_direct(k, grid, F[:, c]), rtol=0, atol=1e-15)


def test_strong_and_adjoint_forms_converge_together():
    k = CollisionKernel(gamma=-0.5, d=2)
    gap = []
    for n in (16, 32):
        grid = VelocityGrid(2, n, 6.0)
        f = _maxwellian(grid, 0.7, 0.5) + _maxwellian(grid, 1.2)
        a = eval_Q_eta_direct(k, grid, f, form="adjoint")
        b = eval_Q_eta_direct(k, grid, f, form="strong")
        gap.append(np.linalg.norm(a - b) / np.linalg.norm(a))
    assert gap[1] <= gap[0] / 3


def test_weak_form_is_adjoint_pairing():
    grid = VelocityGrid(2, 12, 5.0)
    k = CollisionKernel(gamma=-0.5, d=2)
    g = _maxwellian(grid, 1.1)
    h = _bump(grid, 3.0)
    phi = np.cos(grid.points()[:, 1])
    lhs = float(np.sum(eval_Q_eta_direct(k, grid, g, h) * phi) * grid.weight)
    assert weak_form(k, grid, g, h, phi) == pytest.approx(lhs, rel=1e-12)


def test_equilibrium_residual_shrinks():
    k = CollisionKernel(gamma=-0.5, d=2)
    res = []
    for n in (12, 24):
        grid = VelocityGrid(2, n, 6.0)
        Q = eval_Q_eta_direct(k, grid, _maxwellian(grid))
        res.append(math.sqrt(np.sum(Q * Q) * grid.weight))
    assert res[1] <= 0.25 * res[0]


def test_dissipation_functionals():
    grid = VelocityGrid(2, 16, 6.0)
    k = CollisionKernel(gamma=-0.5, d=2)
    M = _maxwellian(grid)
    D0, clamped = entropy_dissipation(k, grid, M)
    assert abs(D0) < 1e-20 and clamped == 0
    F = M * (1 + 0.4 * np.cos(grid.points()[:, 0]))
    D1, _ = entropy_dissipation(k, grid, F)
    assert D1 > 1e-4
    assert dissipation_Dg(k, grid, M, F) > 0
    with pytest.raises(ValueError):
        dissipation_Dg(k, grid, -M, F)
    with pytest.raises(ValueError):
        entropy_dissipation(k, grid, np.zeros(grid.size))


def test_dissipation_finite_on_clamped_tails():
    grid = VelocityGrid(2, 16, 6.0)
    k = CollisionKernel(gamma=-0.5, d=2)
    v = grid.points()
    F = _maxwellian(grid) * (1 + 0.3 * np.cos(v[:, 0]))
    F[np.sum(v * v, 1) > 20] = 0.0
    D, clamped = entropy_dissipation(k, grid, F, floor=1e-30 * F.max())
    assert clamped > 0 and np.isfinite(D) and 0 <= D < 10


def test_cancellation_convolution_matches_direct():
    k = CollisionKernel(gamma=-0.5, d=2, eta=0.1)
    g = lambda z: np.exp(-0.5 * np.sum(z * z, -1)) / (2 * np.pi)
    v = np.array([0.3, -0.2])
    a = q2_direct_quadrature(k, g, v)
    b = q2_convolution_quadrature(k, g, v)
    assert a == pytest.approx(b, rel=1e-6)


def test_cancellation_constant_against_series():
    # integrand K th^(-1-2s) (cos^(-d-gamma)(th/2) - 1): check by a fine midpoint rule
    k = CollisionKernel(gamma=-1.0, d=3, s=0.25, eta=0.05)
    a, b = k.theta_eta, 0.5 * math.pi
    x = np.linspace(a, b, 400001)
    xm = 0.5 * (x[1:] + x[:-1])
    f = k.K * xm ** (-1.5) * (np.cos(0.5 * xm) ** (-2.0) - 1.0)
    ref = 2 * math.pi * np.sum(f * np.diff(x))
    assert cancellation_constant(k) == pytest.approx(ref, rel=1e-8)


def test_loss_convolution_and_rate_bound():
    grid = VelocityGrid(2, 16, 6.0)
    k = CollisionKernel(gamma=-0.5, d=2)
    f = _maxwellian(grid)
    conv = loss_convolution(k, grid, f)
    assert conv.shape == (grid.size,) and np.all(conv >= 0)
    _, _, loss = eval_Q_eta_direct(k, grid, f, return_parts=True)
    nu = loss_rate_bound(k, grid, f)
    assert np.all(loss <= nu * f * (1 + 1e-12))


@pytest.mark.parametrize("kind", ["regular", "singular"])
@pytest.mark.parametrize("d", [2, 3])
def test_change_of_variables(kind, d):
    k = CollisionKernel(gamma=-1.0, d=d, eta=0.1)

    def F(w, r, th):
        return np.exp(-np.sum((w - 0.3) ** 2, -1)) * np.exp(-0.1 * r * r) * (1 + th)

    out = change_of_variable_check(k, F, kind, v_fixed=np.full(d, 0.2), n=24)
    assert out["residual"] < 1e-6


def test_symmetry_identity():
    k = CollisionKernel(gamma=-1.0, d=3)
    out = symmetry_check(k, lambda th: 1 + th, np.array([0.5, 0.1, -0.4]), np.zeros(3))
    assert out["residual"] < 1e-12


@settings(max_examples=100, deadline=None)
@given(st.integers(0, 2 ** 32 - 1), st.sampled_from([2, 3]))
def test_post_collision_conserves(seed, d):
    rng = np.random.default_rng(seed)
    v, vs = rng.normal(size=(2, d))
    s = rng.normal(size=d)
    s /= np.linalg.norm(s)
    vp, vps = post_collision(v, vs, s)
    assert np.allclose(vp + vps, v + vs, atol=1e-12)
    assert np.isclose(vp @ vp + vps @ vps, v @ v + vs @ vs, rtol=1e-12)


def test_angular_mass_matches_rule():
    k = CollisionKernel(gamma=-1.0, d=3, panel_nodes=8)
    assert np.sum(k.sigma_nodes()[4]) == pytest.approx(k.angular_mass, rel=1e-10)
    k2 = CollisionKernel(gamma=-0.5, d=2, panel_nodes=8)
    assert np.sum(k2.sigma_nodes()[4]) == pytest.approx(k2.angular_mass, rel=1e-10)


def test_hyperoctahedral_helpers():
    grid = VelocityGrid(3, 6, 3.0)
    rng = np.random.default_rng(0)
    a = hyperoctahedral_average(rng.normal(size=grid.shape), 3)
    assert is_hyperoctahedral(a, grid, rtol=1e-14)
    reps, mult = orbit_representatives(grid)
    assert mult.sum() == grid.size


def test_kernel_validation():
    for bad in (dict(gamma=0.5), dict(s=1.2), dict(K=-1.0), dict(d=4), dict(eta=1.0),
                dict(n_azimuth=10)):
        with pytest.raises(ValueError):
            CollisionKernel(**bad)
    with pytest.raises(ValueError):
        CollisionKernel(eta=0.0).panels()
    with pytest.raises(ValueError):
        VelocityGrid(3, 2, 1.0)


def test_parts_reject_nonfinite():
    grid = VelocityGrid(2, 8, 4.0)
    f = np.ones(grid.size)
    f[3] = np.nan
    with pytest.raises(ValueError):
        collision_parts(CollisionKernel(d=2, gamma=-0.5), grid, f)


def test_save_load_roundtrip(tmp_path):
    grid = VelocityGrid(2, 8, 4.0)
    f = _maxwellian(grid)
    save_velocity_field(tmp_path / "f.f8", f, grid, note="m")
    g, grid2, side = load_velocity_field(tmp_path / "f.f8")
    assert np.array_equal(g, f) and grid2.to_dict() == grid.to_dict() and side["note"] == "m"
    k = CollisionKernel.from_dict(CollisionKernel(gamma=-0.7).to_dict())
    assert k.gamma == -0.7
