import math

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st
from scipy.stats import special_ortho_group

from boltzscat.remap import (apply_orthogonal, apply_orthogonal_spectral, givens_factors,
                             quadratic_moment_fix, rotate_plane, shear, spectral_shear)


def _box(dim, n, L):
    c = (np.arange(n) - 0.5 * (n - 1)) * (2 * L / n)
    return [c] * dim, [2 * L / n] * dim


def _gauss(coords, center, w=0.8):
    mesh = np.meshgrid(*coords, indexing="ij")
    r2 = sum((m - c) ** 2 for m, c in zip(mesh, center))
    return np.exp(-0.5 * r2 / w ** 2)


def _moments(f, coords):
    mesh = np.meshgrid(*coords, indexing="ij")
    z = np.stack([m.ravel() for m in mesh], 1)
    fr = f.ravel()
    first = z.T @ fr
    second = (z * fr[:, None]).T @ z
    return fr.sum(), first, second


def _random_orthogonal(seed, n):
    Q = special_ortho_group.rvs(n, random_state=seed)
    if seed % 2:
        Q[:, 0] *= -1.0
    return Q


@settings(max_examples=40, deadline=None)
@given(st.integers(0, 2 ** 31 - 1), st.sampled_from([2, 3, 4, 6]))
def test_givens_factors_reconstruct(seed, n):
    E = _random_orthogonal(seed, n)
    factors, signs = givens_factors(E)
    R = np.eye(n)
    for a, b, phi in factors:
        G = np.eye(n)
        c, s = math.cos(phi), math.sin(phi)
        G[a, a] = G[b, b] = c
        G[b, a], G[a, b] = s, -s
        R = R @ G
    assert np.allclose(R @ np.diag(signs), E, atol=1e-12)


def test_givens_rejects_non_orthogonal():
    with pytest.raises(ValueError):
        givens_factors(np.array([[1.0, 0.5], [0.0, 1.0]]))


def test_integer_shear_is_exact_translation():
    f = np.random.default_rng(0).normal(size=(16, 5))
    g, lost = shear(f, 0, 1, np.zeros(5) + 2.0, order=4)
    # rows pushed past the last node are extrapolated onto the last four
    assert np.allclose(g[2:12], f[:10], atol=1e-14) and lost == 0.0
    assert np.isclose(g.sum(), f.sum(), rtol=1e-13)
    h = spectral_shear(f, 0, 1, np.full(5, 3.0))
    assert np.allclose(h, np.roll(f, 3, axis=0), atol=1e-12)


@pytest.mark.parametrize("seed", [1, 2, 3])
def test_lagrange_remap_moments_and_accuracy(seed):
    coords, sp = _box(2, 48, 6.0)
    E = _random_orthogonal(seed, 2)
    c = np.array([0.7, -0.4])
    f = _gauss(coords, c)
    g, lost = apply_orthogonal(f, E, coords, sp, order=6)
    assert lost < 1e-11
    m0, m1, m2 = _moments(f, coords)
    n0, n1, n2 = _moments(g, coords)
    # (f o E) has first moment E^T m1 and second moment E^T m2 E
    assert n0 == pytest.approx(m0, rel=1e-13)
    assert np.allclose(n1, E.T @ m1, atol=1e-11 * m0)
    assert np.allclose(n2, E.T @ m2 @ E, atol=1e-11 * m0)
    exact = _gauss(coords, E.T @ c)
    assert np.max(np.abs(g - exact)) < 1e-3


def test_spectral_remap_converges_4d():
    E = _random_orthogonal(7, 4)
    c = np.array([0.5, 0.0, -0.3, 0.2])
    err = []
    for n in (12, 16):
        coords, sp = _box(4, n, 6.0)
        f = _gauss(coords, c, 1.0)
        g = apply_orthogonal_spectral(f, E, coords, sp)
        assert g.sum() == pytest.approx(f.sum(), rel=1e-12)
        err.append(np.max(np.abs(g - _gauss(coords, E.T @ c, 1.0))))
    assert err[1] < 2e-4 and err[1] < 0.2 * err[0]


def test_quarter_turn_converges():
    # the intermediate shears move the tails far out, so the box is wide
    err = []
    for n in (48, 96):
        coords, sp = _box(2, n, 9.0)
        f = _gauss(coords, [1.0, 0.5])
        g, lost = rotate_plane(f, 0, 1, 0.5 * math.pi, coords, sp, order=8)
        assert lost < 1e-9
        # (f o G)(z) with G e_0 = e_1: the centre moves to G^T c = (0.5, -1.0)
        err.append(np.max(np.abs(g - _gauss(coords, [0.5, -1.0]))))
    assert err[1] < 1e-4 and err[1] < 0.05 * err[0]


@settings(max_examples=20, deadline=None)
@given(st.integers(0, 2 ** 31 - 1))
def test_quadratic_fix_matches_moments(seed):
    coords, _ = _box(2, 12, 4.0)
    E = _random_orthogonal(seed, 2)
    rng = np.random.default_rng(seed)
    old = _gauss(coords, rng.uniform(-1, 1, 2))
    new = old + 1e-3 * rng.normal(size=old.shape)
    prof = _gauss(coords, [0.0, 0.0], 1.0)
    fixed = quadratic_moment_fix(new, old, E, coords, prof)
    m0, m1, m2 = _moments(old, coords)
    n0, n1, n2 = _moments(fixed, coords)
    assert n0 == pytest.approx(m0, rel=1e-12)
    assert np.allclose(n1, E.T @ m1, atol=1e-12 * m0)
    assert np.allclose(n2, E.T @ m2 @ E, atol=1e-11 * m0)
