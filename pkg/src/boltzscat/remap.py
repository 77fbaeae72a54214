"""Mass-conservative remapping of gridded densities under orthogonal linear maps.

An orthogonal map E of phase space is factored into plane rotations (Givens
QR) followed by axis reflections.  Each plane rotation is three shears, and
each shear is a family of 1D translations applied in deposition form: the
value at every source node is spread onto a p-point Lagrange stencil around
its target position.  A stencil of p >= 3 points reproduces the zeroth,
first and second moments of each translated line exactly, so mass, first
and second phase-space moments transform exactly as under the continuous map.

Targets up to ``EXTRAP_CELLS`` outside the last node are deposited with
a one-sided cubic stencil; anything further is dropped and reported as outflow.

The spectral variant performs every shear as a Fourier phase shift of the
periodic extension of each line.  It keeps every line sum and, apart from
the damped Nyquist mode, the l2 norm; it wraps mass around the box, so it
suits fields that decay to round-off at the edges.
"""

from __future__ import annotations

import math

import numpy as np
from numba import njit

__all__ = [
    "DEFAULT_ORDER",
    "shear",
    "rotate_plane",
    "givens_factors",
    "apply_orthogonal",
    "spectral_shear",
    "apply_orthogonal_spectral",
    "quadratic_moment_fix",
]

DEFAULT_ORDER = 10
EXTRAP_CELLS = 2.0


@njit(cache=True, nogil=True, inline="always")
def _weights(t, b, p, w):
    for a in range(p):
        acc = 1.0
        xa = b + a
        for c in range(p):
            if c != a:
                acc *= (t - (b + c)) / (xa - (b + c))
        w[a] = acc


@njit(cache=True, nogil=True)
def _shear_lines(f, shift, p, extra, out):
    """f, out: (n_a, n_b, R).  Node i on line j moves to fractional index
    i + shift[j] along the first axis.  Returns the dropped mass (sum of
    dropped values)."""
    n = f.shape[0]
    nb = f.shape[1]
    R = f.shape[2]
    w = np.empty(p)
    w4 = np.empty(4)
    lost = 0.0
    lo_in = -0.5
    hi_in = n - 0.5
    for j in range(nb):
        for i in range(n):
            t = i + shift[j]
            if t >= lo_in and t <= hi_in:
                b = int(math.floor(t)) - (p // 2 - 1)
                if b < 0:
                    b = 0
                if b > n - p:
                    b = n - p
                _weights(t, b, p, w)
                for a in range(p):
                    wa = w[a]
                    for r in range(R):
                        out[b + a, j, r] += wa * f[i, j, r]
            elif t >= lo_in - extra and t <= hi_in + extra:
                b = 0 if t < 0 else n - 4
                _weights(t, b, 4, w4)
                for a in range(4):
                    wa = w4[a]
                    for r in range(R):
                        out[b + a, j, r] += wa * f[i, j, r]
            else:
                for r in range(R):
                    lost += f[i, j, r]
    return lost


def shear(values: np.ndarray, axis: int, along: int, shift: np.ndarray,
          order: int = DEFAULT_ORDER) -> tuple[np.ndarray, float]:
    """Translate every line parallel to ``axis`` by shift[k] index units, where k
    is the line's index along axis ``along``.  Returns (new values, dropped sum)."""
    if axis == along:
        raise ValueError("axis and along must differ")
    n = values.shape[axis]
    if order > n:
        raise ValueError("remap order exceeds the number of nodes per axis")
    f = np.moveaxis(values, (axis, along), (0, 1))
    shp = f.shape
    f3 = np.ascontiguousarray(f.reshape(shp[0], shp[1], -1))
    out = np.zeros_like(f3)
    lost = _shear_lines(f3, np.ascontiguousarray(shift, dtype=float), int(order),
                        EXTRAP_CELLS, out)
    res = np.moveaxis(out.reshape(shp), (0, 1), (axis, along))
    return np.ascontiguousarray(res), float(lost)


def rotate_plane(values: np.ndarray, a: int, b: int, phi: float, coords, spacings,
                 order: int = DEFAULT_ORDER) -> tuple[np.ndarray, float]:
    """values o G, where G rotates the (a, b) coordinate plane by phi
    (G e_a = cos phi e_a + sin phi e_b).

    G = S1 S2 S1 with S1: z_a += -tan(phi/2) z_b and S2: z_b += sin(phi) z_a.
    Angles beyond pi/2 in magnitude are split in halves to keep shears mild."""
    if abs(phi) > 0.5 * math.pi:
        v1, l1 = rotate_plane(values, a, b, 0.5 * phi, coords, spacings, order)
        v2, l2 = rotate_plane(v1, a, b, 0.5 * phi, coords, spacings, order)
        return v2, l1 + l2
    if phi == 0.0:
        return values.copy(), 0.0
    ta = math.tan(0.5 * phi)
    sp = math.sin(phi)
    # composing with z_a -> z_a + c z_b moves the mass at w to w_a - c w_b
    f, l1 = shear(values, a, b, ta * coords[b] / spacings[a], order)
    f, l2 = shear(f, b, a, -sp * coords[a] / spacings[b], order)
    f, l3 = shear(f, a, b, ta * coords[b] / spacings[a], order)
    return f, l1 + l2 + l3


def givens_factors(E: np.ndarray, tol: float = 1e-15):
    """Factor an orthogonal matrix as E = G_1 ... G_K diag(signs).

    Returns ([(a, b, phi), ...], signs) where G(a, b, phi) is the plane
    rotation used by :func:`rotate_plane`."""
    E = np.array(E, dtype=float)
    n = E.shape[0]
    if not np.allclose(E @ E.T, np.eye(n), atol=1e-12):
        raise ValueError("matrix is not orthogonal")
    U = E.copy()
    factors = []
    for col in range(n):
        for row in range(col + 1, n):
            x, y = U[col, col], U[row, col]
            if abs(y) <= tol:
                continue
            phi = math.atan2(y, x)
            c, s = math.cos(phi), math.sin(phi)
            # left-multiply by G^T to zero U[row, col]
            rc = U[col].copy()
            rr = U[row].copy()
            U[col] = c * rc + s * rr
            U[row] = -s * rc + c * rr
            factors.append((col, row, phi))
    signs = np.sign(np.diag(U))
    signs[signs == 0] = 1.0
    return factors, signs


def apply_orthogonal(values: np.ndarray, E: np.ndarray, coords, spacings,
                     order: int = DEFAULT_ORDER) -> tuple[np.ndarray, float]:
    """values o E on a tensor grid whose axes carry the coordinates ``coords``
    (1D arrays, symmetric about 0) and uniform ``spacings``.

    Returns the remapped values and the sum of values dropped at the edges."""
    factors, signs = givens_factors(E)
    f = np.ascontiguousarray(values, dtype=float)
    lost = 0.0
    for a, b, phi in factors:
        f, l = rotate_plane(f, a, b, phi, coords, spacings, order)
        lost += l
    flips = tuple(k for k, s in enumerate(signs) if s < 0)
    if flips:
        f = np.ascontiguousarray(np.flip(f, flips))
    return f, lost


def spectral_shear(values: np.ndarray, axis: int, along: int, shift: np.ndarray) -> np.ndarray:
    """Translate lines parallel to ``axis`` by shift[k] index units (k the line
    index along ``along``) with a Fourier phase shift."""
    if axis == along:
        raise ValueError("axis and along must differ")
    f = np.moveaxis(values, (axis, along), (0, 1))
    n = f.shape[0]
    k = 2.0 * np.pi * np.fft.rfftfreq(n)
    spec = np.fft.rfft(f, axis=0)
    sh = np.asarray(shift, dtype=float).reshape((1, -1) + (1,) * (f.ndim - 2))
    phase = np.exp(-1j * k.reshape((-1,) + (1,) * (f.ndim - 1)) * sh)
    if n % 2 == 0:
        # the Nyquist mode cannot carry a fractional shift as a real signal
        phase[-1] = np.cos(np.pi * sh)
    out = np.fft.irfft(spec * phase, n=n, axis=0)
    return np.ascontiguousarray(np.moveaxis(out, (0, 1), (axis, along)))


def _spectral_rotate(values, a, b, phi, coords, spacings):
    if abs(phi) > 0.5 * math.pi:
        half = _spectral_rotate(values, a, b, 0.5 * phi, coords, spacings)
        return _spectral_rotate(half, a, b, 0.5 * phi, coords, spacings)
    if phi == 0.0:
        return values.copy()
    ta = math.tan(0.5 * phi)
    sp = math.sin(phi)
    f = spectral_shear(values, a, b, ta * coords[b] / spacings[a])
    f = spectral_shear(f, b, a, -sp * coords[a] / spacings[b])
    return spectral_shear(f, a, b, ta * coords[b] / spacings[a])


def apply_orthogonal_spectral(values: np.ndarray, E: np.ndarray, coords, spacings) -> np.ndarray:
    """values o E with Fourier-shift shears (same factorization as
    :func:`apply_orthogonal`)."""
    factors, signs = givens_factors(E)
    f = np.ascontiguousarray(values, dtype=float)
    for a, b, phi in factors:
        f = _spectral_rotate(f, a, b, phi, coords, spacings)
    flips = tuple(k for k, s in enumerate(signs) if s < 0)
    if flips:
        f = np.ascontiguousarray(np.flip(f, flips))
    return f


def _quadratic_basis(z: np.ndarray) -> np.ndarray:
    """Monomials of degree <= 2 in the columns of z, shape (n_basis, n_points)."""
    n = z.shape[1]
    rows = [np.ones(len(z))] + [z[:, i] for i in range(n)]
    rows += [z[:, i] * z[:, j] for i in range(n) for j in range(i, n)]
    return np.array(rows)


def quadratic_moment_fix(new: np.ndarray, old: np.ndarray, E: np.ndarray, coords,
                         profile: np.ndarray) -> np.ndarray:
    """Correct ``new`` (an approximation of old o E) by profile * (quadratic
    polynomial) so that sum p(z) new = sum p(E^T z) old for every polynomial p
    of degree <= 2, which is the discrete form of the change of variables."""
    mesh = np.meshgrid(*coords, indexing="ij")
    z = np.stack([m.ravel() for m in mesh], axis=1)
    P = _quadratic_basis(z)
    target = _quadratic_basis(z @ E) @ old.ravel()
    current = P @ new.ravel()
    prof = profile.ravel()
    gram = (P * prof) @ P.T
    c = np.linalg.solve(gram, target - current)
    return new + (prof * (c @ P)).reshape(new.shape)
