"""Discrete collision operator with angular cutoff on a uniform velocity grid.

The kernel is B(q, sigma) = |q|^gamma b(cos theta) with the concrete angular
density b(cos theta) = K theta^(-1-2s) / sin^(d-2) theta on the cut-off range
2 arcsin(eta) <= theta <= pi/2, so b dsigma = K theta^(-1-2s) dtheta dphi.

Q(g, h)(v) = int B [g(v'_*) h(v') - g(v_*) h(v)] dsigma dv_*.

Two discretizations are provided.  ``form="adjoint"`` (default) removes the
rate h_i g_j B at node i and deposits it at v' with the transpose of the
cubic interpolation stencil; this makes <Q, phi> equal to the discrete weak
form exactly, so 1, v and |v|^2 are conserved to round-off.
``form="strong"`` interpolates h(v') g(v'_*) directly with zero values
outside the velocity box.  Both agree to interpolation accuracy.
"""

from __future__ import annotations

import itertools
import json
import math
from dataclasses import dataclass
from functools import cached_property
from pathlib import Path
from typing import Callable

import numpy as np
from scipy import integrate, signal, special

from . import _collision_numba as _nb
from .parallel import N_CHUNKS, ordered_sum, run_chunks, split

__all__ = [
    "VelocityGrid",
    "CollisionKernel",
    "post_collision",
    "eval_Q_eta_direct",
    "collision_parts",
    "weak_form",
    "cancellation_constant",
    "cancellation_S",
    "loss_convolution",
    "loss_rate_bound",
    "q2_direct_quadrature",
    "q2_convolution_quadrature",
    "dissipation_Dg",
    "entropy_dissipation",
    "change_of_variable_check",
    "symmetry_check",
    "is_hyperoctahedral",
    "hyperoctahedral_average",
    "orbit_representatives",
    "save_velocity_field",
    "load_velocity_field",
]

ENTROPY_FLOOR = 1e-300


# --------------------------------------------------------------------------
# grids and kernel


@dataclass(frozen=True, eq=False)
class VelocityGrid:
    d: int
    n: int
    L: float

    def __post_init__(self):
        if self.d not in (2, 3):
            raise ValueError("d must be 2 or 3")
        if self.n < 4:
            raise ValueError("need at least 4 nodes per axis")
        if not self.L > 0:
            raise ValueError("L must be positive")

    @property
    def h(self) -> float:
        return 2.0 * self.L / self.n

    @property
    def shape(self) -> tuple:
        return (self.n,) * self.d

    @property
    def size(self) -> int:
        return self.n ** self.d

    @property
    def weight(self) -> float:
        return self.h ** self.d

    @cached_property
    def nodes1d(self) -> np.ndarray:
        return (np.arange(self.n) + 0.5 - 0.5 * self.n) * self.h

    @cached_property
    def index_table(self) -> np.ndarray:
        """(N, d) integer node indices in row-major order."""
        grids = np.indices(self.shape).reshape(self.d, -1).T
        return np.ascontiguousarray(grids, dtype=np.int64)

    def points(self) -> np.ndarray:
        return self.nodes1d[self.index_table]

    def sample(self, fn: Callable) -> np.ndarray:
        """Evaluate fn(v) with v of shape (N, d); returns a flat (N,) array."""
        return np.asarray(fn(self.points()), dtype=float).reshape(self.size)

    def integrate(self, values) -> np.ndarray:
        return np.asarray(values).sum(axis=0) * self.weight

    def to_dict(self) -> dict:
        return {"d": self.d, "n_per_axis": self.n, "L_v": self.L}

    @classmethod
    def from_dict(cls, data: dict) -> "VelocityGrid":
        return cls(int(data["d"]), int(data["n_per_axis"]), float(data["L_v"]))


@dataclass(frozen=True, eq=False)
class CollisionKernel:
    gamma: float = -1.0
    s: float = 0.25
    K: float = 1.0
    eta: float = 0.05
    d: int = 3
    panel_nodes: int = 2
    panel_ratio: float = 2.0
    n_azimuth: int = 12

    def __post_init__(self):
        if not -3.0 < self.gamma < 0.0:
            raise ValueError("gamma must lie in (-3, 0)")
        if not 0.0 < self.s < 1.0:
            raise ValueError("s must lie in (0, 1)")
        if not self.K >= 0.0:
            raise ValueError("K must be nonnegative")
        if self.d not in (2, 3):
            raise ValueError("d must be 2 or 3")
        if not 0.0 <= self.eta <= math.pi / 4:
            raise ValueError("eta must lie in [0, pi/4]")
        if self.eta > 0 and self.theta_eta >= 0.5 * math.pi:
            raise ValueError("cutoff angle 2 arcsin(eta) must be below pi/2")
        if self.panel_nodes < 1 or self.panel_ratio <= 1.0:
            raise ValueError("invalid panel parameters")
        if self.d == 3 and (self.n_azimuth < 12 or self.n_azimuth % 12):
            raise ValueError("n_azimuth must be a positive multiple of 12")

    @property
    def theta_eta(self) -> float:
        return 2.0 * math.asin(self.eta)

    def _require_cutoff(self):
        if self.eta <= 0.0:
            raise ValueError("eta = 0: only the cut-off operator Q_eta is available")

    def angular_density(self, theta):
        """b(cos theta) = K theta^(-1-2s) / sin^(d-2) theta on (0, pi/2], zero beyond."""
        theta = np.asarray(theta, dtype=float)
        out = self.K * theta ** (-1.0 - 2.0 * self.s) / np.sin(theta) ** (self.d - 2)
        return np.where(theta <= 0.5 * math.pi, out, 0.0)

    def panels(self) -> np.ndarray:
        """Geometric panel edges from the cutoff angle to pi/2."""
        self._require_cutoff()
        edges = [self.theta_eta]
        while edges[-1] * self.panel_ratio < 0.5 * math.pi * (1.0 - 1e-12):
            edges.append(edges[-1] * self.panel_ratio)
        edges.append(0.5 * math.pi)
        return np.array(edges)

    def angular_rule(self, panel_nodes: int | None = None):
        """Composite Gauss-Legendre nodes/weights in theta; the weights carry
        the full polar measure b(cos theta) sin^(d-2) theta = K theta^(-1-2s)."""
        p = panel_nodes or self.panel_nodes
        x, w = np.polynomial.legendre.leggauss(p)
        edges = self.panels()
        th, wt = [], []
        for lo, hi in zip(edges[:-1], edges[1:]):
            th.append(0.5 * (hi - lo) * x + 0.5 * (hi + lo))
            wt.append(0.5 * (hi - lo) * w)
        th = np.concatenate(th)
        wt = np.concatenate(wt) * self.K * th ** (-1.0 - 2.0 * self.s)
        return th, wt

    def sigma_nodes(self, panel_nodes: int | None = None, n_azimuth: int | None = None):
        """(cos theta, sin theta, cos phi, sin phi, weight) per sphere node.

        d = 3: tensor rule, uniform azimuth at phi_k = (k + 1/2) 2 pi / M.
        d = 2: sigma = qhat rotated by +theta and -theta (sin theta carries the sign).
        """
        th, wt = self.angular_rule(panel_nodes)
        if self.d == 3:
            M = n_azimuth or self.n_azimuth
            phi = (np.arange(M) + 0.5) * 2.0 * math.pi / M
            T, P = np.meshgrid(th, phi, indexing="ij")
            W = np.repeat(wt, M) * (2.0 * math.pi / M)
            return (np.cos(T).ravel(), np.sin(T).ravel(), np.cos(P).ravel(), np.sin(P).ravel(), W)
        ct = np.concatenate([np.cos(th), np.cos(th)])
        st = np.concatenate([np.sin(th), -np.sin(th)])
        W = np.concatenate([wt, wt])
        z = np.zeros_like(ct)
        return ct, st, z, z, W

    @property
    def angular_mass(self) -> float:
        """Integral of b over the cut-off sphere (closed form)."""
        self._require_cutoff()
        sphere = 2.0 * math.pi if self.d == 3 else 2.0
        ts = 2.0 * self.s
        return sphere * self.K / ts * (self.theta_eta ** -ts - (0.5 * math.pi) ** -ts)

    def to_dict(self) -> dict:
        return {
            "gamma": self.gamma, "s": self.s, "K": self.K, "eta": self.eta, "d": self.d,
            "panel_nodes": self.panel_nodes, "panel_ratio": self.panel_ratio,
            "n_azimuth": self.n_azimuth,
            "angular_density": "K theta^(-1-2s) / sin^(d-2) theta",
        }

    @classmethod
    def from_dict(cls, data: dict) -> "CollisionKernel":
        keys = ("gamma", "s", "K", "eta", "d", "panel_nodes", "panel_ratio", "n_azimuth")
        return cls(**{k: data[k] for k in keys if k in data})


def post_collision(v, v_star, sigma):
    """sigma-representation: v' = (v+v*)/2 + |v-v*| sigma/2, v'* = (v+v*)/2 - |v-v*| sigma/2."""
    v = np.asarray(v, dtype=float)
    v_star = np.asarray(v_star, dtype=float)
    sigma = np.asarray(sigma, dtype=float)
    mid = 0.5 * (v + v_star)
    r = 0.5 * np.linalg.norm(v - v_star, axis=-1, keepdims=True)
    return mid + r * sigma, mid - r * sigma


# --------------------------------------------------------------------------
# hyperoctahedral symmetry helpers


def _group_ops(d: int):
    for perm in itertools.permutations(range(d)):
        for flips in itertools.product((False, True), repeat=d):
            yield perm, flips


def _apply_op(arr, perm, flips, d):
    out = np.transpose(arr, perm + tuple(range(d, arr.ndim)))
    axes = tuple(a for a in range(d) if flips[a])
    return np.flip(out, axes) if axes else out


def hyperoctahedral_average(arr: np.ndarray, d: int) -> np.ndarray:
    """Average of arr over the 2^d d! signed axis permutations of the first d axes."""
    acc = np.zeros_like(arr)
    count = 0
    for perm, flips in _group_ops(d):
        acc += _apply_op(arr, perm, flips, d)
        count += 1
    return acc / count


def is_hyperoctahedral(values: np.ndarray, grid: VelocityGrid, rtol: float = 0.0) -> bool:
    arr = np.asarray(values)
    if arr.shape[:grid.d] != grid.shape:
        arr = arr.reshape(grid.shape + arr.shape[1:])
    scale = np.max(np.abs(arr)) if rtol else 0.0
    for perm, flips in _group_ops(grid.d):
        if np.max(np.abs(_apply_op(arr, perm, flips, grid.d) - arr), initial=0.0) > rtol * scale:
            return False
    return True


def orbit_representatives(grid: VelocityGrid):
    """Flat indices of one node per orbit of the signed axis permutations and
    the orbit sizes."""
    n = grid.n
    idx = grid.index_table
    folded = np.where(idx >= n // 2, idx, n - 1 - idx)
    key = np.sort(folded, axis=1)
    codes = np.ravel_multi_index(tuple(key.T), grid.shape)
    uniq, first, counts = np.unique(codes, return_index=True, return_counts=True)
    return first.astype(np.int64), counts.astype(float)


# --------------------------------------------------------------------------
# operator evaluation


def _as_batch(values, grid):
    a = np.asarray(values, dtype=float)
    single = a.ndim == 1 or (a.ndim == grid.d and a.shape == grid.shape)
    a = a.reshape(grid.size, -1)
    return np.ascontiguousarray(a), single


def _sigma(kernel):
    ct, st, cp, sp, w = kernel.sigma_nodes()
    return (np.ascontiguousarray(ct), np.ascontiguousarray(st), np.ascontiguousarray(cp),
            np.ascontiguousarray(sp), np.ascontiguousarray(w))


def _call_kernel(form, kernel, grid, fh, fg, i_list, gain, loss):
    ct, st, cp, sp, w = _sigma(kernel)
    idx = grid.index_table
    if form == "adjoint":
        nzh = np.any(fh != 0.0, axis=1)
        nzg = np.any(fg != 0.0, axis=1)
        if grid.d == 3:
            _nb.adjoint3(fh, fg, nzh, nzg, grid.n, idx, i_list, ct, st, cp, sp, w,
                         kernel.gamma, grid.h, gain, loss)
        else:
            _nb.adjoint2(fh, fg, nzh, nzg, grid.n, idx, i_list, ct, st, w,
                         kernel.gamma, grid.h, gain, loss)
    elif form == "strong":
        if grid.d == 3:
            _nb.strong3(fh, fg, grid.n, idx, i_list, ct, st, cp, sp, w,
                        kernel.gamma, grid.h, gain, loss)
        else:
            _nb.strong2(fh, fg, grid.n, idx, i_list, ct, st, w, kernel.gamma, grid.h, gain, loss)
    else:
        raise ValueError("form must be 'adjoint' or 'strong'")


def _parts_generic(form, kernel, grid, fh, fg, i_list, workers):
    N, B = fh.shape
    if B >= N_CHUNKS:
        cols = split(B)

        def work(c):
            a = np.ascontiguousarray(fh[:, c])
            b = np.ascontiguousarray(fg[:, c])
            gain = np.zeros((N, c.size))
            loss = np.zeros((N, c.size))
            _call_kernel(form, kernel, grid, a, b, i_list, gain, loss)
            return gain, loss

        res = run_chunks(work, cols, workers)
        gain = np.concatenate([r[0] for r in res], axis=1)
        loss = np.concatenate([r[1] for r in res], axis=1)
        return gain, loss

    def work(c):
        gain = np.zeros((N, B))
        loss = np.zeros((N, B))
        _call_kernel(form, kernel, grid, fh, fg, i_list[c], gain, loss)
        return gain, loss

    res = run_chunks(work, split(i_list.size), workers)
    return ordered_sum([r[0] for r in res]), ordered_sum([r[1] for r in res])


def collision_parts(kernel: CollisionKernel, grid: VelocityGrid, f, g=None, *,
                    form: str = "adjoint", symmetric: bool = False, workers: int = 1):
    """Gain and loss parts of Q_eta(f, g) (f at v_*, g at v).

    Arrays may be flat (N,), shaped like the grid, or batched (N, B) with
    independent columns.  ``symmetric=True`` exploits invariance of f and g
    under signed axis permutations (caller guarantees it); only one node per
    orbit is visited and the result is symmetrized.
    """
    kernel._require_cutoff()
    if kernel.d != grid.d:
        raise ValueError("kernel and grid dimensions differ")
    fg, single = _as_batch(f, grid)
    fh = fg if g is None else _as_batch(g, grid)[0]
    if fh.shape != fg.shape:
        raise ValueError("f and g shapes differ")
    if not (np.all(np.isfinite(fg)) and np.all(np.isfinite(fh))):
        raise ValueError("non-finite input")
    if symmetric:
        reps, mult = orbit_representatives(grid)
        if form == "adjoint":
            fh_w = np.zeros_like(fh)
            fh_w[reps] = fh[reps] * mult[:, None]
            gain, loss = _parts_generic(form, kernel, grid, fh_w, fg, reps, workers)
        else:
            gain, loss = _parts_generic(form, kernel, grid, fh, fg, reps, workers)
            gain[reps] *= mult[:, None]
            loss[reps] *= mult[:, None]
        shp = grid.shape + (fh.shape[1],)
        gain = hyperoctahedral_average(gain.reshape(shp), grid.d).reshape(fh.shape)
        loss = hyperoctahedral_average(loss.reshape(shp), grid.d).reshape(fh.shape)
    else:
        i_list = np.arange(grid.size, dtype=np.int64)
        gain, loss = _parts_generic(form, kernel, grid, fh, fg, i_list, workers)
    if single:
        return gain[:, 0], loss[:, 0]
    return gain, loss


def eval_Q_eta_direct(kernel: CollisionKernel, grid: VelocityGrid, f, g=None, *,
                      form: str = "adjoint", symmetric: bool = False, workers: int = 1,
                      return_parts: bool = False):
    """Q_eta(f, g) at every grid node (flat ordering); g defaults to f."""
    gain, loss = collision_parts(kernel, grid, f, g, form=form, symmetric=symmetric,
                                 workers=workers)
    if return_parts:
        return gain - loss, gain, loss
    return gain - loss


# --------------------------------------------------------------------------
# pair functionals


def _functional(mode, kernel, grid, g, hh, f, symmetric, floor=ENTROPY_FLOOR, workers=1):
    kernel._require_cutoff()
    ct, st, cp, sp, w = _sigma(kernel)
    g = np.ascontiguousarray(np.asarray(g, dtype=float).reshape(grid.size))
    hh = np.ascontiguousarray(np.asarray(hh, dtype=float).reshape(grid.size))
    f = np.ascontiguousarray(np.asarray(f, dtype=float).reshape(grid.size))
    if symmetric:
        i_list, mult = orbit_representatives(grid)
    else:
        i_list = np.arange(grid.size, dtype=np.int64)
        mult = np.ones(grid.size)

    def work(c):
        out = np.zeros(2)
        _nb.pair_functional(mode, grid.d, g, hh, f, grid.n, grid.index_table, i_list[c],
                            mult[c], ct, st, cp, sp, w, kernel.gamma, grid.h, floor, out)
        return out

    parts = run_chunks(work, split(i_list.size), workers)
    return float(ordered_sum(parts)[0])


def weak_form(kernel, grid, g, h, f, *, symmetric=False, workers=1) -> float:
    """<Q_eta(g, h), f> = int g_* h B (f' - f) dsigma dv_* dv."""
    return _functional(0, kernel, grid, g, h, f, symmetric, workers=workers)


def dissipation_Dg(kernel, grid, g, f, *, symmetric=False, workers=1) -> float:
    """D_g(f) = 1/2 int g_* (f' - f)^2 B dsigma dv_* dv."""
    g = np.asarray(g, dtype=float)
    if np.min(g) < -1e-12:
        raise ValueError("D_g needs g >= 0")
    return _functional(1, kernel, grid, g, g, f, symmetric, workers=workers)


def entropy_dissipation(kernel, grid, G, *, symmetric=False, floor=ENTROPY_FLOOR, workers=1):
    """Four-point entropy production 1/4 int B (G'G'_* - G G_*) ln(G'G'_* / (G G_*)).

    Off-grid values are exp of the interpolated ln G, so every term is
    nonnegative and the value vanishes on sampled Maxwellians up to round-off.
    Values below ``floor`` are clamped first; returns (value, clamped node count)."""
    G = np.asarray(G, dtype=float).reshape(grid.size)
    if not np.any(G > 0):
        raise ValueError("entropy dissipation of an all-zero field")
    clamped = int(np.count_nonzero(G < floor))
    lg = np.log(np.maximum(G, floor))
    value = _functional(2, kernel, grid, G, lg, G, symmetric, floor=floor, workers=workers)
    return value, clamped


# --------------------------------------------------------------------------
# cancellation lemma


def _sphere_area(k: int) -> float:
    """Area of the unit sphere S^k."""
    return 2.0 * math.pi ** ((k + 1) / 2) / math.gamma((k + 1) / 2)


def cancellation_constant(kernel: CollisionKernel) -> float:
    """C_S = |S^(d-2)| int sin^(d-2) theta b(cos theta) [cos^(-d-gamma)(theta/2) - 1] dtheta
    over the cut-off range."""
    if kernel.K == 0.0:
        return 0.0
    kernel._require_cutoff()
    d, g, s = kernel.d, kernel.gamma, kernel.s

    def integrand(th):
        return kernel.K * th ** (-1.0 - 2.0 * s) * (math.cos(0.5 * th) ** (-d - g) - 1.0)

    edges = kernel.panels()
    total = 0.0
    for lo, hi in zip(edges[:-1], edges[1:]):
        total += integrate.quad(integrand, lo, hi, epsabs=0.0, epsrel=1e-13, limit=200)[0]
    return _sphere_area(d - 2) * total


def cancellation_S(kernel: CollisionKernel) -> Callable:
    """S(z) = C_S |z|^gamma as a callable of z (vector) or |z| (scalar array)."""
    cs = cancellation_constant(kernel)
    gamma = kernel.gamma

    def S(z):
        z = np.asarray(z, dtype=float)
        r = np.abs(z) if z.ndim == 0 or z.shape[-1:] != (kernel.d,) else np.linalg.norm(z, axis=-1)
        with np.errstate(divide="ignore"):
            return cs * r ** gamma

    S.constant = cs
    return S


def _offset_kernel(grid: VelocityGrid, gamma: float) -> np.ndarray:
    """|q|^gamma h^d on the (2n-1)^d offset lattice, zero at q = 0."""
    off = np.arange(-(grid.n - 1), grid.n) * grid.h
    mesh = np.meshgrid(*([off] * grid.d), indexing="ij")
    r2 = sum(m * m for m in mesh)
    with np.errstate(divide="ignore"):
        k = np.where(r2 > 0, r2 ** (0.5 * gamma), 0.0)
    return k * grid.weight


def _grid_convolve(values, grid, kern):
    a, single = _as_batch(values, grid)
    arr = a.reshape(grid.shape + (a.shape[1],))
    k = kern.reshape(kern.shape + (1,))
    full = signal.fftconvolve(arr, k, mode="full", axes=tuple(range(grid.d)))
    sl = tuple(slice(grid.n - 1, 2 * grid.n - 1) for _ in range(grid.d))
    out = full[sl].reshape(grid.size, -1)
    return out[:, 0] if single else out


def loss_convolution(kernel: CollisionKernel, grid: VelocityGrid, f) -> np.ndarray:
    """(f * S)(v) on the grid: the cancellation-lemma form of
    int (f(v'_*) - f(v_*)) B dsigma dv_*, with the singular node q = 0 omitted."""
    return cancellation_constant(kernel) * _grid_convolve(f, grid, _offset_kernel(grid, kernel.gamma))


def loss_rate_bound(kernel: CollisionKernel, grid: VelocityGrid, f) -> np.ndarray:
    """Upper bound of the discrete loss frequency nu_i = sum_j f_j |q|^gamma h^d
    sum_sigma w_sigma (pairs dropped at the box edge only lower it)."""
    f = np.abs(np.asarray(f, dtype=float))
    wsum = float(np.sum(kernel.sigma_nodes()[4]))
    return wsum * _grid_convolve(f, grid, _offset_kernel(grid, kernel.gamma))


# --------------------------------------------------------------------------
# continuous quadrature oracles


def _sphere_rule(d: int, n_polar: int, n_az: int):
    """Unit vectors and weights covering S^(d-1)."""
    if d == 2:
        ang = (np.arange(n_az) + 0.5) * 2.0 * math.pi / n_az
        return np.stack([np.cos(ang), np.sin(ang)], -1), np.full(n_az, 2.0 * math.pi / n_az)
    x, w = np.polynomial.legendre.leggauss(n_polar)
    ang = (np.arange(n_az) + 0.5) * 2.0 * math.pi / n_az
    X, A = np.meshgrid(x, ang, indexing="ij")
    r = np.sqrt(1.0 - X * X)
    pts = np.stack([r * np.cos(A), r * np.sin(A), X], -1).reshape(-1, 3)
    wts = np.repeat(w, n_az) * (2.0 * math.pi / n_az)
    return pts, wts


def _orthonormal_frame(omega):
    """Two unit vectors completing omega (..., 3) to an orthonormal frame."""
    a = np.where(np.abs(omega[..., :1]) < 0.9, np.array([1.0, 0.0, 0.0]), np.array([0.0, 1.0, 0.0]))
    e1 = np.cross(omega, a)
    e1 /= np.linalg.norm(e1, axis=-1, keepdims=True)
    e2 = np.cross(omega, e1)
    return e1, e2


def _sigma_about(kernel, omega, th, phi):
    """Unit vectors sigma at polar angle th from omega: shape (..., n_th, n_phi, d)."""
    if kernel.d == 2:
        c, s = np.cos(th), np.sin(th)
        o0, o1 = omega[..., 0:1], omega[..., 1:2]
        s0 = c * o0 - s * o1
        s1 = s * o0 + c * o1
        return np.stack([s0, s1], -1)[..., None, :]
    e1, e2 = _orthonormal_frame(omega)
    ct = np.cos(th)[:, None, None]
    st = np.sin(th)[:, None, None]
    cp = np.cos(phi)[None, :, None]
    sp = np.sin(phi)[None, :, None]
    o = omega[..., None, None, :]
    return ct * o + st * (cp * e1[..., None, None, :] + sp * e2[..., None, None, :])


def _polar_rule(kernel, panel_nodes):
    th, wt = kernel.angular_rule(panel_nodes)
    if kernel.d == 2:
        # sigma at +theta and -theta
        return np.concatenate([th, -th]), np.concatenate([wt, wt])
    return th, wt


def _radial_rule(kernel, R, n_r, power):
    """Gauss-Jacobi nodes for int_0^R r^power F(r) dr."""
    x, w = special.roots_jacobi(n_r, 0.0, power)
    r = 0.5 * R * (x + 1.0)
    return r, w * (0.5 * R) ** (power + 1.0)


def q2_direct_quadrature(kernel: CollisionKernel, g: Callable, v, *, R: float = 12.0,
                         n_r: int = 48, n_polar: int = 24, n_az: int = 48,
                         panel_nodes: int = 6, n_phi: int = 24) -> float:
    """int int (g(v'_*) - g(v_*)) B(v - v_*, sigma) dsigma dv_* by product quadrature,
    v_* = v - r omega over the ball of radius R."""
    kernel._require_cutoff()
    d = kernel.d
    v = np.asarray(v, dtype=float)
    r, wr = _radial_rule(kernel, R, n_r, d - 1 + kernel.gamma)
    om, wom = _sphere_rule(d, n_polar, n_az)
    th, wth = _polar_rule(kernel, panel_nodes)
    if d == 3:
        phi = (np.arange(n_phi) + 0.5) * 2.0 * math.pi / n_phi
        wphi = np.full(n_phi, 2.0 * math.pi / n_phi)
    else:
        phi = np.zeros(1)
        wphi = np.ones(1)
    sig = _sigma_about(kernel, om, th, phi)  # (n_om, n_th, n_phi, d)
    total = 0.0
    for rk, wk in zip(r, wr):
        vs = v - rk * om  # (n_om, d)
        g_star = g(vs)
        mid = 0.5 * (v + vs)
        vps = mid[:, None, None, :] - 0.5 * rk * sig
        diff = g(vps) - g_star[:, None, None]
        inner = np.einsum("otp,t,p->o", diff, wth, wphi)
        total += wk * np.dot(wom, inner)
    return float(total)


def q2_convolution_quadrature(kernel: CollisionKernel, g: Callable, v, *, R: float = 12.0,
                              n_r: int = 48, n_polar: int = 24, n_az: int = 48) -> float:
    """(g * S)(v) = C_S int g(v - r omega) r^(d-1+gamma) dr domega."""
    d = kernel.d
    v = np.asarray(v, dtype=float)
    r, wr = _radial_rule(kernel, R, n_r, d - 1 + kernel.gamma)
    om, wom = _sphere_rule(d, n_polar, n_az)
    vals = g(v[None, None, :] - r[:, None, None] * om[None, :, :])
    return float(cancellation_constant(kernel) * np.einsum("ro,r,o->", vals, wr, wom))


def change_of_variable_check(kernel: CollisionKernel, integrand: Callable, kind: str = "regular",
                             v_fixed=None, *, R: float = 10.0, n: int = 16,
                             panel_nodes: int = 6, n_phi: int = 16) -> dict:
    """Both sides of the change-of-variables identities, by product quadrature.

    integrand(w, r, theta) is vectorized over leading axes of w (..., d).

    kind='regular' (v_* fixed, integrate over v):
        int F(v', |v-v_*|, theta) dsigma dv = int cos^-d(theta/2) F(v, |v-v_*|/cos(theta/2), theta)
    kind='singular' (v fixed, integrate over v_*):
        int F(v', |v-v_*|, theta) dsigma dv_* = int sin^-d(theta/2) F(v_*, |v-v_*|/sin(theta/2), theta)
    kind='symmetry' (v_* fixed): int (v'-v) F(v', |v-v_*|, theta) dsigma dv = 0,
        reported with lhs the vector integral and rhs zero.

    ``n`` is the number of nodes per quadrature dimension (radial, polar, azimuth).
    """
    d = kernel.d
    fixed = np.zeros(d) if v_fixed is None else np.asarray(v_fixed, dtype=float)
    r, wr = _radial_rule(kernel, R, n, d - 1.0)
    om, wom = _sphere_rule(d, n, 2 * n)
    th, wth = _polar_rule(kernel, panel_nodes)
    wth = wth / kernel.K  # plain dtheta-measure with the theta^(-1-2s) weight removed below
    wth = wth * np.abs(th) ** (1.0 + 2.0 * kernel.s)
    if d == 3:
        phi = (np.arange(n_phi) + 0.5) * 2.0 * math.pi / n_phi
        wphi = np.full(n_phi, 2.0 * math.pi / n_phi) * 1.0
        wpol = wth * np.sin(th)
    else:
        phi = np.zeros(1)
        wphi = np.ones(1)
        wpol = wth
    sig = _sigma_about(kernel, om, th, phi)  # (n_om, n_th, n_phi, d)
    ath = np.abs(th)[None, :, None]
    lhs = np.zeros(d) if kind == "symmetry" else 0.0
    rhs = 0.0
    for rk, wk in zip(r, wr):
        if kind in ("regular", "symmetry"):
            other = fixed + rk * om  # v = v_* + r omega, q = r omega
            vp = 0.5 * (other + fixed)[:, None, None, :] + 0.5 * rk * sig
        elif kind == "singular":
            other = fixed - rk * om  # v_* = v - r omega, q = r omega
            vp = 0.5 * (other + fixed)[:, None, None, :] + 0.5 * rk * sig
        else:
            raise ValueError("kind must be 'regular', 'singular' or 'symmetry'")
        F = integrand(vp, np.full(vp.shape[:-1], rk), np.broadcast_to(ath, vp.shape[:-1]))
        if kind == "symmetry":
            v_pt = other[:, None, None, :]
            vec = (vp - v_pt) * F[..., None]
            lhs = lhs + wk * np.einsum("otpk,o,t,p->k", vec, wom, wpol, wphi)
            continue
        lhs += wk * np.einsum("otp,o,t,p->", F, wom, wpol, wphi)
        # right side in the rescaled radius rho = r / half(theta), which absorbs
        # the half^-d Jacobian: int F(v_fixed +- rho half omega, rho, theta) rho^(d-1)
        half = np.cos(0.5 * ath) if kind == "regular" else np.sin(0.5 * ath)
        sign = 1.0 if kind == "regular" else -1.0
        pts = fixed + sign * rk * half[..., None] * om[:, None, None, :]
        pts = np.broadcast_to(pts, vp.shape)
        Fr = integrand(pts, np.full(vp.shape[:-1], rk), np.broadcast_to(ath, vp.shape[:-1]))
        rhs += wk * np.einsum("otp,o,t,p->", Fr, wom, wpol, wphi)
    if kind == "symmetry":
        lhs = np.asarray(lhs)
        res = float(np.linalg.norm(lhs))
        return {"lhs": lhs, "rhs": np.zeros(d), "residual": res}
    res = abs(lhs - rhs) / max(abs(lhs), 1e-300)
    return {"lhs": float(lhs), "rhs": float(rhs), "residual": float(res)}


def symmetry_check(kernel: CollisionKernel, f_theta: Callable, v, v_star, *,
                   panel_nodes: int = 6, n_phi: int = 24) -> dict:
    """int (v'-v) f(theta) dsigma versus -(v-v_*) int sin^2(theta/2) f(theta) dsigma
    on the kernel's cut-off sphere rule."""
    d = kernel.d
    v = np.asarray(v, dtype=float)
    v_star = np.asarray(v_star, dtype=float)
    q = v - v_star
    qn = np.linalg.norm(q)
    omega = (q / qn)[None, :]
    th, wth = _polar_rule(kernel, panel_nodes)
    wth = wth / kernel.K * np.abs(th) ** (1.0 + 2.0 * kernel.s)
    if d == 3:
        phi = (np.arange(n_phi) + 0.5) * 2.0 * math.pi / n_phi
        wphi = np.full(n_phi, 2.0 * math.pi / n_phi)
        wpol = wth * np.sin(th)
    else:
        phi = np.zeros(1)
        wphi = np.ones(1)
        wpol = wth
    sig = _sigma_about(kernel, omega, th, phi)[0]  # (n_th, n_phi, d)
    vp = 0.5 * (v + v_star) + 0.5 * qn * sig
    ft = f_theta(np.abs(th))
    lhs = np.einsum("tpk,t,t,p->k", vp - v, ft, wpol, wphi)
    rhs = -q * np.einsum("t,t,t,p->", np.sin(0.5 * np.abs(th)) ** 2, ft, wpol, wphi)
    scale = max(np.linalg.norm(rhs), 1e-300)
    return {"lhs": lhs, "rhs": rhs, "residual": float(np.linalg.norm(lhs - rhs) / scale)}


# --------------------------------------------------------------------------
# serialization


def save_velocity_field(path, values, grid: VelocityGrid, **meta) -> None:
    """Flat little-endian float64 array plus JSON sidecar (path + '.json')."""
    path = Path(path)
    arr = np.asarray(values, dtype="<f8")
    arr.reshape(-1).tofile(path)
    side = dict(grid.to_dict(), ordering="row-major by axis", dtype="float64-le",
                shape=list(arr.shape), **meta)
    Path(str(path) + ".json").write_text(json.dumps(side, indent=2, sort_keys=True))


def load_velocity_field(path):
    path = Path(path)
    side = json.loads(Path(str(path) + ".json").read_text())
    grid = VelocityGrid.from_dict(side)
    arr = np.fromfile(path, dtype="<f8").reshape(side["shape"])
    return arr, grid, side
