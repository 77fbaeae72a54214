"""Phase-space grids, distribution fields and their diagnostics.

Fields are stored with axes (x_1, ..., x_d, v_1, ..., v_d).  A grid with a
single spatial node (n_x = 1) represents a spatially homogeneous field; its
spatial cell weight is 1.
"""

from __future__ import annotations

import csv
import logging
import math
from dataclasses import dataclass
from functools import cached_property
from typing import Sequence

import numpy as np
from scipy import integrate, ndimage, special

from .collision_kernel import VelocityGrid
from .maxwellian_core import ConservedMoments, MaxwellianParams, wedge
from .transform_pipeline import FrameMap, map_point

__all__ = [
    "PhaseGrid",
    "DistributionField",
    "NormConfig",
    "apply_X",
    "apply_Y",
    "weighted_l2_sq",
    "energy_norm",
    "an_norm",
    "ma_norm",
    "clock",
    "bracket_integral",
    "bracket_tail",
    "q_weight",
    "p_weight",
    "conserved_moments",
    "moment_scales",
    "relative_entropy",
    "lp_distance",
    "boundary_mass_fraction",
    "DIAGNOSTIC_COLUMNS",
    "write_diagnostics_csv",
]

log = logging.getLogger(__name__)
# truncation of the phase box is reported above this boundary mass fraction
BOUNDARY_WARN = 1e-6


@dataclass(frozen=True, eq=False)
class PhaseGrid:
    d: int
    n_x: int
    L_x: float
    vgrid: VelocityGrid

    def __post_init__(self):
        if self.vgrid.d != self.d:
            raise ValueError("velocity grid dimension differs")
        if self.n_x < 1 or not self.L_x > 0:
            raise ValueError("invalid spatial grid")

    @property
    def homogeneous(self) -> bool:
        return self.n_x == 1

    @property
    def h_x(self) -> float:
        return 2.0 * self.L_x / self.n_x

    @property
    def h_v(self) -> float:
        return self.vgrid.h

    @cached_property
    def xnodes(self) -> np.ndarray:
        if self.homogeneous:
            return np.zeros(1)
        return (np.arange(self.n_x) + 0.5 - 0.5 * self.n_x) * self.h_x

    @property
    def vnodes(self) -> np.ndarray:
        return self.vgrid.nodes1d

    @property
    def shape(self) -> tuple:
        return (self.n_x,) * self.d + (self.vgrid.n,) * self.d

    @property
    def n_space(self) -> int:
        return self.n_x ** self.d

    @property
    def cell_volume(self) -> float:
        wx = 1.0 if self.homogeneous else self.h_x ** self.d
        return wx * self.vgrid.weight

    @property
    def coords(self) -> list:
        return [self.xnodes] * self.d + [self.vnodes] * self.d

    @property
    def spacings(self) -> list:
        return [self.h_x] * self.d + [self.h_v] * self.d

    def points(self):
        """(x, v) arrays of shape grid.shape + (d,)."""
        mesh = np.meshgrid(*self.coords, indexing="ij")
        x = np.stack(mesh[: self.d], axis=-1)
        v = np.stack(mesh[self.d:], axis=-1)
        return x, v

    def z_bracket_sq(self) -> np.ndarray:
        """<z>^2 = 1 + |x|^2 + |v|^2 on the grid."""
        out = np.ones(self.shape)
        for k, c in enumerate(self.coords):
            sh = [1] * (2 * self.d)
            sh[k] = c.size
            out = out + (c * c).reshape(sh)
        return out

    def sample(self, fn) -> np.ndarray:
        x, v = self.points()
        return np.asarray(fn(x, v), dtype=float).reshape(self.shape)

    def integrate(self, values) -> float:
        return float(np.sum(values) * self.cell_volume)

    def to_dict(self) -> dict:
        return {"d": self.d, "n_x": self.n_x, "L_x": self.L_x, "v": self.vgrid.to_dict()}

    @classmethod
    def from_dict(cls, data: dict) -> "PhaseGrid":
        return cls(int(data["d"]), int(data["n_x"]), float(data["L_x"]),
                   VelocityGrid.from_dict(data["v"]))


@dataclass(eq=False)
class DistributionField:
    grid: PhaseGrid
    values: np.ndarray
    frame: str = "scaled"
    t: float = 0.0

    def __post_init__(self):
        self.values = np.asarray(self.values, dtype=float).reshape(self.grid.shape)
        if self.frame not in ("lab", "scaled"):
            raise ValueError("frame must be 'lab' or 'scaled'")

    def copy(self) -> "DistributionField":
        return DistributionField(self.grid, self.values.copy(), self.frame, self.t)

    def mass(self) -> float:
        return self.grid.integrate(self.values)

    def interpolate(self, x, v) -> np.ndarray:
        """Separable cubic (B-spline) interpolation; zero outside the grid box.
        The fraction of query points outside is logged."""
        x = np.asarray(x, dtype=float)
        v = np.asarray(v, dtype=float)
        g = self.grid
        lead = np.broadcast_shapes(x.shape[:-1], v.shape[:-1])
        x = np.broadcast_to(x, lead + (g.d,)).reshape(-1, g.d)
        v = np.broadcast_to(v, lead + (g.d,)).reshape(-1, g.d)
        cols = []
        for k in range(g.d):
            cols.append(np.zeros(len(x)) if g.homogeneous else x[:, k] / g.h_x + 0.5 * g.n_x - 0.5)
        for k in range(g.d):
            cols.append(v[:, k] / g.h_v + 0.5 * g.vgrid.n - 0.5)
        idx = np.stack(cols)
        lim = np.array(g.shape, dtype=float)[:, None] - 0.5
        outside = np.any((idx < -0.5) | (idx > lim), axis=0)
        if np.any(outside):
            log.info("interpolate: %.3e of points outside the grid, zero-filled",
                     float(np.mean(outside)))
        vals = ndimage.map_coordinates(self.values, idx, order=3, mode="constant", cval=0.0)
        vals[outside] = 0.0
        return vals.reshape(lead)


# --------------------------------------------------------------------------
# commuting vector fields


def _diff_axis(f: np.ndarray, axis: int, h: float) -> np.ndarray:
    """Fourth-order central difference with fourth-order one-sided closures."""
    n = f.shape[axis]
    if n < 5:
        raise ValueError("finite differences need at least 5 nodes per axis")
    a = np.moveaxis(f, axis, 0)
    out = np.empty_like(a)
    out[2:-2] = (a[:-4] - 8.0 * a[1:-3] + 8.0 * a[3:-1] - a[4:]) / (12.0 * h)
    out[0] = (-25.0 * a[0] + 48.0 * a[1] - 36.0 * a[2] + 16.0 * a[3] - 3.0 * a[4]) / (12.0 * h)
    out[1] = (-3.0 * a[0] - 10.0 * a[1] + 18.0 * a[2] - 6.0 * a[3] + a[4]) / (12.0 * h)
    out[-1] = (25.0 * a[-1] - 48.0 * a[-2] + 36.0 * a[-3] - 16.0 * a[-4] + 3.0 * a[-5]) / (12.0 * h)
    out[-2] = (3.0 * a[-1] + 10.0 * a[-2] - 18.0 * a[-3] + 6.0 * a[-4] - a[-5]) / (12.0 * h)
    return np.moveaxis(out, 0, axis)


def _values(field) -> tuple[np.ndarray, PhaseGrid]:
    return field.values, field.grid


def _xy(values, grid: PhaseGrid, t: float, i: int, kind: str) -> np.ndarray:
    if grid.homogeneous:
        raise ValueError("X and Y need a spatial grid")
    dx = _diff_axis(values, i, grid.h_x)
    dv = _diff_axis(values, grid.d + i, grid.h_v)
    bt = math.sqrt(1.0 + t * t)
    if kind == "X":
        return (dx - t * dv) / bt
    return (t * dx + dv) / bt


def apply_X(field: DistributionField, t: float, component: int = 0) -> DistributionField:
    """X_i = (d/dx_i - t d/dv_i) / <t>."""
    vals = _xy(field.values, field.grid, t, component, "X")
    return DistributionField(field.grid, vals, field.frame, field.t)


def apply_Y(field: DistributionField, t: float, component: int = 0) -> DistributionField:
    """Y_i = (t d/dx_i + d/dv_i) / <t>."""
    vals = _xy(field.values, field.grid, t, component, "Y")
    return DistributionField(field.grid, vals, field.frame, field.t)


def _apply_D(values, grid, t, k):
    """D_k for k in 0..2d-1: X_1..X_d then Y_1..Y_d."""
    d = grid.d
    return _xy(values, grid, t, k % d, "X" if k < d else "Y")


def _derivative_tree(values, grid, t, order):
    """Yield (|alpha|, D^alpha f) for every multi-index |alpha| <= order.

    Each multi-index is visited once, as a nondecreasing sequence of
    directions; the operators commute, so the order of application is immaterial."""
    nd = 2 * grid.d

    def walk(f, depth, start):
        yield depth, f
        if depth == order:
            return
        for k in range(start, nd):
            yield from walk(_apply_D(f, grid, t, k), depth + 1, k)

    yield from walk(values, 0, 0)


# --------------------------------------------------------------------------
# norms


@dataclass(frozen=True)
class NormConfig:
    N: int = 2
    m_w: int = 4
    delta: float = 0.5
    s: float = 0.25
    gamma: float = -1.0
    d: int = 3
    order: int = 4

    def __post_init__(self):
        if self.N < 1:
            raise ValueError("N must be >= 1")
        if self.m_w < 4 or (1.0 - self.s) * self.m_w < 2.0:
            raise ValueError("weight exponent needs (1 - s) m_w >= 2 and m_w >= 4")
        if self.s < 0.5 and (1.0 - 2.0 * self.s) * self.m_w < 1.0:
            raise ValueError("weight exponent needs (1 - 2s) m_w >= 1 when s < 1/2")
        if not 0.0 < self.delta:
            raise ValueError("delta must be positive")
        if self.s < 1.0 / 3.0 and self.delta > (1.0 - 3.0 * self.s) / (2.0 * self.s) + 1e-15:
            raise ValueError("delta must lie in (0, (1 - 3s) / (2s)]")
        if self.exponent <= 1.0:
            raise ValueError("<t>^-(d + gamma) is not integrable (strong collision regime)")

    @property
    def exponent(self) -> float:
        return self.d + self.gamma

    @cached_property
    def T_gamma(self) -> float:
        """int_0^inf <t>^-(d + gamma) dt."""
        return clock(math.inf, self.exponent)

    def to_dict(self) -> dict:
        return {"N": self.N, "m_w": self.m_w, "delta": self.delta, "s": self.s,
                "gamma": self.gamma, "d": self.d, "order": self.order, "T_gamma": self.T_gamma}


def bracket_integral(eta: float, exponent: float) -> float:
    """int_0^eta <xi>^-exponent d xi (odd in eta; eta may be +-inf).

    With xi = tan u this is int cos^(exponent-2) u du, an incomplete beta
    function: (1/2) B(1/2, k) I_x(1/2, k), k = (exponent - 1)/2,
    x = eta^2/(1 + eta^2).  Large |eta| uses the complementary form so the
    tail int_eta^inf keeps full relative accuracy."""
    if exponent <= 1.0:
        if math.isinf(eta):
            return math.copysign(math.inf, eta)
        fn = lambda e: (1.0 + e * e) ** (-0.5 * exponent)
        return integrate.quad(fn, 0.0, eta, epsabs=0.0, epsrel=1e-13, limit=400)[0]
    k = 0.5 * (exponent - 1.0)
    half = 0.5 * special.beta(0.5, k)
    if math.isinf(eta):
        return math.copysign(half, eta)
    a = abs(eta)
    if a <= 1.0:
        val = half * special.betainc(0.5, k, a * a / (1.0 + a * a))
    else:
        val = half - bracket_tail(a, exponent)
    return math.copysign(val, eta)


def bracket_tail(eta: float, exponent: float) -> float:
    """int_eta^inf <xi>^-exponent d xi for eta >= 0 and exponent > 1."""
    if exponent <= 1.0:
        return math.inf
    if math.isinf(eta):
        return 0.0
    if eta < 0:
        raise ValueError("bracket_tail needs eta >= 0")
    k = 0.5 * (exponent - 1.0)
    return 0.5 * special.beta(0.5, k) * special.betainc(k, 0.5, 1.0 / (1.0 + eta * eta))


def clock(t: float, exponent: float) -> float:
    """int_0^t <eta>^-exponent d eta."""
    return bracket_integral(t, exponent)


def q_weight(t: float, cfg: NormConfig) -> float:
    """q(t) = (2 T - S(t)) / (4 T) + 1/2, S(t) = int_0^t <eta>^-(d+gamma)."""
    T = cfg.T_gamma
    return (2.0 * T - clock(t, cfg.exponent)) / (4.0 * T) + 0.5


def p_weight(t: float, cfg: NormConfig) -> float:
    """p(t) = S(t) / (4 T) + 1/4."""
    return clock(t, cfg.exponent) / (4.0 * cfg.T_gamma) + 0.25


def weighted_l2_sq(values: np.ndarray, grid: PhaseGrid, k: float) -> float:
    """|| <z>^k f ||^2_{L^2}."""
    w = grid.z_bracket_sq() ** k
    return float(np.sum(w * values * values) * grid.cell_volume)


def _check_resolved(grid: PhaseGrid):
    if grid.homogeneous or grid.n_x < 5 or grid.vgrid.n < 5:
        raise ValueError("norms need at least 5 nodes per axis in x and v")


def energy_norm(field: DistributionField, t: float, cfg: NormConfig) -> float:
    """Squared truncated energy norm
    sum_{n=1..N} sum_{|alpha| <= N-n} || <z>^(m_w n) D^alpha f ||^2."""
    vals, grid = _values(field)
    _check_resolved(grid)
    zsq = grid.z_bracket_sq()
    total = 0.0
    for order, Df in _derivative_tree(vals, grid, t, cfg.N - 1):
        sq = Df * Df
        for n in range(1, cfg.N - order + 1):
            total += float(np.sum(zsq ** (cfg.m_w * n) * sq))
    return total * grid.cell_volume


def _analytic(field, t, cfg, radius):
    vals, grid = _values(field)
    _check_resolved(grid)
    w = grid.z_bracket_sq() ** 4
    total = 0.0
    for order, Df in _derivative_tree(vals, grid, t, cfg.order):
        coef = radius ** (2 * (order + 1)) / math.factorial(order) ** (2.0 + 2.0 * cfg.delta)
        total += coef * float(np.sum(w * Df * Df))
    return total * grid.cell_volume


def an_norm(field: DistributionField, t: float, cfg: NormConfig) -> float:
    """Squared AN norm truncated at |alpha| <= cfg.order."""
    return _analytic(field, t, cfg, q_weight(t, cfg))


def ma_norm(field: DistributionField, t: float, cfg: NormConfig) -> float:
    """Squared MA norm truncated at |alpha| <= cfg.order."""
    return _analytic(field, t, cfg, p_weight(t, cfg))


# --------------------------------------------------------------------------
# moments, entropy, distances


def boundary_mass_fraction(field: DistributionField) -> float:
    """Share of |mass| on the outermost layer of nodes."""
    a = np.abs(field.values)
    tot = a.sum()
    if tot == 0:
        return 0.0
    inner = a
    for ax in range(a.ndim):
        if a.shape[ax] > 2:
            inner = np.take(inner, np.arange(1, inner.shape[ax] - 1), axis=ax)
    return float((tot - inner.sum()) / tot)


def _invariant_densities(X, V, t):
    """phi(t, X, V) for the seven invariants, as a list of arrays."""
    R = X - t * V
    d = X.shape[-1]
    W = wedge(V, X)
    return ([np.ones(X.shape[:-1])] + [V[..., i] for i in range(d)] + [R[..., i] for i in range(d)]
            + [np.sum(V * V, -1), np.sum(V * R, -1), np.sum(R * R, -1)]
            + [W[..., i, j] for i in range(d) for j in range(d)])


def _lab_points(field: DistributionField, t: float, params):
    x, v = field.grid.points()
    if field.frame == "lab":
        return x, v, 1.0
    p = params if params is not None else MaxwellianParams.standard(field.grid.d)
    X, V = map_point(FrameMap(p), t, x, v)
    return X, V, p.m


def _pack_moments(vals, d):
    m0 = vals[0]
    u0 = np.array(vals[1:1 + d])
    y0 = np.array(vals[1 + d:1 + 2 * d])
    a0, b0, c0 = vals[1 + 2 * d:4 + 2 * d]
    A0 = np.array(vals[4 + 2 * d:]).reshape(d, d)
    return ConservedMoments(m0=m0, u0=u0, y0=y0, a0=a0, b0=b0, c0=c0, A0=A0)


def conserved_moments(field: DistributionField, t: float | None = None, frame: str | None = None,
                      params: MaxwellianParams | None = None) -> ConservedMoments:
    """Quadrature of the seven invariants.

    Lab frame: int phi(t, x, v) F dx dv.  Scaled frame: the composed
    invariants m int phi(t, map(x, v)) G dx dv, with ``map`` the scaled -> lab
    point map of ``params`` (the standard Maxwellian when omitted); these
    equal the lab-frame invariants of the corresponding F."""
    t = field.t if t is None else t
    if frame is not None and frame != field.frame:
        field = DistributionField(field.grid, field.values, frame, field.t)
    if field.grid.homogeneous:
        raise ValueError("invariants need a spatial grid")
    frac = boundary_mass_fraction(field)
    if frac > BOUNDARY_WARN:
        log.warning("conserved_moments: boundary mass fraction %.2e exceeds %.0e",
                    frac, BOUNDARY_WARN)
    X, V, m = _lab_points(field, t, params)
    w = field.values * field.grid.cell_volume * m
    vals = [float(np.sum(phi * w)) for phi in _invariant_densities(X, V, t)]
    return _pack_moments(vals, field.grid.d)


def moment_scales(field: DistributionField, t: float | None = None,
                  params: MaxwellianParams | None = None) -> np.ndarray:
    """int |phi| |G| per invariant component (same packing as as_vector); used
    to normalize drifts of invariants whose value is zero."""
    t = field.t if t is None else t
    X, V, m = _lab_points(field, t, params)
    w = np.abs(field.values) * field.grid.cell_volume * m
    vals = [float(np.sum(np.abs(phi) * w)) for phi in _invariant_densities(X, V, t)]
    return _pack_moments(vals, field.grid.d).as_vector()


def relative_entropy(F, M) -> float:
    """int [F ln(F/M) - F + M]; terms with F = 0 contribute M."""
    Fv = F.values if isinstance(F, DistributionField) else np.asarray(F, dtype=float)
    Mv = M.values if isinstance(M, DistributionField) else np.asarray(M, dtype=float)
    if Fv.shape != Mv.shape:
        raise ValueError("shape mismatch")
    if np.any(Mv <= 0):
        raise ValueError("reference must be strictly positive")
    grid = F.grid if isinstance(F, DistributionField) else (M.grid if isinstance(M, DistributionField) else None)
    vol = grid.cell_volume if grid is not None else 1.0
    with np.errstate(divide="ignore", invalid="ignore"):
        term = np.where(Fv > 0, Fv * (np.log(np.where(Fv > 0, Fv, 1.0)) - np.log(Mv)), 0.0)
    return float(np.sum(term - Fv + Mv) * vol)


def lp_distance(f, g, p: float = 1.0, weight: float | None = None) -> float:
    """(int |f - g|^p)^(1/p) by grid quadrature."""
    fv = f.values if isinstance(f, DistributionField) else np.asarray(f, dtype=float)
    gv = g.values if isinstance(g, DistributionField) else np.asarray(g, dtype=float)
    if weight is None:
        grid = f.grid if isinstance(f, DistributionField) else getattr(g, "grid", None)
        weight = grid.cell_volume if grid is not None else 1.0
    if math.isinf(p):
        return float(np.max(np.abs(fv - gv)))
    return float((np.sum(np.abs(fv - gv) ** p) * weight) ** (1.0 / p))


# --------------------------------------------------------------------------
# CSV


DIAGNOSTIC_COLUMNS = [
    "t", "mass", "momentum", "center", "energy", "scalar_moment", "inertial_moment",
    "angular_momentum", "energy_norm", "an_norm", "ma_norm", "rel_entropy", "dissipation",
    "l1_dist_to_final", "q", "p", "clamped_nodes",
]


def _fmt(v):
    if isinstance(v, (list, tuple, np.ndarray)):
        return " ".join(repr(float(x)) for x in np.ravel(v))
    if v is None or (isinstance(v, float) and math.isnan(v)):
        return ""
    if isinstance(v, (int, np.integer)):
        return str(int(v))
    return repr(float(v))


def write_diagnostics_csv(path, rows: Sequence[dict], columns: Sequence[str] | None = None) -> None:
    """One row per step; vector entries are space-separated; full float precision."""
    cols = list(columns or DIAGNOSTIC_COLUMNS)
    extra = [k for r in rows for k in r if k not in cols]
    for k in extra:
        if k not in cols:
            cols.append(k)
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(cols)
        for r in rows:
            w.writerow([_fmt(r.get(c)) for c in cols])
