"""Change of variables between lab-frame solutions F and scaled-frame solutions G.

The composite map (scaled -> lab) is

    (x, v) -> (tau B^-1 x + y + t u,  (v - (b - c t + A) B^-1 x) / tau + u),
    tau(t) = sqrt(a - 2 b t + c t^2),

and G(t, x, v) = F(t, map(x, v)) / (m det B).  The (u, y) shift is applied
after the scaling and the A-rotation, i.e. the mass/momentum/center
normalization is undone last.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Callable

import numpy as np

from .maxwellian_core import MaxwellianParams

__all__ = [
    "FrameMap",
    "tau",
    "transport_clock",
    "map_point",
    "inverse_map_point",
    "push_density",
    "standard_maxwellian",
    "regime_classify",
    "collision_exponent",
]


@dataclass(frozen=True, eq=False)
class FrameMap:
    params: MaxwellianParams
    direction: str = "scaled->lab"

    def __post_init__(self):
        if self.direction not in ("scaled->lab", "lab->scaled"):
            raise ValueError("direction must be 'scaled->lab' or 'lab->scaled'")

    @property
    def d(self) -> int:
        return self.params.d

    @property
    def jacobian_factor(self) -> float:
        """m det B: F = (m det B) G o map^-1."""
        return self.params.m * self.params.det_B

    def inverted(self) -> "FrameMap":
        other = "lab->scaled" if self.direction == "scaled->lab" else "scaled->lab"
        return FrameMap(self.params, other)

    def __call__(self, t, x, v):
        if self.direction == "scaled->lab":
            return map_point(self, t, x, v)
        return inverse_map_point(self, t, x, v)

    def to_dict(self) -> dict:
        return {"params": self.params.to_dict(), "direction": self.direction}

    @classmethod
    def from_dict(cls, data: dict) -> "FrameMap":
        return cls(MaxwellianParams.from_dict(data["params"]), data.get("direction", "scaled->lab"))


def tau(fmap, t):
    """sqrt(a - 2bt + ct^2); positive for all t since ac - b^2 > 0."""
    p = fmap.params if isinstance(fmap, FrameMap) else fmap
    if not (p.a > 0 and p.c > 0 and p.a * p.c - p.b ** 2 > 0):
        raise ValueError("tau needs a, c, ac - b^2 > 0")
    t = np.asarray(t, dtype=float)
    return np.sqrt(p.a - 2.0 * p.b * t + p.c * t * t)


def transport_clock(params: MaxwellianParams, t0, t1):
    """Integral of tau^-2 over [t0, t1] in closed form; t1 may be +inf."""
    sq = np.sqrt(params.a * params.c - params.b ** 2)

    def prim(t):
        if np.isinf(t):
            return np.sign(t) * 0.5 * np.pi / sq
        return np.arctan((params.c * t - params.b) / sq) / sq

    return prim(t1) - prim(t0)


def _skew_shift(params, t):
    d = params.d
    return (params.b - params.c * t) * np.eye(d) + params.A


def map_point(fmap: FrameMap, t: float, x, v):
    """Scaled-frame point -> lab-frame point."""
    p = fmap.params
    x = np.asarray(x, dtype=float)
    v = np.asarray(v, dtype=float)
    ta = float(tau(p, t))
    bx = x @ p.B_inv.T
    X = ta * bx + p.y + t * p.u
    V = (v - bx @ _skew_shift(p, t).T) / ta + p.u
    return X, V


def inverse_map_point(fmap: FrameMap, t: float, X, V):
    """Lab-frame point -> scaled-frame point (exact inverse of map_point)."""
    p = fmap.params
    X = np.asarray(X, dtype=float)
    V = np.asarray(V, dtype=float)
    ta = float(tau(p, t))
    bx = (X - p.y - t * p.u) / ta
    x = bx @ p.B.T
    v = ta * (V - p.u) + bx @ _skew_shift(p, t).T
    return x, v


def standard_maxwellian(d: int) -> Callable:
    """(2 pi)^-d exp(-(|x|^2 + |v|^2)/2), the stationary state of the scaled equation."""

    def density(x, v):
        x = np.asarray(x, dtype=float)
        v = np.asarray(v, dtype=float)
        return np.exp(-0.5 * (np.sum(x * x, -1) + np.sum(v * v, -1))) / (2.0 * np.pi) ** d

    return density


def push_density(fmap: FrameMap, t: float, density):
    """Transform a density between frames.

    With direction 'lab->scaled' a lab density F (callable F(x, v) at time t)
    becomes the scaled density G(x, v) = F(map(x, v)) / (m det B).  With
    'scaled->lab' the inverse transformation is returned.  Grid-valued
    densities are accepted as objects with a callable ``interpolate(x, v)``;
    points outside the source grid evaluate to zero there.
    """
    src = density.interpolate if hasattr(density, "interpolate") else density
    fwd = FrameMap(fmap.params, "scaled->lab")
    jac = fwd.jacobian_factor
    if fmap.direction == "lab->scaled":
        def pushed(x, v):
            X, V = map_point(fwd, t, x, v)
            return src(X, V) / jac
    else:
        def pushed(X, V):
            x, v = inverse_map_point(fwd, t, X, V)
            return jac * src(x, v)
    return pushed


def collision_exponent(gamma: float, d: int) -> float:
    """Decay exponent d + gamma of the collision prefactor tau^-(d + gamma)."""
    return d + gamma


def regime_classify(gamma: float, d: int) -> str:
    """'weak' iff tau^-(d+gamma) is integrable in time, i.e. gamma > -(d - 1)."""
    if not -3.0 < gamma < 0.0:
        raise ValueError("gamma must lie in (-3, 0)")
    return "weak" if collision_exponent(gamma, d) > 1.0 else "strong"
