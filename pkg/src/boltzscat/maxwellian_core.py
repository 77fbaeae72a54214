"""Traveling Maxwellians: evaluation, conserved moments and their inversion.

A traveling Maxwellian in dimension d is

    M(t, x, v) = m * sqrt(det Q) / (2 pi)^d
                 * exp(-1/2 [a|w|^2 + 2b w.(r - t w) + c|r - t w|^2 + 2 w^T A r])

with w = v - u, r = x - y - t u, A skew-symmetric and Q = (ac - b^2) I + A^2.
The quadratic form in (w, r) at t = 0 has the 2d x 2d matrix
P = [[a I, b I + A], [b I - A, c I]], whose Schur complement is Q / a, so
det P = det Q and P is positive definite iff a > 0 and Q is.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Any

import numpy as np

__all__ = [
    "MaxwellianParams",
    "ConservedMoments",
    "InfeasibleMomentsError",
    "ConvergenceError",
    "skew2",
    "matrix_sqrt",
    "block_P",
    "evaluate",
    "moments_of_params",
    "params_from_moments",
    "log_span_check",
    "wedge",
    "sample_params",
]

_LINALG_TOL = 1e-12


class InfeasibleMomentsError(ValueError):
    """Moments outside the cone reachable by traveling Maxwellians."""


class ConvergenceError(RuntimeError):
    """Newton iteration failed; ``residual`` holds the last residual norm."""

    def __init__(self, msg: str, residual: float):
        super().__init__(f"{msg} (residual {residual:.3e})")
        self.residual = residual


def skew2(omega: float) -> np.ndarray:
    """2x2 skew matrix omega * J with J = [[0, -1], [1, 0]]."""
    return np.array([[0.0, -omega], [omega, 0.0]])


def _as_skew(A, d: int) -> np.ndarray:
    A = np.asarray(A, dtype=float)
    if A.shape != (d, d):
        raise ValueError(f"A must be {d}x{d}, got {A.shape}")
    if np.max(np.abs(A + A.T), initial=0.0) > 1e-14 * max(1.0, np.max(np.abs(A))):
        raise ValueError("A must be skew-symmetric")
    return 0.5 * (A - A.T)


def matrix_sqrt(Q) -> np.ndarray:
    """Symmetric positive-definite square root via symmetric eigendecomposition."""
    Q = np.asarray(Q, dtype=float)
    if Q.ndim != 2 or Q.shape[0] != Q.shape[1]:
        raise ValueError("matrix_sqrt expects a square matrix")
    scale = max(np.max(np.abs(Q)), 1e-300)
    if np.max(np.abs(Q - Q.T)) > _LINALG_TOL * scale:
        raise ValueError("matrix_sqrt expects a symmetric matrix")
    lam, U = np.linalg.eigh(0.5 * (Q + Q.T))
    if lam[0] <= 0.0:
        raise ValueError("matrix_sqrt expects a positive-definite matrix")
    B = (U * np.sqrt(lam)) @ U.T
    return 0.5 * (B + B.T)


def block_P(a: float, b: float, c: float, A: np.ndarray) -> np.ndarray:
    d = A.shape[0]
    eye = np.eye(d)
    return np.block([[a * eye, b * eye + A], [b * eye - A, c * eye]])


def wedge(v: np.ndarray, x: np.ndarray) -> np.ndarray:
    """Skew tensor product v x^T - x v^T, broadcast over leading axes."""
    return v[..., :, None] * x[..., None, :] - x[..., :, None] * v[..., None, :]


@dataclass(frozen=True, eq=False)
class MaxwellianParams:
    a: float
    b: float
    c: float
    A: np.ndarray
    m: float = 1.0
    u: np.ndarray | None = None
    y: np.ndarray | None = None
    _cache: dict = field(default_factory=dict, repr=False, compare=False)

    def __post_init__(self):
        A = np.asarray(self.A, dtype=float)
        if A.ndim != 2 or A.shape[0] not in (2, 3):
            raise ValueError("A must be a 2x2 or 3x3 skew matrix")
        d = A.shape[0]
        object.__setattr__(self, "A", _as_skew(A, d))
        for name in ("u", "y"):
            val = getattr(self, name)
            val = np.zeros(d) if val is None else np.asarray(val, dtype=float).reshape(d)
            object.__setattr__(self, name, val)
        for name in ("a", "b", "c", "m"):
            object.__setattr__(self, name, float(getattr(self, name)))
        if not (self.m > 0 and self.a > 0 and self.c > 0 and self.a * self.c - self.b ** 2 > 0):
            raise ValueError("invalid traveling Maxwellian: need m, a, c, ac - b^2 > 0")
        if np.linalg.eigvalsh(self.Q)[0] <= 0:
            raise ValueError("invalid traveling Maxwellian: Q = (ac-b^2)I + A^2 not positive definite")

    @property
    def d(self) -> int:
        return self.A.shape[0]

    @property
    def disc(self) -> float:
        """ac - b^2."""
        return self.a * self.c - self.b ** 2

    @property
    def Q(self) -> np.ndarray:
        if "Q" not in self._cache:
            Q = self.disc * np.eye(self.d) + self.A @ self.A
            self._cache["Q"] = 0.5 * (Q + Q.T)
        return self._cache["Q"]

    @property
    def B(self) -> np.ndarray:
        if "B" not in self._cache:
            self._cache["B"] = matrix_sqrt(self.Q)
        return self._cache["B"]

    @property
    def B_inv(self) -> np.ndarray:
        if "B_inv" not in self._cache:
            lam, U = np.linalg.eigh(self.Q)
            Bi = (U / np.sqrt(lam)) @ U.T
            self._cache["B_inv"] = 0.5 * (Bi + Bi.T)
        return self._cache["B_inv"]

    @property
    def det_B(self) -> float:
        return float(np.sqrt(np.linalg.det(self.Q)))

    @property
    def P(self) -> np.ndarray:
        return block_P(self.a, self.b, self.c, self.A)

    @property
    def log_norm(self) -> float:
        """log of sqrt(det P) / (2 pi)^d, the unit-mass normalization."""
        sign, logdet = np.linalg.slogdet(self.P)
        return 0.5 * logdet - self.d * np.log(2.0 * np.pi)

    @property
    def is_reduced(self) -> bool:
        return (self.a == 1.0 and self.b == 0.0 and self.c == 1.0 and not np.any(self.A)
                and self.m == 1.0 and not np.any(self.u) and not np.any(self.y))

    def to_dict(self) -> dict[str, Any]:
        return {"m": self.m, "u": self.u.tolist(), "y": self.y.tolist(), "a": self.a,
                "b": self.b, "c": self.c, "A": self.A.reshape(-1).tolist(), "d": self.d}

    @classmethod
    def from_dict(cls, data: dict[str, Any]) -> "MaxwellianParams":
        d = int(data.get("d", 3))
        A = np.asarray(data.get("A", np.zeros(d * d)), dtype=float).reshape(d, d)
        return cls(a=data.get("a", 1.0), b=data.get("b", 0.0), c=data.get("c", 1.0), A=A,
                   m=data.get("m", 1.0), u=data.get("u"), y=data.get("y"))

    @classmethod
    def standard(cls, d: int = 3) -> "MaxwellianParams":
        return cls(a=1.0, b=0.0, c=1.0, A=np.zeros((d, d)))


@dataclass(frozen=True, eq=False)
class ConservedMoments:
    """The seven conserved quantities: mass, momentum, center of mass, energy,
    the scalar moment of v.(x - tv), the moment of |x - tv|^2 and angular momentum."""

    m0: float
    u0: np.ndarray
    y0: np.ndarray
    a0: float
    b0: float
    c0: float
    A0: np.ndarray

    @property
    def d(self) -> int:
        return int(np.asarray(self.u0).shape[0])

    def as_vector(self) -> np.ndarray:
        iu = np.triu_indices(self.d, 1)
        return np.concatenate([[self.m0], self.u0, self.y0, [self.a0, self.b0, self.c0],
                               np.asarray(self.A0)[iu]])

    def to_dict(self) -> dict[str, Any]:
        return {"m0": float(self.m0), "u0": np.asarray(self.u0).tolist(),
                "y0": np.asarray(self.y0).tolist(), "a0": float(self.a0), "b0": float(self.b0),
                "c0": float(self.c0), "A0": np.asarray(self.A0).reshape(-1).tolist(), "d": self.d}

    @classmethod
    def from_dict(cls, data: dict[str, Any]) -> "ConservedMoments":
        d = int(data.get("d", 3))
        A0 = np.asarray(data.get("A0", np.zeros(d * d)), dtype=float).reshape(d, d)
        return cls(m0=float(data["m0"]), u0=np.asarray(data.get("u0", np.zeros(d)), float),
                   y0=np.asarray(data.get("y0", np.zeros(d)), float), a0=float(data["a0"]),
                   b0=float(data["b0"]), c0=float(data["c0"]), A0=A0)


def sample_params(rng: np.random.Generator, d: int = 3, spread: float = 1.0,
                  centered: bool = False) -> MaxwellianParams:
    """Draw valid parameters: a, c log-uniform in [1/2, 2] (scaled by ``spread``
    in the exponent), |b| < sqrt(ac)/2, A with ||A||_2 <= sqrt(ac - b^2)/2 so
    that Q stays positive definite, m in [1/2, 2] and standard normal u, y."""
    a = float(np.exp(rng.uniform(-np.log(2.0), np.log(2.0)) * spread))
    c = float(np.exp(rng.uniform(-np.log(2.0), np.log(2.0)) * spread))
    b = float(rng.uniform(-0.5, 0.5) * np.sqrt(a * c))
    raw = rng.normal(size=(d, d))
    A = raw - raw.T
    nrm = np.linalg.norm(A, 2)
    if nrm > 0:
        A *= rng.uniform(0.0, 0.5) * np.sqrt(a * c - b * b) / nrm
    m = float(np.exp(rng.uniform(-np.log(2.0), np.log(2.0))))
    if centered:
        return MaxwellianParams(a=a, b=b, c=c, A=A, m=m)
    return MaxwellianParams(a=a, b=b, c=c, A=A, m=m, u=rng.normal(size=d), y=rng.normal(size=d))


def evaluate(params: MaxwellianParams, t: float, x, v) -> np.ndarray:
    """Value of the traveling Maxwellian at (t, x, v); x, v broadcast over leading axes."""
    x = np.asarray(x, dtype=float)
    v = np.asarray(v, dtype=float)
    w = v - params.u
    r = x - params.y - t * params.u
    rt = r - t * w
    quad = (params.a * np.sum(w * w, axis=-1) + 2.0 * params.b * np.sum(w * rt, axis=-1)
            + params.c * np.sum(rt * rt, axis=-1)
            + 2.0 * np.einsum("...i,ij,...j->...", w, params.A, r))
    return params.m * np.exp(params.log_norm - 0.5 * quad)


def _centered_moments(a, b, c, A):
    d = A.shape[0]
    Q = (a * c - b * b) * np.eye(d) + A @ A
    Qi = np.linalg.inv(0.5 * (Q + Q.T))
    T = np.trace(Qi)
    A0 = -2.0 * A @ Qi
    return c * T, -b * T, a * T, 0.5 * (A0 - A0.T)


def moments_of_params(params: MaxwellianParams) -> ConservedMoments:
    """Closed-form conserved moments; the centered unit-mass case gives
    energy c*T, scalar moment -b*T, inertial moment a*T and angular moment -2 A Q^-1,
    with T = trace(Q^-1)."""
    ac0, bc0, cc0, Ac0 = _centered_moments(params.a, params.b, params.c, params.A)
    m, u, y = params.m, params.u, params.y
    A0 = m * (Ac0 + wedge(u, y))
    return ConservedMoments(m0=m, u0=m * u, y0=m * y, a0=m * (ac0 + u @ u),
                            b0=m * (bc0 + u @ y), c0=m * (cc0 + y @ y), A0=0.5 * (A0 - A0.T))


def _pack(a, b, c, A):
    iu = np.triu_indices(A.shape[0], 1)
    return np.concatenate([[a, b, c], A[iu]])


def _unpack(p, d):
    A = np.zeros((d, d))
    iu = np.triu_indices(d, 1)
    A[iu] = p[3:]
    return p[0], p[1], p[2], A - A.T


def _residual(p, d, target):
    a, b, c, A = _unpack(p, d)
    ac0, bc0, cc0, Ac0 = _centered_moments(a, b, c, A)
    return _pack(ac0, bc0, cc0, Ac0) - target


def _admissible(p, d):
    a, b, c, A = _unpack(p, d)
    if not (a > 0 and c > 0 and a * c - b * b > 0):
        return False
    Q = (a * c - b * b) * np.eye(d) + A @ A
    return np.linalg.eigvalsh(Q)[0] > 0


def params_from_moments(moments: ConservedMoments, tol: float = 1e-8, max_iter: int = 100,
                        ) -> MaxwellianParams:
    """Invert the conserved-moment map by damped Newton iteration.

    The A = 0 scalar problem is solved exactly for the starting point
    (with D = a0 c0 - b0^2 of the centered moments, T = D/d), then a full
    Newton iteration on (a, b, c, A) with a central-difference Jacobian
    follows; steps that leave the admissible cone or fail to reduce the
    residual are halved.
    """
    d = moments.d
    m = float(moments.m0)
    if not m > 0:
        raise InfeasibleMomentsError("mass must be positive")
    u = np.asarray(moments.u0, float) / m
    y = np.asarray(moments.y0, float) / m
    a0 = moments.a0 / m - u @ u
    b0 = moments.b0 / m - u @ y
    c0 = moments.c0 / m - y @ y
    A0 = np.asarray(moments.A0, float) / m - wedge(u, y)
    A0 = 0.5 * (A0 - A0.T)
    D = a0 * c0 - b0 * b0
    if not (a0 > 0 and c0 > 0 and D > 0):
        raise InfeasibleMomentsError(
            f"infeasible moments: need energy, inertia > 0 and a0*c0 - b0^2 > 0 (got {D:.3e})")
    target = _pack(a0, b0, c0, A0)
    scale = np.abs(target).max()
    T = D / d
    p = _pack(c0 / T, -b0 / T, a0 / T, np.zeros((d, d)))
    r = _residual(p, d, target)
    rn = np.linalg.norm(r)
    for _ in range(max_iter):
        if rn <= tol * 1e-3 * scale:
            break
        J = np.empty((p.size, p.size))
        for k in range(p.size):
            hk = 1e-6 * max(1.0, abs(p[k]))
            e = np.zeros(p.size)
            e[k] = hk
            J[:, k] = (_residual(p + e, d, target) - _residual(p - e, d, target)) / (2 * hk)
        try:
            step = np.linalg.solve(J, -r)
        except np.linalg.LinAlgError as exc:
            raise ConvergenceError("singular Newton Jacobian", rn) from exc
        lam = 1.0
        for _ in range(60):
            trial = p + lam * step
            if _admissible(trial, d):
                rt = _residual(trial, d, target)
                if np.linalg.norm(rt) < rn or lam < 1e-12:
                    break
            lam *= 0.5
        else:
            raise ConvergenceError("line search failed", rn)
        if not _admissible(trial, d):
            raise ConvergenceError("iterate left the admissible cone", rn)
        p, r = trial, rt
        rn = np.linalg.norm(r)
    if rn > tol * scale:
        raise ConvergenceError("Newton did not converge", rn)
    a, b, c, A = _unpack(p, d)
    return MaxwellianParams(a=a, b=b, c=c, A=A, m=m, u=u, y=y)


def _span_basis(x: np.ndarray, v: np.ndarray, t: float) -> np.ndarray:
    r = x - t * v
    d = x.shape[-1]
    cols = [np.ones(x.shape[:-1])]
    cols += [v[..., i] for i in range(d)]
    cols += [r[..., i] for i in range(d)]
    cols += [np.sum(v * v, -1), np.sum(v * r, -1), np.sum(r * r, -1)]
    W = wedge(v, r)
    cols += [W[..., i, j] for i in range(d) for j in range(i + 1, d)]
    return np.stack([c.reshape(-1) for c in cols], axis=1)


def log_span_check(field, t: float) -> float:
    """RMS residual of the least-squares fit of ln(field) onto
    span{1, v, x - tv, |v|^2, v.(x - tv), |x - tv|^2, v ^ (x - tv)}.

    ``field`` is any object with ``values`` on a tensor grid and a ``grid``
    exposing ``points()`` returning (x, v) arrays of shape values.shape + (d,).
    """
    vals = np.asarray(field.values, dtype=float)
    if np.any(vals <= 0) or not np.all(np.isfinite(vals)):
        raise ValueError("log_span_check needs strictly positive finite samples")
    x, v = field.grid.points()
    basis = _span_basis(x, v, t)
    rhs = np.log(vals).reshape(-1)
    # column scaling keeps the normal equations well conditioned
    norms = np.linalg.norm(basis, axis=0)
    coef, *_ = np.linalg.lstsq(basis / norms, rhs, rcond=None)
    res = rhs - (basis / norms) @ coef
    return float(np.sqrt(np.mean(res * res)))
