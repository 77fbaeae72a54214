"""Time integration of the scaled equation

    d_t G + tau^-2 T G = m det(B) tau^-(d+gamma) Q(G, G)

by Strang splitting: exact linear transport (an orthogonal map of phase
space, remapped conservatively) around an explicit Heun collision substep
in the collision clock S(t) = int m det(B) tau^-(d+gamma).

Only the deviation G - M from the stationary Maxwellian M is remapped (T M = 0)
and the collision right-hand side is Q(G, G) - Q(M, M), so M is an exact
discrete steady state.  The perturbation mode evolves g = G - M with the
right-hand side Q(G, g) + Q(g, M), which is the same quantity by
bilinearity, evaluated through a different sequence of operator calls.
"""

from __future__ import annotations

import logging
import math
from dataclasses import dataclass, field
from typing import Callable, Sequence

import numpy as np
from scipy import linalg, optimize

from .collision_kernel import (CollisionKernel, entropy_dissipation, eval_Q_eta_direct,
                               loss_rate_bound)
from .maxwellian_core import MaxwellianParams
from .phase_field import (DistributionField, NormConfig, PhaseGrid, an_norm, bracket_integral,
                          bracket_tail, conserved_moments,
                          energy_norm, lp_distance, ma_norm, p_weight, q_weight)
from .remap import (DEFAULT_ORDER, apply_orthogonal, apply_orthogonal_spectral,
                    quadratic_moment_fix)
from .transform_pipeline import regime_classify, transport_clock

__all__ = [
    "ConfigError",
    "SimulationAborted",
    "PicardDivergence",
    "SolverConfig",
    "TrajectoryRecord",
    "CollisionClock",
    "transport_generator",
    "transport_matrix",
    "transport_deviation",
    "transport_step",
    "collision_step",
    "run_simulation",
    "picard_solve",
    "scattering_limit",
    "fit_decay_rate",
    "stationary_maxwellian",
]

log = logging.getLogger(__name__)


class ConfigError(ValueError):
    pass


class SimulationAborted(RuntimeError):
    def __init__(self, msg: str, record: "TrajectoryRecord"):
        super().__init__(msg)
        self.record = record


class PicardDivergence(RuntimeError):
    def __init__(self, msg: str, history: list):
        super().__init__(msg)
        self.history = history


# --------------------------------------------------------------------------
# configuration and records


DIAGNOSTICS_DEFAULT = ("moments", "entropy", "dissipation_scheme")
# ln G is clamped at this fraction of max G in the entropy diagnostics
LOG_FLOOR_REL = 1e-30


@dataclass
class SolverConfig:
    kernel: CollisionKernel
    grid: PhaseGrid
    params: MaxwellianParams | None = None
    t_end: float = 50.0
    dt_max: float = 1.0
    dt_rel: float | None = None
    dt_fixed: float | None = None
    c_cfl: float = 0.5
    scheme: str = "strang"
    mode: str = "full"
    form: str = "adjoint"
    symmetric: bool = False
    remap: str = "spectral"
    remap_order: int = DEFAULT_ORDER
    positivity: str = "floor"
    picard_max_iter: int = 30
    picard_tol: float = 1e-12
    to_infinity: bool = False
    inf_step: float = 0.05
    record_every: int = 1
    snapshot_times: Sequence[float] = ()
    keep_fields: bool = False
    norms: NormConfig | None = None
    diagnostics: Sequence[str] = DIAGNOSTICS_DEFAULT
    reference: np.ndarray | None = None
    workers: int = 1

    def __post_init__(self):
        d = self.grid.d
        if self.kernel.d != d:
            raise ConfigError("kernel and grid dimensions differ")
        if regime_classify(self.kernel.gamma, d) != "weak":
            raise ConfigError(f"strong collision regime: gamma = {self.kernel.gamma} at d = {d}")
        if self.params is None:
            self.params = MaxwellianParams.standard(d)
        if self.params.d != d:
            raise ConfigError("params dimension differs from grid")
        if np.any(self.params.u != 0) or np.any(self.params.y != 0):
            raise ConfigError("scaled-frame runs use centered params (u = y = 0)")
        if self.scheme not in ("strang", "picard"):
            raise ConfigError("scheme must be 'strang' or 'picard'")
        if self.mode not in ("full", "perturbation"):
            raise ConfigError("mode must be 'full' or 'perturbation'")
        if self.remap not in ("spectral", "lagrange"):
            raise ConfigError("remap must be 'spectral' or 'lagrange'")
        if self.reference is not None and not self.grid.homogeneous:
            raise ConfigError("a custom reference is only allowed for homogeneous runs")
        if self.positivity not in ("floor", "log", "clip"):
            raise ConfigError("positivity must be 'floor', 'log' or 'clip'")
        if self.symmetric and not self.grid.homogeneous:
            raise ConfigError("the symmetric collision path is for homogeneous runs only")
        if not self.t_end > 0:
            raise ConfigError("t_end must be positive")

    @property
    def exponent(self) -> float:
        return self.grid.d + self.kernel.gamma

    def to_dict(self) -> dict:
        return {
            "kernel": self.kernel.to_dict(), "grid": self.grid.to_dict(),
            "params": self.params.to_dict(), "t_end": self.t_end, "dt_max": self.dt_max,
            "dt_rel": self.dt_rel, "dt_fixed": self.dt_fixed, "c_cfl": self.c_cfl,
            "scheme": self.scheme, "mode": self.mode, "form": self.form,
            "symmetric": self.symmetric, "remap": self.remap, "remap_order": self.remap_order,
            "positivity": self.positivity, "to_infinity": self.to_infinity,
        }


@dataclass
class TrajectoryRecord:
    times: list = field(default_factory=list)
    rows: list = field(default_factory=list)
    snapshots: dict = field(default_factory=dict)
    fields: list = field(default_factory=list)
    initial: DistributionField | None = None
    final: DistributionField | None = None
    infinity: DistributionField | None = None
    t_final: float = 0.0
    duhamel_T: np.ndarray | None = None
    duhamel_Q: np.ndarray | None = None
    rate_T: list = field(default_factory=list)
    rate_Q: list = field(default_factory=list)
    steps: list = field(default_factory=list)
    meta: dict = field(default_factory=dict)

    def append(self, t: float, row: dict):
        if self.times and not t > self.times[-1]:
            raise ValueError("record times must increase strictly")
        self.times.append(t)
        self.rows.append(row)

    def column(self, name: str) -> np.ndarray:
        return np.array([r.get(name, np.nan) for r in self.rows], dtype=float)


# --------------------------------------------------------------------------
# clocks and transport


class CollisionClock:
    """S(t) = int_0^t m det(B) tau^-(d+gamma) and its inverse.

    With tau^2 = (D/c)(1 + eta^2), eta = (ct - b)/sqrt(D), D = ac - b^2, the
    integral reduces to the bracket integral of ``phase_field``."""

    def __init__(self, params: MaxwellianParams, exponent: float):
        self.params = params
        self.exponent = exponent
        self.scale = params.m * params.det_B
        p = params
        self.sqD = math.sqrt(p.a * p.c - p.b ** 2)
        self.factor = (self.scale * (self.sqD ** 2 / p.c) ** (-0.5 * exponent) * self.sqD / p.c)
        self.eta0 = -p.b / self.sqD

    def _eta(self, t: float) -> float:
        if math.isinf(t):
            return math.inf
        return (self.params.c * t - self.params.b) / self.sqD

    def rate(self, t: float) -> float:
        p = self.params
        if math.isinf(t):
            return 0.0
        return self.scale * (p.a - 2.0 * p.b * t + p.c * t * t) ** (-0.5 * self.exponent)

    def __call__(self, t: float) -> float:
        if t == 0:
            return 0.0
        e = self.exponent
        return self.factor * (bracket_integral(self._eta(t), e) - bracket_integral(self.eta0, e))

    def remaining(self, t: float) -> float:
        """S(inf) - S(t), accurate for large t."""
        eta = self._eta(t)
        if eta >= 0:
            return self.factor * bracket_tail(eta, self.exponent)
        return self.total - self(t)

    @property
    def total(self) -> float:
        e = self.exponent
        return self.factor * (bracket_integral(math.inf, e) - bracket_integral(self.eta0, e))

    def inverse(self, S: float, t_lo: float = 0.0) -> float:
        if S >= self.total:
            return math.inf
        hi = max(2.0 * t_lo, 1.0)
        while self(hi) < S:
            hi *= 2.0
        return optimize.brentq(lambda t: self(t) - S, t_lo, hi, xtol=1e-14, rtol=1e-15)


def transport_generator(params: MaxwellianParams) -> np.ndarray:
    """L = [[-A, B], [-B, A]]: characteristics of tau^-2 T are z' = tau^-2 L z."""
    A, B = params.A, params.B
    return np.block([[-A, B], [-B, A]])


def transport_matrix(params: MaxwellianParams, t0: float, t1: float) -> np.ndarray:
    """E = exp(-ds L) with ds = int_t0^t1 tau^-2, so that G(t1, z) = G(t0, E z)."""
    ds = transport_clock(params, t0, t1)
    return linalg.expm(-ds * transport_generator(params))


def _transport_clock_to_time(params: MaxwellianParams, p: float) -> float:
    """Inverse of t -> int_0^t tau^-2 (p measured from t = 0)."""
    sq = math.sqrt(params.a * params.c - params.b ** 2)
    base = math.atan(-params.b / sq)
    arg = sq * p + base
    if arg >= 0.5 * math.pi * (1.0 - 1e-15):
        return math.inf
    return (params.b + sq * math.tan(arg)) / params.c


def stationary_maxwellian(grid: PhaseGrid) -> np.ndarray:
    """The scaled-frame steady state (2 pi)^-d exp(-(|x|^2+|v|^2)/2) on the grid;
    for homogeneous grids the unit-mass velocity Gaussian."""
    d = grid.d
    if grid.homogeneous:
        v = grid.vgrid.points()
        return (np.exp(-0.5 * np.sum(v * v, -1)) / (2 * np.pi) ** (d / 2)).reshape(grid.shape)
    zsq = grid.z_bracket_sq() - 1.0
    return np.exp(-0.5 * zsq) / (2 * np.pi) ** d


def transport_deviation(dev: np.ndarray, grid: PhaseGrid, E: np.ndarray, *,
                        method: str = "spectral", order: int = DEFAULT_ORDER,
                        reference: np.ndarray | None = None) -> tuple[np.ndarray, float]:
    """dev o E for a deviation from the stationary Maxwellian M.

    ``spectral``: w = dev / sqrt(M) is shifted with Fourier shears (M o E = M
    because E is orthogonal), multiplied back, and corrected by M times a
    quadratic polynomial so that all moments of degree <= 2 transform
    exactly.  ``lagrange``: conservative deposition remap of dev itself.
    Returns (values, dropped sum)."""
    if grid.homogeneous:
        return dev.copy(), 0.0
    if method == "lagrange":
        return apply_orthogonal(dev, E, grid.coords, grid.spacings, order)
    M = stationary_maxwellian(grid) if reference is None else reference
    root = np.sqrt(M)
    w = apply_orthogonal_spectral(dev / root, E, grid.coords, grid.spacings)
    return quadratic_moment_fix(root * w, dev, E, grid.coords, M), 0.0


def transport_step(field: DistributionField, t0: float, t1: float,
                   params: MaxwellianParams | None = None, *, method: str = "spectral",
                   order: int = DEFAULT_ORDER) -> DistributionField:
    """Exact characteristic transport from t0 to t1 (t1 may be inf).

    The deviation from the stationary Maxwellian, which the flow leaves
    invariant, is remapped."""
    grid = field.grid
    params = params or MaxwellianParams.standard(grid.d)
    E = transport_matrix(params, t0, t1)
    ref = stationary_maxwellian(grid)
    vals, lost = transport_deviation(field.values - ref, grid, E, method=method, order=order,
                                     reference=ref)
    if lost:
        log.info("transport_step: outflow %.3e", lost * grid.cell_volume)
    return DistributionField(grid, vals + ref, field.frame, t1)


# --------------------------------------------------------------------------
# collision


def _to_batch(values: np.ndarray, grid: PhaseGrid) -> np.ndarray:
    """(x..., v...) -> (N_v, N_x), contiguous."""
    return np.ascontiguousarray(values.reshape(grid.n_space, grid.vgrid.size).T)


def _from_batch(batch: np.ndarray, grid: PhaseGrid) -> np.ndarray:
    return np.ascontiguousarray(batch.T).reshape(grid.shape)


class _Collider:
    """Evaluates the well-balanced collision right-hand sides on batches."""

    def __init__(self, cfg: SolverConfig, reference: np.ndarray):
        self.cfg = cfg
        self.grid = cfg.grid
        self.ref = _to_batch(reference, self.grid)
        self.evals = 0
        self.QMM = self.Q(self.ref, self.ref)

    def Q(self, f, g):
        self.evals += 1
        c = self.cfg
        return eval_Q_eta_direct(c.kernel, c.grid.vgrid, f, g, form=c.form,
                                 symmetric=c.symmetric, workers=c.workers)

    def full(self, G):
        return self.Q(G, G) - self.QMM

    def perturbation(self, g):
        return self.Q(self.ref + g, g) + self.Q(g, self.ref)

    def linear(self, frozen, G):
        """Q(frozen, G) - Q(M, M): the Picard stage operator, linear in G."""
        return self.Q(frozen, G) - self.QMM

    def nu_max(self, G) -> float:
        c = self.cfg
        return float(np.max(loss_rate_bound(c.kernel, c.grid.vgrid, np.abs(G)), initial=0.0))


def _heun(rhs: Callable, y: np.ndarray, dS: float):
    k1 = rhs(y, 0)
    yp = y + dS * k1
    k2 = rhs(yp, 1)
    return y + 0.5 * dS * (k1 + k2), k1, yp


def collision_step(field: DistributionField, t0: float, t1: float, cfg: SolverConfig,
                   collider: _Collider | None = None) -> DistributionField:
    """Heun update of d_t G = m det(B) tau^-(d+gamma) (Q(G, G) - Q(M, M)) at every
    spatial node.  Intervals violating dS * nu_max <= c_cfl are halved."""
    grid = cfg.grid
    ref = cfg.reference if cfg.reference is not None else stationary_maxwellian(grid)
    col = collider or _Collider(cfg, ref)
    clock = CollisionClock(cfg.params, cfg.exponent)
    G = _to_batch(field.values, grid)
    pieces = [(t0, t1)]
    while pieces:
        a, b = pieces.pop(0)
        dS = clock(b) - clock(a)
        if dS * col.nu_max(G) > cfg.c_cfl * (1.0 + 1e-12):
            mid = 0.5 * (a + b) if not math.isinf(b) else clock.inverse(clock(a) + 0.5 * dS, a)
            log.info("collision_step: interval [%g, %g] rejected, halved", a, b)
            pieces[:0] = [(a, mid), (mid, b)]
            continue
        G, _, _ = _heun(lambda y, k: col.full(y), G, dS)
    return DistributionField(grid, _from_batch(G, grid), field.frame, t1)


# --------------------------------------------------------------------------
# driver


class _Stepper:
    """Shared state and step selection for the Strang and Picard drivers."""

    def __init__(self, cfg: SolverConfig, initial: DistributionField):
        if initial.grid is not cfg.grid and initial.grid.to_dict() != cfg.grid.to_dict():
            raise ConfigError("initial field grid differs from config grid")
        self.cfg = cfg
        self.grid = cfg.grid
        self.params = cfg.params
        self.ref = cfg.reference if cfg.reference is not None else stationary_maxwellian(self.grid)
        self.refb = _to_batch(self.ref, self.grid)
        self.clock = CollisionClock(self.params, cfg.exponent)
        self.collider = _Collider(cfg, self.ref)

    def transport(self, dev: np.ndarray, t0: float, t1: float):
        if self.grid.homogeneous or t0 == t1:
            return dev.copy(), 0.0
        E = transport_matrix(self.params, t0, t1)
        return transport_deviation(dev, self.grid, E, method=self.cfg.remap,
                                   order=self.cfg.remap_order, reference=self.ref)

    def midpoint(self, t0: float, t1: float) -> float:
        """Midpoint in the transport clock."""
        p0 = transport_clock(self.params, 0.0, t0)
        p1 = transport_clock(self.params, 0.0, t1)
        return _transport_clock_to_time(self.params, 0.5 * (p0 + p1))

    def next_time(self, t: float, G: np.ndarray, stops: Sequence[float]) -> float:
        cfg = self.cfg
        if cfg.dt_fixed is not None:
            t1 = t + cfg.dt_fixed
        else:
            t1 = t + cfg.dt_max
            if cfg.dt_rel is not None:
                t1 = min(t1, t + cfg.dt_rel * math.sqrt(1.0 + t * t))
        for s in stops:
            if s > t * (1.0 + 1e-14) + 1e-14:
                t1 = min(t1, s)
                break
        nu = self.collider.nu_max(G)
        if nu > 0 and cfg.dt_fixed is None:
            S_lim = self.clock(t) + cfg.c_cfl / nu
            if S_lim < self.clock(t1):
                t1 = self.clock.inverse(S_lim, t)
        return t1

    def next_time_infinity(self, t: float, G: np.ndarray) -> float:
        """Steps beyond t_end advance the transport clock by at most inf_step."""
        cfg = self.cfg
        p0 = transport_clock(self.params, 0.0, t)
        t1 = _transport_clock_to_time(self.params, p0 + cfg.inf_step)
        nu = self.collider.nu_max(G)
        if nu > 0:
            S_lim = self.clock(t) + cfg.c_cfl / nu
            if S_lim < self.clock(t1):
                t1 = self.clock.inverse(S_lim, t)
        return t1


def _positivity(G: np.ndarray, cfg: SolverConfig, vol: float, meta: dict):
    """Logs negative values of the full field; ``clip`` zeroes them."""
    neg = G < 0.0
    if np.any(neg):
        meta["negative_nodes"] = meta.get("negative_nodes", 0) + int(np.count_nonzero(neg))
        meta["negative_mass"] = meta.get("negative_mass", 0.0) + float(-np.sum(G[neg]) * vol)
        if cfg.positivity == "clip":
            G = np.where(neg, 0.0, G)
    return G


def _conserved_basis(vpts: np.ndarray) -> np.ndarray:
    """(N_v, d + 2) columns 1, v_1..v_d, |v|^2."""
    return np.column_stack([np.ones(len(vpts)), vpts, np.sum(vpts * vpts, 1)])


def _exp_tilt(f, phi, target, tol, newton_iter):
    """lam with phi^T (f exp(phi lam)) = target by damped Newton, or None."""
    lam = np.zeros(phi.shape[1])
    with np.errstate(over="ignore", invalid="ignore"):
        for _ in range(newton_iter):
            w = f * np.exp(phi @ lam)
            r = phi.T @ w - target
            if not np.all(np.isfinite(r)):
                return None
            if np.all(np.abs(r) <= tol):
                return lam
            J = phi.T @ (w[:, None] * phi)
            step = np.linalg.lstsq(J, r, rcond=None)[0]
            # at most a factor e per node and iteration
            big = np.max(np.abs(phi @ step))
            if big > 1.0:
                step /= big
            lam -= step
    return None


def restore_positive(Gb: np.ndarray, vpts: np.ndarray, meta: dict | None = None,
                     newton_iter: int = 60, seed: float = 1e-3) -> np.ndarray:
    """Zeroes the negative values of a batch (N_v, N_x) and rescales each
    column by exp(lam . (1, v, |v|^2)) so that its mass, momentum and energy
    match the unclipped column.  The result conserves every moment of the
    form p(x) (1, v, |v|^2).

    When the clipped column has too little support to match the moments, a
    Gaussian of relative mass ``seed`` is added before the tilt.  Columns
    that still fail (no nonnegative grid function has their moments) are
    left unchanged and counted as ``unrestored``."""
    neg = Gb < 0.0
    if not np.any(neg):
        return Gb
    if meta is not None:
        meta["floored_nodes"] = meta.get("floored_nodes", 0) + int(np.count_nonzero(neg))
        meta["floored_mass"] = meta.get("floored_mass", 0.0) + float(-np.sum(Gb[neg]))
    phi = _conserved_basis(vpts)
    gauss = np.exp(-0.5 * phi[:, -1])
    gauss /= gauss.sum()
    out = Gb.copy()
    for j in np.nonzero(np.any(neg, axis=0))[0]:
        col = Gb[:, j]
        target = phi.T @ col
        tol = 1e-13 * (np.abs(phi).T @ np.abs(col))
        lam = None
        if target[0] > 0.0:
            f = np.maximum(col, 0.0)
            if np.any(f > 0):
                lam = _exp_tilt(f, phi, target, tol, newton_iter)
            if lam is None:
                f = f + seed * target[0] * gauss
                lam = _exp_tilt(f, phi, target, tol, newton_iter)
        if lam is not None:
            out[:, j] = f * np.exp(phi @ lam)
        elif meta is not None:
            meta["unrestored_columns"] = meta.get("unrestored_columns", 0) + 1
            meta["unrestored_mass"] = meta.get("unrestored_mass", 0.0) + float(np.sum(np.abs(col)))
    return out


def _homogeneous_moments(values, grid):
    v = grid.vgrid.points()
    f = values.reshape(-1) * grid.vgrid.weight
    return {"mass": float(f.sum()), "momentum": (v * f[:, None]).sum(0),
            "energy": float((np.sum(v * v, 1) * f).sum())}


def _diagnostics(stepper: _Stepper, G_values: np.ndarray, t: float, k1: np.ndarray | None) -> dict:
    cfg = stepper.cfg
    grid = stepper.grid
    fieldG = DistributionField(grid, G_values, "scaled", t)
    row = {"t": t}
    want = set(cfg.diagnostics)
    if "moments" in want:
        if grid.homogeneous:
            row.update(_homogeneous_moments(G_values, grid))
        else:
            m = conserved_moments(fieldG, t, "scaled", cfg.params)
            row.update({"mass": m.m0, "momentum": m.u0, "center": m.y0, "energy": m.a0,
                        "scalar_moment": m.b0, "inertial_moment": m.c0,
                        "angular_momentum": m.A0})
    floor = LOG_FLOOR_REL * float(np.max(G_values))
    clamped = int(np.count_nonzero(G_values < floor))
    row["clamped_nodes"] = clamped
    if "entropy" in want:
        Gc = np.maximum(G_values, floor)
        vol = grid.cell_volume
        term = Gc * (np.log(Gc) - np.log(stepper.ref)) - Gc + stepper.ref
        row["rel_entropy"] = float(np.sum(term) * vol)
    if "dissipation_scheme" in want and k1 is not None:
        Gc = np.maximum(_to_batch(G_values, grid), floor)
        lr = np.log(Gc) - np.log(stepper.refb)
        row["dissipation_scheme"] = float(-np.sum(k1 * lr) * grid.cell_volume)
    row["collision_rate"] = stepper.clock.rate(t)
    if "dissipation" in want:
        batch = _to_batch(G_values, grid)
        tot = 0.0
        for col in range(batch.shape[1]):
            val, _ = entropy_dissipation(cfg.kernel, grid.vgrid, batch[:, col],
                                         symmetric=cfg.symmetric, floor=floor,
                                         workers=cfg.workers)
            tot += val
        row["dissipation"] = tot * (1.0 if grid.homogeneous else grid.h_x ** grid.d)
    if cfg.norms is not None and not grid.homogeneous:
        dev = DistributionField(grid, G_values - stepper.ref, "scaled", t)
        row["q"] = q_weight(t, cfg.norms)
        row["p"] = p_weight(t, cfg.norms)
        if "energy_norm" in want:
            row["energy_norm"] = energy_norm(dev, t, cfg.norms)
        if "an_ma" in want:
            row["an_norm"] = an_norm(dev, t, cfg.norms)
            row["ma_norm"] = ma_norm(dev, t, cfg.norms)
    return row


def _stops(cfg: SolverConfig) -> list:
    stops = sorted({float(s) for s in cfg.snapshot_times if 0 < s < cfg.t_end} | {cfg.t_end})
    return stops


def run_simulation(cfg: SolverConfig, initial: DistributionField) -> TrajectoryRecord:
    """Strang-split solve from t = 0 to cfg.t_end (and to t = inf if requested)."""
    st = _Stepper(cfg, initial)
    grid = st.grid
    vol = grid.cell_volume
    rec = TrajectoryRecord()
    rec.initial = initial.copy()
    rec.meta.update({"steps": 0, "outflow": 0.0, "mode": cfg.mode, "exponent": cfg.exponent})
    vpts = grid.vgrid.points()
    G0 = np.asarray(initial.values, dtype=float)
    if not np.all(np.isfinite(G0)):
        raise ValueError("initial field is not finite")
    if np.min(G0) < 0:
        raise ValueError("initial field must be nonnegative")
    dev = G0 - st.ref  # deviation in (x..., v...) layout
    acc_T = np.zeros_like(dev)
    acc_Q = np.zeros_like(dev)
    stops = _stops(cfg)
    snaps = {float(s) for s in cfg.snapshot_times}
    t = 0.0
    step = 0
    last_good = G0.copy()
    phase_inf = False
    while True:
        Gb = _to_batch(st.ref + dev, grid)
        if not phase_inf:
            t1 = st.next_time(t, Gb, stops)
        else:
            t1 = st.next_time_infinity(t, Gb)
        tm = st.midpoint(t, t1)
        # transport to the midpoint
        d1, l1 = st.transport(dev, t, tm)
        # collision over [t, t1]
        dS = st.clock(t1) - st.clock(t)
        if cfg.mode == "full":
            y0 = _to_batch(st.ref + d1, grid)
            y1, k1, _ = _heun(lambda y, k: st.collider.full(y), y0, dS)
            if cfg.positivity == "floor":
                y1 = restore_positive(y1, vpts, rec.meta)
            dC = _from_batch(y1 - y0, grid)
        else:
            y0 = _to_batch(d1, grid)
            y1, k1, _ = _heun(lambda y, k: st.collider.perturbation(y), y0, dS)
            if cfg.positivity == "floor":
                y1 = restore_positive(st.refb + y1, vpts, rec.meta) - st.refb
            dC = _from_batch(y1 - y0, grid)
        d2 = d1 + dC
        d3, l2 = st.transport(d2, tm, t1)
        G_new = _positivity(st.ref + d3, cfg, vol, rec.meta)
        if cfg.positivity == "floor":
            G_new = _from_batch(restore_positive(_to_batch(G_new, grid), vpts, rec.meta), grid)
        d3 = G_new - st.ref
        if not np.all(np.isfinite(d3)):
            rec.final = DistributionField(grid, last_good, "scaled", t)
            raise SimulationAborted(f"non-finite field at t = {t1}", rec)
        # Duhamel bookkeeping: transport and collision increments telescope
        dT = (d1 - dev) + (d3 - d2)
        acc_T -= dT
        acc_Q += dC
        dp = transport_clock(cfg.params, t, t1)
        rec.rate_T.append(float(np.sum(np.abs(dT)) * vol / dp) if dp > 0 else 0.0)
        rec.rate_Q.append(float(np.sum(np.abs(dC)) * vol / dS) if dS > 0 else 0.0)
        rec.meta["outflow"] += (l1 + l2) * vol
        rec.steps.append((t, t1))
        # diagnostics belong to the state at the start of the step
        if step % cfg.record_every == 0 and not phase_inf:
            k1_diag = k1 if grid.homogeneous else None
            if grid.homogeneous or cfg.mode == "full":
                k1_diag = k1 if cfg.mode == "full" else None
            row = _diagnostics(st, st.ref + dev, t, k1_diag)
            rec.append(t, row)
            if cfg.keep_fields:
                rec.fields.append(st.ref + dev)
        dev = d3
        last_good = st.ref + dev
        t = t1
        step += 1
        if not phase_inf and t in snaps:
            rec.snapshots[t] = st.ref + dev
        if not phase_inf and t >= cfg.t_end * (1.0 - 1e-14):
            rec.final = DistributionField(grid, st.ref + dev, "scaled", t)
            rec.t_final = t
            final_row = _diagnostics(st, st.ref + dev, t, None)
            rec.append(t, final_row)
            if cfg.keep_fields:
                rec.fields.append(st.ref + dev)
            if not cfg.to_infinity:
                break
            phase_inf = True
            rec.meta["acc_T_finite"] = acc_T.copy()
            rec.meta["acc_Q_finite"] = acc_Q.copy()
            continue
        if phase_inf and math.isinf(t):
            rec.infinity = DistributionField(grid, st.ref + dev, "scaled", math.inf)
            break
    rec.meta["steps"] = step
    rec.meta["collision_evals"] = st.collider.evals
    rec.duhamel_T = acc_T
    rec.duhamel_Q = acc_Q
    if cfg.keep_fields and rec.fields:
        final = rec.final.values
        for r, f in zip(rec.rows, rec.fields):
            r["l1_dist_to_final"] = lp_distance(f, final, 1.0, vol)
    return rec


# --------------------------------------------------------------------------
# Picard iteration


def picard_solve(cfg: SolverConfig, initial: DistributionField) -> TrajectoryRecord:
    """Iterates d_t G^n + tau^-2 T G^n = rate (Q(G^(n-1), G^n) - Q(M, M)), G^0 = M.

    Every iterate is advanced with the Strang step sequence of ``cfg`` (fixed
    steps required).  In each Heun stage the first argument of Q is the
    corresponding stage value of the previous iterate, so the fixed point is
    the Strang solution of the full equation."""
    if cfg.dt_fixed is None:
        raise ConfigError("picard_solve needs dt_fixed so that all iterates share the steps")
    st = _Stepper(cfg, initial)
    grid = st.grid
    vol = grid.cell_volume
    vpts = grid.vgrid.points()
    n_steps = int(round(cfg.t_end / cfg.dt_fixed))
    times = [k * cfg.dt_fixed for k in range(n_steps)] + [cfg.t_end]
    G0 = np.asarray(initial.values, dtype=float)
    # previous iterate's stage values: G^0 = M for all t
    prev_X = [st.refb.copy() for _ in range(n_steps)]
    prev_P = [st.refb.copy() for _ in range(n_steps)]
    prev_traj = [st.ref.copy() for _ in range(n_steps + 1)]
    history = []
    rec = TrajectoryRecord()
    rec.initial = initial.copy()
    for it in range(1, cfg.picard_max_iter + 1):
        dev = G0 - st.ref
        traj = [st.ref + dev]
        Xs, Ps = [], []
        negatives = 0
        for k in range(n_steps):
            t, t1 = times[k], times[k + 1]
            tm = st.midpoint(t, t1)
            d1, _ = st.transport(dev, t, tm)
            y0 = _to_batch(st.ref + d1, grid)
            dS = st.clock(t1) - st.clock(t)
            frozen = (prev_X[k], prev_P[k])
            y1, _, yp = _heun(lambda y, s: st.collider.linear(frozen[s], y), y0, dS)
            Xs.append(y0)
            Ps.append(yp)
            negatives += int(np.count_nonzero(y1 < 0))
            if cfg.positivity == "floor":
                y1 = restore_positive(y1, vpts)
            d2 = _from_batch(y1, grid) - st.ref
            dev, _ = st.transport(d2, tm, t1)
            if cfg.positivity == "floor":
                G = restore_positive(_to_batch(st.ref + dev, grid), vpts)
                dev = _from_batch(G, grid) - st.ref
            traj.append(st.ref + dev)
        inc = max(lp_distance(a, b, 1.0, vol) for a, b in zip(traj, prev_traj))
        history.append({"iteration": it, "increment": inc, "negative_nodes": negatives})
        if len(history) > 1 and history[-2]["increment"] > 0:
            history[-1]["ratio"] = inc / history[-2]["increment"]
        prev_X, prev_P, prev_traj = Xs, Ps, traj
        log.info("picard iteration %d: increment %.3e", it, inc)
        if inc <= cfg.picard_tol:
            break
    else:
        raise PicardDivergence(f"no convergence after {cfg.picard_max_iter} iterations", history)
    for k, (t, G) in enumerate(zip(times, prev_traj)):
        rec.append(t, {"t": t, "mass": float(np.sum(G) * vol)})
    rec.final = DistributionField(grid, prev_traj[-1], "scaled", cfg.t_end)
    rec.t_final = cfg.t_end
    rec.meta["picard_history"] = history
    rec.meta["iterations"] = len(history)
    rec.fields = prev_traj
    return rec


# --------------------------------------------------------------------------
# scattering


def scattering_limit(record: TrajectoryRecord, params: MaxwellianParams | None = None,
                     exponent: float | None = None):
    """G_inf = G(0) - int tau^-2 T G ds + int rate Q(G, G) ds from the Duhamel
    accumulators, and a bound on || G(t_end) - G_inf ||_1.

    When the record was continued to t = inf the accumulators cover the whole
    half-line and the bound is the measured remainder integral.  Otherwise
    the remaining integrals are bounded by the largest recorded integrand
    norms times the remaining clocks int_t^inf tau^-2 <= C <t>^-1 and
    int_t^inf tau^-(d+gamma) <= C <t>^-(d+gamma-1)."""
    if record.duhamel_T is None or record.duhamel_Q is None or record.initial is None:
        raise ValueError("record carries no Duhamel accumulators")
    grid = record.initial.grid
    vol = grid.cell_volume
    G_inf = record.initial.values - record.duhamel_T + record.duhamel_Q
    t = record.t_final
    params = params or MaxwellianParams.standard(grid.d)
    exponent = exponent if exponent is not None else record.meta.get("exponent")
    if exponent is None:
        raise ValueError("collision exponent d + gamma needed")
    clock = CollisionClock(params, exponent)
    rem_T = transport_clock(params, t, math.inf)
    rem_Q = clock.remaining(t)
    nT = max(record.rate_T, default=0.0)
    nQ = max(record.rate_Q, default=0.0)
    bound = nT * rem_T + nQ * rem_Q
    if record.infinity is not None:
        measured = lp_distance(record.final.values, G_inf, 1.0, vol)
        return DistributionField(grid, G_inf, "scaled", math.inf), {
            "tail_bound": bound, "measured": measured, "complete": True}
    return DistributionField(grid, G_inf, "scaled", t), {
        "tail_bound": bound, "complete": False}


def fit_decay_rate(times, values, window=None, noise_floor: float = 1e-13) -> dict:
    """Least-squares slope of log(value) against log<t>.

    Returns slope, standard error, 95% band, number of points and an
    ``inconclusive`` flag when fewer than 3 points in the window stay above
    the noise floor or the window spans less than one decade of <t>."""
    t = np.asarray(times, dtype=float)
    y = np.asarray(values, dtype=float)
    mask = np.isfinite(t) & np.isfinite(y)
    if window is not None:
        mask &= (t >= window[0]) & (t <= window[1])
    mask &= y > noise_floor
    bt = np.sqrt(1.0 + t[mask] ** 2)
    out = {"n_points": int(mask.sum()), "window": list(window) if window is not None else None}
    if mask.sum() < 3 or np.log10(bt.max() / bt.min()) < 1.0 - 1e-9:
        out.update(slope=float("nan"), stderr=float("nan"), band=[float("nan")] * 2,
                   inconclusive=True)
        return out
    X = np.log(bt)
    Y = np.log(y[mask])
    A = np.vstack([X, np.ones_like(X)]).T
    coef, res, *_ = np.linalg.lstsq(A, Y, rcond=None)
    dof = max(len(X) - 2, 1)
    resid = Y - A @ coef
    s2 = float(resid @ resid) / dof
    cov = s2 * np.linalg.inv(A.T @ A)
    se = math.sqrt(max(cov[0, 0], 0.0))
    out.update(slope=float(coef[0]), intercept=float(coef[1]), stderr=se,
               band=[float(coef[0] - 1.96 * se), float(coef[0] + 1.96 * se)],
               inconclusive=False)
    return out
