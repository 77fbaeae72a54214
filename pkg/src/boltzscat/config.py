"""Run configuration: one JSON file with the sections
{kernel, grid, params, solver, scenario, output}.

    {
      "kernel":   {"gamma": -0.5, "s": 0.25, "K": 1.0, "eta": 0.05, "d": 2},
      "grid":     {"d": 2, "n_v": 16, "L_v": 6.0, "n_x": 16, "L_x": 6.0},
      "params":   {"a": 1, "b": 0, "c": 1, "A": [0, 0, 0, 0]},
      "solver":   {"t_end": 50, "dt_max": 2.0, "dt_rel": 0.5, "mode": "full", ...},
      "scenario": {"name": "simulate", "initial": {"kind": "bump", ...}},
      "output":   {"csv": "diagnostics.csv", "summary": "summary.json", "snapshots": false}
    }

Every key is optional except ``scenario.name``; defaults are listed in
``DEFAULTS``.  Unknown keys raise ``ConfigError`` so that typos do not pass
silently.
"""

from __future__ import annotations

import copy
import json
import math
from pathlib import Path

import numpy as np

from .collision_kernel import CollisionKernel, VelocityGrid
from .maxwellian_core import MaxwellianParams
from .phase_field import NormConfig, PhaseGrid, energy_norm, DistributionField
from .ssbe_solver import ConfigError, SolverConfig, stationary_maxwellian

__all__ = [
    "SCHEMA_VERSION",
    "SCENARIOS",
    "DEFAULTS",
    "load_config",
    "merge_defaults",
    "build_kernel",
    "build_grid",
    "build_params",
    "build_norms",
    "build_solver",
    "build_initial",
]

SCHEMA_VERSION = 1

SCENARIOS = ("classify", "pipeline-check", "collide-homogeneous", "simulate", "scatter-rate",
             "norms", "picard-check")

DEFAULTS = {
    "kernel": {"gamma": -0.5, "s": 0.25, "K": 1.0, "eta": 0.05, "d": 2, "panel_nodes": 2,
               "panel_ratio": 2.0, "n_azimuth": 12},
    "grid": {"d": 2, "n_v": 16, "L_v": 6.0, "n_x": 16, "L_x": 6.0},
    "params": None,
    "solver": {"t_end": 50.0, "dt_max": 2.0, "dt_rel": 0.5, "dt_fixed": None, "c_cfl": 0.5,
               "scheme": "strang", "mode": "full", "form": "adjoint", "symmetric": False,
               "remap": "spectral", "remap_order": 10, "positivity": "floor",
               "picard_max_iter": 30, "picard_tol": 1e-12, "to_infinity": False,
               "inf_step": 0.05, "record_every": 1, "keep_fields": False,
               "diagnostics": ["moments", "entropy", "dissipation_scheme"],
               "norms": None, "workers": 1},
    "scenario": {"name": None, "initial": {"kind": "maxwellian"}},
    "output": {"csv": "diagnostics.csv", "summary": "summary.json", "snapshots": False},
}

_NORM_KEYS = ("N", "m_w", "delta", "order")


def merge_defaults(cfg: dict) -> dict:
    out = copy.deepcopy(DEFAULTS)
    for section, val in cfg.items():
        if section not in DEFAULTS:
            raise ConfigError(f"unknown config section '{section}'")
        if section == "params" or val is None:
            out[section] = val
            continue
        if not isinstance(val, dict):
            raise ConfigError(f"section '{section}' must be an object")
        if section in ("kernel", "grid", "solver", "output"):
            unknown = set(val) - set(DEFAULTS[section])
            if unknown:
                raise ConfigError(f"unknown keys in '{section}': {sorted(unknown)}")
        out[section].update(val)
    name = out["scenario"].get("name")
    if name is not None and name not in SCENARIOS:
        raise ConfigError(f"unknown scenario '{name}'")
    return out


def load_config(path) -> dict:
    try:
        data = json.loads(Path(path).read_text())
    except json.JSONDecodeError as exc:
        raise ConfigError(f"config is not valid JSON: {exc}") from exc
    if not isinstance(data, dict):
        raise ConfigError("config must be a JSON object")
    return merge_defaults(data)


def build_kernel(cfg: dict) -> CollisionKernel:
    try:
        return CollisionKernel.from_dict(cfg["kernel"])
    except ValueError as exc:
        raise ConfigError(str(exc)) from exc


def build_grid(cfg: dict) -> PhaseGrid:
    g = cfg["grid"]
    d = int(g["d"])
    if d != int(cfg["kernel"]["d"]):
        raise ConfigError("grid.d and kernel.d differ")
    try:
        vg = VelocityGrid(d, int(g["n_v"]), float(g["L_v"]))
        return PhaseGrid(d, int(g["n_x"]), float(g["L_x"]), vg)
    except ValueError as exc:
        raise ConfigError(str(exc)) from exc


def build_params(cfg: dict) -> MaxwellianParams:
    d = int(cfg["grid"]["d"])
    p = cfg.get("params")
    if p is None:
        return MaxwellianParams.standard(d)
    p = dict(p)
    p.setdefault("d", d)
    try:
        return MaxwellianParams.from_dict(p)
    except ValueError as exc:
        raise ConfigError(str(exc)) from exc


def build_norms(cfg: dict) -> NormConfig | None:
    n = cfg["solver"].get("norms")
    if n is None:
        return None
    unknown = set(n) - set(_NORM_KEYS)
    if unknown:
        raise ConfigError(f"unknown keys in 'solver.norms': {sorted(unknown)}")
    k = cfg["kernel"]
    try:
        return NormConfig(s=float(k["s"]), gamma=float(k["gamma"]), d=int(k["d"]),
                          **{key: n[key] for key in _NORM_KEYS if key in n})
    except ValueError as exc:
        raise ConfigError(str(exc)) from exc


def build_solver(cfg: dict, workers: int | None = None, snapshot_times=None) -> SolverConfig:
    """SolverConfig from the kernel, grid, params and solver sections.  The
    weak-regime check runs here, before any compute."""
    kernel = build_kernel(cfg)
    grid = build_grid(cfg)
    params = build_params(cfg)
    s = dict(cfg["solver"])
    s.pop("norms", None)
    if workers is not None:
        s["workers"] = int(workers)
    s["diagnostics"] = tuple(s.get("diagnostics") or ())
    s["snapshot_times"] = tuple(snapshot_times or ())
    return SolverConfig(kernel=kernel, grid=grid, params=params, norms=build_norms(cfg), **s)


# --------------------------------------------------------------------------
# initial data


def _gaussian(z, center, width):
    """Normalized isotropic Gaussian in len(center) variables."""
    k = len(center)
    r2 = np.sum((z - np.asarray(center, dtype=float)) ** 2, -1)
    return np.exp(-0.5 * r2 / width ** 2) / (2 * np.pi * width ** 2) ** (k / 2)


def _phase_z(grid: PhaseGrid):
    x, v = grid.points()
    if grid.homogeneous:
        return v
    return np.concatenate([x, v], -1)


def build_initial(cfg: dict, grid: PhaseGrid, rng: np.random.Generator) -> DistributionField:
    """Initial field in the scaled frame.

    kinds: maxwellian (the stationary state), bump (M plus a Gaussian of
    mass ``amplitude`` at ``center`` with ``width``; ``center: "random"``
    draws it from the seeded generator), modulated (M (1 + amplitude
    cos(k . z)), |amplitude| < 1), corner_mixture (homogeneous: 2^d
    Gaussians at (+-a, ..., +-a) with variance 1 - a^2, unit mass, zero
    mean, unit temperature), two_temperature (homogeneous radial mixture).
    ``energy_norm_target`` rescales the deviation from M so that its
    squared truncated energy norm at t = 0 equals the target."""
    ini = dict(cfg["scenario"].get("initial") or {"kind": "maxwellian"})
    kind = ini.get("kind", "maxwellian")
    d = grid.d
    M = stationary_maxwellian(grid)
    z = _phase_z(grid)
    nz = z.shape[-1]
    if kind == "maxwellian":
        vals = M.copy()
    elif kind == "bump":
        center = ini.get("center", [0.0] * nz)
        if isinstance(center, str):
            if center != "random":
                raise ConfigError("bump center must be a list or 'random'")
            center = rng.uniform(-1.0, 1.0, nz)
        if len(center) != nz:
            raise ConfigError(f"bump center needs {nz} entries")
        amp = float(ini.get("amplitude", 0.05))
        if amp < 0:
            raise ConfigError("bump amplitude must be nonnegative")
        vals = M + amp * _gaussian(z, center, float(ini.get("width", 0.7)))
    elif kind == "modulated":
        amp = float(ini.get("amplitude", 0.05))
        if not abs(amp) < 1.0:
            raise ConfigError("modulation amplitude must satisfy |amplitude| < 1")
        kvec = np.asarray(ini.get("wavevector", [0.0] * (nz - 1) + [1.0]), dtype=float)
        if kvec.size != nz:
            raise ConfigError(f"wavevector needs {nz} entries")
        vals = M * (1.0 + amp * np.cos(z @ kvec))
    elif kind == "corner_mixture":
        if not grid.homogeneous:
            raise ConfigError("corner_mixture is a homogeneous initial state")
        a = float(ini.get("offset", math.sqrt(0.5)))
        if not 0.0 <= a < 1.0:
            raise ConfigError("offset must lie in [0, 1)")
        var = 1.0 - a * a
        corners = np.array(np.meshgrid(*[[-1.0, 1.0]] * d, indexing="ij")).reshape(d, -1).T
        vals = sum(_gaussian(z, a * c, math.sqrt(var)) for c in corners) / len(corners)
    elif kind == "two_temperature":
        if not grid.homogeneous:
            raise ConfigError("two_temperature is a homogeneous initial state")
        T1 = float(ini.get("T1", 0.5))
        T2 = 2.0 - T1
        if not 0.0 < T1 < 2.0:
            raise ConfigError("T1 must lie in (0, 2)")
        zero = [0.0] * d
        vals = 0.5 * (_gaussian(z, zero, math.sqrt(T1)) + _gaussian(z, zero, math.sqrt(T2)))
    else:
        raise ConfigError(f"unknown initial kind '{kind}'")
    vals = np.asarray(vals, dtype=float).reshape(grid.shape)
    target = ini.get("energy_norm_target")
    if target is not None:
        norms = build_norms(cfg) or NormConfig(s=float(cfg["kernel"]["s"]),
                                               gamma=float(cfg["kernel"]["gamma"]), d=d)
        dev = vals - M
        cur = energy_norm(DistributionField(grid, dev), 0.0, norms)
        if cur <= 0:
            raise ConfigError("energy_norm_target needs a non-Maxwellian initial kind")
        vals = M + dev * math.sqrt(float(target) / cur)
    if np.min(vals) < 0:
        raise ConfigError("initial field is negative somewhere")
    return DistributionField(grid, vals, "scaled", 0.0)
