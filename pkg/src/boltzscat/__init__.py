"""Traveling Maxwellians, the non-cutoff Boltzmann collision operator and a
solver for the scaled kinetic equation in dimensions 2 and 3."""

from .maxwellian_core import (ConservedMoments, MaxwellianParams, evaluate, moments_of_params,
                              params_from_moments)
from .collision_kernel import CollisionKernel, VelocityGrid, eval_Q_eta_direct
from .phase_field import DistributionField, NormConfig, PhaseGrid
from .transform_pipeline import FrameMap, map_point, inverse_map_point, regime_classify
from .ssbe_solver import SolverConfig, TrajectoryRecord, run_simulation, picard_solve

__version__ = "0.1.0"

__all__ = [
    "ConservedMoments",
    "MaxwellianParams",
    "evaluate",
    "moments_of_params",
    "params_from_moments",
    "CollisionKernel",
    "VelocityGrid",
    "eval_Q_eta_direct",
    "DistributionField",
    "NormConfig",
    "PhaseGrid",
    "FrameMap",
    "map_point",
    "inverse_map_point",
    "regime_classify",
    "SolverConfig",
    "TrajectoryRecord",
    "run_simulation",
    "picard_solve",
]
