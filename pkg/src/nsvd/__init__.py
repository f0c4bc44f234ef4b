"""Pseudo-spectral damped Navier-Stokes-Voigt solver with adjoint-based optimal control."""

from .control import (
    BoxConstraints,
    CostConfig,
    OptimizerConfig,
    evaluate_cost,
    optimize,
    project_box,
    reduced_gradient,
    vi_residual,
)
from .fields import ModelParams, PeriodicGrid, PhysicalVelocityField, SpectralVelocityField, random_field
from .sensitivity import TargetField, solve_adjoint, solve_linearized
from .state import ControlSchedule, TimeGrid, Trajectory, solve_forward

__version__ = "0.1.0"

__all__ = [
    "BoxConstraints",
    "ControlSchedule",
    "CostConfig",
    "ModelParams",
    "OptimizerConfig",
    "PeriodicGrid",
    "PhysicalVelocityField",
    "SpectralVelocityField",
    "TargetField",
    "TimeGrid",
    "Trajectory",
    "evaluate_cost",
    "optimize",
    "project_box",
    "random_field",
    "reduced_gradient",
    "solve_adjoint",
    "solve_forward",
    "solve_linearized",
    "vi_residual",
]
