"""Tangent, adjoint and second-order adjoint sweeps for the IMEX Euler scheme.

Everything here is discretize-then-optimize: the tangent sweep is the exact
Jacobian of the forward step, and the adjoint sweep is its algebraic transpose
in the L2 inner product.  Writing the forward step as

    M u_{n+1} = S u_n + dt (Q U_n - N(u_n)),   S = 1 + mu|k|^2,  M = S + dt(nu|k|^2 + alpha),

with Q the truncate-and-project map applied to the raw control, the costate
satisfies phi_N = 0 and

    M phi_n = S phi_{n+1} - dt N'(u_n)^* phi_{n+1} + kappa dt |k|^2 (u_n - ud_n),

a backward IMEX Euler step for the continuous adjoint equation.  The control
on [t_n, t_{n+1}) is paired with phi_{n+1}; the gradient of the reduced cost in
the dt-weighted L2 product is phi_{n+1} + lambda U_n.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .fields import ModelParams, PeriodicGrid, SpectralVelocityField
from .operators import BaseState, adjoint_term, second_order_term, tangent_term
from .state import (
    DEFAULT_BLOWUP_BOUND,
    ControlSchedule,
    IntegrationError,
    TimeGrid,
    Trajectory,
    _Stepper,
)

__all__ = [
    "TargetField",
    "AdjointTrajectory",
    "solve_linearized",
    "solve_adjoint",
    "solve_second_adjoint",
    "duality_check",
    "DualityResult",
]


class TargetField:
    """Desired velocity u_d at the time nodes 0..N, truncated and Leray-projected on ingestion."""

    def __init__(self, time_grid: TimeGrid, grid: PeriodicGrid, frames: np.ndarray):
        frames = np.asarray(frames, dtype=np.complex128)
        expected = (time_grid.steps + 1, 3) + grid.spectral_shape
        if frames.shape != expected:
            raise ValueError(f"target frames have shape {frames.shape}, expected {expected}")
        frames = grid.project(frames * grid.mask)
        frames.setflags(write=False)
        self.time_grid = time_grid
        self.grid = grid
        self.frames = frames

    @classmethod
    def zeros(cls, time_grid: TimeGrid, grid: PeriodicGrid) -> "TargetField":
        return cls(time_grid, grid, np.zeros((time_grid.steps + 1, 3) + grid.spectral_shape))

    @classmethod
    def constant(cls, time_grid: TimeGrid, field: SpectralVelocityField) -> "TargetField":
        frames = np.broadcast_to(field.coeffs, (time_grid.steps + 1,) + field.coeffs.shape)
        return cls(time_grid, field.grid, frames)

    @classmethod
    def from_trajectory(cls, traj: Trajectory) -> "TargetField":
        return cls(traj.time_grid, traj.grid, traj.as_array())

    def state(self, n: int) -> SpectralVelocityField:
        return SpectralVelocityField(self.grid, self.frames[n])


@dataclass(frozen=True)
class AdjointTrajectory:
    """Costates phi_0 .. phi_N as retained coefficients; phi_N is zero."""

    time_grid: TimeGrid
    grid: PeriodicGrid
    costates: np.ndarray

    def coeffs(self, n: int) -> np.ndarray:
        return self.costates[n]

    def state(self, n: int) -> SpectralVelocityField:
        return SpectralVelocityField(self.grid, self.costates[n])

    def control_pairing(self) -> np.ndarray:
        """Physical costate paired with each control frame: phi_{n+1}, shape (N, 3, n, n, n)."""
        return self.grid.inverse(self.costates[1:])


def _require_euler(base: Trajectory):
    if base.scheme != "imex-euler":
        raise ValueError("sensitivities are only available for imex-euler trajectories")


def _check_finite(c: np.ndarray, n: int, bound: float, grid: PeriodicGrid):
    if not np.all(np.isfinite(c)):
        raise IntegrationError("non-finite sensitivity", n)
    peak = np.max(np.abs(grid.inverse(c)))
    if peak > bound:
        raise IntegrationError(f"sensitivity magnitude {peak:.3e} exceeds bound {bound:.3e}", n)


def solve_linearized(
    base: Trajectory,
    V: ControlSchedule,
    params: ModelParams,
    blowup_bound: float = DEFAULT_BLOWUP_BOUND,
) -> Trajectory:
    """Tangent trajectory w = S'(U) V with w_0 = 0."""
    _require_euler(base)
    if V.time_grid != base.time_grid:
        raise ValueError("direction and base trajectory use different time grids")
    base.grid.check_same(V.grid)
    g, tg = base.grid, base.time_grid
    st = _Stepper(g, params, tg.dt)
    beta, r = params.beta, params.r
    w = np.zeros((tg.steps + 1, 3) + g.spectral_shape, dtype=np.complex128)
    for n in range(tg.steps):
        bs = BaseState(g, base.coeffs(n))
        rhs = st.mass * w[n] + tg.dt * (st.forcing(V.frames[n]) - tangent_term(bs, w[n], beta, r))
        w[n + 1] = rhs / st.implicit
        _check_finite(w[n + 1], n + 1, blowup_bound, g)
    return Trajectory(tg, g, w)


def _misfit(base: Trajectory, target: TargetField, n: int) -> np.ndarray:
    return base.coeffs(n) - target.frames[n]


def solve_adjoint(
    base: Trajectory,
    target: TargetField,
    params: ModelParams,
    kappa: float,
    blowup_bound: float = DEFAULT_BLOWUP_BOUND,
    corrupt: bool = False,
) -> AdjointTrajectory:
    """Backward costate sweep; ``corrupt`` flips one transpose term for mutation tests."""
    _require_euler(base)
    if target.time_grid != base.time_grid:
        raise ValueError("target and trajectory use different time grids")
    base.grid.check_same(target.grid)
    g, tg = base.grid, base.time_grid
    st = _Stepper(g, params, tg.dt)
    beta, r, dt = params.beta, params.r, tg.dt
    sign = -1.0 if corrupt else 1.0
    phi = np.zeros((tg.steps + 1, 3) + g.spectral_shape, dtype=np.complex128)
    for n in range(tg.steps - 1, -1, -1):
        bs = BaseState(g, base.coeffs(n))
        rhs = (
            st.mass * phi[n + 1]
            - dt * adjoint_term(bs, phi[n + 1], beta, r, sign=sign)
            + kappa * dt * g.k2 * _misfit(base, target, n)
        )
        phi[n] = rhs / st.implicit
        _check_finite(phi[n], n, blowup_bound, g)
    return AdjointTrajectory(tg, g, phi)


def solve_second_adjoint(
    base: Trajectory,
    adjoint: AdjointTrajectory,
    w: Trajectory,
    params: ModelParams,
    kappa: float,
    blowup_bound: float = DEFAULT_BLOWUP_BOUND,
) -> AdjointTrajectory:
    """Directional derivative phi'[V] of the costate, given the tangent w = S'(U) V."""
    if params.r < 2:
        raise ValueError(f"second-order adjoint requires r >= 2, got r = {params.r!r}")
    _require_euler(base)
    g, tg = base.grid, base.time_grid
    st = _Stepper(g, params, tg.dt)
    beta, r, dt = params.beta, params.r, tg.dt
    out = np.zeros_like(adjoint.costates)
    for n in range(tg.steps - 1, -1, -1):
        bs = BaseState(g, base.coeffs(n))
        wn = w.coeffs(n)
        rhs = (
            st.mass * out[n + 1]
            - dt * adjoint_term(bs, out[n + 1], beta, r)
            - dt * second_order_term(bs, wn, adjoint.costates[n + 1], beta, r)
            + kappa * dt * g.k2 * wn
        )
        out[n] = rhs / st.implicit
        _check_finite(out[n], n, blowup_bound, g)
    return AdjointTrajectory(tg, g, out)


@dataclass(frozen=True)
class DualityResult:
    lhs: float
    rhs: float
    rel_err: float


def tracking_pairing(w: Trajectory, base: Trajectory, target: TargetField, kappa: float) -> float:
    """kappa * sum_{n<N} dt (grad w_n, grad(u_n - ud_n))."""
    g, tg = base.grid, base.time_grid
    total = 0.0
    for n in range(tg.steps):
        total += g.inner(w.coeffs(n), g.k2 * _misfit(base, target, n))
    return kappa * tg.dt * total


def control_pairing(adjoint: AdjointTrajectory, V: ControlSchedule) -> float:
    """sum_{n<N} dt (phi_{n+1}, V_n) with the physical costate."""
    phys = adjoint.control_pairing()
    return V.time_grid.dt * V.grid.cell_volume * float(np.sum(phys * V.frames))


def duality_check(
    base: Trajectory,
    V: ControlSchedule,
    target: TargetField,
    params: ModelParams,
    kappa: float,
    corrupt: bool = False,
) -> DualityResult:
    """Compare the tangent-side and adjoint-side values of the cost derivative."""
    w = solve_linearized(base, V, params)
    phi = solve_adjoint(base, target, params, kappa, corrupt=corrupt)
    lhs = tracking_pairing(w, base, target, kappa)
    rhs = control_pairing(phi, V)
    scale = max(abs(lhs), abs(rhs))
    rel = abs(lhs - rhs) / scale if scale > 0 else 0.0
    return DualityResult(lhs, rhs, rel)
