"""Forward time integration of the damped Navier-Stokes-Voigt system.

The default scheme is first-order IMEX Euler: the Voigt mass, viscosity and
Darcy terms are implicit, convection and damping explicit.  Every linear
operator involved is diagonal in Fourier space, so each step is a pointwise
division by

    (1 + mu |k|^2) + dt (nu |k|^2 + alpha).

A Crank-Nicolson / Adams-Bashforth-2 variant (``scheme="cnab"``) is available
for accuracy studies; sensitivities are only provided for IMEX Euler.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass, field
from typing import Callable

import numpy as np

from .fields import (
    ModelParams,
    PeriodicGrid,
    PhysicalVelocityField,
    SpectralVelocityField,
)
from .operators import BaseState, nonlinear_term

__all__ = [
    "IntegrationError",
    "TimeGrid",
    "ControlSchedule",
    "Trajectory",
    "EnergyBalance",
    "step",
    "solve_forward",
    "energy_balance_residual",
    "SCHEMES",
]

log = logging.getLogger(__name__)

SCHEMES = ("imex-euler", "cnab")
DEFAULT_BLOWUP_BOUND = 1e8


class IntegrationError(RuntimeError):
    """Non-finite or runaway state; ``step`` is the failing step index."""

    def __init__(self, message: str, step: int):
        super().__init__(f"{message} (step {step})")
        self.step = step


@dataclass(frozen=True)
class TimeGrid:
    steps: int
    horizon: float

    def __post_init__(self):
        if int(self.steps) != self.steps or self.steps <= 0:
            raise ValueError(f"steps must be a positive integer, got {self.steps!r}")
        if not self.horizon > 0:
            raise ValueError(f"horizon must be positive, got {self.horizon!r}")
        object.__setattr__(self, "steps", int(self.steps))
        object.__setattr__(self, "horizon", float(self.horizon))

    @property
    def dt(self) -> float:
        return self.horizon / self.steps

    @property
    def times(self) -> np.ndarray:
        return np.arange(self.steps + 1) * self.dt

    def refine(self, factor: int = 2) -> "TimeGrid":
        return TimeGrid(self.steps * factor, self.horizon)


class ControlSchedule:
    """Piecewise-constant control: frame n acts on [t_n, t_{n+1}).

    ``frames`` has shape (steps, 3, n, n, n).  Schedules support the vector
    space operations the optimizer needs; the inner product is the
    dt-weighted grid quadrature, i.e. the discrete L2(0, T; L2) product.
    """

    __slots__ = ("time_grid", "grid", "frames")

    def __init__(self, time_grid: TimeGrid, grid: PeriodicGrid, frames: np.ndarray):
        frames = np.array(frames, dtype=np.float64)
        expected = (time_grid.steps, 3) + grid.shape
        if frames.shape != expected:
            raise ValueError(f"control frames have shape {frames.shape}, expected {expected}")
        if not np.all(np.isfinite(frames)):
            raise ValueError("control contains non-finite values")
        frames.setflags(write=False)
        self.time_grid = time_grid
        self.grid = grid
        self.frames = frames

    @classmethod
    def zeros(cls, time_grid: TimeGrid, grid: PeriodicGrid) -> "ControlSchedule":
        return cls(time_grid, grid, np.zeros((time_grid.steps, 3) + grid.shape))

    @classmethod
    def constant(cls, time_grid: TimeGrid, field: PhysicalVelocityField) -> "ControlSchedule":
        frames = np.broadcast_to(field.values, (time_grid.steps,) + field.values.shape)
        return cls(time_grid, field.grid, frames)

    def frame(self, n: int) -> PhysicalVelocityField:
        return PhysicalVelocityField(self.grid, self.frames[n])

    def like(self, frames: np.ndarray) -> "ControlSchedule":
        return ControlSchedule(self.time_grid, self.grid, frames)

    def refine(self, factor: int = 2) -> "ControlSchedule":
        """Same piecewise-constant function on a time grid `factor` times finer."""
        return ControlSchedule(
            self.time_grid.refine(factor), self.grid, np.repeat(self.frames, factor, axis=0)
        )

    def _check(self, other: "ControlSchedule"):
        if other.time_grid != self.time_grid:
            raise ValueError("control schedules live on different time grids")
        self.grid.check_same(other.grid)

    def inner(self, other: "ControlSchedule") -> float:
        self._check(other)
        return self.time_grid.dt * self.grid.cell_volume * float(np.sum(self.frames * other.frames))

    def norm(self) -> float:
        return float(np.sqrt(self.inner(self)))

    def __add__(self, other):
        self._check(other)
        return self.like(self.frames + other.frames)

    def __sub__(self, other):
        self._check(other)
        return self.like(self.frames - other.frames)

    def __mul__(self, scalar):
        return self.like(self.frames * float(scalar))

    __rmul__ = __mul__

    def __neg__(self):
        return self.like(-self.frames)


class Trajectory:
    """States u_0 .. u_N of a time integration, as retained coefficients.

    When built with checkpointing only every k-th state is kept and the
    others are recomputed segment by segment on access; the most recently
    recomputed segment is cached, so backward sweeps recompute each segment
    once.
    """

    def __init__(
        self,
        time_grid: TimeGrid,
        grid: PeriodicGrid,
        coeffs: dict[int, np.ndarray] | np.ndarray,
        scheme: str = "imex-euler",
        recompute: Callable[[int, np.ndarray, int], list[np.ndarray]] | None = None,
        checkpoint_every: int | None = None,
    ):
        self.time_grid = time_grid
        self.grid = grid
        self.scheme = scheme
        self._recompute = recompute
        self.checkpoint_every = checkpoint_every
        if isinstance(coeffs, np.ndarray):
            if coeffs.shape[0] != time_grid.steps + 1:
                raise ValueError("trajectory needs steps + 1 states")
            self._store = {n: coeffs[n] for n in range(coeffs.shape[0])}
        else:
            self._store = dict(coeffs)
        self._segment: dict[int, np.ndarray] = {}

    def __len__(self) -> int:
        return self.time_grid.steps + 1

    @property
    def is_checkpointed(self) -> bool:
        return self.checkpoint_every is not None

    def coeffs(self, n: int) -> np.ndarray:
        if n < 0:
            n += len(self)
        if not 0 <= n < len(self):
            raise IndexError(n)
        if n in self._store:
            return self._store[n]
        if n not in self._segment:
            k = self.checkpoint_every
            start = (n // k) * k
            stop = min(start + k, self.time_grid.steps)
            states = self._recompute(start, self._store[start], stop)
            self._segment = {start + i: s for i, s in enumerate(states)}
        return self._segment[n]

    def state(self, n: int) -> SpectralVelocityField:
        return SpectralVelocityField(self.grid, self.coeffs(n))

    @property
    def final(self) -> SpectralVelocityField:
        return self.state(self.time_grid.steps)

    def as_array(self) -> np.ndarray:
        return np.array([self.coeffs(n) for n in range(len(self))])


# ---------------------------------------------------------------- stepping


@dataclass
class _Stepper:
    """Diagonal operators of the scheme for one grid, parameter set and dt."""

    grid: PeriodicGrid
    params: ModelParams
    dt: float
    nonlinear: bool = True
    mass: np.ndarray = field(init=False)
    damp: np.ndarray = field(init=False)
    implicit: np.ndarray = field(init=False)

    def __post_init__(self):
        g, p = self.grid, self.params
        self.mass = 1.0 + p.mu * g.k2
        self.damp = p.nu * g.k2 + p.alpha
        self.implicit = self.mass + self.dt * self.damp

    def explicit(self, coeffs: np.ndarray, n: int, guard: float) -> np.ndarray:
        if not self.nonlinear:
            return np.zeros_like(coeffs)
        base = BaseState(self.grid, coeffs)
        _guard(base.values, n, guard)
        return nonlinear_term(base, self.params.beta, self.params.r)

    def forcing(self, frame: np.ndarray) -> np.ndarray:
        return self.grid.project(self.grid.forward(frame))

    def euler(self, coeffs, frame, n, guard):
        rhs = self.mass * coeffs + self.dt * (self.forcing(frame) - self.explicit(coeffs, n, guard))
        return rhs / self.implicit


def _guard(values: np.ndarray, n: int, bound: float) -> None:
    peak = np.max(np.abs(values))
    if not np.isfinite(peak):
        raise IntegrationError("non-finite velocity", n)
    if peak > bound:
        raise IntegrationError(f"velocity magnitude {peak:.3e} exceeds bound {bound:.3e}", n)


def step(
    u_n: SpectralVelocityField,
    U_n: PhysicalVelocityField,
    params: ModelParams,
    dt: float,
    nonlinear: bool = True,
    blowup_bound: float = DEFAULT_BLOWUP_BOUND,
) -> SpectralVelocityField:
    """One IMEX Euler step.  ``nonlinear=False`` drops convection and damping."""
    u_n.grid.check_same(U_n.grid)
    stepper = _Stepper(u_n.grid, params, dt, nonlinear)
    out = stepper.euler(u_n.coeffs, U_n.values, 0, blowup_bound)
    if not np.all(np.isfinite(out)):
        raise IntegrationError("non-finite velocity", 1)
    return SpectralVelocityField(u_n.grid, out)


def _ingest_initial(u0: SpectralVelocityField) -> np.ndarray:
    g = u0.grid
    return g.project(u0.coeffs * g.mask)


def _integrate(stepper, u0, frames, start, stop, scheme, guard):
    """States start..stop (inclusive) from u0 = state at `start`."""
    states = [u0]
    c = u0
    last = None
    half = 0.5 * stepper.dt * stepper.damp
    for n in range(start, stop):
        if scheme == "imex-euler":
            c = stepper.euler(c, frames[n], n, guard)
        else:
            # CN for the linear terms, AB2 for the explicit ones; Euler start.
            current = stepper.explicit(c, n, guard)
            forcing = stepper.forcing(frames[n])
            if last is None:
                c = (stepper.mass * c + stepper.dt * (forcing - current)) / stepper.implicit
            else:
                rhs = (stepper.mass - half) * c + stepper.dt * (
                    forcing - (1.5 * current - 0.5 * last)
                )
                c = rhs / (stepper.mass + half)
            last = current
        if not np.all(np.isfinite(c)):
            raise IntegrationError("non-finite velocity", n + 1)
        states.append(c)
    _guard(stepper.grid.inverse(c), stop, guard)
    return states


def solve_forward(
    u0: SpectralVelocityField,
    control: ControlSchedule,
    params: ModelParams,
    scheme: str = "imex-euler",
    checkpoint_every: int | None = None,
    blowup_bound: float = DEFAULT_BLOWUP_BOUND,
    nonlinear: bool = True,
) -> Trajectory:
    """Integrate from u0 (Leray-projected and truncated on ingestion) under `control`."""
    if scheme not in SCHEMES:
        raise ValueError(f"unknown scheme {scheme!r}; expected one of {SCHEMES}")
    u0.grid.check_same(control.grid)
    tg = control.time_grid
    if not np.isclose(tg.horizon, params.horizon, rtol=1e-12, atol=0.0):
        raise ValueError(
            f"control horizon {tg.horizon} differs from model horizon {params.horizon}"
        )
    stepper = _Stepper(u0.grid, params, tg.dt, nonlinear)
    c0 = _ingest_initial(u0)
    frames = control.frames

    if checkpoint_every is None:
        states = _integrate(stepper, c0, frames, 0, tg.steps, scheme, blowup_bound)
        return Trajectory(tg, u0.grid, np.array(states), scheme=scheme)

    if scheme != "imex-euler":
        raise ValueError("checkpointing is only supported for the imex-euler scheme")
    k = int(checkpoint_every)
    if k <= 0:
        raise ValueError("checkpoint_every must be positive")
    store = {0: c0}
    c = c0
    for start in range(0, tg.steps, k):
        stop = min(start + k, tg.steps)
        c = _integrate(stepper, c, frames, start, stop, scheme, blowup_bound)[-1]
        store[stop] = c

    def recompute(start, state, stop):
        return _integrate(stepper, state, frames, start, stop, scheme, blowup_bound)

    return Trajectory(tg, u0.grid, store, scheme, recompute=recompute, checkpoint_every=k)


# ---------------------------------------------------------------- energy


@dataclass(frozen=True)
class EnergyBalance:
    """Per-step energy diagnostics of a forward run.

    ``continuous`` is the residual of the continuous energy identity with the
    time derivative replaced by a forward difference (first order in dt).
    ``scheme`` is the residual of the identity obtained by testing the IMEX
    Euler update against u_{n+1}; it vanishes up to roundoff and
    ``scheme_relative`` scales it by the size of the individual terms.  Both
    are NaN for CNAB runs, which have no such identity.
    """

    energy: np.ndarray
    l2_sq: np.ndarray
    v_sq: np.ndarray
    lr_power: np.ndarray
    continuous: np.ndarray
    scheme: np.ndarray
    scheme_relative: np.ndarray

    @property
    def max_continuous(self) -> float:
        return float(np.max(np.abs(self.continuous))) if self.continuous.size else 0.0

    @property
    def max_scheme_relative(self) -> float:
        return float(np.max(np.abs(self.scheme_relative))) if self.scheme_relative.size else 0.0


def energy_balance_residual(
    traj: Trajectory, control: ControlSchedule, params: ModelParams
) -> EnergyBalance:
    if traj.time_grid != control.time_grid:
        raise ValueError("trajectory and control use different time grids")
    traj.grid.check_same(control.grid)
    exact = traj.scheme == "imex-euler"
    g = traj.grid
    N, dt = traj.time_grid.steps, traj.time_grid.dt
    stepper = _Stepper(g, params, dt)
    r, beta = params.r, params.beta

    l2 = np.empty(N + 1)
    vsq = np.empty(N + 1)
    lr = np.empty(N + 1)
    for n in range(N + 1):
        c = traj.coeffs(n)
        l2[n] = g.inner(c, c)
        vsq[n] = g.inner(c, g.k2 * c)
        vals = g.inverse(c)
        lr[n] = g.cell_volume * float(np.sum(np.sum(vals**2, axis=0) ** ((r + 1.0) / 2.0)))
    energy = 0.5 * (l2 + params.mu * vsq)

    cont = np.empty(N)
    sch = np.empty(N)
    rel = np.empty(N)
    for n in range(N):
        c, c1 = traj.coeffs(n), traj.coeffs(n + 1)
        vals = g.inverse(c)
        power = g.quadrature(control.frames[n], vals)
        cont[n] = (
            (energy[n + 1] - energy[n]) / dt
            + params.nu * vsq[n]
            + params.alpha * l2[n]
            + beta * lr[n]
            - power
        )
        if not exact:
            sch[n] = rel[n] = np.nan
            continue
        forcing = stepper.forcing(control.frames[n])
        explicit = nonlinear_term(BaseState(g, c), beta, r)
        d = c1 - c
        terms = np.array(
            [
                energy[n + 1] - energy[n],
                0.5 * g.inner(d, stepper.mass * d),
                dt * (params.nu * vsq[n + 1] + params.alpha * l2[n + 1]),
                -dt * g.inner(forcing, c1),
                dt * g.inner(explicit, c1),
            ]
        )
        sch[n] = terms.sum()
        scale = np.sum(np.abs(terms))
        rel[n] = sch[n] / scale if scale > 0 else 0.0
    return EnergyBalance(energy, l2, vsq, lr, cont, sch, rel)
