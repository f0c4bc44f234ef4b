"""Reduced cost, gradient, box projection, projected-gradient optimizer and optimality diagnostics.

The reduced cost on the discrete level is

    J(U) = kappa/2 sum_{n<N} dt ||grad(u_n - ud_n)||^2 + lambda/2 sum_{n<N} dt ||U_n||^2,

with u = S(U) the IMEX Euler trajectory.  Controls live in raw (not
Leray-projected) physical space: clipping happens there and the gradient
phi_{n+1} + lambda U_n is taken in the dt-weighted grid L2 product.
"""

from __future__ import annotations

import enum
import logging
import math
from dataclasses import dataclass, field

import numpy as np

from .fields import ModelParams, PeriodicGrid, SpectralVelocityField
from .sensitivity import (
    AdjointTrajectory,
    TargetField,
    solve_adjoint,
    solve_linearized,
    solve_second_adjoint,
)
from .state import DEFAULT_BLOWUP_BOUND, ControlSchedule, IntegrationError, Trajectory, solve_forward

__all__ = [
    "CostConfig",
    "BoxConstraints",
    "OptimizerConfig",
    "IterationRecord",
    "OptimalityReport",
    "ReducedProblem",
    "Evaluation",
    "evaluate_cost",
    "reduced_gradient",
    "project_box",
    "vi_residual",
    "optimize",
    "BangBang",
    "bang_bang_classify",
    "bang_bang_consistency",
    "hessian_vector",
    "critical_cone_project",
    "in_critical_cone",
    "SecondOrderReport",
    "second_order_check",
    "GlobalConstants",
    "GlobalDiagnostic",
    "global_optimality_diagnostic",
]

log = logging.getLogger(__name__)


@dataclass(frozen=True)
class CostConfig:
    kappa: float
    lam: float
    target: TargetField

    def __post_init__(self):
        if self.kappa < 0 or self.lam < 0:
            raise ValueError("cost weights kappa and lambda must be non-negative")
        if self.kappa == 0 and self.lam == 0:
            raise ValueError("cost weights kappa and lambda cannot both be zero")


class BoxConstraints:
    """Pointwise bounds u_min <= U <= u_max, scalars or arrays broadcastable to the control frames."""

    def __init__(self, u_min, u_max):
        lo = np.asarray(u_min, dtype=float)
        hi = np.asarray(u_max, dtype=float)
        if np.any(np.isnan(lo)) or np.any(np.isnan(hi)):
            raise ValueError("box bounds must not be NaN")
        if np.any(lo > hi):
            raise ValueError("box constraints require u_min <= u_max everywhere")
        self.u_min = lo
        self.u_max = hi

    @classmethod
    def unbounded(cls) -> "BoxConstraints":
        return cls(-np.inf, np.inf)

    def clip(self, frames: np.ndarray) -> np.ndarray:
        return np.minimum(self.u_max, np.maximum(self.u_min, frames))

    def contains(self, control: ControlSchedule, tol: float = 0.0) -> bool:
        f = control.frames
        return bool(np.all(f >= self.u_min - tol) and np.all(f <= self.u_max + tol))

    def lower(self, shape) -> np.ndarray:
        return np.broadcast_to(self.u_min, shape)

    def upper(self, shape) -> np.ndarray:
        return np.broadcast_to(self.u_max, shape)

    def width_scale(self) -> float:
        """Typical finite box width, used to scale activity tolerances (1.0 if unbounded)."""
        w = np.broadcast_to(self.u_max - self.u_min, np.broadcast_shapes(self.u_min.shape, self.u_max.shape))
        w = w[np.isfinite(w)]
        return float(np.max(w)) if w.size and np.max(w) > 0 else 1.0


@dataclass(frozen=True)
class OptimizerConfig:
    """Projected gradient settings.

    The first trial step of each iteration is a Barzilai-Borwein step when
    ``bb_steps`` is set and the previous step provides curvature information,
    otherwise ``step0``.  Backtracking multiplies the step by ``shrink`` at most
    ``max_shrinks`` times.
    """

    max_iters: int = 100
    step0: float = 1.0
    armijo_c: float = 1e-4
    shrink: float = 0.5
    tol_vi: float = 1e-8
    max_shrinks: int = 30
    bb_steps: bool = True
    step_max: float = 1e8

    def __post_init__(self):
        if int(self.max_iters) != self.max_iters or self.max_iters < 0:
            raise ValueError("max_iters must be a non-negative integer")
        if not self.step0 > 0:
            raise ValueError("step0 must be positive")
        if not 0 < self.armijo_c < 1:
            raise ValueError("armijo_c must lie in (0, 1)")
        if not 0 < self.shrink < 1:
            raise ValueError("shrink must lie in (0, 1)")
        if not self.tol_vi >= 0:
            raise ValueError("tol_vi must be non-negative")
        if int(self.max_shrinks) != self.max_shrinks or self.max_shrinks < 1:
            raise ValueError("max_shrinks must be a positive integer")
        if not self.step_max >= self.step0:
            raise ValueError("step_max must be at least step0")


# ---------------------------------------------------------------- cost and gradient


def _tracking(traj: Trajectory, target: TargetField) -> float:
    g, tg = traj.grid, traj.time_grid
    total = 0.0
    for n in range(tg.steps):
        d = traj.coeffs(n) - target.frames[n]
        total += g.inner(d, g.k2 * d)
    return tg.dt * total


def evaluate_cost(traj: Trajectory, control: ControlSchedule, cost: CostConfig) -> float:
    """J on a computed trajectory, left-endpoint in time."""
    if traj.time_grid != control.time_grid or traj.time_grid != cost.target.time_grid:
        raise ValueError("trajectory, control and target use different time grids")
    traj.grid.check_same(control.grid)
    traj.grid.check_same(cost.target.grid)
    return 0.5 * cost.kappa * _tracking(traj, cost.target) + 0.5 * cost.lam * control.inner(control)


@dataclass(frozen=True)
class Evaluation:
    control: ControlSchedule
    cost: float
    trajectory: Trajectory
    adjoint: AdjointTrajectory | None = None
    gradient: ControlSchedule | None = None


class ReducedProblem:
    """Control-to-cost map U -> J(S(U)) with its first and second derivatives."""

    def __init__(
        self,
        u0: SpectralVelocityField,
        params: ModelParams,
        cost: CostConfig,
        blowup_bound: float = DEFAULT_BLOWUP_BOUND,
    ):
        u0.grid.check_same(cost.target.grid)
        self.u0 = u0
        self.params = params
        self.cost = cost
        self.blowup_bound = blowup_bound
        self.n_forward = 0
        self.n_adjoint = 0

    @property
    def time_grid(self):
        return self.cost.target.time_grid

    @property
    def grid(self) -> PeriodicGrid:
        return self.cost.target.grid

    def zeros(self) -> ControlSchedule:
        return ControlSchedule.zeros(self.time_grid, self.grid)

    def evaluate(self, control: ControlSchedule) -> Evaluation:
        traj = solve_forward(self.u0, control, self.params, blowup_bound=self.blowup_bound)
        self.n_forward += 1
        return Evaluation(control, evaluate_cost(traj, control, self.cost), traj)

    def with_gradient(self, ev: Evaluation) -> Evaluation:
        if ev.gradient is not None:
            return ev
        adj = solve_adjoint(
            ev.trajectory, self.cost.target, self.params, self.cost.kappa, self.blowup_bound
        )
        self.n_adjoint += 1
        grad = ev.control.like(adj.control_pairing() + self.cost.lam * ev.control.frames)
        return Evaluation(ev.control, ev.cost, ev.trajectory, adj, grad)

    def gradient(self, control: ControlSchedule) -> Evaluation:
        return self.with_gradient(self.evaluate(control))

    def hessian_vector(self, ev: Evaluation, V: ControlSchedule) -> ControlSchedule:
        """lambda V + phi'[V] at the control of ``ev``."""
        if self.params.r < 2:
            raise ValueError(f"Hessian products require r >= 2, got r = {self.params.r!r}")
        ev = self.with_gradient(ev)
        w = solve_linearized(ev.trajectory, V, self.params, self.blowup_bound)
        dphi = solve_second_adjoint(
            ev.trajectory, ev.adjoint, w, self.params, self.cost.kappa, self.blowup_bound
        )
        return V.like(dphi.control_pairing() + self.cost.lam * V.frames)


def reduced_gradient(
    control: ControlSchedule, u0: SpectralVelocityField, params: ModelParams, cost: CostConfig
) -> ControlSchedule:
    """g_n = phi_{n+1} + lambda U_n."""
    return ReducedProblem(u0, params, cost).gradient(control).gradient


# ---------------------------------------------------------------- projection and stationarity


def project_box(control: ControlSchedule, box: BoxConstraints) -> ControlSchedule:
    return control.like(box.clip(control.frames))


def vi_residual(control: ControlSchedule, gradient: ControlSchedule, box: BoxConstraints) -> float:
    """||U - P(U - g)|| in the discrete L2(0, T; L2) norm."""
    return (control - project_box(control - gradient, box)).norm()


def _projection_formula_residual(U: ControlSchedule, ev: Evaluation, box: BoxConstraints, lam: float) -> float:
    """max |U - P(-phi / lambda)| pointwise; NaN when lambda = 0."""
    if lam <= 0:
        return math.nan
    phi = ev.adjoint.control_pairing()
    return float(np.max(np.abs(U.frames - box.clip(-phi / lam))))


# ---------------------------------------------------------------- optimizer


@dataclass(frozen=True)
class IterationRecord:
    iter: int
    cost: float
    grad_norm: float
    vi_residual: float
    step_size: float
    line_search_evals: int


@dataclass
class OptimalityReport:
    status: str
    iterations: int
    cost: float
    grad_norm: float
    vi_residual: float
    projection_residual: float
    soc_samples: list = field(default_factory=list)
    global_diagnostic: "GlobalDiagnostic | None" = None

    def as_dict(self) -> dict:
        out = {
            "status": self.status,
            "iterations": self.iterations,
            "cost": self.cost,
            "grad_norm": self.grad_norm,
            "vi_residual": self.vi_residual,
            "projection_residual": self.projection_residual,
            "soc_sample_count": len(self.soc_samples),
        }
        for ident, value in self.soc_samples:
            out[f"soc_curvature_{ident}"] = value
        if self.global_diagnostic is not None:
            out.update({f"global_{k}": v for k, v in self.global_diagnostic.as_dict().items()})
        return out


# Relative size below which a cost difference is indistinguishable from rounding.
_COST_ROUNDOFF = 1e-12


def _sufficient_decrease(prob, ev, trial, d_sq, step, c):
    """Armijo test; returns (accepted, trial possibly with gradient attached).

    When the change in J is at rounding level the decrease is measured with the
    trapezoidal model (g_old + g_new) . d / 2, which is exact for quadratics and
    keeps its relative accuracy when the direct difference no longer does.
    """
    required = c * d_sq / step
    delta = trial.cost - ev.cost
    if abs(delta) > _COST_ROUNDOFF * max(abs(ev.cost), abs(trial.cost)):
        return delta <= -required, trial
    trial = prob.with_gradient(trial)
    d = trial.control - ev.control
    model = 0.5 * (ev.gradient.inner(d) + trial.gradient.inner(d))
    return model <= -required, trial


def optimize(
    u0: SpectralVelocityField,
    box: BoxConstraints,
    params: ModelParams,
    cost: CostConfig,
    opt: OptimizerConfig,
    initial: ControlSchedule | None = None,
    blowup_bound: float = DEFAULT_BLOWUP_BOUND,
):
    """Projected gradient descent with Armijo backtracking.

    Returns (control, OptimalityReport, list[IterationRecord]).  The report
    status is CONVERGED, NOT_CONVERGED or LINE_SEARCH_FAILED; in every case the
    returned control is the best accepted iterate.
    """
    prob = ReducedProblem(u0, params, cost, blowup_bound)
    U = project_box(initial if initial is not None else prob.zeros(), box)
    ev = prob.gradient(U)
    vi = vi_residual(U, ev.gradient, box)
    records = [IterationRecord(0, ev.cost, ev.gradient.norm(), vi, 0.0, 1)]
    status = "NOT_CONVERGED"
    prev = None  # (control difference, gradient difference) of the last accepted step
    iters = 0
    for k in range(1, opt.max_iters + 1):
        if vi <= opt.tol_vi:
            status = "CONVERGED"
            break
        step = opt.step0
        if opt.bb_steps and prev is not None:
            s_vec, y_vec = prev
            sy = s_vec.inner(y_vec)
            if sy > 0:
                step = min(max(s_vec.inner(s_vec) / sy, 1e-12), opt.step_max)
        accepted = None
        evals = 0
        for _ in range(opt.max_shrinks + 1):
            trial_U = project_box(U - ev.gradient * step, box)
            d = trial_U - U
            d_sq = d.inner(d)
            if d_sq == 0.0:
                # The projected step no longer moves U in floating point.
                break
            evals += 1
            try:
                trial = prob.evaluate(trial_U)
            except IntegrationError as exc:
                # An overshooting trial that blows up is rejected like any other.
                log.debug("trial step %.3e rejected: %s", step, exc)
                step *= opt.shrink
                continue
            ok, trial = _sufficient_decrease(prob, ev, trial, d_sq, step, opt.armijo_c)
            if ok:
                accepted = trial
                break
            step *= opt.shrink
        if accepted is None:
            status = "STALLED" if d_sq == 0.0 else "LINE_SEARCH_FAILED"
            log.warning("line search %s at iteration %d", status.lower(), k)
            break
        accepted = prob.with_gradient(accepted)
        prev = (accepted.control - U, accepted.gradient - ev.gradient)
        U, ev = accepted.control, accepted
        vi = vi_residual(U, ev.gradient, box)
        iters = k
        records.append(IterationRecord(k, ev.cost, ev.gradient.norm(), vi, step, evals))
        log.debug("iter %d cost %.6e vi %.3e step %.3e", k, ev.cost, vi, step)
    else:
        if vi <= opt.tol_vi:
            status = "CONVERGED"
    report = OptimalityReport(
        status=status,
        iterations=iters,
        cost=ev.cost,
        grad_norm=ev.gradient.norm(),
        vi_residual=vi,
        projection_residual=_projection_formula_residual(U, ev, box, cost.lam),
    )
    return U, report, records


# ---------------------------------------------------------------- bang-bang structure


class BangBang(enum.IntEnum):
    MIN = -1
    UNDETERMINED = 0
    MAX = 1


def bang_bang_classify(adjoint: AdjointTrajectory, box: BoxConstraints, threshold: float) -> np.ndarray:
    """Label each control point by the sign of phi_{n+1}: MIN where phi > threshold, MAX where phi < -threshold.

    ``box`` is accepted for interface symmetry with the consistency check; the
    labels depend only on the costate.
    """
    if threshold < 0:
        raise ValueError("threshold must be non-negative")
    phi = adjoint.control_pairing()
    labels = np.full(phi.shape, BangBang.UNDETERMINED, dtype=np.int8)
    labels[phi > threshold] = BangBang.MIN
    labels[phi < -threshold] = BangBang.MAX
    return labels


def bang_bang_consistency(
    control: ControlSchedule, labels: np.ndarray, box: BoxConstraints, tol: float = 0.0
) -> float:
    """Fraction of labelled (not UNDETERMINED) points where the control sits on the predicted bound."""
    shape = control.frames.shape
    lo, hi = box.lower(shape), box.upper(shape)
    f = control.frames
    at_min = np.abs(f - lo) <= tol
    at_max = np.abs(f - hi) <= tol
    determined = labels != BangBang.UNDETERMINED
    if not np.any(determined):
        return 1.0
    ok = np.where(labels == BangBang.MIN, at_min, at_max)
    return float(np.mean(ok[determined]))


# ---------------------------------------------------------------- second order


def hessian_vector(
    control: ControlSchedule,
    V: ControlSchedule,
    u0: SpectralVelocityField,
    params: ModelParams,
    cost: CostConfig,
):
    """Return (H V, <H V, V>) with H V = lambda V + phi'[V]; requires r >= 2."""
    prob = ReducedProblem(u0, params, cost)
    hv = prob.hessian_vector(prob.gradient(control), V)
    return hv, hv.inner(V)


def _activity(control, gradient, box, tol):
    shape = control.frames.shape
    at_min = np.abs(control.frames - box.lower(shape)) <= tol
    at_max = np.abs(control.frames - box.upper(shape)) <= tol
    strongly = np.abs(gradient.frames) > tol
    return at_min, at_max, strongly


def critical_cone_project(
    V: ControlSchedule,
    control: ControlSchedule,
    gradient: ControlSchedule,
    box: BoxConstraints,
    tol: float | None = None,
) -> ControlSchedule:
    """Clamp V into the critical cone at ``control``; tol defaults to 1e-6 times the box width."""
    if tol is None:
        tol = 1e-6 * box.width_scale()
    at_min, at_max, strongly = _activity(control, gradient, box, tol)
    out = np.array(V.frames)
    out = np.where(at_min, np.maximum(out, 0.0), out)
    out = np.where(at_max, np.minimum(out, 0.0), out)
    out[strongly] = 0.0
    return V.like(out)


def in_critical_cone(V, control, gradient, box, tol: float | None = None) -> bool:
    if tol is None:
        tol = 1e-6 * box.width_scale()
    at_min, at_max, strongly = _activity(control, gradient, box, tol)
    f = V.frames
    return bool(np.all(f[at_min] >= 0) and np.all(f[at_max] <= 0) and np.all(f[strongly] == 0))


@dataclass(frozen=True)
class SecondOrderReport:
    """Curvatures <H V, V> / ||V||^2 of cone-projected random directions.

    ``samples`` holds (direction id, curvature) pairs; directions that vanish
    after projection are listed in ``skipped``.  Status is PASS when every
    curvature is positive, FAIL otherwise, DEGENERATE when all were skipped.
    """

    samples: list
    skipped: list
    min_curvature: float
    status: str


def second_order_check(
    control: ControlSchedule,
    u0: SpectralVelocityField,
    params: ModelParams,
    cost: CostConfig,
    box: BoxConstraints,
    n_samples: int,
    seed: int = 0,
    tol: float | None = None,
) -> SecondOrderReport:
    prob = ReducedProblem(u0, params, cost)
    ev = prob.gradient(control)
    rng = np.random.default_rng(seed)
    samples, skipped = [], []
    for i in range(n_samples):
        raw = control.like(rng.standard_normal(control.frames.shape))
        V = critical_cone_project(raw, control, ev.gradient, box, tol)
        nv = V.norm()
        if nv <= 1e-12 * raw.norm():
            skipped.append(i)
            continue
        V = V * (1.0 / nv)
        hv = prob.hessian_vector(ev, V)
        samples.append((i, hv.inner(V)))
    if not samples:
        return SecondOrderReport([], skipped, math.nan, "DEGENERATE")
    curv = min(c for _, c in samples)
    return SecondOrderReport(samples, skipped, curv, "PASS" if curv > 0 else "FAIL")


# ---------------------------------------------------------------- global optimality


@dataclass(frozen=True)
class GlobalConstants:
    """Embedding constants C, C_r and C_hat; None means not supplied."""

    C: float | None = None
    C_r: float | None = None
    C_hat: float | None = None


@dataclass(frozen=True)
class GlobalDiagnostic:
    q_v: float
    q_h: float
    threshold: float
    half_kappa: float
    status: str

    def as_dict(self) -> dict:
        return {
            "q_v": self.q_v,
            "q_h": self.q_h,
            "threshold": self.threshold,
            "half_kappa": self.half_kappa,
            "status": self.status,
        }


def global_optimality_diagnostic(
    adjoint: AdjointTrajectory,
    params: ModelParams,
    kappa: float,
    constants: GlobalConstants = GlobalConstants(),
) -> GlobalDiagnostic:
    """Compare kappa/2 with the adjoint-dependent bound for global optimality.

    r > 2: C (Q_V + 2 beta C_r C_hat^(r-2) Q_H);  r = 2: C (Q_V + 4 beta Q_H);
    r = 1: C Q_V, where Q_V and Q_H are the max-in-time V and H norms of phi.
    Missing constants, or 1 < r < 2, give UNKNOWN.
    """
    g = adjoint.grid
    q_v = max(math.sqrt(g.inner(c, g.k2 * c)) for c in adjoint.costates)
    q_h = max(math.sqrt(g.inner(c, c)) for c in adjoint.costates)
    r, beta, C = params.r, params.beta, constants.C
    threshold = math.nan
    if C is not None:
        if r == 1:
            threshold = C * q_v
        elif r == 2:
            threshold = C * (q_v + 4.0 * beta * q_h)
        elif r > 2 and constants.C_r is not None and constants.C_hat is not None:
            threshold = C * (q_v + 2.0 * beta * constants.C_r * constants.C_hat ** (r - 2.0) * q_h)
    half = 0.5 * kappa
    if math.isnan(threshold):
        status = "UNKNOWN"
    else:
        status = "SATISFIED" if half >= threshold else "NOT-SATISFIED"
    return GlobalDiagnostic(q_v, q_h, threshold, half, status)
