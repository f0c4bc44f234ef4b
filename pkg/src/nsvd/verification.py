"""Independent oracles and empirical checks.

* A low-mode Galerkin ODE system integrated with classical RK4, with the
  nonlinear terms evaluated by explicit convolution over the retained modes.
  On an 8^3 grid with dealias fraction 1/2 only |m_i| <= 1 is retained, and
  then the pseudo-spectral solver computes exactly this Galerkin system, so the
  oracle isolates the time-discretization error.
* Finite-difference checks of the adjoint gradient.
* Empirical Lipschitz ratios of the control-to-state map.
* ``run_checks``: the suite behind ``nsvd verify``.
"""

from __future__ import annotations

import itertools
import math
from dataclasses import dataclass, field

import numpy as np

from .control import CostConfig, ReducedProblem
from .fields import (
    ModelParams,
    PeriodicGrid,
    PhysicalVelocityField,
    SpectralVelocityField,
    curl,
    gradient_norm_sq,
    l2_norm_sq,
    leray_project,
    random_field,
)
from .operators import (
    damping,
    damping_d1,
    damping_d2,
    damping_d3,
    monotonicity_constant,
    monotonicity_gap,
    trilinear,
)
from .sensitivity import TargetField, duality_check
from .state import ControlSchedule, IntegrationError, TimeGrid, Trajectory, energy_balance_residual, solve_forward

__all__ = [
    "GalerkinSystem",
    "galerkin_reference_solve",
    "FDRow",
    "FDTable",
    "fd_gradient_oracle",
    "LipschitzTable",
    "lipschitz_probe",
    "h1v_norm",
    "observed_orders",
    "galerkin_convergence",
    "damping_fd_errors",
    "CheckResult",
    "VerifyConfig",
    "run_checks",
]


def observed_orders(h, err) -> np.ndarray:
    """Orders log(e_i / e_{i+1}) / log(h_i / h_{i+1}) between consecutive levels."""
    h = np.asarray(h, dtype=float)
    err = np.asarray(err, dtype=float)
    with np.errstate(divide="ignore", invalid="ignore"):
        return np.log(err[:-1] / err[1:]) / np.log(h[:-1] / h[1:])


# ---------------------------------------------------------------- Galerkin oracle


def _convolve(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    """Full linear convolution over the last three axes of centred coefficient cubes.

    A cube of odd side 2M+1 holds modes -M..M.  Leading axes broadcast.  The
    output has side 2(Ma+Mb)+1, accumulated from shifted copies of the larger
    operand, one per entry of the smaller.
    """
    if a.shape[-1] > b.shape[-1]:
        a, b = b, a
    sa, sb = a.shape[-1], b.shape[-1]
    lead = np.broadcast_shapes(a.shape[:-3], b.shape[:-3])
    out = np.zeros(lead + (sa + sb - 1,) * 3, dtype=np.complex128)
    for i, j, k in itertools.product(range(sa), repeat=3):
        coef = a[..., i, j, k]
        if not np.any(coef):
            continue
        out[..., i : i + sb, j : j + sb, k : k + sb] += coef[..., None, None, None] * b
    return out


def _crop(c: np.ndarray, half: int) -> np.ndarray:
    m = (c.shape[-1] - 1) // 2
    return c[..., m - half : m + half + 1, m - half : m + half + 1, m - half : m + half + 1]


class GalerkinSystem:
    """Retained-mode ODE system for the damped Voigt equation.

    Modes are the integer triples with 0 < max|m_i| <= ``half_width``; the set
    is closed under m -> -m.  The damping exponent must be an odd integer so
    that |u|^(r-1) u is a polynomial and the convolution is exact.
    ``convection`` and ``damping`` switch the two nonlinear terms off for
    linear reference tests.
    """

    def __init__(
        self,
        period_length: float = 2.0 * np.pi,
        half_width: int = 1,
        convection: bool = True,
        damping: bool = True,
    ):
        if half_width < 1:
            raise ValueError("half_width must be at least 1")
        self.period_length = float(period_length)
        self.half_width = int(half_width)
        self.convection = convection
        self.damping = damping
        M = self.half_width
        m = np.arange(-M, M + 1)
        self.modes_cube = np.array(np.meshgrid(m, m, m, indexing="ij"))
        self.k = (2.0 * np.pi / self.period_length) * self.modes_cube
        self.k2 = np.sum(self.k**2, axis=0)
        self.retained = self.k2 > 0
        with np.errstate(divide="ignore"):
            self.inv_k2 = np.where(self.retained, 1.0 / np.where(self.retained, self.k2, 1.0), 0.0)

    @property
    def modes(self) -> list[tuple[int, int, int]]:
        idx = np.argwhere(self.retained)
        M = self.half_width
        return [tuple(int(v) - M for v in i) for i in idx]

    def project(self, c: np.ndarray) -> np.ndarray:
        kdotc = np.sum(self.k * c, axis=0)
        return (c - self.k * (kdotc * self.inv_k2)) * self.retained

    def nonlinear(self, c: np.ndarray, r: float) -> np.ndarray:
        """Galerkin-truncated ((u . grad) u, |u|^(r-1) u) as a pair of cubes."""
        M = self.half_width
        conv = np.zeros_like(c)
        if self.convection:
            du = 1j * self.k[None, :] * c[:, None]  # du[i, j] = d_j u_i
            conv = _crop(_convolve(c[None], du).sum(axis=1), M)
        damp = np.zeros_like(c)
        if self.damping:
            power = (r - 1) / 2
            if r == 1:
                damp = c.copy()
            else:
                sq = _convolve(c, c).sum(axis=0)
                acc = sq
                for _ in range(int(power) - 1):
                    acc = _convolve(acc, sq)
                damp = _crop(_convolve(acc, c), M)
        return conv, damp

    def rhs(self, c: np.ndarray, forcing: np.ndarray, params: ModelParams) -> np.ndarray:
        conv, damp = self.nonlinear(c, params.r)
        total = self.project(forcing - conv - params.beta * damp)
        lin = params.nu * self.k2 + params.alpha
        mass = 1.0 + params.mu * self.k2
        return (total - lin * c) / mass * self.retained

    # -- conversions between dense cubes and the solver's half spectrum ------

    def _check_grid(self, grid: PeriodicGrid):
        if grid.period_length != self.period_length:
            raise ValueError("grid and Galerkin system use different box lengths")
        if grid.n < 2 * self.half_width + 2:
            raise ValueError("grid too coarse for the Galerkin mode set")

    def from_grid(self, grid: PeriodicGrid, coeffs: np.ndarray) -> np.ndarray:
        self._check_grid(grid)
        M, n = self.half_width, grid.n
        out = np.zeros((3,) + (2 * M + 1,) * 3, dtype=np.complex128)
        for a, b, c in itertools.product(range(-M, M + 1), repeat=3):
            if c >= 0:
                v = coeffs[:, a % n, b % n, c]
            else:
                v = np.conj(coeffs[:, (-a) % n, (-b) % n, -c])
            out[:, a + M, b + M, c + M] = v
        return out * self.retained

    def to_grid(self, grid: PeriodicGrid, cube: np.ndarray) -> np.ndarray:
        self._check_grid(grid)
        M, n = self.half_width, grid.n
        out = np.zeros((3,) + grid.spectral_shape, dtype=np.complex128)
        for a, b, c in itertools.product(range(-M, M + 1), repeat=3):
            if c >= 0:
                out[:, a % n, b % n, c] = cube[:, a + M, b + M, c + M]
        return out

    def physical_to_cube(self, grid: PeriodicGrid, values: np.ndarray) -> np.ndarray:
        """Direct DFT of physical values onto the retained modes (no FFT)."""
        self._check_grid(grid)
        x = grid.coordinates
        M = self.half_width
        out = np.zeros((3,) + (2 * M + 1,) * 3, dtype=np.complex128)
        scale = 1.0 / grid.n**3
        for idx in np.argwhere(self.retained):
            kv = self.k[:, idx[0], idx[1], idx[2]]
            phase = np.exp(-1j * (kv[0] * x[0] + kv[1] * x[1] + kv[2] * x[2]))
            out[:, idx[0], idx[1], idx[2]] = scale * np.sum(values * phase, axis=(1, 2, 3))
        return out


def galerkin_reference_solve(
    sys: GalerkinSystem,
    u0: SpectralVelocityField,
    control: ControlSchedule,
    params: ModelParams,
    fine_dt: float,
) -> Trajectory:
    """RK4 solution of the Galerkin system, sampled at the control's time nodes."""
    tg = control.time_grid
    if fine_dt > tg.dt / 100.0 * (1 + 1e-12):
        raise ValueError("fine_dt must not exceed dt/100")
    if params.r != int(params.r) or int(params.r) % 2 == 0:
        raise ValueError(f"Galerkin oracle needs an odd integer r, got {params.r!r}")
    grid = u0.grid
    grid.check_same(control.grid)
    substeps = math.ceil(tg.dt / fine_dt - 1e-9)
    h = tg.dt / substeps
    c = sys.project(sys.from_grid(grid, u0.coeffs))
    states = [sys.to_grid(grid, c)]
    for n in range(tg.steps):
        f = sys.physical_to_cube(grid, control.frames[n])
        for _ in range(substeps):
            k1 = sys.rhs(c, f, params)
            k2 = sys.rhs(c + 0.5 * h * k1, f, params)
            k3 = sys.rhs(c + 0.5 * h * k2, f, params)
            k4 = sys.rhs(c + h * k3, f, params)
            c = c + (h / 6.0) * (k1 + 2 * k2 + 2 * k3 + k4)
        if not np.all(np.isfinite(c)):
            raise IntegrationError("Galerkin oracle produced non-finite values", n + 1)
        states.append(sys.to_grid(grid, c))
    return Trajectory(tg, grid, np.array(states))


# ---------------------------------------------------------------- gradient oracle


@dataclass(frozen=True)
class FDRow:
    eps: float
    taylor_remainder: float
    central_derivative: float
    central_error: float


@dataclass(frozen=True)
class FDTable:
    """Finite-difference study of J along V against the adjoint value <g, V>."""

    cost: float
    adjoint_derivative: float
    rows: list

    @property
    def taylor_orders(self) -> np.ndarray:
        return observed_orders([r.eps for r in self.rows], [r.taylor_remainder for r in self.rows])

    @property
    def central_orders(self) -> np.ndarray:
        return observed_orders([r.eps for r in self.rows], [r.central_error for r in self.rows])

    @property
    def min_taylor_order(self) -> float:
        o = self.taylor_orders
        return float(np.min(o)) if o.size else math.nan


def fd_gradient_oracle(
    control: ControlSchedule,
    u0: SpectralVelocityField,
    params: ModelParams,
    cost: CostConfig,
    V: ControlSchedule,
    eps_list=(1e-1, 1e-2, 1e-3, 1e-4),
) -> FDTable:
    """Taylor remainders |J(U + eV) - J(U) - e<g, V>| and central differences."""
    prob = ReducedProblem(u0, params, cost)
    ev = prob.gradient(control)
    dj = ev.gradient.inner(V)
    if not np.any(V.frames):
        return FDTable(ev.cost, dj, [FDRow(float(e), 0.0, 0.0, 0.0) for e in eps_list])
    rows = []
    for eps in eps_list:
        if not eps > 0:
            raise ValueError(f"eps must be positive, got {eps!r}")
        plus = control + V * eps
        minus = control - V * eps
        if np.array_equal(plus.frames, control.frames):
            raise ValueError(f"eps = {eps!r} is lost in rounding against the control")
        jp = prob.evaluate(plus).cost
        jm = prob.evaluate(minus).cost
        central = (jp - jm) / (2.0 * eps)
        rows.append(FDRow(float(eps), abs(jp - ev.cost - eps * dj), central, abs(central - dj)))
    return FDTable(ev.cost, dj, rows)


# ---------------------------------------------------------------- Lipschitz probe


def h1v_norm(traj_a: Trajectory, traj_b: Trajectory) -> float:
    """Discrete H^1(0, T; V) norm of the difference of two trajectories.

    sum_{n=1..N} dt (||d_n||_V^2 + ||(d_n - d_{n-1}) / dt||_V^2), square-rooted.
    """
    g, tg = traj_a.grid, traj_a.time_grid
    dt = tg.dt
    total = 0.0
    prev = traj_a.coeffs(0) - traj_b.coeffs(0)
    for n in range(1, tg.steps + 1):
        d = traj_a.coeffs(n) - traj_b.coeffs(n)
        rate = (d - prev) / dt
        total += dt * (g.inner(d, g.k2 * d) + g.inner(rate, g.k2 * rate))
        prev = d
    return math.sqrt(total)


@dataclass(frozen=True)
class LipschitzTable:
    """Ratios ||S(U1) - S(U2)||_{H1(V)} / ||U1 - U2||; NaN for identical pairs."""

    ratios: list

    @property
    def max_ratio(self) -> float:
        finite = [r for r in self.ratios if not math.isnan(r)]
        return max(finite) if finite else math.nan


def _random_control(tg, grid, rng, magnitude):
    return ControlSchedule(tg, grid, magnitude * rng.standard_normal((tg.steps, 3) + grid.shape))


def lipschitz_probe(
    u0: SpectralVelocityField,
    params: ModelParams,
    time_grid: TimeGrid,
    n_pairs: int,
    magnitude: float,
    seed: int = 0,
    refine: int = 1,
    pairs=None,
) -> LipschitzTable:
    """Ratios for random control pairs; ``refine`` re-runs the same pairs on a finer time grid.

    ``pairs`` may supply explicit (U1, U2) schedules instead of random ones.
    """
    if pairs is None:
        rng = np.random.default_rng(seed)
        pairs = [
            (_random_control(time_grid, u0.grid, rng, magnitude), _random_control(time_grid, u0.grid, rng, magnitude))
            for _ in range(n_pairs)
        ]
    ratios = []
    for a, b in pairs:
        if refine > 1:
            a, b = a.refine(refine), b.refine(refine)
        denom = (a - b).norm()
        if denom == 0:
            ratios.append(math.nan)
            continue
        ta = solve_forward(u0, a, params)
        tb = solve_forward(u0, b, params)
        ratios.append(h1v_norm(ta, tb) / denom)
    return LipschitzTable(ratios)


# ---------------------------------------------------------------- check suite


@dataclass(frozen=True)
class CheckResult:
    name: str
    measured: float
    threshold: float
    passed: bool

    def as_dict(self) -> dict:
        return {"name": self.name, "measured": self.measured, "threshold": self.threshold, "pass": self.passed}


def _le(name, measured, threshold):
    return CheckResult(name, float(measured), float(threshold), bool(measured <= threshold))


def _ge(name, measured, threshold):
    return CheckResult(name, float(measured), float(threshold), bool(measured >= threshold))


@dataclass(frozen=True)
class VerifyConfig:
    """Sizes for the check suite; defaults finish in a few minutes on one core."""

    n: int = 16
    steps: int = 20
    horizon: float = 0.5
    params: ModelParams = field(
        default_factory=lambda: ModelParams(mu=0.05, nu=0.05, alpha=0.1, beta=0.5, r=3.0, horizon=0.5)
    )
    seed: int = 0
    damping_points: int = 1000
    duality_instances: int = 4


def _rel(a, b):
    scale = max(abs(a), abs(b))
    return abs(a - b) / scale if scale > 0 else 0.0


def _operator_checks(cfg: VerifyConfig, rng) -> list[CheckResult]:
    grid = PeriodicGrid(cfg.n)
    u, v, w = (random_field(grid, rng) for _ in range(3))
    out = []
    norm = math.sqrt(l2_norm_sq(u) * l2_norm_sq(v) * l2_norm_sq(v))
    out.append(_le("trilinear_bvv", abs(trilinear(u, v, v)) / norm, 1e-12))
    b1, b2 = trilinear(u, v, w), trilinear(u, w, v)
    out.append(_le("trilinear_antisymmetry", abs(b1 + b2) / max(abs(b1), abs(b2)), 1e-12))
    out.append(_le("curl_identity", abs(l2_norm_sq(curl(u)) / gradient_norm_sq(u) - 1.0), 1e-12))
    raw = SpectralVelocityField(grid, grid.forward(rng.standard_normal((3,) + grid.shape)))
    p1 = leray_project(raw)
    p2 = leray_project(p1)
    out.append(_le("leray_idempotent", math.sqrt(l2_norm_sq(p2 - p1) / l2_norm_sq(p1)), 1e-12))
    other = SpectralVelocityField(grid, grid.forward(rng.standard_normal((3,) + grid.shape)))
    lhs = grid.inner(p1.coeffs, other.coeffs)
    rhs = grid.inner(raw.coeffs, leray_project(other).coeffs)
    out.append(_le("leray_self_adjoint", _rel(lhs, rhs), 1e-12))
    return out


def _fd_direction(fn, x, d, step=1e-5):
    return (fn(x + step * d) - fn(x - step * d)) / (2 * step)


def _rel_max(a, b):
    scale = np.maximum(np.linalg.norm(b, axis=0), 1e-300)
    return float(np.max(np.linalg.norm(a - b, axis=0) / scale))


def damping_fd_errors(r: float, n_points: int, rng) -> dict:
    """Worst relative errors of the damping derivatives against central differences."""
    p = rng.standard_normal((3, n_points))
    q, g, h = (rng.standard_normal((3, n_points)) for _ in range(3))
    out = {"d1": _rel_max(damping_d1(p, q, r), _fd_direction(lambda z: damping(z, r), p, q))}
    if r >= 2:
        out["d2"] = _rel_max(
            damping_d2(p, q, g, r), _fd_direction(lambda z: damping_d1(z, g, r), p, q)
        )
    if r >= 3:
        out["d3"] = _rel_max(
            damping_d3(p, q, g, h, r), _fd_direction(lambda z: damping_d2(z, g, h, r), p, q)
        )
    return out


DAMPING_TOLERANCES = {"d1": 1e-6, "d2": 1e-6, "d3": 1e-5}


def _damping_checks(cfg: VerifyConfig, rng) -> list[CheckResult]:
    out = []
    for r in (1, 2, 2.5, 3, 4, 5, 7, 9):
        for key, err in damping_fd_errors(r, cfg.damping_points, rng).items():
            out.append(_le(f"damping_{key}_fd_r{r}", err, DAMPING_TOLERANCES[key]))
    grid = PeriodicGrid(8)
    for r in (1, 2, 3, 5):
        # r = 1 is the equality case, so the relative gap is allowed rounding below zero
        c = monotonicity_constant(r)
        a, b = rng.standard_normal((2, 3, cfg.damping_points))
        lhs = np.sum((damping(a, r) - damping(b, r)) * (a - b), axis=0)
        rhs = c * np.linalg.norm(a - b, axis=0) ** (r + 1)
        worst = float(np.min((lhs - rhs) / rhs))
        for _ in range(5):
            u = PhysicalVelocityField(grid, rng.standard_normal((3,) + grid.shape))
            v = PhysicalVelocityField(grid, rng.standard_normal((3,) + grid.shape))
            lhs_f, rhs_f = monotonicity_gap(u, v, r)
            worst = min(worst, (lhs_f - rhs_f) / rhs_f)
        out.append(_ge(f"monotonicity_rel_gap_r{r}", worst, -1e-12))
    return out


def _solver_checks(cfg: VerifyConfig, rng, corrupt: bool) -> list[CheckResult]:
    grid = PeriodicGrid(cfg.n)
    tg = TimeGrid(cfg.steps, cfg.horizon)
    out = []
    worst = 0.0
    for i in range(cfg.duality_instances):
        r = (1.0, 2.0, 3.0, 5.0)[i % 4]
        params = ModelParams(cfg.params.mu, cfg.params.nu, cfg.params.alpha, cfg.params.beta, r, cfg.horizon)
        u0 = random_field(grid, rng)
        U = _random_control(tg, grid, rng, 0.5)
        V = _random_control(tg, grid, rng, 1.0)
        target = TargetField.constant(tg, random_field(grid, rng, 0.5))
        base = solve_forward(u0, U, params)
        worst = max(worst, duality_check(base, V, target, params, 1.0, corrupt=corrupt).rel_err)
    out.append(_le("adjoint_duality", worst, 1e-10))

    params = ModelParams(cfg.params.mu, cfg.params.nu, cfg.params.alpha, cfg.params.beta, cfg.params.r, cfg.horizon)
    u0 = random_field(grid, rng)
    U = _random_control(tg, grid, rng, 0.5)
    eb = energy_balance_residual(solve_forward(u0, U, params), U, params)
    out.append(_le("energy_scheme_balance", eb.max_scheme_relative, 1e-10))
    free = ControlSchedule.zeros(tg, grid)
    e = energy_balance_residual(solve_forward(u0, free, params), free, params).energy
    out.append(_le("energy_monotone_unforced", float(np.max(np.diff(e))), 0.0))

    cost = CostConfig(1.0, 1e-2, TargetField.constant(tg, random_field(grid, rng, 0.5)))
    table = fd_gradient_oracle(U, u0, params, cost, _random_control(tg, grid, rng, 1.0))
    out.append(_ge("gradient_taylor_order", table.min_taylor_order, 1.9))
    return out


def _galerkin_check(cfg: VerifyConfig, rng) -> list[CheckResult]:
    err, levels = galerkin_convergence(cfg.params.mu, seed=int(rng.integers(2**31)), levels=(10, 20, 40))
    orders = observed_orders([1.0 / s for s in levels], err)
    return [_ge("galerkin_order_imex_euler", float(np.min(orders)), 0.9)]


def galerkin_convergence(mu: float = 0.05, seed: int = 0, levels=(10, 20, 40, 80), horizon: float = 1.0, scheme="imex-euler"):
    """State error at T against the Galerkin oracle for each step count in ``levels``.

    The initial condition a1 sin(y) e_x + a2 sin(x) e_z excites two wavevectors; r = 3.
    """
    grid = PeriodicGrid(8, dealias_fraction=0.5)
    params = ModelParams(mu=mu, nu=0.05, alpha=0.1, beta=0.5, r=3.0, horizon=horizon)
    x = grid.coordinates
    rng = np.random.default_rng(seed)
    a1, a2 = rng.uniform(0.8, 1.2, 2)
    vals = np.array([a1 * np.sin(x[1]), np.zeros_like(x[0]), a2 * np.sin(x[0])])
    u0 = SpectralVelocityField(grid, grid.project(grid.forward(vals)))
    sys = GalerkinSystem(grid.period_length, 1)
    finest = max(levels)
    control = ControlSchedule.zeros(TimeGrid(finest, horizon), grid)
    ref = galerkin_reference_solve(sys, u0, control, params, horizon / finest / 100.0).final
    errors = []
    for steps in levels:
        U = ControlSchedule.zeros(TimeGrid(steps, horizon), grid)
        uT = solve_forward(u0, U, params, scheme=scheme).final
        d = uT.coeffs - ref.coeffs
        errors.append(math.sqrt(grid.inner(d, d)))
    return np.array(errors), tuple(levels)


def _hessian_check(cfg: VerifyConfig, rng) -> list[CheckResult]:
    grid = PeriodicGrid(cfg.n)
    tg = TimeGrid(cfg.steps, cfg.horizon)
    params = cfg.params
    if params.r < 2:
        return []
    cost = CostConfig(1.0, 1e-2, TargetField.constant(tg, random_field(grid, rng, 0.5)))
    prob = ReducedProblem(random_field(grid, rng), params, cost)
    ev = prob.gradient(_random_control(tg, grid, rng, 0.5))
    V1, V2 = (_random_control(tg, grid, rng, 1.0) for _ in range(2))
    a = prob.hessian_vector(ev, V1).inner(V2)
    b = prob.hessian_vector(ev, V2).inner(V1)
    return [_le("hessian_symmetry", _rel(a, b), 1e-8)]


def _lipschitz_check(cfg: VerifyConfig, rng) -> list[CheckResult]:
    grid = PeriodicGrid(cfg.n)
    tg = TimeGrid(cfg.steps, cfg.horizon)
    u0 = random_field(grid, rng)
    seed = int(rng.integers(2**31))
    coarse = lipschitz_probe(u0, cfg.params, tg, 2, 0.5, seed=seed).max_ratio
    fine = lipschitz_probe(u0, cfg.params, tg, 2, 0.5, seed=seed, refine=2).max_ratio
    return [_le("lipschitz_refinement_change", abs(fine - coarse) / coarse, 0.10)]


def run_checks(cfg: VerifyConfig = VerifyConfig(), corrupt: bool = False) -> list[CheckResult]:
    """Run every check; ``corrupt`` flips a transpose sign inside the adjoint sweep."""
    rng = np.random.default_rng(cfg.seed)
    results = []
    for group in (
        lambda: _operator_checks(cfg, rng),
        lambda: _damping_checks(cfg, rng),
        lambda: _solver_checks(cfg, rng, corrupt),
        lambda: _galerkin_check(cfg, rng),
        lambda: _hessian_check(cfg, rng),
        lambda: _lipschitz_check(cfg, rng),
    ):
        results.extend(group())
    return results
