"""Command-line entry point: ``nsvd {simulate,optimize,verify,gradient-check}``.

Exit codes: 0 success, 1 verification failure, 2 configuration error,
3 numerical failure.
"""

from __future__ import annotations

import argparse
import logging
import sys
from pathlib import Path

import numpy as np

from . import io
from .config import ConfigError, RunConfig, load_config
from .control import (
    BangBang,
    CostConfig,
    GlobalConstants,
    ReducedProblem,
    bang_bang_classify,
    bang_bang_consistency,
    global_optimality_diagnostic,
    optimize,
    second_order_check,
)
from .fields import (
    PhysicalVelocityField,
    SpectralVelocityField,
    random_field,
    taylor_green,
    to_physical,
    to_spectral,
)
from .sensitivity import TargetField
from .state import ControlSchedule, IntegrationError, energy_balance_residual, solve_forward
from .verification import VerifyConfig, fd_gradient_oracle, run_checks

log = logging.getLogger("nsvd")

EXIT_OK = 0
EXIT_VERIFY = 1
EXIT_CONFIG = 2
EXIT_NUMERIC = 3


# ---------------------------------------------------------------- problem assembly


def _load_field(path: str, grid) -> PhysicalVelocityField:
    try:
        snap = io.read_snapshot(path)
        return snap.field(grid)
    except (OSError, ValueError) as exc:
        raise ConfigError(f"cannot load field from {path}: {exc}") from exc


def initial_condition(cfg: RunConfig, rng: np.random.Generator) -> SpectralVelocityField:
    grid, kind, amp = cfg.grid, cfg["initial", "kind"], cfg["initial", "amplitude"]
    if kind == "zero":
        return SpectralVelocityField.zeros(grid)
    if kind == "taylor-green":
        return taylor_green(grid, amp)
    if kind == "random-divfree":
        return random_field(grid, rng, amp)
    return to_spectral(_load_field(cfg["initial", "path"], grid))


def smooth_random_control(cfg: RunConfig, rng: np.random.Generator, amplitude: float) -> ControlSchedule:
    """amplitude * (a(x) cos(pi t / T) + b(x) sin(pi t / T)) with smooth random a, b."""
    grid, tg = cfg.grid, cfg.time_grid
    a = to_physical(random_field(grid, rng, 1.0, divergence_free=False)).values
    b = to_physical(random_field(grid, rng, 1.0, divergence_free=False)).values
    t = tg.times[:-1] / tg.horizon
    frames = amplitude * (
        np.cos(np.pi * t)[:, None, None, None, None] * a + np.sin(np.pi * t)[:, None, None, None, None] * b
    )
    return ControlSchedule(tg, grid, frames)


def initial_control(cfg: RunConfig, rng: np.random.Generator) -> ControlSchedule:
    kind = cfg["control", "kind"]
    if kind == "zero":
        return ControlSchedule.zeros(cfg.time_grid, cfg.grid)
    if kind == "random":
        return smooth_random_control(cfg, rng, cfg["control", "amplitude"])
    return ControlSchedule.constant(cfg.time_grid, _load_field(cfg["control", "path"], cfg.grid))


def build_target(cfg: RunConfig, u0: SpectralVelocityField, rng: np.random.Generator):
    """Return (TargetField, known control or None)."""
    kind, tg, grid = cfg["cost", "target"], cfg.time_grid, cfg.grid
    if kind == "zero":
        return TargetField.zeros(tg, grid), None
    if kind == "file":
        field = to_spectral(_load_field(cfg["cost", "target_path"], grid))
        return TargetField.constant(tg, field), None
    truth = smooth_random_control(cfg, rng, cfg["cost", "target_amplitude"])
    truth = truth.like(cfg.box.clip(truth.frames))
    traj = solve_forward(u0, truth, cfg.params, blowup_bound=cfg["run", "blowup_bound"])
    return TargetField.from_trajectory(traj), truth


def cost_config(cfg: RunConfig, target: TargetField) -> CostConfig:
    return CostConfig(cfg["cost", "kappa"], cfg["cost", "lambda"], target)


def _snapshot_steps(cfg: RunConfig, last: int) -> list[int]:
    every = cfg["output", "snapshot_every"]
    steps = list(range(0, last + 1, every)) if every > 0 else []
    if last not in steps:
        steps.append(last)
    return steps


# ---------------------------------------------------------------- commands


def cmd_simulate(cfg: RunConfig, out: Path) -> int:
    rng = np.random.default_rng(cfg["run", "seed"])
    u0 = initial_condition(cfg, rng)
    control = initial_control(cfg, rng)
    ck = cfg["output", "checkpoint_every"] or None
    traj = solve_forward(
        u0, control, cfg.params, scheme=cfg.scheme, checkpoint_every=ck, blowup_bound=cfg["run", "blowup_bound"]
    )
    balance = energy_balance_residual(traj, control, cfg.params)
    io.write_csv(out / "energy.csv", io.ENERGY_COLUMNS, io.energy_rows(balance, cfg.time_grid, cfg.params.r))
    snaps = out / "snapshots"
    snaps.mkdir(exist_ok=True)
    times = cfg.time_grid.times
    for n in _snapshot_steps(cfg, cfg.time_grid.steps):
        io.write_snapshot(snaps / f"state_{n:05d}.bin", traj.state(n), times[n])
    summary = {
        "status": "OK",
        "scheme": cfg.scheme,
        "steps": cfg.time_grid.steps,
        "seed": cfg["run", "seed"],
        "initial_energy": float(balance.energy[0]),
        "final_energy": float(balance.energy[-1]),
        "max_energy_increase": float(np.max(np.diff(balance.energy))),
        "max_continuous_residual": balance.max_continuous,
        "max_scheme_residual_relative": balance.max_scheme_relative,
    }
    io.write_kv(out / "summary.txt", summary)
    return EXIT_OK


def cmd_optimize(cfg: RunConfig, out: Path) -> int:
    rng = np.random.default_rng(cfg["run", "seed"])
    u0 = initial_condition(cfg, rng)
    target, truth = build_target(cfg, u0, rng)
    cost = cost_config(cfg, target)
    start = initial_control(cfg, rng)
    bound = cfg["run", "blowup_bound"]
    U, report, records = optimize(u0, cfg.box, cfg.params, cost, cfg.optimizer, initial=start, blowup_bound=bound)
    io.write_csv(out / "iterations.csv", io.ITERATION_COLUMNS, [tuple(vars(r).values()) for r in records])

    prob = ReducedProblem(u0, cfg.params, cost, bound)
    ev = prob.gradient(U)
    constants = GlobalConstants(cfg.constant("C"), cfg.constant("C_r"), cfg.constant("C_hat"))
    report.global_diagnostic = global_optimality_diagnostic(ev.adjoint, cfg.params, cost.kappa, constants)
    n_soc = cfg["optimizer", "soc_samples"]
    if n_soc > 0 and cfg.params.r >= 2:
        soc = second_order_check(U, u0, cfg.params, cost, cfg.box, n_soc, seed=cfg["run", "seed"])
        report.soc_samples = soc.samples

    items = {"initial_cost": records[0].cost}
    items.update(report.as_dict())
    items["cost_reduction"] = 1.0 - report.cost / records[0].cost if records[0].cost > 0 else 0.0
    if truth is not None:
        items["truth_control_cost"] = prob.evaluate(truth).cost
    if cost.lam == 0:
        phi = ev.adjoint.control_pairing()
        threshold = cfg["optimizer", "bang_bang_threshold"] * float(np.max(np.abs(phi)))
        labels = bang_bang_classify(ev.adjoint, cfg.box, threshold)
        tol = 1e-8 * cfg.box.width_scale()
        io.write_kv(
            out / "bang_bang.txt",
            {
                "threshold": threshold,
                "count_min": int(np.sum(labels == BangBang.MIN)),
                "count_max": int(np.sum(labels == BangBang.MAX)),
                "count_undetermined": int(np.sum(labels == BangBang.UNDETERMINED)),
                "consistency": bang_bang_consistency(U, labels, cfg.box, tol),
            },
        )
    io.write_kv(out / "report.txt", items)

    controls = out / "controls"
    controls.mkdir(exist_ok=True)
    times = cfg.time_grid.times
    for n in _snapshot_steps(cfg, cfg.time_grid.steps - 1):
        io.write_snapshot(controls / f"control_{n:05d}.bin", U.frame(n), times[n])
    io.write_snapshot(out / "costate_00000.bin", ev.adjoint.state(0), 0.0, magic=io.ADJOINT_MAGIC)
    return EXIT_OK


def verify_config(cfg: RunConfig) -> VerifyConfig:
    return VerifyConfig(
        n=cfg["grid", "n"],
        steps=cfg.time_grid.steps,
        horizon=cfg.time_grid.horizon,
        params=cfg.params,
        seed=cfg["run", "seed"],
        damping_points=cfg["verify", "damping_points"],
        duality_instances=cfg["verify", "duality_instances"],
    )


def check_report_items(results) -> dict:
    items = {}
    for res in results:
        for key, value in res.as_dict().items():
            if key != "name":
                items[f"{res.name}.{key}"] = value
    items["all_pass"] = all(r.passed for r in results)
    return items


def cmd_verify(cfg: RunConfig, out: Path, corrupt: bool = False) -> int:
    results = run_checks(verify_config(cfg), corrupt=corrupt)
    io.write_kv(out / "report.txt", check_report_items(results))
    failed = [r for r in results if not r.passed]
    for r in results:
        print(f"{'PASS' if r.passed else 'FAIL'} {r.name}: measured {r.measured:.3e}, threshold {r.threshold:.3e}")
    if failed:
        print("verification failed: " + ", ".join(r.name for r in failed), file=sys.stderr)
        return EXIT_VERIFY
    return EXIT_OK


def cmd_gradient_check(cfg: RunConfig, out: Path) -> int:
    rng = np.random.default_rng(cfg["run", "seed"])
    u0 = initial_condition(cfg, rng)
    target, _ = build_target(cfg, u0, rng)
    cost = cost_config(cfg, target)
    U = initial_control(cfg, rng)
    V = smooth_random_control(cfg, rng, cfg["gradient_check", "direction_amplitude"])
    table = fd_gradient_oracle(U, u0, cfg.params, cost, V, cfg.eps_list)
    io.write_csv(
        out / "gradient_check.csv",
        ("eps", "taylor_remainder", "central_derivative", "central_error"),
        [(r.eps, r.taylor_remainder, r.central_derivative, r.central_error) for r in table.rows],
    )
    summary = {"cost": table.cost, "adjoint_derivative": table.adjoint_derivative}
    for i, o in enumerate(table.taylor_orders):
        summary[f"taylor_order_{i}"] = float(o)
    summary["min_taylor_order"] = table.min_taylor_order
    io.write_kv(out / "summary.txt", summary)
    print(f"{'eps':>10} {'taylor remainder':>18} {'central error':>15}")
    for r in table.rows:
        print(f"{r.eps:10.1e} {r.taylor_remainder:18.6e} {r.central_error:15.6e}")
    print(f"min observed Taylor order: {table.min_taylor_order:.3f}")
    return EXIT_OK


# ---------------------------------------------------------------- entry point


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="nsvd", description="Damped Navier-Stokes-Voigt solver and optimal control toolkit.")
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", metavar="PATH", help="INI run configuration")
    common.add_argument("--output", metavar="DIR", help="run directory (default: <output.dir>/<command>)")
    common.add_argument("--seed", type=int, help="override run.seed")
    common.add_argument("--override", action="append", default=[], metavar="SECTION.KEY=VALUE")
    common.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True)
    sub.add_parser("simulate", parents=[common], help="forward solve with energy log")
    sub.add_parser("optimize", parents=[common], help="projected-gradient optimal control")
    p_verify = sub.add_parser("verify", parents=[common], help="run the verification suite")
    p_verify.add_argument("--corrupt-adjoint", action="store_true", help="flip a transpose sign (mutation test)")
    sub.add_parser("gradient-check", parents=[common], help="finite-difference gradient table")
    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.DEBUG if args.verbose else logging.WARNING, format="%(levelname)s %(name)s: %(message)s")
    try:
        cfg = load_config(args.config, args.override)
        if args.seed is not None:
            if args.seed < 0:
                raise ConfigError("--seed must be non-negative")
            cfg = cfg.with_seed(args.seed)
        out = Path(args.output) if args.output else Path(cfg["output", "dir"]) / args.command
        out.mkdir(parents=True, exist_ok=True)
        resolved = {f"{sec}.{key}": v for sec, keys in cfg.values.items() for key, v in keys.items()}
        io.write_kv(out / "config.txt", resolved)
        if args.command == "simulate":
            code = cmd_simulate(cfg, out)
        elif args.command == "optimize":
            code = cmd_optimize(cfg, out)
        elif args.command == "verify":
            code = cmd_verify(cfg, out, corrupt=args.corrupt_adjoint)
        else:
            code = cmd_gradient_check(cfg, out)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except IntegrationError as exc:
        print(f"numerical failure at step {exc.step}: {exc}", file=sys.stderr)
        return EXIT_NUMERIC
    io.write_manifest(out)
    return code


if __name__ == "__main__":  # pragma: no cover
    sys.exit(main())
