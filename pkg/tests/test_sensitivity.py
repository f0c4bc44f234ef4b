import numpy as np
import pytest
from hypothesis import given, strategies as st

from nsvd.fields import ModelParams, PeriodicGrid, random_field
from nsvd.sensitivity import (
    TargetField,
    control_pairing,
    duality_check,
    solve_adjoint,
    solve_linearized,
    solve_second_adjoint,
    tracking_pairing,
)
from nsvd.state import ControlSchedule, TimeGrid, solve_forward


def make_problem(grid, rng, r=3.0, steps=10, horizon=0.2):
    p = ModelParams(0.05, 0.05, 0.1, 0.5, r, horizon)
    tg = TimeGrid(steps, horizon)
    U = ControlSchedule(tg, grid, 0.5 * rng.standard_normal((steps, 3) + grid.shape))
    V = ControlSchedule(tg, grid, rng.standard_normal((steps, 3) + grid.shape))
    target = TargetField.constant(tg, random_field(grid, rng, 0.5))
    base = solve_forward(random_field(grid, rng), U, p)
    return p, U, V, target, base


@pytest.mark.parametrize("r", [1.0, 2.0, 3.0, 5.0])
def test_duality_identity(r, grid16, rng):
    p, _, V, target, base = make_problem(grid16, rng, r=r)
    res = duality_check(base, V, target, p, kappa=1.3)
    assert res.rel_err <= 1e-10
    assert res.lhs != 0.0


def test_corrupted_adjoint_fails_duality(grid16, rng):
    p, _, V, target, base = make_problem(grid16, rng)
    assert duality_check(base, V, target, p, kappa=1.0, corrupt=True).rel_err > 1e-6


def test_terminal_costate_is_zero(grid8, rng):
    p, _, _, target, base = make_problem(grid8, rng)
    phi = solve_adjoint(base, target, p, kappa=1.0)
    assert not np.any(phi.coeffs(base.time_grid.steps))
    assert np.any(phi.coeffs(0))


def test_costate_vanishes_when_state_matches_target(grid8, rng):
    p, _, _, _, base = make_problem(grid8, rng)
    # target ingestion re-projects, which moves the coefficients by roundoff only
    phi = solve_adjoint(base, TargetField.from_trajectory(base), p, kappa=1.0)
    reference = solve_adjoint(base, TargetField.zeros(base.time_grid, grid8), p, kappa=1.0)
    assert np.max(np.abs(phi.costates)) <= 1e-14 * np.max(np.abs(reference.costates))


def test_zero_direction_gives_zero_tangent(grid8, rng):
    p, U, _, _, base = make_problem(grid8, rng)
    w = solve_linearized(base, ControlSchedule.zeros(U.time_grid, grid8), p)
    assert not np.any(w.as_array())


def test_tangent_is_linear_in_direction(grid8, rng):
    p, _, V, _, base = make_problem(grid8, rng)
    V2 = V.like(rng.standard_normal(V.frames.shape))
    a, b = 0.7, -1.9
    combo = solve_linearized(base, V * a + V2 * b, p).as_array()
    parts = a * solve_linearized(base, V, p).as_array() + b * solve_linearized(base, V2, p).as_array()
    assert np.max(np.abs(combo - parts)) <= 1e-13 * np.max(np.abs(parts))


@pytest.mark.parametrize("r", [1.0, 3.0])
def test_tangent_taylor_remainder_is_second_order(r, grid8, rng):
    p, U, V, _, base = make_problem(grid8, rng, r=r)
    u0 = base.state(0)
    w = solve_linearized(base, V, p).as_array()
    rem = []
    for eps in (1e-1, 1e-2, 1e-3):
        pert = solve_forward(u0, U + V * eps, p).as_array()
        rem.append(np.max(np.abs(pert - base.as_array() - eps * w)))
    orders = np.log10(np.array(rem[:-1]) / np.array(rem[1:]))
    assert np.all(orders >= 1.9)


def test_pairings_match_definitions(grid8, rng):
    p, _, V, target, base = make_problem(grid8, rng)
    w = solve_linearized(base, V, p)
    dt = base.time_grid.dt
    expected = sum(
        grid8.quadrature(grid8.gradient(w.coeffs(n)), grid8.gradient(base.coeffs(n) - target.frames[n])) for n in range(10)
    )
    assert tracking_pairing(w, base, target, 2.0) == pytest.approx(2.0 * dt * expected, rel=1e-12)
    phi = solve_adjoint(base, target, p, kappa=1.0)
    direct = sum(grid8.quadrature(grid8.inverse(phi.coeffs(n + 1)), V.frames[n]) for n in range(10))
    assert control_pairing(phi, V) == pytest.approx(dt * direct, rel=1e-12)


def test_sensitivities_reject_cnab(grid8, rng):
    p, U, V, target, base = make_problem(grid8, rng)
    cn = solve_forward(base.state(0), U, p, scheme="cnab")
    with pytest.raises(ValueError):
        solve_linearized(cn, V, p)
    with pytest.raises(ValueError):
        solve_adjoint(cn, target, p, kappa=1.0)


def test_second_adjoint_rejects_small_exponent(grid8, rng):
    p, _, V, target, base = make_problem(grid8, rng, r=1.5)
    phi = solve_adjoint(base, target, p, kappa=1.0)
    w = solve_linearized(base, V, p)
    with pytest.raises(ValueError):
        solve_second_adjoint(base, phi, w, p, kappa=1.0)


def test_mismatched_target_grid_rejected(grid8, rng):
    p, _, _, _, base = make_problem(grid8, rng)
    with pytest.raises(ValueError):
        solve_adjoint(base, TargetField.zeros(TimeGrid(5, 0.2), grid8), p, kappa=1.0)


@given(seed=st.integers(0, 2**32 - 1), r=st.sampled_from([1.0, 1.5, 2.0, 3.0, 4.0]), kappa=st.floats(0.1, 10.0))
def test_duality_property(seed, r, kappa):
    rng = np.random.default_rng(seed)
    p, _, V, target, base = make_problem(PeriodicGrid(8), rng, r=r, steps=5)
    assert duality_check(base, V, target, p, kappa).rel_err <= 1e-10
