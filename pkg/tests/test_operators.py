import numpy as np
import pytest
from hypothesis import given, strategies as st

from nsvd.fields import (
    PeriodicGrid,
    PhysicalVelocityField,
    SpectralVelocityField,
    divergence_residual,
    gradient_norm_sq,
    inner,
    l2_norm_sq,
    leray_project,
    lp_norm,
    random_field,
    single_mode,
    to_physical,
)
from nsvd.operators import (
    BaseState,
    adjoint_term,
    convect,
    convection_bound_ratio,
    damping,
    damping_d1,
    damping_d2,
    damping_d3,
    monotonicity_constant,
    monotonicity_gap,
    nonlinear_term,
    second_order_term,
    stokes_apply,
    tangent_term,
    trilinear,
)

E1 = np.array([1.0, 0.0, 0.0])


def fd(fn, x, d, h=1e-5):
    return (fn(x + h * d) - fn(x - h * d)) / (2 * h)


def rel_err(a, b):
    return np.max(np.linalg.norm(a - b, axis=0) / np.linalg.norm(b, axis=0))


def nondegenerate(rng, n):
    """Random points bounded away from the p = 0 singularity."""
    p = rng.standard_normal((3, n))
    norms = np.linalg.norm(p, axis=0)
    return p * np.where(norms < 0.1, 0.1 / norms, 1.0)


# ---------------------------------------------------------------- Stokes


def test_stokes_zero_and_single_mode(grid16):
    z = SpectralVelocityField.zeros(grid16)
    assert not np.any(stokes_apply(z).coeffs)
    u = single_mode(grid16, (1, 2, 2), (0, 1, -1))
    np.testing.assert_allclose(stokes_apply(u).coeffs, 9.0 * u.coeffs, atol=1e-14)


def test_stokes_energy(grid16, rng):
    u = random_field(grid16, rng)
    assert inner(stokes_apply(u), u) == pytest.approx(gradient_norm_sq(u), rel=1e-12)


def test_stokes_is_minus_projected_laplacian(grid16, rng):
    u = random_field(grid16, rng)
    lap = SpectralVelocityField(grid16, -grid16.k2 * u.coeffs)
    np.testing.assert_allclose(stokes_apply(u).coeffs, (-leray_project(lap)).coeffs, atol=1e-13)
    assert divergence_residual(stokes_apply(u)) < 1e-13


# ---------------------------------------------------------------- convection


def test_convect_zero(grid16, rng):
    v = random_field(grid16, rng)
    assert not np.any(convect(SpectralVelocityField.zeros(grid16), v).coeffs)


def test_trilinear_vanishes_on_repeated_argument(grid16, rng):
    u, v = random_field(grid16, rng), random_field(grid16, rng)
    bound = 1e-12 * np.sqrt(l2_norm_sq(u)) * l2_norm_sq(v)
    assert abs(trilinear(u, v, v)) <= bound
    assert abs(inner(convect(u, v, project=False), v)) <= bound


def test_trilinear_antisymmetry(grid16, rng):
    u, v, w = (random_field(grid16, rng) for _ in range(3))
    a, b = trilinear(u, v, w), trilinear(u, w, v)
    assert abs(a + b) <= 1e-12 * max(abs(a), abs(b))


def test_convect_output_is_projected(grid16, rng):
    u, v = random_field(grid16, rng), random_field(grid16, rng)
    out = convect(u, v)
    assert divergence_residual(out) < 1e-13
    # projection does not change the pairing with a divergence-free field
    w = random_field(grid16, rng)
    assert inner(out, w) == pytest.approx(inner(convect(u, v, project=False), w), rel=1e-12)


def test_convect_matches_direct_formula(grid8):
    # u = sin(y) e_x, v = sin(x) e_z: (u . grad) v = sin(y) cos(x) e_z
    x, y, _ = grid8.coordinates
    from nsvd.fields import to_spectral

    zero = np.zeros_like(x)
    u = to_spectral(PhysicalVelocityField(grid8, np.array([np.sin(y), zero, zero])))
    v = to_spectral(PhysicalVelocityField(grid8, np.array([zero, zero, np.sin(x)])))
    out = to_physical(convect(u, v, project=False)).values
    np.testing.assert_allclose(out[2], np.sin(y) * np.cos(x), atol=1e-14)
    np.testing.assert_allclose(out[:2], 0.0, atol=1e-14)


def test_convection_bound_ratio_is_resolution_stable(rng):
    coarse, fine = PeriodicGrid(16), PeriodicGrid(32)
    u_c, v_c = random_field(coarse, rng), random_field(coarse, rng)

    def embed(f):
        # the same band-limited field on the finer grid
        return SpectralVelocityField(fine, fine.forward(np.fft.irfftn(_pad(f.coeffs, fine), s=fine.shape, axes=(1, 2, 3), norm="forward")))

    def _pad(c, g):
        out = np.zeros((3,) + g.spectral_shape, dtype=complex)
        n = coarse.n
        for a in range(-n // 2 + 1, n // 2):
            for b in range(-n // 2 + 1, n // 2):
                out[:, a % g.n, b % g.n, : n // 2] = c[:, a % n, b % n, : n // 2]
        return out

    r_c = convection_bound_ratio(u_c, v_c)
    r_f = convection_bound_ratio(embed(u_c), embed(v_c))
    assert np.isfinite(r_c) and r_c > 0
    assert r_f == pytest.approx(r_c, rel=1e-10)


# ---------------------------------------------------------------- damping


def test_damping_examples():
    assert np.array_equal(damping(np.array([2.0, 0.0, 0.0]), 3), np.array([8.0, 0.0, 0.0]))
    z = np.array([0.3, -1.2, 2.0])
    np.testing.assert_allclose(damping(z, 1), z)
    for r in (1, 1.5, 2, 3, 7):
        assert not np.any(damping(np.zeros(3), r))
    with pytest.raises(ValueError):
        damping(z, 0.9)


def test_damping_on_fields(grid8, rng):
    u = to_physical(random_field(grid8, rng))
    out = damping(u, 2.0)
    assert isinstance(out, PhysicalVelocityField)
    np.testing.assert_allclose(out.values, np.linalg.norm(u.values, axis=0) * u.values)


def test_damping_dual_norm_bound(grid16, rng):
    r = 2.5
    u = to_physical(random_field(grid16, rng))
    lhs = lp_norm(PhysicalVelocityField(grid16, damping(u.values, r)), (r + 1) / r)
    rhs = lp_norm(u, r + 1) ** r
    assert lhs <= rhs * (1 + 1e-12)


def test_d1_examples(rng):
    w = rng.standard_normal(3)
    np.testing.assert_array_equal(damping_d1(rng.standard_normal(3), w, 1), w)
    assert not np.any(damping_d1(np.zeros(3), w, 2))
    assert not np.any(damping_d1(np.zeros(3), w, 1.5))
    np.testing.assert_allclose(damping_d1(E1, E1, 3), 3 * E1)
    # cross-check the r = 3 value by differencing f
    np.testing.assert_allclose(fd(lambda z: damping(z, 3), E1, E1), 3 * E1, rtol=1e-9)


def test_d2_examples(rng):
    np.testing.assert_allclose(damping_d2(E1, E1, E1, 3), 6 * E1)
    np.testing.assert_allclose(fd(lambda z: damping_d1(z, E1, 3), E1, E1), 6 * E1, rtol=1e-9)
    q, g = rng.standard_normal(3), rng.standard_normal(3)
    assert not np.any(damping_d2(np.zeros(3), q, g, 4))
    assert not np.any(damping_d2(np.zeros(3), q, g, 2.5))
    for bad in (1, 1.9):
        with pytest.raises(ValueError):
            damping_d2(E1, q, g, bad)


def test_d3_examples(rng):
    np.testing.assert_allclose(damping_d3(rng.standard_normal(3), E1, E1, E1, 3), 6 * E1)
    q, g, h = (rng.standard_normal(3) for _ in range(3))
    assert not np.any(damping_d3(np.zeros(3), q, g, h, 5))
    with pytest.raises(ValueError):
        damping_d3(E1, q, g, h, 2.9)


@pytest.mark.parametrize("r", [1, 2, 2.5, 3, 4, 5, 7, 9])
def test_derivatives_match_finite_differences(r, rng):
    p = nondegenerate(rng, 1000)
    q, g, h = (rng.standard_normal((3, 1000)) for _ in range(3))
    assert rel_err(damping_d1(p, q, r), fd(lambda z: damping(z, r), p, q)) <= 1e-6
    if r >= 2:
        assert rel_err(damping_d2(p, q, g, r), fd(lambda z: damping_d1(z, g, r), p, q)) <= 1e-6
    if r >= 3:
        assert rel_err(damping_d3(p, q, g, h, r), fd(lambda z: damping_d2(z, g, h, r), p, q)) <= 1e-5


def test_d2_matches_fd_at_fractional_r(rng):
    p = nondegenerate(rng, 200)
    q, g = rng.standard_normal((3, 200)), rng.standard_normal((3, 200))
    assert rel_err(damping_d2(p, q, g, 4.5), fd(lambda z: damping_d1(z, g, 4.5), p, q)) <= 1e-6
    h = rng.standard_normal((3, 200))
    assert rel_err(damping_d3(p, q, g, h, 6), fd(lambda z: damping_d2(z, g, h, 6), p, q)) <= 1e-5


@given(seed=st.integers(0, 2**32 - 1), r=st.sampled_from([2, 2.5, 3, 4, 5, 6.5, 9]))
def test_higher_derivatives_are_symmetric(seed, r):
    rng = np.random.default_rng(seed)
    p, q, g, h = (rng.standard_normal((3, 16)) for _ in range(4))
    assert np.array_equal(damping_d2(p, q, g, r), damping_d2(p, g, q, r))
    if r >= 3:
        ref = damping_d3(p, q, g, h, r)
        # Rounding scales with the summands, so cancelling entries are judged against the array scale.
        scale = np.max(np.abs(ref))
        for perm in [(q, h, g), (g, q, h), (g, h, q), (h, q, g), (h, g, q)]:
            assert np.max(np.abs(damping_d3(p, *perm, r) - ref)) <= 1e-14 * scale


@given(seed=st.integers(0, 2**32 - 1), r=st.floats(1.0, 9.0))
def test_first_derivative_is_monotone(seed, r):
    rng = np.random.default_rng(seed)
    z, w = rng.standard_normal((3, 32)), rng.standard_normal((3, 32))
    assert np.all(np.sum(damping_d1(z, w, r) * w, axis=0) >= 0)


def test_zero_branch_near_tiny_magnitude():
    tiny = np.array([1e-200, 0.0, 0.0])
    w = np.array([0.0, 1.0, 0.0])
    assert not np.any(damping_d1(tiny, w, 2.0))
    assert np.all(np.isfinite(damping_d2(tiny, w, w, 3.5)))


# ---------------------------------------------------------------- monotonicity


def test_monotonicity_constant_on_scalar_samples(rng):
    for r in (1, 2, 3, 5):
        a, b = rng.standard_normal((3, 1000)), rng.standard_normal((3, 1000))
        lhs = np.sum((damping(a, r) - damping(b, r)) * (a - b), axis=0)
        rhs = monotonicity_constant(r) * np.linalg.norm(a - b, axis=0) ** (r + 1)
        assert np.all(lhs >= rhs * (1 - 1e-12))
        # antipodal pairs attain the constant
        a = rng.standard_normal(3)
        lhs = np.dot(damping(a, r) - damping(-a, r), 2 * a)
        assert lhs == pytest.approx(monotonicity_constant(r) * np.linalg.norm(2 * a) ** (r + 1), rel=1e-12)


def test_monotonicity_gap_examples(grid8, rng):
    u = to_physical(random_field(grid8, rng))
    assert monotonicity_gap(u, u, 3) == (0.0, 0.0)
    zero = PhysicalVelocityField.zeros(grid8)
    lhs, rhs = monotonicity_gap(u, zero, 3)
    l4 = grid8.cell_volume * np.sum(np.linalg.norm(u.values, axis=0) ** 4)
    assert lhs == pytest.approx(l4, rel=1e-12)
    assert rhs == pytest.approx(l4 / 4, rel=1e-12)


@pytest.mark.parametrize("r", [1, 2, 3, 5])
def test_monotonicity_gap_random_pairs(r, grid8, rng):
    for _ in range(20):
        a = PhysicalVelocityField(grid8, rng.standard_normal((3,) + grid8.shape))
        b = PhysicalVelocityField(grid8, rng.standard_normal((3,) + grid8.shape))
        lhs, rhs = monotonicity_gap(a, b, r)
        # r = 1 is the equality case, so allow rounding in the two sums
        assert lhs >= rhs * (1 - 1e-13) and rhs >= 0


# ---------------------------------------------------------------- time-stepper kernels


@pytest.mark.parametrize("r", [1.0, 2.0, 2.5, 3.0, 5.0])
def test_adjoint_term_is_transpose_of_tangent(r, grid16, rng):
    base = BaseState(grid16, random_field(grid16, rng).coeffs)
    w, phi = random_field(grid16, rng).coeffs, random_field(grid16, rng).coeffs
    lhs = grid16.inner(tangent_term(base, w, 0.7, r), phi)
    rhs = grid16.inner(w, adjoint_term(base, phi, 0.7, r))
    assert abs(lhs - rhs) <= 1e-12 * max(abs(lhs), abs(rhs))
    flipped = grid16.inner(w, adjoint_term(base, phi, 0.7, r, sign=-1.0))
    assert abs(lhs - flipped) > 1e-6 * abs(lhs)


@pytest.mark.parametrize("r", [1.0, 3.0, 4.5])
def test_tangent_term_is_derivative_of_nonlinear_term(r, grid16, rng):
    u, w = random_field(grid16, rng).coeffs, random_field(grid16, rng).coeffs
    h = 1e-6
    diff = (nonlinear_term(BaseState(grid16, u + h * w), 0.5, r) - nonlinear_term(BaseState(grid16, u - h * w), 0.5, r)) / (2 * h)
    exact = tangent_term(BaseState(grid16, u), w, 0.5, r)
    assert np.linalg.norm(diff - exact) <= 1e-7 * np.linalg.norm(exact)


@pytest.mark.parametrize("r", [2.0, 3.0, 5.0])
def test_second_order_term_is_derivative_of_adjoint_term(r, grid16, rng):
    u, w, phi = (random_field(grid16, rng).coeffs for _ in range(3))
    h = 1e-6
    diff = (
        adjoint_term(BaseState(grid16, u + h * w), phi, 0.5, r) - adjoint_term(BaseState(grid16, u - h * w), phi, 0.5, r)
    ) / (2 * h)
    exact = second_order_term(BaseState(grid16, u), w, phi, 0.5, r)
    assert np.linalg.norm(diff - exact) <= 1e-7 * np.linalg.norm(exact)
