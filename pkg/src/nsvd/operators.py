"""Stokes operator, convective forms and the power-law damping f(u) = |u|^(r-1) u.

Pointwise damping routines take arrays whose first axis holds the three vector
components and broadcast over the remaining axes, so they apply equally to a
single 3-vector and to a whole physical field.
"""

from __future__ import annotations

import numpy as np

from .fields import (
    PeriodicGrid,
    PhysicalVelocityField,
    SpectralVelocityField,
    gradient_norm_sq,
)

__all__ = [
    "stokes_apply",
    "convect",
    "trilinear",
    "damping",
    "damping_d1",
    "damping_d2",
    "damping_d3",
    "monotonicity_constant",
    "monotonicity_gap",
    "convection_bound_ratio",
    "BaseState",
    "nonlinear_term",
    "tangent_term",
    "adjoint_term",
    "second_order_term",
]

# Below this magnitude the fractional-power branches use the p = 0 value.
ZERO_MAGNITUDE = 1e-150


def _dot(a, b):
    return np.sum(a * b, axis=0)


def _norm(a):
    return np.sqrt(np.sum(a * a, axis=0))


# ---------------------------------------------------------------- linear part


def stokes_apply(u: SpectralVelocityField) -> SpectralVelocityField:
    """A u = -P Laplacian u, diagonal with eigenvalue |k|^2."""
    return SpectralVelocityField(u.grid, u.grid.k2 * u.coeffs)


# ---------------------------------------------------------------- convection


def _advect(a_vals: np.ndarray, grad_b: np.ndarray) -> np.ndarray:
    """(a . grad) b pointwise: sum_j a_j d_j b_i."""
    return np.einsum("j...,ij...->i...", a_vals, grad_b)


def _grad_transpose(grad_b: np.ndarray, c_vals: np.ndarray) -> np.ndarray:
    """(grad b)^T c pointwise: component j is sum_i d_j b_i c_i."""
    return np.einsum("ij...,i...->j...", grad_b, c_vals)


def _flux_divergence(grid: PeriodicGrid, a_vals: np.ndarray, c_vals: np.ndarray) -> np.ndarray:
    """Retained coefficients of sum_j d_j (a_j c_i), derivative taken spectrally."""
    flux = grid.forward(c_vals[:, None] * a_vals[None, :])
    return np.einsum("j...,ij...->i...", 1j * grid.k, flux)


def convect(
    u: SpectralVelocityField, v: SpectralVelocityField, project: bool = True
) -> SpectralVelocityField:
    """B(u, v) = P (u . grad) v, computed pseudo-spectrally and dealiased."""
    u.grid.check_same(v.grid)
    g = u.grid
    c = g.forward(_advect(g.inverse(u.coeffs), g.gradient(v.coeffs)))
    if project:
        c = g.project(c)
    return SpectralVelocityField(g, c)


def trilinear(u: SpectralVelocityField, v: SpectralVelocityField, w: SpectralVelocityField) -> float:
    """b(u, v, w) = integral of ((u . grad) v) . w, by grid quadrature."""
    g = u.grid
    g.check_same(v.grid)
    g.check_same(w.grid)
    adv = _advect(g.inverse(u.coeffs), g.gradient(v.coeffs))
    return g.quadrature(adv, g.inverse(w.coeffs))


def convection_bound_ratio(u: SpectralVelocityField, v: SpectralVelocityField) -> float:
    """|<B(u), v>| / (||u||_V^2 ||v||_V); bounded independently of resolution."""
    denom = gradient_norm_sq(u) * np.sqrt(gradient_norm_sq(v))
    if denom == 0:
        return 0.0
    return abs(trilinear(u, u, v)) / denom


# ---------------------------------------------------------------- damping


def _as_values(u):
    return u.values if isinstance(u, PhysicalVelocityField) else np.asarray(u, dtype=float)


def damping(u, r: float):
    """f(u) = |u|^(r-1) u pointwise; returns the same kind of object it is given."""
    if r < 1:
        raise ValueError(f"damping exponent must satisfy r >= 1, got {r!r}")
    vals = _as_values(u)
    out = _norm(vals) ** (r - 1.0) * vals
    if isinstance(u, PhysicalVelocityField):
        return PhysicalVelocityField(u.grid, out)
    return out


def damping_d1(z, w, r: float) -> np.ndarray:
    """First derivative f'(z) w.

    (r-1)|z|^(r-3) (z.w) z + |z|^(r-1) w, equal to w for r = 1 and to 0 at
    z = 0 when 1 < r < 3.
    """
    if r < 1:
        raise ValueError(f"damping exponent must satisfy r >= 1, got {r!r}")
    z = np.asarray(z, dtype=float)
    w = np.asarray(w, dtype=float)
    if r == 1:
        return np.array(w, dtype=float, copy=True) * np.ones_like(z)
    nz = _norm(z)
    if r >= 3:
        lead = nz ** (r - 3.0)
    else:
        safe = np.where(nz > ZERO_MAGNITUDE, nz, 1.0)
        lead = np.where(nz > ZERO_MAGNITUDE, safe ** (r - 3.0), 0.0)
    return (r - 1.0) * lead * _dot(z, w) * z + nz ** (r - 1.0) * w


def damping_d2(p, q, g, r: float) -> np.ndarray:
    """Second derivative f''(p)[q, g], symmetric in (q, g); defined for r >= 2."""
    if r < 2:
        raise ValueError(f"second damping derivative requires r >= 2, got {r!r}")
    p, q, g = (np.asarray(a, dtype=float) for a in (p, q, g))
    npn = _norm(p)
    if r >= 5:
        c1 = (r - 1.0) * (r - 3.0) * npn ** (r - 5.0)
        c2 = (r - 1.0) * npn ** (r - 3.0)
    else:
        live = npn > ZERO_MAGNITUDE
        safe = np.where(live, npn, 1.0)
        c1 = np.where(live, (r - 1.0) * (r - 3.0) * safe ** (r - 5.0), 0.0)
        c2 = np.where(live, (r - 1.0) * safe ** (r - 3.0), 0.0)
    pq, pg, gq = _dot(p, q), _dot(p, g), _dot(g, q)
    return c1 * (pq * pg) * p + c2 * (pq * g + pg * q + gq * p)


def damping_d3(p, q, g, h, r: float) -> np.ndarray:
    """Third derivative f'''(p)[q, g, h], symmetric in (q, g, h); defined for r >= 3."""
    if r < 3:
        raise ValueError(f"third damping derivative requires r >= 3, got {r!r}")
    p, q, g, h = (np.asarray(a, dtype=float) for a in (p, q, g, h))
    hq, hg, gq = _dot(h, q), _dot(h, g), _dot(g, q)
    tail = hq * g + hg * q + gq * h
    if r == 3:
        return 2.0 * tail * np.ones_like(p)
    npn = _norm(p)
    if r >= 7:
        c1 = (r - 1.0) * (r - 3.0) * (r - 5.0) * npn ** (r - 7.0)
        c2 = (r - 1.0) * (r - 3.0) * npn ** (r - 5.0)
        c3 = (r - 1.0) * npn ** (r - 3.0)
    else:
        live = npn > ZERO_MAGNITUDE
        safe = np.where(live, npn, 1.0)
        c1 = np.where(live, (r - 1.0) * (r - 3.0) * (r - 5.0) * safe ** (r - 7.0), 0.0)
        c2 = np.where(live, (r - 1.0) * (r - 3.0) * safe ** (r - 5.0), 0.0)
        c3 = np.where(live, (r - 1.0) * safe ** (r - 3.0), 0.0)
    pq, pg, ph = _dot(p, q), _dot(p, g), _dot(p, h)
    mid = pg * hq * p + pq * hg * p + pq * pg * h + ph * (pq * g + pg * q + gq * p)
    return c1 * pq * pg * ph * p + c2 * mid + c3 * tail


def monotonicity_constant(r: float) -> float:
    """C(r) = 2^(1-r) in (f(a)-f(b)).(a-b) >= C(r) |a-b|^(r+1)."""
    return 2.0 ** (1.0 - r)


def monotonicity_gap(u1: PhysicalVelocityField, u2: PhysicalVelocityField, r: float):
    """Return (lhs, rhs) with lhs = int (f(u1)-f(u2)).(u1-u2), rhs = C(r) ||u1-u2||_{r+1}^{r+1}."""
    u1.grid.check_same(u2.grid)
    a, b = u1.values, u2.values
    diff = a - b
    lhs = u1.grid.quadrature(damping(a, r) - damping(b, r), diff)
    rhs = monotonicity_constant(r) * u1.grid.cell_volume * float(np.sum(_norm(diff) ** (r + 1.0)))
    return lhs, rhs


# ------------------------------------------------- kernels for the time steppers


class BaseState:
    """Physical velocity and velocity gradient of a state, reused by the kernels below."""

    __slots__ = ("grid", "values", "grad")

    def __init__(self, grid: PeriodicGrid, coeffs: np.ndarray):
        self.grid = grid
        self.values = grid.inverse(coeffs)
        self.grad = grid.gradient(coeffs)


def nonlinear_term(base: BaseState, beta: float, r: float) -> np.ndarray:
    """Retained coefficients of P[(u . grad) u + beta f(u)]."""
    u = base.values
    phys = _advect(u, base.grad) + beta * damping(u, r)
    return base.grid.project(base.grid.forward(phys))


def tangent_term(base: BaseState, w: np.ndarray, beta: float, r: float) -> np.ndarray:
    """Linearization of nonlinear_term at base in direction w (coefficients)."""
    g = base.grid
    w_vals = g.inverse(w)
    phys = (
        _advect(w_vals, base.grad)
        + _advect(base.values, g.gradient(w))
        + beta * damping_d1(base.values, w_vals, r)
    )
    return g.project(g.forward(phys))


def adjoint_term(base: BaseState, phi: np.ndarray, beta: float, r: float, sign: float = 1.0) -> np.ndarray:
    """L2-adjoint of tangent_term on retained divergence-free fields.

    P[(grad u)^T phi - div(u (x) phi) + beta f'(u) phi]; the flux form keeps the
    transpose exact at the discrete level.  ``sign`` multiplies the transpose
    term and exists only for mutation testing.
    """
    g = base.grid
    phi_vals = g.inverse(phi)
    pointwise = sign * _grad_transpose(base.grad, phi_vals) + beta * damping_d1(
        base.values, phi_vals, r
    )
    out = g.forward(pointwise) - _flux_divergence(g, base.values, phi_vals)
    return g.project(out)


def second_order_term(
    base: BaseState, w: np.ndarray, phi: np.ndarray, beta: float, r: float
) -> np.ndarray:
    """Derivative of adjoint_term(base, phi) with respect to the base state along w.

    P[(grad w)^T phi - div(w (x) phi) + beta f''(u)[w, phi]].
    """
    g = base.grid
    w_vals = g.inverse(w)
    phi_vals = g.inverse(phi)
    pointwise = _grad_transpose(g.gradient(w), phi_vals)
    if beta != 0 and r != 1:
        pointwise = pointwise + beta * damping_d2(base.values, w_vals, phi_vals, r)
    out = g.forward(pointwise) - _flux_divergence(g, w_vals, phi_vals)
    return g.project(out)
