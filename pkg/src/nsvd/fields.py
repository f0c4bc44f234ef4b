"""Periodic grid, velocity-field representations, Leray projection and norms.

Spectral coefficients use the real-to-complex layout of ``numpy.fft.rfftn``
with ``norm="forward"``, so a coefficient equals the Fourier amplitude of the
physical field and ``L**3 * sum(|c|**2)`` over the full spectrum is the L2 norm
squared.  Only half of the spectrum is stored; ``PeriodicGrid.weights`` counts
each stored coefficient with its conjugate partner.
"""

from __future__ import annotations

from dataclasses import dataclass
from functools import cached_property

import numpy as np

__all__ = [
    "PeriodicGrid",
    "SpectralVelocityField",
    "PhysicalVelocityField",
    "ModelParams",
    "leray_project",
    "to_physical",
    "to_spectral",
    "gradient_norm_sq",
    "l2_norm_sq",
    "lp_norm",
    "curl",
    "inner",
    "divergence_residual",
    "random_field",
    "taylor_green",
    "single_mode",
]

_SPATIAL_AXES = (-3, -2, -1)


class GridMismatchError(ValueError):
    """Raised when two fields live on different grids."""


@dataclass(frozen=True)
class PeriodicGrid:
    """Uniform grid on the periodic box [0, L]^3 with n points per axis."""

    n: int
    period_length: float = 2.0 * np.pi
    dealias_fraction: float = 2.0 / 3.0

    def __post_init__(self):
        if int(self.n) != self.n or self.n <= 0 or self.n % 2:
            raise ValueError(f"n must be a positive even integer, got {self.n!r}")
        if not self.period_length > 0:
            raise ValueError(f"period_length must be positive, got {self.period_length!r}")
        if not 0 < self.dealias_fraction <= 1:
            raise ValueError(
                f"dealias_fraction must lie in (0, 1], got {self.dealias_fraction!r}"
            )
        object.__setattr__(self, "n", int(self.n))
        object.__setattr__(self, "period_length", float(self.period_length))
        object.__setattr__(self, "dealias_fraction", float(self.dealias_fraction))

    @property
    def shape(self) -> tuple[int, int, int]:
        return (self.n, self.n, self.n)

    @property
    def spectral_shape(self) -> tuple[int, int, int]:
        return (self.n, self.n, self.n // 2 + 1)

    @property
    def cell_volume(self) -> float:
        return (self.period_length / self.n) ** 3

    @property
    def volume(self) -> float:
        return self.period_length**3

    @cached_property
    def modes(self) -> np.ndarray:
        """Integer mode numbers m, shape (3, n, n, n//2+1)."""
        m = np.fft.fftfreq(self.n, d=1.0 / self.n)
        mz = np.fft.rfftfreq(self.n, d=1.0 / self.n)
        return np.array(np.meshgrid(m, m, mz, indexing="ij"))

    @cached_property
    def k(self) -> np.ndarray:
        """Wavevectors 2*pi*m/L, shape (3, n, n, n//2+1)."""
        return (2.0 * np.pi / self.period_length) * self.modes

    @cached_property
    def k2(self) -> np.ndarray:
        return np.sum(self.k**2, axis=0)

    @cached_property
    def inv_k2(self) -> np.ndarray:
        out = np.zeros_like(self.k2)
        nz = self.k2 > 0
        out[nz] = 1.0 / self.k2[nz]
        return out

    @cached_property
    def mask(self) -> np.ndarray:
        """Retained modes: |m_i| < dealias_fraction*n/2 on every axis, k = 0 excluded.

        With the default 2/3 fraction, products of three retained fields are
        integrated exactly by the grid quadrature.
        """
        cut = self.dealias_fraction * self.n / 2.0
        keep = np.all(np.abs(self.modes) < cut, axis=0)
        keep[0, 0, 0] = False
        return keep

    @cached_property
    def weights(self) -> np.ndarray:
        """Multiplicity of each stored half-spectrum coefficient (1 or 2)."""
        w = np.full(self.spectral_shape, 2.0)
        w[..., 0] = 1.0
        w[..., -1] = 1.0
        return w

    @cached_property
    def coordinates(self) -> np.ndarray:
        x = np.arange(self.n) * (self.period_length / self.n)
        return np.array(np.meshgrid(x, x, x, indexing="ij"))

    # -- array-level transforms used throughout the package -----------------

    def forward(self, values: np.ndarray) -> np.ndarray:
        """Physical values (..., n, n, n) -> masked half-spectrum coefficients."""
        return np.fft.rfftn(values, axes=_SPATIAL_AXES, norm="forward") * self.mask

    def inverse(self, coeffs: np.ndarray) -> np.ndarray:
        return np.fft.irfftn(coeffs, s=self.shape, axes=_SPATIAL_AXES, norm="forward")

    def project(self, coeffs: np.ndarray) -> np.ndarray:
        """Leray projection I - k k^T/|k|^2; zeroes k = 0.

        Accepts coefficients of shape (..., 3, n, n, n//2+1).
        """
        kdotc = np.sum(self.k * coeffs, axis=-4)
        out = coeffs - self.k * (kdotc * self.inv_k2)[..., None, :, :, :]
        out[..., 0, 0, 0] = 0.0
        return out

    def gradient(self, coeffs: np.ndarray) -> np.ndarray:
        """Physical velocity gradient G[i, j] = d u_i / d x_j, shape (3, 3, n, n, n)."""
        return self.inverse(1j * self.k[None, :] * coeffs[:, None])

    def inner(self, a: np.ndarray, b: np.ndarray) -> float:
        """L2 inner product of two coefficient arrays (summed over all leading axes)."""
        return self.volume * float(np.sum(self.weights * (a.conj() * b).real))

    def quadrature(self, a: np.ndarray, b: np.ndarray) -> float:
        """Collocation quadrature of sum_i a_i b_i over the box."""
        return self.cell_volume * float(np.sum(a * b))

    def check_same(self, other: "PeriodicGrid") -> None:
        if self != other:
            raise GridMismatchError(f"grid mismatch: {self} vs {other}")


def _frozen(array: np.ndarray, dtype) -> np.ndarray:
    out = np.array(array, dtype=dtype)
    out.setflags(write=False)
    return out


@dataclass(frozen=True, eq=False)
class SpectralVelocityField:
    """Velocity field stored as retained half-spectrum coefficients, shape (3, n, n, n//2+1)."""

    grid: PeriodicGrid
    coeffs: np.ndarray

    def __post_init__(self):
        c = _frozen(self.coeffs, np.complex128)
        if c.shape != (3,) + self.grid.spectral_shape:
            raise ValueError(f"coefficient shape {c.shape} does not match grid {self.grid}")
        object.__setattr__(self, "coeffs", c)

    @classmethod
    def zeros(cls, grid: PeriodicGrid) -> "SpectralVelocityField":
        return cls(grid, np.zeros((3,) + grid.spectral_shape, dtype=np.complex128))

    def _wrap(self, coeffs):
        return SpectralVelocityField(self.grid, coeffs)

    def __add__(self, other):
        self.grid.check_same(other.grid)
        return self._wrap(self.coeffs + other.coeffs)

    def __sub__(self, other):
        self.grid.check_same(other.grid)
        return self._wrap(self.coeffs - other.coeffs)

    def __mul__(self, scalar):
        return self._wrap(self.coeffs * scalar)

    __rmul__ = __mul__

    def __neg__(self):
        return self._wrap(-self.coeffs)


@dataclass(frozen=True, eq=False)
class PhysicalVelocityField:
    """Velocity values at the n^3 collocation points, shape (3, n, n, n)."""

    grid: PeriodicGrid
    values: np.ndarray

    def __post_init__(self):
        v = _frozen(self.values, np.float64)
        if v.shape != (3,) + self.grid.shape:
            raise ValueError(f"value shape {v.shape} does not match grid {self.grid}")
        if not np.all(np.isfinite(v)):
            raise ValueError("physical field contains non-finite values")
        object.__setattr__(self, "values", v)

    @classmethod
    def zeros(cls, grid: PeriodicGrid) -> "PhysicalVelocityField":
        return cls(grid, np.zeros((3,) + grid.shape))


@dataclass(frozen=True)
class ModelParams:
    """Constants of the damped Navier-Stokes-Voigt model.

    mu is the Voigt length scale squared, nu the viscosity, alpha the Darcy
    coefficient, beta and r the damping coefficient and exponent, horizon the
    final time T.
    """

    mu: float
    nu: float
    alpha: float
    beta: float
    r: float
    horizon: float

    def __post_init__(self):
        for name in ("mu", "nu", "alpha", "beta", "horizon"):
            value = getattr(self, name)
            if not (np.isfinite(value) and value > 0):
                raise ValueError(f"{name} must be > 0, got {value!r}")
        if not (np.isfinite(self.r) and self.r >= 1):
            raise ValueError(f"damping exponent must satisfy r >= 1, got {self.r!r}")


def leray_project(field: SpectralVelocityField) -> SpectralVelocityField:
    return SpectralVelocityField(field.grid, field.grid.project(field.coeffs))


def to_physical(field: SpectralVelocityField) -> PhysicalVelocityField:
    return PhysicalVelocityField(field.grid, field.grid.inverse(field.coeffs))


def to_spectral(field: PhysicalVelocityField) -> SpectralVelocityField:
    """Transform and truncate to the retained modes (drops the mean and dealiased modes)."""
    return SpectralVelocityField(field.grid, field.grid.forward(field.values))


def inner(u: SpectralVelocityField, v: SpectralVelocityField) -> float:
    u.grid.check_same(v.grid)
    return u.grid.inner(u.coeffs, v.coeffs)


def l2_norm_sq(u: SpectralVelocityField) -> float:
    return u.grid.inner(u.coeffs, u.coeffs)


def gradient_norm_sq(u: SpectralVelocityField) -> float:
    """||grad u||^2 = L^3 * sum_k |k|^2 |u_k|^2 (the V-norm squared)."""
    g = u.grid
    return g.volume * float(np.sum(g.weights * g.k2 * np.abs(u.coeffs) ** 2))


def lp_norm(u, p: float) -> float:
    """L^p norm of the Euclidean magnitude |u(x)| by collocation quadrature.

    Exact only when |u|^p is band-limited on the grid.
    """
    if not p >= 1:
        raise ValueError(f"lp_norm requires p >= 1, got {p!r}")
    if isinstance(u, SpectralVelocityField):
        u = to_physical(u)
    mag = np.sqrt(np.sum(u.values**2, axis=0))
    return float((u.grid.cell_volume * np.sum(mag**p)) ** (1.0 / p))


def curl(u: SpectralVelocityField) -> SpectralVelocityField:
    k, c = u.grid.k, u.coeffs
    w = 1j * np.array(
        [
            k[1] * c[2] - k[2] * c[1],
            k[2] * c[0] - k[0] * c[2],
            k[0] * c[1] - k[1] * c[0],
        ]
    )
    return SpectralVelocityField(u.grid, w)


def divergence_residual(u: SpectralVelocityField) -> float:
    """max_k |k . u_k| / ||u||, zero for a divergence-free field."""
    kdotc = np.abs(np.einsum("i...,i...->...", u.grid.k, u.coeffs))
    norm = np.sqrt(l2_norm_sq(u))
    if norm == 0:
        return 0.0
    return float(kdotc.max() / norm)


def random_field(
    grid: PeriodicGrid,
    rng: np.random.Generator,
    amplitude: float = 1.0,
    divergence_free: bool = True,
    decay: float = 2.0,
) -> SpectralVelocityField:
    """Smooth random field with spectrum ~ (1 + |m|^2)^(-decay), rms scaled to amplitude."""
    noise = rng.standard_normal((3,) + grid.shape)
    c = grid.forward(noise)
    m2 = np.sum(grid.modes**2, axis=0)
    c = c * (1.0 + m2) ** (-decay / 2.0)
    if divergence_free:
        c = grid.project(c)
    rms = np.sqrt(grid.inner(c, c) / grid.volume)
    if rms > 0:
        c = c * (amplitude / rms)
    return SpectralVelocityField(grid, c)


def taylor_green(grid: PeriodicGrid, amplitude: float = 1.0) -> SpectralVelocityField:
    """Taylor-Green vortex A (sin x cos y cos z, -cos x sin y cos z, 0) scaled to the box."""
    x, y, z = grid.coordinates * (2.0 * np.pi / grid.period_length)
    values = amplitude * np.array(
        [
            np.sin(x) * np.cos(y) * np.cos(z),
            -np.cos(x) * np.sin(y) * np.cos(z),
            np.zeros_like(x),
        ]
    )
    return to_spectral(PhysicalVelocityField(grid, values))


def single_mode(
    grid: PeriodicGrid, mode: tuple[int, int, int], direction, amplitude: float = 1.0
) -> SpectralVelocityField:
    """Real field amplitude * cos(2*pi m.x/L) * direction."""
    x = grid.coordinates * (2.0 * np.pi / grid.period_length)
    phase = mode[0] * x[0] + mode[1] * x[1] + mode[2] * x[2]
    d = np.asarray(direction, dtype=float).reshape(3, 1, 1, 1)
    values = amplitude * np.cos(phase)[None] * d
    return to_spectral(PhysicalVelocityField(grid, values))
