"""Zernike basis on a discrete pupil grid and random aberration sampling.

Modes follow Noll's single-index ordering and normalization: for j >= 2
each mode has unit RMS over the continuous unit disk. Coefficients are in
radians of pupil phase.
"""

from __future__ import annotations

import csv
import math
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from wavemo.errors import ConfigurationError

DEFAULT_MODES = 28
# aberration ranges are quoted for 256 px grids and rescaled to smaller ones
REFERENCE_GRID = 256


@dataclass(frozen=True)
class GridSpec:
    """Square sampling grid for pupil-plane and image-plane fields.

    ``n`` pixels per side; the unit disk has radius
    ``aperture_radius_frac * n / 2`` pixels and is centred on pixel
    ``(n // 2, n // 2)``, the same pixel ``np.fft.fftshift`` puts DC on.
    """

    n: int = 64
    aperture_radius_frac: float = 0.5

    def __post_init__(self):
        if int(self.n) != self.n or self.n < 8:
            raise ConfigurationError(f"grid size must be an integer >= 8, got {self.n}")
        if self.n & (self.n - 1):
            raise ConfigurationError(f"grid size must be a power of two, got {self.n}")
        if not 0.0 < self.aperture_radius_frac <= 1.0:
            raise ConfigurationError(
                f"aperture_radius_frac must lie in (0, 1], got {self.aperture_radius_frac}"
            )

    @property
    def shape(self) -> tuple[int, int]:
        return (self.n, self.n)

    @property
    def radius_px(self) -> float:
        return self.aperture_radius_frac * self.n / 2

    def disk_coords(self) -> tuple[np.ndarray, np.ndarray]:
        """Return polar coordinates ``(rho, theta)`` scaled to the unit disk."""
        idx = (np.arange(self.n) - self.n // 2) / self.radius_px
        y, x = np.meshgrid(idx, idx, indexing="ij")
        return np.hypot(x, y), np.arctan2(y, x)

    def disk(self) -> np.ndarray:
        rho, _ = self.disk_coords()
        return rho <= 1.0


def desk_sigma_range(n: int, lo: float = 5.0, hi: float = 6.0) -> tuple[float, float]:
    """Rescale the per-mode sigma bounds from the 256 px reference to ``n`` px.

    PSF extent in pixels depends on the coefficient magnitude only, so the
    coefficients are scaled by ``n / 256`` to keep the blur the same
    fraction of the field of view.
    """
    s = n / REFERENCE_GRID
    return lo * s, hi * s


def noll_to_nm(j: int) -> tuple[int, int]:
    """Map a Noll index (1-based) to radial order ``n`` and signed azimuthal ``m``.

    Even ``j`` gives the cosine term (``m > 0``), odd ``j`` the sine term.
    """
    if j < 1:
        raise ValueError(f"Noll index must be >= 1, got {j}")
    n = 0
    j1 = j - 1
    while j1 > n:
        n += 1
        j1 -= n
    m = (-1) ** j * ((n % 2) + 2 * int((j1 + ((n + 1) % 2)) / 2.0))
    return n, m


def radial_poly(n: int, m: int, rho: np.ndarray) -> np.ndarray:
    m = abs(m)
    out = np.zeros_like(rho, dtype=float)
    for k in range((n - m) // 2 + 1):
        c = (-1) ** k * math.factorial(n - k) / (
            math.factorial(k)
            * math.factorial((n + m) // 2 - k)
            * math.factorial((n - m) // 2 - k)
        )
        out += c * rho ** (n - 2 * k)
    return out


def zernike_noll(j: int, rho: np.ndarray, theta: np.ndarray) -> np.ndarray:
    """Evaluate the Noll-normalized mode ``j`` (no support masking)."""
    n, m = noll_to_nm(j)
    r = radial_poly(n, m, rho)
    if m == 0:
        return math.sqrt(n + 1) * r
    norm = math.sqrt(2 * (n + 1))
    if m > 0:
        return norm * r * np.cos(m * theta)
    return norm * r * np.sin(-m * theta)


@dataclass(frozen=True)
class ZernikeBasis:
    grid: GridSpec
    modes: np.ndarray = field(repr=False)  # (count, n, n), zero outside the disk

    @property
    def count(self) -> int:
        return self.modes.shape[0]


@dataclass(frozen=True)
class AberrationSample:
    coeffs: np.ndarray
    sigmas: np.ndarray


def build_basis(grid: GridSpec, count: int = DEFAULT_MODES) -> ZernikeBasis:
    """Evaluate Noll modes ``Z_1 .. Z_count`` on the pupil disk of ``grid``."""
    if not isinstance(grid, GridSpec):
        raise ConfigurationError("grid must be a GridSpec")
    if count < 1:
        raise ValueError(f"count must be >= 1, got {count}")
    rho, theta = grid.disk_coords()
    inside = rho <= 1.0
    modes = np.zeros((count,) + grid.shape)
    for j in range(1, count + 1):
        modes[j - 1][inside] = zernike_noll(j, rho[inside], theta[inside])
    modes.setflags(write=False)
    return ZernikeBasis(grid=grid, modes=modes)


def compose_phase(basis: ZernikeBasis, coeffs) -> np.ndarray:
    """Phase map ``sum_j coeffs[j] * Z_j`` in radians."""
    coeffs = np.asarray(coeffs, dtype=float)
    if coeffs.shape != (basis.count,):
        raise ValueError(f"expected {basis.count} coefficients, got shape {coeffs.shape}")
    return np.tensordot(coeffs, basis.modes, axes=1)


def compose_phases(basis: ZernikeBasis, coeff_matrix) -> np.ndarray:
    """Stack of phase maps, one per row of a ``(K, count)`` coefficient matrix."""
    coeff_matrix = np.atleast_2d(np.asarray(coeff_matrix, dtype=float))
    if coeff_matrix.shape[1] != basis.count:
        raise ValueError(f"expected {basis.count} columns, got {coeff_matrix.shape[1]}")
    return np.tensordot(coeff_matrix, basis.modes, axes=1)


def project_phase(basis: ZernikeBasis, grad_phase: np.ndarray) -> np.ndarray:
    """Pull a gradient w.r.t. phase back onto the coefficients (adjoint of compose)."""
    return np.tensordot(grad_phase, basis.modes, axes=([-2, -1], [1, 2]))


def sample_aberration(
    rng: np.random.Generator,
    basis: ZernikeBasis,
    sigma_lo: float = 5.0,
    sigma_hi: float = 6.0,
) -> AberrationSample:
    """Draw per-mode sigmas from ``U[sigma_lo, sigma_hi]`` then Gaussian coefficients.

    Piston is always zero.
    """
    if sigma_lo < 0:
        raise ValueError(f"sigma_lo must be >= 0, got {sigma_lo}")
    if sigma_hi < sigma_lo:
        raise ValueError(f"sigma_hi ({sigma_hi}) < sigma_lo ({sigma_lo})")
    sigmas = np.zeros(basis.count)
    coeffs = np.zeros(basis.count)
    sigmas[1:] = rng.uniform(sigma_lo, sigma_hi, size=basis.count - 1)
    coeffs[1:] = rng.normal(0.0, 1.0, size=basis.count - 1) * sigmas[1:]
    return AberrationSample(coeffs=coeffs, sigmas=sigmas)


def write_coeffs_csv(path, rows) -> None:
    rows = np.atleast_2d(np.asarray(rows, dtype=float))
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow([f"z{j}" for j in range(1, rows.shape[1] + 1)])
        for row in rows:
            w.writerow([repr(float(v)) for v in row])


def read_coeffs_csv(path) -> np.ndarray:
    with open(Path(path), newline="") as fh:
        reader = csv.reader(fh)
        header = next(reader)
        if not header or header[0] != "z1":
            raise ValueError(f"{path}: expected header z1..zN")
        rows = [[float(v) for v in row] for row in reader if row]
    return np.array(rows, dtype=float).reshape(-1, len(header))
