"""Incoherent image formation with a pupil-phase aberration.

DFT convention: unnormalized forward transform, the inverse carries
``1 / n**2`` (numpy's default). PSFs are stored DC-centred (zero lag on
pixel ``(n // 2, n // 2)``); spectra are stored with DC at index ``(0, 0)``.

All functions accept leading batch axes on phase maps, PSFs and images, so
a whole stack of K frames is processed with one FFT call.
"""

from __future__ import annotations

import numpy as np

from wavemo.errors import ContractError
from wavemo.zernike import GridSpec

_fft2 = np.fft.fft2
_ifft2 = np.fft.ifft2


def _check_shapes(a: np.ndarray, b: np.ndarray, what: str) -> None:
    if a.shape[-2:] != b.shape[-2:]:
        raise ValueError(f"grid mismatch in {what}: {a.shape[-2:]} vs {b.shape[-2:]}")


def pupil_mask(grid: GridSpec) -> np.ndarray:
    """Binary disk of radius ``aperture_radius_frac * n / 2`` pixels."""
    return grid.disk().astype(float)


def pupil_field(mask: np.ndarray, phase: np.ndarray) -> np.ndarray:
    _check_shapes(mask, phase, "pupil_field")
    return mask * np.exp(1j * phase)


def _energy(mask: np.ndarray) -> float:
    # sum |DFT(m e^{j phi})|^2 = n^2 sum m^2 by Parseval, whatever phi is
    n2 = mask.shape[-1] * mask.shape[-2]
    return n2 * float(np.sum(mask * mask))


def psf(mask: np.ndarray, phase: np.ndarray) -> np.ndarray:
    """``|DFT(m * exp(j phase))|**2`` normalized to unit sum, DC-centred."""
    mask = np.asarray(mask, dtype=float)
    phase = np.asarray(phase, dtype=float)
    field = pupil_field(mask, phase)
    amp = _fft2(field)
    h = (amp.real**2 + amp.imag**2) / _energy(mask)
    return np.fft.fftshift(h, axes=(-2, -1))


def psf_backward(mask: np.ndarray, phase: np.ndarray, grad_psf: np.ndarray) -> np.ndarray:
    """Vector-Jacobian product of :func:`psf`: gradient w.r.t. ``phase``.

    With ``P = m e^{j phase}``, ``A = DFT(P)`` and ``h = |A|^2 / S``,
    ``dL/dphase = -(2 / S) Im(P * DFT(G * conj(A)))`` where ``G`` is the
    upstream gradient moved back to the uncentred layout.
    """
    field = pupil_field(mask, phase)
    amp = _fft2(field)
    g = np.fft.ifftshift(grad_psf, axes=(-2, -1))
    back = _fft2(g * np.conj(amp))
    return -(2.0 / _energy(mask)) * np.imag(field * back)


def otf(h: np.ndarray) -> np.ndarray:
    """OTF of a DC-centred PSF, DC at index (0, 0)."""
    return _fft2(np.fft.ifftshift(h, axes=(-2, -1)))


def otf_mtf(h: np.ndarray, atol: float = 1e-9) -> tuple[np.ndarray, np.ndarray]:
    """Return ``(OTF, MTF)`` of a normalized PSF.

    Raises
    ------
    ContractError
        If the PSF does not sum to one within ``atol``.
    """
    h = np.asarray(h, dtype=float)
    sums = h.sum(axis=(-2, -1))
    if np.any(np.abs(sums - 1.0) > atol):
        raise ContractError(f"PSF must be normalized; sum deviates from 1 by {np.max(np.abs(sums - 1.0)):.3g}")
    H = otf(h)
    return H, np.abs(H)


def mtf_backward(H: np.ndarray, grad_mtf: np.ndarray, eps: float = 1e-10) -> np.ndarray:
    """Gradient w.r.t. the DC-centred PSF given a gradient w.r.t. ``|OTF|``.

    ``|OTF|`` is not differentiable where the OTF vanishes (outside the
    pupil autocorrelation support); frequencies with ``|OTF| <= eps`` get a
    zero subgradient.
    """
    n2 = H.shape[-1] * H.shape[-2]
    mag = np.abs(H)
    live = mag > eps
    q = np.where(live, grad_mtf * H / np.where(live, mag, 1.0), 0.0)
    g = n2 * np.real(_ifft2(q))
    return np.fft.fftshift(g, axes=(-2, -1))


def convolve(image: np.ndarray, h: np.ndarray) -> np.ndarray:
    """Circular convolution of ``image`` with a DC-centred kernel."""
    image = np.asarray(image, dtype=float)
    h = np.asarray(h, dtype=float)
    _check_shapes(image, h, "convolve")
    return np.real(_ifft2(_fft2(image) * otf(h)))


def convolve_backward_image(h: np.ndarray, grad_out: np.ndarray) -> np.ndarray:
    """Adjoint of ``x -> convolve(x, h)``: correlation of ``grad_out`` with ``h``."""
    return np.real(_ifft2(_fft2(grad_out) * np.conj(otf(h))))


def convolve_backward_kernel(image: np.ndarray, grad_out: np.ndarray) -> np.ndarray:
    """Adjoint of ``h -> convolve(x, h)``, returned in the DC-centred layout."""
    g = np.real(_ifft2(_fft2(grad_out) * np.conj(_fft2(image))))
    return np.fft.fftshift(g, axes=(-2, -1))


def add_noise(image: np.ndarray, sigma: float, rng: np.random.Generator) -> np.ndarray:
    """Add i.i.d. Gaussian noise; no clipping so the model stays linear."""
    if sigma < 0:
        raise ValueError(f"noise sigma must be >= 0, got {sigma}")
    image = np.asarray(image, dtype=float)
    if sigma == 0:
        return image.copy()
    return image + rng.normal(0.0, sigma, size=image.shape)
