"""Learned wavefront modulations for imaging through scattering media.

Incoherent image formation through unknown pupil-phase aberrations,
phase-diversity measurement stacks, blind iterative reconstruction,
and end-to-end learning of modulation patterns through a differentiable
spectral proxy reconstructor.
"""

from wavemo.diversity import (
    MeasurementStack,
    ModulationSet,
    capture_stack,
    combined_mtf,
    radial_profile,
)
from wavemo.errors import (
    ConfigurationError,
    ContractError,
    NumericalError,
    UnderdeterminedError,
)
from wavemo.metrics import aggregate, psnr, ssim
from wavemo.optics import add_noise, convolve, otf_mtf, psf, pupil_mask
from wavemo.zernike import (
    AberrationSample,
    GridSpec,
    ZernikeBasis,
    build_basis,
    compose_phase,
    sample_aberration,
)

__version__ = "0.1.0"

__all__ = [
    "AberrationSample",
    "ConfigurationError",
    "ContractError",
    "GridSpec",
    "MeasurementStack",
    "ModulationSet",
    "NumericalError",
    "UnderdeterminedError",
    "ZernikeBasis",
    "add_noise",
    "aggregate",
    "build_basis",
    "capture_stack",
    "combined_mtf",
    "compose_phase",
    "convolve",
    "otf_mtf",
    "psf",
    "psnr",
    "pupil_mask",
    "radial_profile",
    "sample_aberration",
    "ssim",
]
