"""Phase-diversity measurement stacks and the combined MTF of a modulation set."""

from __future__ import annotations

from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from wavemo import io
from wavemo.optics import add_noise, convolve, otf_mtf, psf
from wavemo.zernike import (
    AberrationSample,
    GridSpec,
    ZernikeBasis,
    compose_phases,
    read_coeffs_csv,
    write_coeffs_csv,
)

PROVENANCES = ("none", "random_zernike", "random_gaussian", "focus_sweep", "mtf_opt", "learned")


@dataclass(frozen=True)
class ModulationSet:
    """K known phase patterns added to the pupil, one per captured frame."""

    patterns: np.ndarray = field(repr=False)  # (K, n, n) radians
    provenance: str = "none"
    coeffs: np.ndarray | None = field(default=None, repr=False)  # (K, count) when Zernike

    def __post_init__(self):
        patterns = np.asarray(self.patterns, dtype=float)
        if patterns.ndim == 2:
            patterns = patterns[None]
        if patterns.ndim != 3 or patterns.shape[0] < 1:
            raise ValueError("a modulation set needs at least one (n, n) pattern")
        if self.provenance not in PROVENANCES:
            raise ValueError(f"unknown provenance {self.provenance!r}")
        if self.provenance == "none" and (patterns.shape[0] != 1 or np.any(patterns)):
            raise ValueError("provenance 'none' means a single all-zero pattern")
        if self.coeffs is not None:
            coeffs = np.atleast_2d(np.asarray(self.coeffs, dtype=float))
            if coeffs.shape[0] != patterns.shape[0]:
                raise ValueError("coefficient rows must match the number of patterns")
            object.__setattr__(self, "coeffs", coeffs)
        object.__setattr__(self, "patterns", patterns)

    @property
    def K(self) -> int:
        return self.patterns.shape[0]

    @classmethod
    def from_coeffs(cls, basis: ZernikeBasis, coeffs, provenance: str) -> ModulationSet:
        coeffs = np.atleast_2d(np.asarray(coeffs, dtype=float))
        return cls(compose_phases(basis, coeffs), provenance, coeffs)

    @classmethod
    def none(cls, grid: GridSpec, count: int | None = None) -> ModulationSet:
        coeffs = None if count is None else np.zeros((1, count))
        return cls(np.zeros((1,) + grid.shape), "none", coeffs)

    def digest(self) -> str:
        return io.array_digest(self.patterns)

    def append(self, pattern: np.ndarray, provenance: str | None = None) -> ModulationSet:
        """New set with one more pattern; a 'none' set must be given a new provenance."""
        provenance = provenance or self.provenance
        return ModulationSet(np.concatenate([self.patterns, np.asarray(pattern)[None]]), provenance)

    def save(self, directory) -> None:
        """CSV coefficient matrix (K rows) when available, PFM planes otherwise."""
        d = Path(directory)
        d.mkdir(parents=True, exist_ok=True)
        entries = {"K": self.K, "n": self.patterns.shape[-1], "provenance": self.provenance,
                   "digest": self.digest()}
        if self.coeffs is not None:
            write_coeffs_csv(d / "modulations.csv", self.coeffs)
            entries["format"] = "zernike_csv"
        else:
            for i, p in enumerate(self.patterns):
                io.write_pfm(d / f"modulation_{i:03d}.pfm", p)
            entries["format"] = "pfm"
        io.write_manifest(d / "modulations_manifest.txt", entries)

    @classmethod
    def load(cls, directory, basis: ZernikeBasis | None = None) -> ModulationSet:
        d = Path(directory)
        man = io.read_manifest(d / "modulations_manifest.txt")
        K = int(man["K"])
        if man.get("format") == "zernike_csv":
            if basis is None:
                raise ValueError("a Zernike basis is required to load coefficient modulations")
            coeffs = read_coeffs_csv(d / "modulations.csv")
            if coeffs.shape[0] != K:
                raise ValueError(f"{d}: manifest K={K} but CSV has {coeffs.shape[0]} rows")
            return cls.from_coeffs(basis, coeffs, man["provenance"])
        patterns = np.stack([io.read_pfm(d / f"modulation_{i:03d}.pfm") for i in range(K)])
        return cls(patterns, man["provenance"])


@dataclass
class MeasurementStack:
    frames: np.ndarray = field(repr=False)  # (K, n, n)
    modulations: ModulationSet
    noise_sigma: float = 0.0
    aberration_truth: AberrationSample | None = field(default=None, repr=False)
    scene_truth: np.ndarray | None = field(default=None, repr=False)
    seed: int | None = None

    def __post_init__(self):
        self.frames = np.asarray(self.frames, dtype=float)
        if self.frames.ndim != 3 or self.frames.shape[0] != self.modulations.K:
            raise ValueError(
                f"stack has {self.frames.shape[0] if self.frames.ndim == 3 else '?'} frames "
                f"but {self.modulations.K} modulations"
            )
        if self.frames.shape[-2:] != self.modulations.patterns.shape[-2:]:
            raise ValueError("frames and modulations live on different grids")

    @property
    def K(self) -> int:
        return self.frames.shape[0]

    def save(self, directory) -> None:
        d = Path(directory)
        d.mkdir(parents=True, exist_ok=True)
        for i, f in enumerate(self.frames):
            io.write_pfm(d / f"frame_{i:03d}.pfm", f)
        self.modulations.save(d)
        entries = {
            "K": self.K,
            "n": self.frames.shape[-1],
            "sigma": repr(float(self.noise_sigma)),
            "seed": "" if self.seed is None else self.seed,
            "provenance": self.modulations.provenance,
            "modulation_digest": self.modulations.digest(),
        }
        if self.scene_truth is not None:
            io.write_pfm(d / "scene_truth.pfm", self.scene_truth)
            entries["scene_truth"] = "scene_truth.pfm"
        if self.aberration_truth is not None:
            write_coeffs_csv(d / "aberration_truth.csv", self.aberration_truth.coeffs)
            write_coeffs_csv(d / "aberration_sigmas.csv", self.aberration_truth.sigmas)
            entries["aberration_truth"] = "aberration_truth.csv"
        io.write_manifest(d / "manifest.txt", entries)

    @classmethod
    def load(cls, directory, basis: ZernikeBasis | None = None,
             modulations: ModulationSet | None = None) -> MeasurementStack:
        """Load a stack directory; ``modulations`` overrides the stored set after checks."""
        d = Path(directory)
        man = io.read_manifest(d / "manifest.txt")
        K = int(man["K"])
        frames = np.stack([io.read_pfm(d / f"frame_{i:03d}.pfm") for i in range(K)])
        if modulations is None:
            modulations = ModulationSet.load(d, basis)
        if modulations.K != K:
            raise ValueError(f"manifest lists K={K} but the modulation set has K={modulations.K}")
        if modulations.digest() != man.get("modulation_digest", modulations.digest()):
            raise ValueError("modulation set does not match the one used to capture this stack")
        scene = io.read_pfm(d / man["scene_truth"]) if "scene_truth" in man else None
        aber = None
        if "aberration_truth" in man:
            aber = AberrationSample(read_coeffs_csv(d / "aberration_truth.csv")[0],
                                    read_coeffs_csv(d / "aberration_sigmas.csv")[0])
        seed = int(man["seed"]) if man.get("seed") else None
        return cls(frames, modulations, float(man["sigma"]), aber, scene, seed)


def frame_psfs(aberration: np.ndarray, mods: ModulationSet, mask: np.ndarray) -> np.ndarray:
    """PSFs ``h(aberration + gamma_i)`` for every modulation, shape (K, n, n)."""
    if aberration.shape[-2:] != mods.patterns.shape[-2:]:
        raise ValueError("aberration and modulations live on different grids")
    return psf(mask, aberration[None] + mods.patterns)


def capture_stack(
    scene: np.ndarray,
    aberration: np.ndarray,
    mods: ModulationSet,
    mask: np.ndarray,
    sigma: float,
    rng: np.random.Generator,
    aberration_truth: AberrationSample | None = None,
    seed: int | None = None,
) -> MeasurementStack:
    """Simulate ``y_i = h(aberration + gamma_i) * scene + noise_i``.

    Noise is drawn frame by frame from ``rng`` in modulation order.
    """
    if mods is None or mods.K < 1:
        raise ValueError("capture_stack needs a non-empty modulation set")
    scene = np.asarray(scene, dtype=float)
    for name, arr in (("scene", scene), ("aberration", aberration), ("mask", mask)):
        if arr.shape[-2:] != mods.patterns.shape[-2:]:
            raise ValueError(f"grid mismatch: {name} is {arr.shape}, modulations {mods.patterns.shape[-2:]}")
    clean = convolve(scene[None], frame_psfs(aberration, mods, mask))
    frames = np.stack([add_noise(f, sigma, rng) for f in clean])
    return MeasurementStack(frames, mods, float(sigma), aberration_truth, scene, seed)


def combined_mtf(aberration: np.ndarray, mods: ModulationSet, mask: np.ndarray) -> np.ndarray:
    """Per-frequency maximum over the modulated MTFs (DC at index (0, 0))."""
    if mods is None or mods.K < 1:
        raise ValueError("combined_mtf needs a non-empty modulation set")
    _, mtf = otf_mtf(frame_psfs(aberration, mods, mask))
    return mtf.max(axis=0)


def frequency_magnitude(n: int) -> np.ndarray:
    """``|omega|`` in cycles per grid for every DFT index (DC at (0, 0))."""
    f = np.fft.fftfreq(n, d=1.0 / n)
    fy, fx = np.meshgrid(f, f, indexing="ij")
    return np.hypot(fx, fy)


def radial_bins(n: int, nbins: int) -> tuple[np.ndarray, np.ndarray]:
    """Bin index per frequency pixel and the bin centres.

    Bin 0 holds DC alone; bins 1..nbins-1 split ``(0, n/2]`` linearly.
    Pixels beyond Nyquist (the corners) get index -1.
    """
    if nbins < 2:
        raise ValueError(f"nbins must be >= 2, got {nbins}")
    rad = frequency_magnitude(n)
    width = (n / 2) / (nbins - 1)
    idx = np.ceil(rad / width - 1e-12).astype(int)
    idx[rad > n / 2 + 1e-12] = -1
    edges = np.arange(nbins) * width
    centres = np.concatenate([[0.0], 0.5 * (edges[:-1] + edges[1:])])
    return idx, centres


def radial_profile(spec: np.ndarray, nbins: int = 32) -> tuple[np.ndarray, np.ndarray]:
    """Annular means of ``|spec|`` over frequency magnitude.

    Returns ``(centres, means)``; centres in cycles per grid. Empty annuli
    are NaN.
    """
    spec = np.abs(np.asarray(spec))
    idx, centres = radial_bins(spec.shape[-1], nbins)
    valid = idx >= 0
    sums = np.bincount(idx[valid], weights=spec[valid], minlength=nbins)
    counts = np.bincount(idx[valid], minlength=nbins)
    with np.errstate(invalid="ignore", divide="ignore"):
        means = sums / counts
    means[counts == 0] = np.nan
    return centres, means


def write_profile_csv(path, centres, columns: dict[str, np.ndarray]) -> None:
    header = ["freq"] + list(columns)
    rows = [[float(c)] + [float(columns[k][i]) for k in columns] for i, c in enumerate(centres)]
    io.write_csv(path, header, rows)
