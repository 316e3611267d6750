"""Image-quality metrics and mean/SD aggregation for result tables."""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from wavemo import io

PSNR_CAP = 99.0


def psnr(a: np.ndarray, b: np.ndarray, peak: float = 1.0) -> float:
    """Peak signal-to-noise ratio in dB, capped at 99 dB for identical inputs."""
    a = np.asarray(a, dtype=float)
    b = np.asarray(b, dtype=float)
    if a.shape != b.shape:
        raise ValueError(f"grid mismatch: {a.shape} vs {b.shape}")
    if peak <= 0:
        raise ValueError("peak must be positive")
    mse = float(np.mean((a - b) ** 2))
    if mse == 0.0:
        return PSNR_CAP
    return min(PSNR_CAP, 10.0 * math.log10(peak * peak / mse))


def _gaussian_window(size: int = 11, sigma: float = 1.5) -> np.ndarray:
    r = np.arange(size) - (size - 1) / 2
    g = np.exp(-(r * r) / (2 * sigma * sigma))
    return g / g.sum()


def _filter_valid(img: np.ndarray, g: np.ndarray) -> np.ndarray:
    rows = sliding_window_view(img, g.size, axis=0) @ g
    return sliding_window_view(rows, g.size, axis=1) @ g


def ssim(a: np.ndarray, b: np.ndarray, win_size: int = 11, sigma: float = 1.5,
         data_range: float = 1.0) -> float:
    """Single-scale SSIM with a Gaussian window, averaged over valid positions."""
    a = np.asarray(a, dtype=float)
    b = np.asarray(b, dtype=float)
    if a.shape != b.shape:
        raise ValueError(f"grid mismatch: {a.shape} vs {b.shape}")
    if min(a.shape) < win_size:
        raise ValueError(f"image {a.shape} smaller than the {win_size}x{win_size} window")
    g = _gaussian_window(win_size, sigma)
    c1 = (0.01 * data_range) ** 2
    c2 = (0.03 * data_range) ** 2
    mu_a = _filter_valid(a, g)
    mu_b = _filter_valid(b, g)
    var_a = _filter_valid(a * a, g) - mu_a**2
    var_b = _filter_valid(b * b, g) - mu_b**2
    cov = _filter_valid(a * b, g) - mu_a * mu_b
    num = (2 * mu_a * mu_b + c1) * (2 * cov + c2)
    den = (mu_a**2 + mu_b**2 + c1) * (var_a + var_b + c2)
    return float(np.mean(num / den))


def aggregate(values) -> tuple[float, float]:
    """Mean and sample standard deviation (n - 1); SD is 0 for one value."""
    v = np.asarray(list(values), dtype=float)
    if v.size == 0:
        raise ValueError("cannot aggregate an empty list")
    mean = float(np.mean(v))
    sd = float(np.std(v, ddof=1)) if v.size > 1 else 0.0
    return mean, sd


def align_translation(est: np.ndarray, ref: np.ndarray) -> np.ndarray:
    """Circularly shift ``est`` (sub-pixel, Fourier shift) to best match ``ref``.

    Tip/tilt of the aberration and a translation of the scene produce the
    same measurements, so blind reconstructions are compared after this
    registration.
    """
    from skimage.registration import phase_cross_correlation

    shift, _, _ = phase_cross_correlation(ref, est, upsample_factor=20, normalization=None)
    n0, n1 = est.shape
    f0 = np.fft.fftfreq(n0)[:, None]
    f1 = np.fft.fftfreq(n1)[None, :]
    ramp = np.exp(-2j * np.pi * (f0 * shift[0] + f1 * shift[1]))
    return np.real(np.fft.ifft2(np.fft.fft2(est) * ramp))


@dataclass
class MetricReport:
    per_item: list[tuple[str, float, float]] = field(default_factory=list)

    def add(self, item_id: str, psnr_db: float, ssim_val: float) -> None:
        self.per_item.append((item_id, psnr_db, ssim_val))

    @property
    def mean_psnr(self) -> float:
        return aggregate([p for _, p, _ in self.per_item])[0]

    @property
    def sd_psnr(self) -> float:
        return aggregate([p for _, p, _ in self.per_item])[1]

    @property
    def mean_ssim(self) -> float:
        return aggregate([s for _, _, s in self.per_item])[0]

    @property
    def sd_ssim(self) -> float:
        return aggregate([s for _, _, s in self.per_item])[1]


def write_table_csv(path, reports: dict[str, dict[str, MetricReport]]) -> None:
    """Summary table: one row per (method, metric), one column per modulation kind.

    ``reports[method][kind]`` holds the scores; cells read ``mean (sd)``.
    """
    kinds: list[str] = []
    for by_kind in reports.values():
        for k in by_kind:
            if k not in kinds:
                kinds.append(k)
    rows = []
    for method, by_kind in reports.items():
        for metric in ("psnr", "ssim"):
            row = [method, metric]
            for k in kinds:
                rep = by_kind.get(k)
                if rep is None or not rep.per_item:
                    row.append("N/A")
                elif metric == "psnr":
                    row.append(f"{rep.mean_psnr:.3f} ({rep.sd_psnr:.3f})")
                else:
                    row.append(f"{rep.mean_ssim:.4f} ({rep.sd_ssim:.4f})")
            rows.append(row)
    io.write_csv(path, ["method", "metric"] + kinds, rows)
