"""Benchmark helpers shared by the command line and the acceptance suite.

A held-out set pairs procedural scenes with fresh aberrations; every
modulation kind is scored on the same pairs so differences come from the
modulations alone.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from wavemo.diversity import (
    MeasurementStack,
    ModulationSet,
    capture_stack,
    combined_mtf,
    radial_profile,
)
from wavemo.metrics import MetricReport, align_translation, psnr, ssim
from wavemo.modopt import generate_baseline
from wavemo.recon_iterative import ReconOptions, reconstruct
from wavemo.recon_proxy import ProxyParams, proxy_forward
from wavemo.scenes import SceneSource
from wavemo.zernike import ZernikeBasis, compose_phase, sample_aberration


def simulate_instance(basis: ZernikeBasis, mask: np.ndarray, mods, seed: int, noise_sigma: float,
                      sigma_range: tuple[float, float], scene: np.ndarray | None = None,
                      K: int = 8, sweep_amp: float = 6.0) -> MeasurementStack:
    """One simulated capture, drawn the same way as ``wavemo simulate``.

    ``mods`` is a :class:`ModulationSet` or a baseline kind name. The
    generator seeded by ``seed`` supplies, in order, the aberration, the
    modulations (for a kind name) and the noise; the procedural scene has
    its own stream.
    """
    rng = np.random.default_rng(seed)
    if scene is None:
        scene = SceneSource(basis.grid.n, seed=seed)()
    aber = sample_aberration(rng, basis, *sigma_range)
    if isinstance(mods, str):
        mods = generate_baseline(mods, K, basis, rng, sweep_amp, *sigma_range)
    return capture_stack(scene, compose_phase(basis, aber.coeffs), mods, mask, noise_sigma, rng,
                         aberration_truth=aber, seed=seed)


@dataclass
class HeldOut:
    ids: list[str]
    scenes: np.ndarray  # (S, n, n)
    phases: np.ndarray  # (S, n, n)


def held_out_set(basis: ZernikeBasis, count: int, seed: int, sigma_range: tuple[float, float],
                 directory=None) -> HeldOut:
    """``count`` scene/aberration pairs drawn from generators seeded by ``seed``."""
    if count < 1:
        raise ValueError("need at least one evaluation scene")
    n = basis.grid.n
    src = SceneSource(n, seed=seed, directory=directory)
    rng = np.random.default_rng([seed, 1])
    scenes = np.stack([src() for _ in range(count)])
    phases = np.stack([compose_phase(basis, sample_aberration(rng, basis, *sigma_range).coeffs)
                       for _ in range(count)])
    return HeldOut([f"scene{i:03d}" for i in range(count)], scenes, phases)


def _win(n: int) -> int:
    # largest odd window up to 11 that fits the image
    return min(11, n if n % 2 else n - 1)


def score(est: np.ndarray, ref: np.ndarray, align: bool = False) -> tuple[float, float]:
    """PSNR and SSIM, optionally after translation registration."""
    if align:
        est = align_translation(est, ref)
    return psnr(est, ref), ssim(est, ref, win_size=_win(ref.shape[-1]))


def evaluate_proxy(mods: ModulationSet, proxy: ProxyParams, data: HeldOut, mask: np.ndarray,
                   noise_sigma: float, seed: int = 0) -> MetricReport:
    rng = np.random.default_rng(seed)
    rep = MetricReport()
    for item, x, phi in zip(data.ids, data.scenes, data.phases):
        stack = capture_stack(x, phi, mods, mask, noise_sigma, rng)
        rep.add(item, *score(proxy_forward(stack, proxy), x))
    return rep


def evaluate_iterative(mods: ModulationSet, data: HeldOut, mask: np.ndarray, basis: ZernikeBasis,
                       noise_sigma: float, opts: ReconOptions = ReconOptions(),
                       seed: int = 0) -> MetricReport:
    """Blind reconstruction per scene, scored after translation registration."""
    rng = np.random.default_rng(seed)
    rep = MetricReport()
    for item, x, phi in zip(data.ids, data.scenes, data.phases):
        stack = capture_stack(x, phi, mods, mask, noise_sigma, rng)
        state = reconstruct(stack, mask, basis, opts)
        rep.add(item, *score(state.scene_est, x, align=True))
    return rep


def mean_mtf_profile(mods: ModulationSet, mask: np.ndarray, phases: np.ndarray, nbins: int = 16):
    """Radial profile of the combined MTF averaged over aberration phase maps."""
    mtf = np.mean([combined_mtf(phi, mods, mask) for phi in phases], axis=0)
    return radial_profile(mtf, nbins)


def upper_half_mean(profile: np.ndarray) -> float:
    """Mean of a radial profile over its upper half of frequency bins."""
    half = profile[len(profile) // 2:]
    return float(np.nanmean(half))
