"""Baseline modulation sets and end-to-end learning of modulations.

Learned modulations are the output of a small MLP ``G`` applied to a fixed
input vector: ``coeffs = G(Z)`` is a ``(K, 28)`` Zernike coefficient
matrix. Training backpropagates the proxy reconstruction error through the
frames, the PSFs and the phase maps into the MLP weights.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass, field

import numpy as np

from wavemo.adam import Adam
from wavemo.diversity import ModulationSet
from wavemo.errors import ConfigurationError, NumericalError
from wavemo.optics import convolve_backward_kernel, mtf_backward, otf, psf, psf_backward
from wavemo.recon_proxy import (
    ProxyParams,
    init_params,
    proxy_loss_grads,
    simulate_frames,
)
from wavemo.zernike import (
    AberrationSample,
    ZernikeBasis,
    compose_phase,
    compose_phases,
    project_phase,
    sample_aberration,
)

log = logging.getLogger(__name__)

LEAKY_SLOPE = 0.01
BASELINE_KINDS = ("none", "random_zernike", "random_gaussian", "focus_sweep")


@dataclass
class ModMLP:
    """Two dense layers with a leaky-ReLU between them: ``Z -> hidden -> K * count``."""

    w1: np.ndarray
    b1: np.ndarray
    w2: np.ndarray
    b2: np.ndarray
    K: int
    z: np.ndarray = field(default=None)

    def __post_init__(self):
        if self.z is None:
            self.z = np.ones(self.w1.shape[1])

    @property
    def hidden(self) -> int:
        return self.w1.shape[0]

    @property
    def count(self) -> int:
        return self.w1.shape[1]

    @classmethod
    def init(cls, rng: np.random.Generator, K: int = 16, count: int = 28, hidden: int = 64,
             out_scale: float = 1.0) -> ModMLP:
        """Uniform fan-in initialization; ``out_scale`` sets the initial coefficient size."""
        a1 = 1.0 / np.sqrt(count)
        a2 = out_scale / np.sqrt(hidden)
        return cls(
            w1=rng.uniform(-a1, a1, (hidden, count)),
            b1=rng.uniform(-a1, a1, hidden),
            w2=rng.uniform(-a2, a2, (K * count, hidden)),
            b2=np.zeros(K * count),
            K=K,
        )

    def params(self) -> dict[str, np.ndarray]:
        return {"w1": self.w1, "b1": self.b1, "w2": self.w2, "b2": self.b2}

    def copy(self) -> ModMLP:
        return ModMLP(self.w1.copy(), self.b1.copy(), self.w2.copy(), self.b2.copy(), self.K, self.z.copy())


def mod_mlp_forward(mlp: ModMLP) -> np.ndarray:
    """``(K, count)`` coefficient matrix ``layer2(leaky_relu(layer1(Z)))``."""
    pre = mlp.w1 @ mlp.z + mlp.b1
    act = np.where(pre > 0, pre, LEAKY_SLOPE * pre)
    return (mlp.w2 @ act + mlp.b2).reshape(mlp.K, mlp.count)


def mod_mlp_backward(mlp: ModMLP, grad_coeffs: np.ndarray) -> dict[str, np.ndarray]:
    """Parameter gradients given ``dL/dcoeffs`` of shape ``(K, count)``."""
    pre = mlp.w1 @ mlp.z + mlp.b1
    act = np.where(pre > 0, pre, LEAKY_SLOPE * pre)
    g_out = np.asarray(grad_coeffs, dtype=float).reshape(-1)
    g_act = mlp.w2.T @ g_out
    g_pre = g_act * np.where(pre > 0, 1.0, LEAKY_SLOPE)
    return {
        "w1": np.outer(g_pre, mlp.z),
        "b1": g_pre,
        "w2": np.outer(g_out, act),
        "b2": g_out,
    }


def gaussian_pixel_sigma(basis: ZernikeBasis, sigma_lo: float, sigma_hi: float) -> float:
    """Per-pixel phase std matching the mean in-pupil variance of random Zernike draws."""
    if sigma_hi > sigma_lo:
        e_sigma2 = (sigma_hi**3 - sigma_lo**3) / (3 * (sigma_hi - sigma_lo))
    else:
        e_sigma2 = sigma_lo**2
    disk = basis.grid.disk()
    mode_power = np.mean(basis.modes[1:, disk] ** 2, axis=1)
    return float(np.sqrt(e_sigma2 * np.sum(mode_power)))


def generate_baseline(kind: str, K: int, basis: ZernikeBasis, rng: np.random.Generator,
                      sweep_amp: float = 6.0, sigma_lo: float = 5.0,
                      sigma_hi: float = 6.0) -> ModulationSet:
    """Heuristic modulation sets.

    ``none`` is a single zero pattern regardless of ``K``; ``random_zernike``
    draws K aberration-like patterns; ``random_gaussian`` draws per-pixel
    Gaussian phase inside the pupil with energy matched to the Zernike
    draws; ``focus_sweep`` ramps defocus linearly over
    ``[-sweep_amp, sweep_amp]``.
    """
    if kind not in BASELINE_KINDS:
        raise ValueError(f"unknown modulation kind {kind!r}; expected one of {BASELINE_KINDS}")
    if K < 1:
        raise ValueError("K must be >= 1")
    grid = basis.grid
    if kind == "none":
        return ModulationSet.none(grid, basis.count)
    if kind == "random_zernike":
        coeffs = np.stack([sample_aberration(rng, basis, sigma_lo, sigma_hi).coeffs for _ in range(K)])
        return ModulationSet.from_coeffs(basis, coeffs, kind)
    if kind == "focus_sweep":
        coeffs = np.zeros((K, basis.count))
        coeffs[:, 3] = np.linspace(-sweep_amp, sweep_amp, K) if K > 1 else 0.0
        return ModulationSet.from_coeffs(basis, coeffs, kind)
    sigma_px = gaussian_pixel_sigma(basis, sigma_lo, sigma_hi)
    disk = grid.disk()
    patterns = rng.normal(0.0, sigma_px, (K,) + grid.shape) * disk
    return ModulationSet(patterns, kind)


def smooth_max(values: np.ndarray, tau: float, axis: int = 0):
    """Log-sum-exp maximum and its softmax weights along ``axis``."""
    scaled = values / tau
    top = np.max(scaled, axis=axis, keepdims=True)
    e = np.exp(scaled - top)
    s = np.sum(e, axis=axis, keepdims=True)
    value = tau * (np.log(s) + top)
    return np.squeeze(value, axis=axis), e / s


def mtf_objective(coeffs: np.ndarray, basis: ZernikeBasis, mask: np.ndarray,
                  aberrations: np.ndarray, tau: float = 0.05, with_grad: bool = True):
    """Mean over aberrations and frequencies of the smooth-max combined MTF.

    ``coeffs`` is ``(K, count)``, ``aberrations`` a ``(S, n, n)`` phase stack.
    Returns ``(value, grad_coeffs)``.
    """
    gammas = compose_phases(basis, coeffs)
    phases = aberrations[:, None] + gammas[None]
    h = psf(mask, phases)
    H = otf(h)
    mtf = np.abs(H)
    sm, weights = smooth_max(mtf, tau, axis=1)
    scale = 1.0 / sm.size
    value = float(np.sum(sm) * scale)
    if not with_grad:
        return value, None
    g_h = mtf_backward(H, weights * scale)
    g_phase = psf_backward(mask, phases, g_h).sum(axis=0)
    return value, project_phase(basis, g_phase)


def mtf_direct_opt(K: int, basis: ZernikeBasis, mask: np.ndarray,
                   aberration_samples: list[AberrationSample], iters: int,
                   rng: np.random.Generator, tau: float = 0.05, lr: float = 0.05,
                   init_sigma: tuple[float, float] = (5.0, 6.0)) -> ModulationSet:
    """Baseline that maximizes the smooth-max combined MTF by gradient ascent.

    Starts from random Zernike draws and returns the best iterate seen.
    """
    if not aberration_samples:
        raise ValueError("mtf_direct_opt needs at least one aberration sample")
    if K < 1:
        raise ValueError("K must be >= 1")
    aberrations = np.stack([compose_phase(basis, s.coeffs) for s in aberration_samples])
    coeffs = np.stack([sample_aberration(rng, basis, *init_sigma).coeffs for _ in range(K)])
    params = {"c": coeffs}
    adam = Adam(lr=lr)
    best_val, best = -np.inf, coeffs.copy()
    for _ in range(iters + 1):
        val, grad = mtf_objective(params["c"], basis, mask, aberrations, tau)
        if val > best_val:
            best_val, best = val, params["c"].copy()
        adam.step(params, {"c": grad}, maximize=True)
    return ModulationSet.from_coeffs(basis, best, "mtf_opt")


@dataclass(frozen=True)
class TrainConfig:
    """End-to-end training settings, sized for a desktop run."""

    iterations: int = 5000
    learning_rate: float = 1e-3
    sigma_range: tuple[float, float] = (5.0, 6.0)
    K: int = 16
    hidden: int = 64
    noise_sigma: float = 0.01
    seed: int = 0
    batch_size: int = 4
    init_scale: float = 1.0
    scene_source: object = None  # callable returning one scene per call

    def __post_init__(self):
        if self.iterations < 0:
            raise ConfigurationError("iterations must be >= 0")
        if self.K < 1 or self.hidden < 1 or self.batch_size < 1:
            raise ConfigurationError("K, hidden and batch_size must be >= 1")
        lo, hi = self.sigma_range
        if lo < 0 or hi < lo:
            raise ConfigurationError(f"invalid sigma_range {self.sigma_range}")


def end_to_end_value_and_grads(mlp: ModMLP, proxy: ProxyParams, scenes: np.ndarray,
                               aberrations: np.ndarray, mask: np.ndarray, basis: ZernikeBasis,
                               noise: np.ndarray | None = None):
    """Loss of the full chain and gradients for proxy and MLP parameters.

    ``scenes`` (B, n, n), ``aberrations`` (B, n, n) phase maps, ``noise``
    an optional (B, K, n, n) additive term. Returns
    ``(loss, proxy_grads, mlp_grads, recon)``.
    """
    coeffs = mod_mlp_forward(mlp)
    gammas = compose_phases(basis, coeffs)
    phases = aberrations[:, None] + gammas[None]
    frames, _ = simulate_frames(scenes, phases, mask, 0.0, None)
    if noise is not None:
        frames = frames + noise
    loss, p_grads, g_frames = proxy_loss_grads(scenes, frames, proxy)
    g_h = convolve_backward_kernel(scenes[:, None], g_frames)
    g_phase = psf_backward(mask, phases, g_h).sum(axis=0)
    g_coeffs = project_phase(basis, g_phase)
    return loss, p_grads, mod_mlp_backward(mlp, g_coeffs)


def train_modulations(cfg: TrainConfig, basis: ZernikeBasis, mask: np.ndarray,
                      proxy_init: ProxyParams | None = None):
    """Jointly learn modulations and the proxy.

    Returns ``(ModulationSet, ProxyParams, history)`` where ``history`` holds
    ``(iteration, loss, psnr)`` rows; loss and PSNR are measured on each
    freshly drawn batch before the update.
    """
    if cfg.scene_source is None:
        raise ConfigurationError("TrainConfig.scene_source must be set")
    rng = np.random.default_rng(cfg.seed)
    mlp = ModMLP.init(rng, cfg.K, basis.count, cfg.hidden, cfg.init_scale)
    proxy = (proxy_init or init_params(mask, cfg.K)).copy()
    params = {**{f"mlp.{k}": v for k, v in mlp.params().items()},
              **{f"proxy.{k}": v for k, v in proxy.as_dict().items()}}
    adam = Adam(lr=cfg.learning_rate)
    lo, hi = cfg.sigma_range
    history = []
    for it in range(cfg.iterations):
        scenes = np.stack([cfg.scene_source() for _ in range(cfg.batch_size)])
        aber = np.stack([compose_phase(basis, sample_aberration(rng, basis, lo, hi).coeffs)
                         for _ in range(cfg.batch_size)])
        noise = rng.normal(0.0, cfg.noise_sigma, (cfg.batch_size, cfg.K) + mask.shape) \
            if cfg.noise_sigma > 0 else None
        mlp_cur = ModMLP(params["mlp.w1"], params["mlp.b1"], params["mlp.w2"], params["mlp.b2"], cfg.K, mlp.z)
        proxy_cur = ProxyParams(params["proxy.weights"], params["proxy.reg_pre"], float(params["proxy.bias"][0]))
        loss, p_grads, m_grads = end_to_end_value_and_grads(
            mlp_cur, proxy_cur, scenes, aber, mask, basis, noise)
        if not np.isfinite(loss):
            raise NumericalError(f"training diverged at iteration {it}")
        mse = loss / scenes.size
        history.append((it, loss / cfg.batch_size, 10 * np.log10(1.0 / mse) if mse > 0 else 99.0))
        grads = {**{f"mlp.{k}": v for k, v in m_grads.items()},
                 **{f"proxy.{k}": v for k, v in p_grads.items()}}
        adam.step(params, grads)
        if it % 500 == 0:
            log.info("iter %d loss %.5g psnr %.2f", it, history[-1][1], history[-1][2])
    mlp_final = ModMLP(params["mlp.w1"], params["mlp.b1"], params["mlp.w2"], params["mlp.b2"], cfg.K, mlp.z)
    proxy_final = ProxyParams(params["proxy.weights"], params["proxy.reg_pre"], float(params["proxy.bias"][0]))
    mods = ModulationSet.from_coeffs(basis, mod_mlp_forward(mlp_final), "learned")
    return mods, proxy_final, history
