"""Differentiable multi-frame spectral combiner used as the proxy reconstructor.

The proxy is a learnable generalized Wiener filter:

    x_hat = Re IDFT[ sum_i W_i(w) Y_i(w) / (1 + lambda(w)) ] + bias

with complex per-frame spectral weights ``W_i``, a nonnegative
regularization spectrum ``lambda = softplus(reg_pre)`` and a scalar bias.
It is linear in the frames, so its loss gradient w.r.t. each frame is
cheap and exact; that gradient is what carries the modulation update in
end-to-end training.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from numpy.fft import fft2, ifft2

from wavemo import io
from wavemo.adam import Adam
from wavemo.diversity import MeasurementStack, ModulationSet
from wavemo.errors import ConfigurationError, NumericalError
from wavemo.optics import add_noise, convolve, otf, psf
from wavemo.zernike import ZernikeBasis, compose_phase, sample_aberration


def softplus(z):
    return np.logaddexp(0.0, z)


def sigmoid(z):
    return 0.5 * (1.0 + np.tanh(0.5 * z))


@dataclass
class ProxyParams:
    weights: np.ndarray = field(repr=False)  # (K, n, n) complex
    reg_pre: np.ndarray = field(repr=False)  # (n, n) real, lambda = softplus(reg_pre)
    bias: float = 0.0

    @property
    def K(self) -> int:
        return self.weights.shape[0]

    @property
    def reg_spectrum(self) -> np.ndarray:
        return softplus(self.reg_pre)

    def copy(self) -> ProxyParams:
        return ProxyParams(self.weights.copy(), self.reg_pre.copy(), float(self.bias))

    def as_dict(self) -> dict[str, np.ndarray]:
        return {"weights": self.weights, "reg_pre": self.reg_pre, "bias": np.array([self.bias])}

    def save(self, directory) -> None:
        """PFM bundle: real and imaginary plane per weight, one plane for reg_pre."""
        d = Path(directory)
        d.mkdir(parents=True, exist_ok=True)
        for i, w in enumerate(self.weights):
            io.write_pfm(d / f"proxy_w{i:03d}_re.pfm", w.real)
            io.write_pfm(d / f"proxy_w{i:03d}_im.pfm", w.imag)
        io.write_pfm(d / "proxy_reg_pre.pfm", self.reg_pre)
        io.write_manifest(d / "proxy_manifest.txt", {
            "K": self.K, "n": self.weights.shape[-1], "bias": repr(float(self.bias))})

    @classmethod
    def load(cls, directory) -> ProxyParams:
        d = Path(directory)
        man = io.read_manifest(d / "proxy_manifest.txt")
        K = int(man["K"])
        w = np.stack([io.read_pfm(d / f"proxy_w{i:03d}_re.pfm")
                      + 1j * io.read_pfm(d / f"proxy_w{i:03d}_im.pfm") for i in range(K)])
        return cls(w, io.read_pfm(d / "proxy_reg_pre.pfm"), float(man["bias"]))


def init_params(mask: np.ndarray, K: int, reg: float = 0.1) -> ProxyParams:
    """Multi-frame Wiener start from the unaberrated OTF, ``conj(H0) / (K (|H0|^2 + reg))``."""
    H0 = otf(psf(mask, np.zeros_like(mask)))
    w = np.conj(H0) / (K * (np.abs(H0) ** 2 + reg))
    return ProxyParams(np.repeat(w[None], K, axis=0), np.zeros(mask.shape), 0.0)


def _frames(stack) -> np.ndarray:
    return stack.frames if isinstance(stack, MeasurementStack) else np.asarray(stack, dtype=float)


def proxy_forward(stack, params: ProxyParams) -> np.ndarray:
    """Reconstruct a scene from a stack (or a ``(K, n, n)`` / ``(B, K, n, n)`` frame array)."""
    frames = _frames(stack)
    if frames.shape[-3] != params.K:
        raise ValueError(f"stack has K={frames.shape[-3]} frames, proxy expects {params.K}")
    if frames.shape[-2:] != params.weights.shape[-2:]:
        raise ValueError("stack and proxy live on different grids")
    spec = np.sum(params.weights * fft2(frames), axis=-3) / (1.0 + params.reg_spectrum)
    return np.real(ifft2(spec)) + params.bias


def proxy_loss_grads(scene: np.ndarray, stack, params: ProxyParams):
    """Squared error ``||proxy(Y) - scene||^2`` with exact gradients.

    Returns ``(loss, grads, grad_frames)``; ``grads`` maps ``weights``
    (complex, ``dL/dRe + j dL/dIm``), ``reg_pre`` and ``bias``. Leading batch
    axes on ``scene`` / frames are summed into the loss.
    """
    frames = _frames(stack)
    scene = np.asarray(scene, dtype=float)
    if scene.shape[-2:] != frames.shape[-2:]:
        raise ValueError("scene and stack live on different grids")
    if frames.shape[-3] != params.K:
        raise ValueError(f"stack has K={frames.shape[-3]} frames, proxy expects {params.K}")
    n0, n1 = frames.shape[-2:]
    lam1 = 1.0 + params.reg_spectrum
    Y = fft2(frames)
    spec = np.sum(params.weights * Y, axis=-3) / lam1
    err = np.real(ifft2(spec)) + params.bias - scene
    loss = float(np.sum(err * err))
    # dL = Re sum_k dS_k conj(G_k) with G = DFT(2 err) / n^2
    G = fft2(2.0 * err) / (n0 * n1)
    batch = tuple(range(G.ndim - 2))
    Gk = G[..., None, :, :]
    g_w = np.sum(np.conj(Y) * Gk, axis=batch) / lam1 if batch else np.conj(Y) * Gk / lam1
    g_reg = -np.real(np.sum(spec * np.conj(G), axis=batch) if batch else spec * np.conj(G)) / lam1
    g_reg = g_reg * sigmoid(params.reg_pre)
    g_bias = float(np.sum(2.0 * err))
    g_frames = (n0 * n1) * np.real(ifft2(np.conj(params.weights) * Gk / lam1))
    grads = {"weights": g_w, "reg_pre": g_reg, "bias": np.array([g_bias])}
    return loss, grads, g_frames


def simulate_frames(scenes: np.ndarray, phases: np.ndarray, mask: np.ndarray,
                    sigma: float, rng: np.random.Generator):
    """Noisy frames for a batch: ``scenes`` (B, n, n), ``phases`` (B, K, n, n).

    Returns ``(frames, psfs)``.
    """
    hs = psf(mask, phases)
    clean = convolve(scenes[:, None], hs)
    return add_noise(clean, sigma, rng), hs


@dataclass(frozen=True)
class ProxyTrainOptions:
    iterations: int = 2000
    learning_rate: float = 1e-3
    batch_size: int = 4
    sigma_lo: float = 5.0
    sigma_hi: float = 6.0
    noise_sigma: float = 0.01
    seed: int = 0

    def __post_init__(self):
        if self.iterations < 0 or self.batch_size < 1:
            raise ConfigurationError("iterations must be >= 0 and batch_size >= 1")


def fit_proxy(dataset, mods: ModulationSet, mask: np.ndarray, basis: ZernikeBasis,
              opts: ProxyTrainOptions = ProxyTrainOptions(),
              init: ProxyParams | None = None) -> tuple[ProxyParams, list[float]]:
    """Train the proxy with the modulations held fixed.

    ``dataset`` is a callable returning one scene per call. Every sample
    gets a fresh aberration from the configured sigma range. Returns the
    trained parameters and the per-iteration batch loss.
    """
    if dataset is None:
        raise ValueError("fit_proxy needs a scene source")
    params = (init or init_params(mask, mods.K)).copy()
    if params.K != mods.K:
        raise ValueError(f"proxy K={params.K} does not match modulation K={mods.K}")
    rng = np.random.default_rng(opts.seed)
    adam = Adam(lr=opts.learning_rate)
    p = params.as_dict()
    history = []
    for it in range(opts.iterations):
        scenes = np.stack([dataset() for _ in range(opts.batch_size)])
        if scenes.shape[-2:] != mask.shape:
            raise ValueError("scene source does not match the grid")
        phis = np.stack([compose_phase(basis, sample_aberration(rng, basis, opts.sigma_lo, opts.sigma_hi).coeffs)
                         for _ in range(opts.batch_size)])
        frames, _ = simulate_frames(scenes, phis[:, None] + mods.patterns[None], mask, opts.noise_sigma, rng)
        cur = ProxyParams(p["weights"], p["reg_pre"], float(p["bias"][0]))
        loss, grads, _ = proxy_loss_grads(scenes, frames, cur)
        if not np.isfinite(loss):
            raise NumericalError(f"proxy training diverged at iteration {it}")
        history.append(loss / opts.batch_size)
        adam.step(p, grads)
    return ProxyParams(p["weights"], p["reg_pre"], float(p["bias"][0])), history
