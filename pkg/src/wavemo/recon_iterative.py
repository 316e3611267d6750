"""Blind multi-frame reconstruction of scene and aberration from a diversity stack.

The objective is the phase-diversity least-squares misfit

    L(x, c) = sum_i || y_i - h(phi(c) + gamma_i) * x ||^2  (+ tv_weight * TV(x))

with the scene ``x`` kept as raw pixels and the aberration ``phi`` as Zernike
coefficients ``c``.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass, field, replace

import numpy as np
from numpy.fft import fft2, irfft2, rfft2

from wavemo.adam import Adam
from wavemo.diversity import MeasurementStack, frame_psfs
from wavemo.errors import ConfigurationError, NumericalError, UnderdeterminedError
from wavemo.optics import convolve, otf
from wavemo.zernike import ZernikeBasis, compose_phase, project_phase

log = logging.getLogger(__name__)

TV_EPS = 1e-4


@dataclass
class ReconState:
    scene_est: np.ndarray
    aber_coeffs: np.ndarray
    iteration: int = 0
    loss_history: list[float] = field(default_factory=list)


@dataclass(frozen=True)
class ReconOptions:
    """Optimizer settings.

    ``fit_modes`` lists the Noll indices whose coefficients are optimized;
    the others stay at their initial value. ``None`` means every mode from
    Noll 4 upwards: piston has no effect and tip/tilt only translate the
    reconstruction, so all three are left fixed.
    """

    max_iters: int = 2000
    step_scene: float = 1e-2
    step_coeffs: float = 3e-2
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    tv_weight: float = 0.0
    tolerance: float = 1e-12
    fit_aberration: bool = True
    fit_modes: tuple[int, ...] | None = None
    scene_update: str = "adam"  # "adam" or "exact" (closed-form least squares per step)
    restarts: int = 1
    restart_sigma: float = 1.0
    accept_noise_factor: float = 2.0
    accept_rel_floor: float = 1e-6
    seed: int = 0

    def __post_init__(self):
        if self.max_iters < 0:
            raise ConfigurationError("max_iters must be >= 0")
        if self.step_scene <= 0 or self.step_coeffs <= 0:
            raise ConfigurationError("step sizes must be positive")
        if self.tv_weight < 0:
            raise ConfigurationError("tv_weight must be >= 0")
        if self.scene_update not in ("adam", "exact"):
            raise ConfigurationError(f"unknown scene_update {self.scene_update!r}")
        if self.restarts < 1:
            raise ConfigurationError("restarts must be >= 1")


def _check(stack: MeasurementStack, state: ReconState, mask: np.ndarray, basis: ZernikeBasis):
    shape = stack.frames.shape[-2:]
    if state.scene_est.shape != shape or mask.shape != shape or basis.modes.shape[-2:] != shape:
        raise ValueError("grid mismatch between stack, state, mask and basis")
    if np.shape(state.aber_coeffs) != (basis.count,):
        raise ValueError(f"expected {basis.count} aberration coefficients, got {np.shape(state.aber_coeffs)}")


def _tv(x: np.ndarray) -> tuple[float, np.ndarray]:
    """Smoothed isotropic total variation with circular differences, and its gradient."""
    dx = np.roll(x, -1, axis=1) - x
    dy = np.roll(x, -1, axis=0) - x
    mag = np.sqrt(dx * dx + dy * dy + TV_EPS**2)
    gx = dx / mag
    gy = dy / mag
    grad = -gx - gy + np.roll(gx, 1, axis=1) + np.roll(gy, 1, axis=0)
    return float(np.sum(mag - TV_EPS)), grad


def _residuals(stack, state, mask, basis):
    phi = compose_phase(basis, state.aber_coeffs)
    hs = frame_psfs(phi, stack.modulations, mask)
    pred = convolve(state.scene_est[None], hs)
    return phi, hs, pred - stack.frames


def pdi_loss(stack: MeasurementStack, state: ReconState, mask: np.ndarray,
             basis: ZernikeBasis, tv_weight: float = 0.0) -> float:
    """Phase-diversity misfit of ``state`` against ``stack``."""
    _check(stack, state, mask, basis)
    _, _, res = _residuals(stack, state, mask, basis)
    loss = float(np.sum(res * res))
    if tv_weight:
        loss += tv_weight * _tv(state.scene_est)[0]
    return loss


def pdi_value_and_grad(stack: MeasurementStack, state: ReconState, mask: np.ndarray,
                       basis: ZernikeBasis, tv_weight: float = 0.0, need_scene: bool = True):
    """Loss and its exact gradients ``(loss, grad_scene, grad_coeffs)`` in one pass.

    The scene gradient correlates each residual with its PSF. The
    coefficient gradient goes residual -> kernel (correlation with the
    scene) -> phase (through ``|DFT(m e^{j phi})|^2``) -> coefficients
    (projection onto the modes). PSFs stay in the uncentred layout here and
    the convolutions use real FFTs.
    """
    _check(stack, state, mask, basis)
    n = mask.shape[-1]
    phi = compose_phase(basis, state.aber_coeffs)
    field = mask * np.exp(1j * (phi[None] + stack.modulations.patterns))
    amp = fft2(field)
    energy = n * n * float(np.sum(mask * mask))
    h = (amp.real**2 + amp.imag**2) / energy
    H = rfft2(h)
    X = rfft2(state.scene_est)
    res = irfft2(H * X, s=(n, n)) - stack.frames
    loss = float(np.sum(res * res))
    R = rfft2(2.0 * res)
    grad_scene = irfft2(np.sum(R * np.conj(H), axis=0), s=(n, n)) if need_scene else None
    g_h = irfft2(R * np.conj(X), s=(n, n))
    back = fft2(g_h * np.conj(amp))
    g_phase = -(2.0 / energy) * np.sum(np.imag(field * back), axis=0)
    grad_coeffs = project_phase(basis, g_phase)
    if tv_weight:
        tv, g_tv = _tv(state.scene_est)
        loss += tv_weight * tv
        if need_scene:
            grad_scene = grad_scene + tv_weight * g_tv
    return loss, grad_scene, grad_coeffs


def pdi_gradients(stack: MeasurementStack, state: ReconState, mask: np.ndarray,
                  basis: ZernikeBasis, tv_weight: float = 0.0):
    """Exact gradients ``(grad_scene, grad_coeffs)`` of :func:`pdi_loss`."""
    _, gx, gc = pdi_value_and_grad(stack, state, mask, basis, tv_weight)
    return gx, gc


def multiframe_least_squares(frames: np.ndarray, psfs: np.ndarray, rcond: float = 1e-12,
                             fallback: np.ndarray | None = None) -> np.ndarray:
    """Closed-form minimizer ``X = sum conj(H_i) Y_i / sum |H_i|^2`` over the scene.

    Frequencies where ``sum |H_i|^2`` is below ``rcond`` times its DC value
    are unobserved; they are taken from ``fallback`` (zero if omitted).
    """
    H = otf(psfs)
    Y = np.fft.fft2(frames)
    den = np.sum(np.abs(H) ** 2, axis=0)
    num = np.sum(np.conj(H) * Y, axis=0)
    seen = den > rcond * den.flat[0]
    X = np.zeros_like(num)
    X[seen] = num[seen] / den[seen]
    if fallback is not None:
        X[~seen] = np.fft.fft2(fallback)[~seen]
    return np.real(np.fft.ifft2(X))


def _free_mask(basis: ZernikeBasis, opts: ReconOptions) -> np.ndarray:
    free = np.zeros(basis.count, dtype=bool)
    if not opts.fit_aberration:
        return free
    modes = opts.fit_modes if opts.fit_modes is not None else range(4, basis.count + 1)
    for j in modes:
        if not 1 <= j <= basis.count:
            raise ConfigurationError(f"fit mode {j} outside 1..{basis.count}")
        free[j - 1] = True
    return free


def default_init(stack: MeasurementStack, basis: ZernikeBasis) -> ReconState:
    """Mean frame as the scene guess and a flat aberration."""
    return ReconState(stack.frames.mean(axis=0), np.zeros(basis.count))


def _run(stack, mask, basis, opts, state, free, max_iters):
    adam = Adam(lr={"x": opts.step_scene, "c": opts.step_coeffs},
                beta1=opts.beta1, beta2=opts.beta2, eps=opts.eps)
    params = {"x": state.scene_est.copy(), "c": state.aber_coeffs.astype(float).copy()}
    history = list(state.loss_history)
    exact = opts.scene_update == "exact" and opts.tv_weight == 0
    cur = ReconState(params["x"], params["c"], state.iteration, history)
    if exact and max_iters > 0:
        # record where we started, then jump to the closed-form scene
        history.append(pdi_value_and_grad(stack, cur, mask, basis, need_scene=False)[0])
        hs = frame_psfs(compose_phase(basis, params["c"]), stack.modulations, mask)
        params["x"][...] = multiframe_least_squares(stack.frames, hs, fallback=params["x"])
    # an exact fit: stepping further only lets Adam's normalized step wander off
    floor = opts.tolerance * float(np.sum(stack.frames**2))
    prev = None
    for _ in range(max_iters + 1):
        loss, gx, gc = pdi_value_and_grad(stack, cur, mask, basis, opts.tv_weight)
        if not np.isfinite(loss):
            raise NumericalError(f"reconstruction diverged at iteration {cur.iteration}")
        history.append(loss)
        if loss <= floor or (prev is not None and abs(prev - loss) <= opts.tolerance * prev):
            break
        if cur.iteration - state.iteration == max_iters:
            break
        prev = loss
        grads = {"c": np.where(free, gc, 0.0)}
        if not exact:
            grads["x"] = gx
        adam.step(params, grads)
        if exact:
            hs = frame_psfs(compose_phase(basis, params["c"]), stack.modulations, mask)
            params["x"][...] = multiframe_least_squares(stack.frames, hs, fallback=params["x"])
        cur.iteration += 1
    return cur


def acceptable_loss(stack: MeasurementStack, opts: ReconOptions) -> float:
    """Misfit below which a run counts as converged to the data.

    ``accept_noise_factor`` times the expected noise energy, plus a
    relative floor on the frame energy for the noiseless case.
    """
    noise = stack.frames.size * stack.noise_sigma**2
    return opts.accept_noise_factor * noise + opts.accept_rel_floor * float(np.sum(stack.frames**2))


def reconstruct(stack: MeasurementStack, mask: np.ndarray, basis: ZernikeBasis,
                opts: ReconOptions = ReconOptions(), init: ReconState | None = None) -> ReconState:
    """Jointly estimate scene and aberration by Adam updates on :func:`pdi_loss`.

    The first run starts from ``init``. While the final misfit stays above
    :func:`acceptable_loss` and ``restarts`` allows, another run starts from
    the same scene guess with the free aberration coefficients perturbed by
    Gaussian noise of std ``restart_sigma``. The lowest-loss run is returned.

    Raises
    ------
    UnderdeterminedError
        A single frame with a free aberration.
    """
    if stack.K < 1:
        raise ValueError("empty measurement stack")
    free = _free_mask(basis, opts)
    if stack.K == 1 and free.any():
        raise UnderdeterminedError(
            "a single measurement cannot separate scene and aberration; "
            "freeze the aberration or capture more modulations"
        )
    if init is None:
        init = default_init(stack, basis)
    _check(stack, init, mask, basis)
    rng = np.random.default_rng(opts.seed)
    target = acceptable_loss(stack, opts)
    best = None
    for r in range(opts.restarts):
        start = replace(init, scene_est=np.array(init.scene_est, dtype=float),
                        aber_coeffs=np.array(init.aber_coeffs, dtype=float),
                        loss_history=list(init.loss_history))
        if r > 0:
            start.aber_coeffs = start.aber_coeffs + free * rng.normal(0, opts.restart_sigma, basis.count)
        out = _run(stack, mask, basis, opts, start, free, opts.max_iters)
        log.debug("run %d: final loss %.6g after %d iterations", r, out.loss_history[-1], out.iteration)
        if best is None or out.loss_history[-1] < best.loss_history[-1]:
            best = out
        if best.loss_history[-1] <= target:
            break
    return best
