"""Central finite-difference checks of every hand-derived gradient chain.

Each check draws a random small instance, takes ``directions`` random unit
directions in parameter space and compares the analytic directional
derivative with ``(f(p + h d) - f(p - h d)) / 2h``. The reported error is
``||fd - analytic|| / ||fd||`` over all directions.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from wavemo.diversity import ModulationSet, capture_stack
from wavemo.modopt import (
    ModMLP,
    end_to_end_value_and_grads,
    mod_mlp_backward,
    mod_mlp_forward,
    mtf_objective,
)
from wavemo.optics import pupil_mask
from wavemo.recon_iterative import ReconState, pdi_value_and_grad
from wavemo.recon_proxy import ProxyParams, proxy_loss_grads
from wavemo.zernike import GridSpec, build_basis, compose_phase

CHAINS = ("pdi_gradients", "proxy_loss_grads", "mod_mlp_backward", "mtf_smooth_max", "end_to_end")
THRESHOLDS = {c: 1e-4 for c in CHAINS} | {"end_to_end": 1e-3}


@dataclass
class CheckResult:
    chain: str
    error: float
    threshold: float

    @property
    def passed(self) -> bool:
        return bool(np.isfinite(self.error) and self.error < self.threshold)


def _directional(loss_fn, params: dict, grads: dict, rng, directions: int, step: float) -> float:
    fd, an = [], []
    for _ in range(directions):
        d = {}
        for k, v in params.items():
            r = rng.normal(size=v.shape)
            if np.iscomplexobj(v):
                r = r + 1j * rng.normal(size=v.shape)
            d[k] = r
        norm = np.sqrt(sum(np.sum(np.abs(v) ** 2) for v in d.values()))
        d = {k: v / norm for k, v in d.items()}
        plus = loss_fn({k: params[k] + step * d[k] for k in params})
        minus = loss_fn({k: params[k] - step * d[k] for k in params})
        fd.append((plus - minus) / (2 * step))
        an.append(sum(float(np.real(np.sum(np.conj(grads[k]) * d[k]))) for k in params))
    fd, an = np.array(fd), np.array(an)
    return float(np.linalg.norm(fd - an) / max(np.linalg.norm(fd), 1e-300))


def _setup(n: int, seed: int):
    grid = GridSpec(n, 0.5)
    basis = build_basis(grid)
    return grid, basis, pupil_mask(grid), np.random.default_rng(seed)


def check_pdi(n=16, K=2, seed=0, directions=20, step=1e-5, flip=False) -> float:
    grid, basis, mask, rng = _setup(n, seed)
    mods = ModulationSet.from_coeffs(basis, rng.normal(0, 0.5, (K, basis.count)), "random_zernike")
    x = rng.random(grid.shape)
    stack = capture_stack(x, compose_phase(basis, rng.normal(0, 0.5, basis.count)), mods, mask, 0.01, rng)
    p = {"x": rng.random(grid.shape), "c": rng.normal(0, 0.5, basis.count)}

    def f(q):
        return pdi_value_and_grad(stack, ReconState(q["x"], q["c"]), mask, basis, tv_weight=0.01)[0]

    _, gx, gc = pdi_value_and_grad(stack, ReconState(p["x"], p["c"]), mask, basis, tv_weight=0.01)
    sign = -1.0 if flip else 1.0
    return _directional(f, p, {"x": sign * gx, "c": sign * gc}, rng, directions, step)


def check_proxy(n=16, K=2, seed=1, directions=20, step=1e-5, flip=False) -> float:
    grid, _, _, rng = _setup(n, seed)
    scene = rng.random(grid.shape)
    p = {"weights": rng.normal(size=(K,) + grid.shape) + 1j * rng.normal(size=(K,) + grid.shape),
         "reg_pre": rng.normal(size=grid.shape), "bias": rng.normal(size=1),
         "frames": rng.random((K,) + grid.shape)}

    def f(q):
        params = ProxyParams(q["weights"], q["reg_pre"], float(q["bias"][0]))
        return proxy_loss_grads(scene, q["frames"], params)[0]

    _, g, gf = proxy_loss_grads(scene, p["frames"], ProxyParams(p["weights"], p["reg_pre"], float(p["bias"][0])))
    grads = dict(g, frames=gf)
    if flip:
        grads = {k: -v for k, v in grads.items()}
    return _directional(f, p, grads, rng, directions, step)


def check_mlp(K=2, hidden=3, count=28, seed=2, directions=20, step=1e-5, flip=False) -> float:
    rng = np.random.default_rng(seed)
    mlp = ModMLP.init(rng, K, count, hidden)
    target = rng.normal(size=(K, count))

    def f(q):
        out = mod_mlp_forward(ModMLP(q["w1"], q["b1"], q["w2"], q["b2"], K, mlp.z))
        return float(np.sum(out * target) + 0.5 * np.sum(out**2))

    out = mod_mlp_forward(mlp)
    g = mod_mlp_backward(mlp, target + out)
    if flip:
        g = {k: -v for k, v in g.items()}
    return _directional(f, mlp.params(), g, rng, directions, step)


def check_mtf(n=16, K=2, seed=3, directions=20, step=1e-5, tau=0.05, flip=False) -> float:
    grid, basis, mask, rng = _setup(n, seed)
    aber = np.stack([compose_phase(basis, rng.normal(0, 0.5, basis.count)) for _ in range(2)])
    c0 = rng.normal(0, 0.5, (K, basis.count))

    def f(q):
        return mtf_objective(q["c"], basis, mask, aber, tau, with_grad=False)[0]

    _, g = mtf_objective(c0, basis, mask, aber, tau)
    return _directional(f, {"c": c0}, {"c": -g if flip else g}, rng, directions, step)


def check_end_to_end(n=16, K=2, hidden=4, seed=4, directions=20, step=1e-5, flip=False) -> float:
    grid, basis, mask, rng = _setup(n, seed)
    mlp = ModMLP.init(rng, K, basis.count, hidden, out_scale=2.0)
    proxy = ProxyParams(rng.normal(size=(K,) + grid.shape) + 1j * rng.normal(size=(K,) + grid.shape),
                        rng.normal(size=grid.shape), 0.1)
    scenes = rng.random((2,) + grid.shape)
    aber = np.stack([compose_phase(basis, rng.normal(0, 0.5, basis.count)) for _ in range(2)])
    noise = rng.normal(0, 0.01, (2, K) + grid.shape)

    def f(q):
        m = ModMLP(q["w1"], q["b1"], q["w2"], q["b2"], K, mlp.z)
        return end_to_end_value_and_grads(m, proxy, scenes, aber, mask, basis, noise)[0]

    _, _, g = end_to_end_value_and_grads(mlp, proxy, scenes, aber, mask, basis, noise)
    if flip:
        g = {k: -v for k, v in g.items()}
    return _directional(f, mlp.params(), g, rng, directions, step)


_RUNNERS = {
    "pdi_gradients": check_pdi,
    "proxy_loss_grads": check_proxy,
    "mod_mlp_backward": check_mlp,
    "mtf_smooth_max": check_mtf,
    "end_to_end": check_end_to_end,
}


def run_all(inject: str | None = None, chains=CHAINS) -> list[CheckResult]:
    """Run the suite. ``inject`` names a chain whose analytic gradient is sign-flipped."""
    if inject is not None and inject not in CHAINS:
        raise ValueError(f"unknown chain {inject!r}; expected one of {CHAINS}")
    return [CheckResult(c, _RUNNERS[c](flip=(c == inject)), THRESHOLDS[c]) for c in chains]
