import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from wavemo.diversity import ModulationSet
from wavemo.errors import ConfigurationError
from wavemo.gradcheck import check_proxy
from wavemo.optics import otf, psf
from wavemo.recon_proxy import (
    ProxyParams,
    ProxyTrainOptions,
    fit_proxy,
    init_params,
    proxy_forward,
    proxy_loss_grads,
    softplus,
)
from wavemo.scenes import SceneSource
from wavemo.zernike import compose_phase


def _params(rng, K, n=16, bias=0.0):
    w = rng.normal(size=(K, n, n)) + 1j * rng.normal(size=(K, n, n))
    return ProxyParams(w, rng.normal(size=(n, n)), bias)


def test_zero_operator(rng):
    p = ProxyParams(np.zeros((2, 16, 16), complex), np.zeros((16, 16)), 0.0)
    assert not np.any(proxy_forward(rng.random((2, 16, 16)), p))


def test_single_frame_wiener_oracle(small, rng):
    grid, basis, mask = small
    h = psf(mask, compose_phase(basis, rng.normal(0, 0.5, 28)))
    H = otf(h)
    lam0 = 0.05
    y = rng.random(grid.shape)
    p = ProxyParams((np.conj(H) / (np.abs(H) ** 2 + lam0))[None], np.full(grid.shape, -60.0), 0.0)
    # scalar per-frequency Wiener deconvolution
    Y = np.fft.fft2(y)
    X = np.zeros_like(Y)
    for i in range(16):
        for j in range(16):
            X[i, j] = np.conj(H[i, j]) * Y[i, j] / (abs(H[i, j]) ** 2 + lam0)
    np.testing.assert_allclose(proxy_forward(y[None], p), np.real(np.fft.ifft2(X)), atol=1e-10)


@settings(max_examples=20, deadline=None)
@given(seed=st.integers(0, 2**31), a=st.floats(-5, 5), bias=st.floats(-1, 1))
def test_superposition(seed, a, bias):
    r = np.random.default_rng(seed)
    p = _params(r, 3, bias=bias)
    y1, y2 = r.random((2, 3, 16, 16))
    f = lambda y: proxy_forward(y, p) - bias
    np.testing.assert_allclose(f(a * y1 + y2), a * f(y1) + f(y2), atol=1e-12 * (1 + abs(a)) * np.abs(f(y1)).max())
    np.testing.assert_allclose(f(2 * y1), 2 * f(y1), atol=1e-12 * np.abs(f(y1)).max())


def test_forward_errors(rng):
    p = _params(rng, 2)
    with pytest.raises(ValueError):
        proxy_forward(rng.random((3, 16, 16)), p)
    with pytest.raises(ValueError):
        proxy_forward(rng.random((2, 8, 8)), p)
    with pytest.raises(ValueError):
        proxy_loss_grads(rng.random((8, 8)), rng.random((2, 16, 16)), p)


def test_batched_forward_matches_loop(rng):
    p = _params(rng, 2)
    ys = rng.random((3, 2, 16, 16))
    batched = proxy_forward(ys, p)
    for b in range(3):
        np.testing.assert_allclose(batched[b], proxy_forward(ys[b], p), atol=1e-12)


def test_exact_reconstruction_is_a_minimum(rng):
    p = _params(rng, 2, bias=0.3)
    y = rng.random((2, 16, 16))
    scene = proxy_forward(y, p)
    loss, grads, g_frames = proxy_loss_grads(scene, y, p)
    assert loss < 1e-20
    for g in list(grads.values()) + [g_frames]:
        assert np.abs(g).max() < 1e-9


def test_loss_symmetric_in_residual_sign(rng):
    p = _params(rng, 2, bias=0.1)
    y = rng.random((2, 16, 16))
    scene = rng.random((16, 16))
    mirrored = 2 * proxy_forward(y, p) - scene
    assert proxy_loss_grads(mirrored, y, p)[0] == pytest.approx(proxy_loss_grads(scene, y, p)[0], rel=1e-12)


def test_gradients_match_finite_differences():
    assert check_proxy(n=16, K=2) < 1e-4
    assert check_proxy(n=8, K=1, seed=5) < 1e-4


def test_init_is_multiframe_wiener(small):
    grid, basis, mask = small
    p = init_params(mask, 3)
    H0 = otf(psf(mask, np.zeros(grid.shape)))
    np.testing.assert_allclose(p.weights[1], np.conj(H0) / (3 * (np.abs(H0) ** 2 + 0.1)))
    assert p.bias == 0.0 and not np.any(p.reg_pre)
    np.testing.assert_allclose(p.reg_spectrum, np.log(2.0))


def test_softplus_is_stable():
    z = np.array([-800.0, 0.0, 800.0])
    np.testing.assert_allclose(softplus(z), [0.0, np.log(2), 800.0])


def _repeat(scene):
    return lambda: scene


def test_overfits_single_scene(small, rng):
    grid, basis, mask = small
    scene = SceneSource(16, seed=2)()
    mods = ModulationSet.from_coeffs(basis, rng.normal(0, 0.5, (4, 28)), "random_zernike")
    opts = ProxyTrainOptions(iterations=2000, sigma_lo=0.0, sigma_hi=0.0, noise_sigma=0.0)
    _, hist = fit_proxy(_repeat(scene), mods, mask, basis, opts)
    assert hist[-1] < 0.1 * hist[0]


def test_zero_iterations_return_init(small):
    grid, basis, mask = small
    mods = ModulationSet.from_coeffs(basis, np.zeros((2, 28)), "random_zernike")
    init = init_params(mask, 2)
    p, hist = fit_proxy(_repeat(np.zeros(grid.shape)), mods, mask, basis, ProxyTrainOptions(iterations=0), init)
    assert hist == []
    np.testing.assert_array_equal(p.weights, init.weights)
    np.testing.assert_array_equal(p.reg_pre, init.reg_pre)
    assert p is not init


def test_training_is_deterministic(small):
    grid, basis, mask = small
    mods = ModulationSet.from_coeffs(basis, np.random.default_rng(0).normal(0, 0.5, (2, 28)), "random_zernike")
    opts = ProxyTrainOptions(iterations=30, sigma_lo=0.3, sigma_hi=0.5, seed=4)

    def run():
        src = np.random.default_rng(9)
        return fit_proxy(lambda: src.random(grid.shape), mods, mask, basis, opts)

    (a, ha), (b, hb) = run(), run()
    assert ha == hb
    np.testing.assert_array_equal(a.weights, b.weights)


def test_fit_errors(small):
    grid, basis, mask = small
    mods = ModulationSet.from_coeffs(basis, np.zeros((2, 28)), "random_zernike")
    with pytest.raises(ValueError):
        fit_proxy(None, mods, mask, basis)
    with pytest.raises(ValueError):
        fit_proxy(_repeat(np.zeros(grid.shape)), mods, mask, basis, ProxyTrainOptions(iterations=1),
                  init_params(mask, 3))
    with pytest.raises(ConfigurationError):
        ProxyTrainOptions(batch_size=0)


def test_learns_wiener_filter_for_known_blur(small):
    # white scenes with variance 1/12 and noise sigma: optimum is conj(H) / (|H|^2 + 12 sigma^2)
    grid, basis, mask = small
    sigma = 0.1
    src = np.random.default_rng(3)
    mods = ModulationSet.none(grid)
    opts = ProxyTrainOptions(iterations=3000, learning_rate=1e-2, batch_size=8, sigma_lo=0.0, sigma_hi=0.0,
                             noise_sigma=sigma, seed=1)
    p, _ = fit_proxy(lambda: src.random(grid.shape), mods, mask, basis, opts)
    H = otf(psf(mask, np.zeros(grid.shape)))
    target = np.conj(H) / (np.abs(H) ** 2 + 12 * sigma**2)
    eff = p.weights[0] / (1 + p.reg_spectrum)
    band = np.abs(H) > 0.1
    band[0, 0] = False  # DC is shared with the bias
    rel = np.sqrt(np.mean(np.abs(eff[band] - target[band]) ** 2) / np.mean(np.abs(target[band]) ** 2))
    assert rel < 0.1


def test_params_roundtrip(tmp_path, rng):
    p = _params(rng, 3, bias=0.25)
    p.save(tmp_path / "proxy")
    q = ProxyParams.load(tmp_path / "proxy")
    np.testing.assert_allclose(q.weights, p.weights, rtol=1e-6)
    np.testing.assert_allclose(q.reg_pre, p.reg_pre, rtol=1e-6)
    assert q.bias == 0.25 and q.K == 3
