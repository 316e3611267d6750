import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from wavemo.errors import ConfigurationError
from wavemo.zernike import (
    GridSpec,
    build_basis,
    compose_phase,
    desk_sigma_range,
    noll_to_nm,
    read_coeffs_csv,
    sample_aberration,
    write_coeffs_csv,
)

# Noll's table, written out by hand.
EXPLICIT = {
    2: lambda r, t: 2 * r * np.cos(t),
    3: lambda r, t: 2 * r * np.sin(t),
    4: lambda r, t: math.sqrt(3) * (2 * r**2 - 1),
    5: lambda r, t: math.sqrt(6) * r**2 * np.sin(2 * t),
    6: lambda r, t: math.sqrt(6) * r**2 * np.cos(2 * t),
    7: lambda r, t: math.sqrt(8) * (3 * r**3 - 2 * r) * np.sin(t),
    8: lambda r, t: math.sqrt(8) * (3 * r**3 - 2 * r) * np.cos(t),
    9: lambda r, t: math.sqrt(8) * r**3 * np.sin(3 * t),
    10: lambda r, t: math.sqrt(8) * r**3 * np.cos(3 * t),
    11: lambda r, t: math.sqrt(5) * (6 * r**4 - 6 * r**2 + 1),
}


def test_grid_validation():
    with pytest.raises(ConfigurationError):
        GridSpec(4)
    with pytest.raises(ConfigurationError):
        GridSpec(48)
    with pytest.raises(ConfigurationError):
        GridSpec(64, 0.0)


def test_noll_indices():
    assert [noll_to_nm(j) for j in range(1, 12)] == [
        (0, 0), (1, 1), (1, -1), (2, 0), (2, -2), (2, 2),
        (3, -1), (3, 1), (3, -3), (3, 3), (4, 0)]


def test_piston_is_one_inside_disk():
    grid = GridSpec(64, 1.0)
    basis = build_basis(grid, 1)
    disk = grid.disk()
    assert np.all(basis.modes[0][disk] == 1.0)
    assert np.all(basis.modes[0][~disk] == 0.0)


def test_defocus_at_centre():
    basis = build_basis(GridSpec(64), 4)
    assert basis.modes[3][32, 32] == pytest.approx(-math.sqrt(3), abs=1e-14)


def test_modes_match_explicit_table():
    grid = GridSpec(32, 0.5)
    basis = build_basis(grid, 11)
    rho, theta = grid.disk_coords()
    disk = rho <= 1
    for j, f in EXPLICIT.items():
        np.testing.assert_allclose(basis.modes[j - 1][disk], f(rho, theta)[disk], atol=1e-12)


def test_near_orthonormal_on_fine_grid():
    grid = GridSpec(256, 0.5)
    basis = build_basis(grid, 28)
    disk = grid.disk()
    M = basis.modes[:, disk]
    gram = M @ M.T
    norm = gram / np.sqrt(np.outer(np.diag(gram), np.diag(gram)))
    off = norm[1:, 1:] - np.eye(27)
    assert np.max(np.abs(off)) < 2e-2
    # unit RMS for j >= 2
    np.testing.assert_allclose(np.mean(M[1:] ** 2, axis=1), 1.0, rtol=2e-2)


def test_support_is_disk(small):
    grid, basis, _ = small
    assert np.all(basis.modes[:, ~grid.disk()] == 0.0)


def test_compose_zero_and_scaled_mode(small):
    _, basis, _ = small
    assert not np.any(compose_phase(basis, np.zeros(28)))
    c = np.zeros(28)
    c[3] = 2.5
    np.testing.assert_allclose(compose_phase(basis, c), 2.5 * basis.modes[3], atol=0)


def test_compose_matches_per_pixel_sum(small, rng):
    grid, basis, _ = small
    c = rng.normal(size=28)
    expect = np.zeros(grid.shape)
    for i in range(grid.n):
        for k in range(grid.n):
            expect[i, k] = sum(c[j] * basis.modes[j, i, k] for j in range(28))
    np.testing.assert_allclose(compose_phase(basis, c), expect, atol=1e-12)


def test_compose_length_mismatch(small):
    _, basis, _ = small
    with pytest.raises(ValueError):
        compose_phase(basis, np.zeros(27))


@settings(max_examples=25, deadline=None)
@given(a=st.floats(-10, 10), b=st.floats(-10, 10), seed=st.integers(0, 2**31))
def test_compose_is_linear(small, a, b, seed):
    _, basis, _ = small
    r = np.random.default_rng(seed)
    c1, c2 = r.normal(size=(2, 28))
    lhs = compose_phase(basis, a * c1 + b * c2)
    rhs = a * compose_phase(basis, c1) + b * compose_phase(basis, c2)
    np.testing.assert_allclose(lhs, rhs, atol=1e-11 * (1 + abs(a) + abs(b)))


def test_sampling_is_deterministic_with_zero_piston(small):
    _, basis, _ = small
    s1 = sample_aberration(np.random.default_rng(7), basis)
    s2 = sample_aberration(np.random.default_rng(7), basis)
    np.testing.assert_array_equal(s1.coeffs, s2.coeffs)
    np.testing.assert_array_equal(s1.sigmas, s2.sigmas)
    assert s1.coeffs[0] == 0.0
    assert np.all((s1.sigmas[1:] >= 5) & (s1.sigmas[1:] <= 6))


def test_sampling_rejects_negative_sigma(small):
    _, basis, _ = small
    with pytest.raises(ValueError):
        sample_aberration(np.random.default_rng(0), basis, -1.0, 6.0)


def test_pooled_coefficient_variance(small):
    _, basis, _ = small
    r = np.random.default_rng(99)
    coeffs = np.stack([sample_aberration(r, basis, 5, 6).coeffs[1:] for _ in range(100_000)])
    expected = (6**3 - 5**3) / 3  # E[sigma^2] for sigma ~ U[5, 6]
    assert np.mean(coeffs**2) == pytest.approx(expected, rel=0.02)


def test_desk_scaling():
    assert desk_sigma_range(256) == (5.0, 6.0)
    assert desk_sigma_range(64) == (1.25, 1.5)


def test_coeff_csv_roundtrip(tmp_path, rng):
    rows = rng.normal(size=(3, 28))
    write_coeffs_csv(tmp_path / "c.csv", rows)
    assert (tmp_path / "c.csv").read_text().splitlines()[0] == ",".join(f"z{j}" for j in range(1, 29))
    np.testing.assert_array_equal(read_coeffs_csv(tmp_path / "c.csv"), rows)
