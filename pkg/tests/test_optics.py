import logging
import math

import numpy as np
import pytest
from scipy.special import j1

from vasim.optics import (
    ARCMIN_PER_RAD, OpticsError, apply_optical_blur, bin_psf, build_pupil_function,
    compute_psf, delta_psf, fit_psf, otf, psf_from_pupil, psf_oversampling, sampling_plan,
    save_psf_csv,
)
from vasim.stimulus import FULL_PIXEL_ANGLE_ARCMIN, StimulusImage, render_landolt
from vasim.zernike import ZernikeCoefficients, diopters_to_defocus_coeff
from oracles import brute_circular_convolution, first_zero_arcmin

DESK_ANGLE = 4 * FULL_PIXEL_ANGLE_ARCMIN


def test_sampling_plan_examples():
    dx = sampling_plan(0.21523, 530.0, 512)
    assert dx == pytest.approx(16.53, abs=0.01)
    assert 8000.0 / dx == pytest.approx(484, abs=1)
    assert sampling_plan(0.21523, 530.0, 1024) == pytest.approx(dx / 2, rel=1e-12)
    sampling_plan(0.21523, 530.0, 512, pupil_radius_mm=4.0)


def test_sampling_plan_rejects_pupil_outside_field():
    with pytest.raises(OpticsError, match="exceeds"):
        sampling_plan(DESK_ANGLE, 530.0, 512, pupil_radius_mm=4.0)
    with pytest.raises(OpticsError):
        sampling_plan(0.0, 530.0, 512)


def test_oversampling_factor():
    assert psf_oversampling(FULL_PIXEL_ANGLE_ARCMIN, 530.0, 4.0) == 1
    assert psf_oversampling(DESK_ANGLE, 530.0, 4.0) == 4


def test_pupil_function_examples():
    pitch = sampling_plan(FULL_PIXEL_ANGLE_ARCMIN, 530.0, 128)
    p = build_pupil_function(ZernikeCoefficients(1.0), 128, pitch * 4)
    inside = np.abs(p.grid) > 0
    assert np.all(np.angle(p.grid[inside]) == 0.0)
    c4 = 0.05
    p = build_pupil_function(ZernikeCoefficients(1.0, coeffs={4: c4}), 128, pitch * 4)
    expected = -2 * math.pi * math.sqrt(3) * c4 / 0.530
    assert np.angle(p.grid[64, 64]) == pytest.approx(expected, abs=1e-12)
    rho = np.hypot(*np.meshgrid((np.arange(128) - 64) * pitch * 4, (np.arange(128) - 64) * pitch * 4))
    assert np.all(p.grid[rho > 1000.0] == 0)
    np.testing.assert_allclose(np.abs(p.grid[rho < 990.0]), 1.0)


def test_pupil_larger_than_grid():
    with pytest.raises(OpticsError):
        build_pupil_function(ZernikeCoefficients(4.0), 64, 10.0)


def test_diffraction_limited_psf_centred_and_normalized():
    pitch = sampling_plan(FULL_PIXEL_ANGLE_ARCMIN, 530.0, 512)
    psf = psf_from_pupil(build_pupil_function(ZernikeCoefficients(4.0), 512, pitch))
    assert np.unravel_index(np.argmax(psf.grid), psf.grid.shape) == (256, 256)
    assert abs(psf.grid.sum() - 1.0) < 1e-9
    assert psf.pixel_angle_arcmin == pytest.approx(FULL_PIXEL_ANGLE_ARCMIN, rel=1e-12)
    assert np.all(psf.grid >= 0)


def test_airy_first_zero():
    # sample 4x finer than the full-profile pixel so the zero spans several samples
    angle = FULL_PIXEL_ANGLE_ARCMIN / 4
    n = 1024
    pitch = sampling_plan(angle, 530.0, n, pupil_radius_mm=4.0)
    psf = psf_from_pupil(build_pupil_function(ZernikeCoefficients(4.0), n, pitch))
    expected = 1.22 * 530e-9 / 8e-3 * ARCMIN_PER_RAD
    assert expected == pytest.approx(0.278, abs=1e-3)
    assert first_zero_arcmin(psf) == pytest.approx(expected, rel=0.05)


def test_airy_profile_shape():
    angle = FULL_PIXEL_ANGLE_ARCMIN / 4
    n = 1024
    pitch = sampling_plan(angle, 530.0, n, pupil_radius_mm=4.0)
    psf = psf_from_pupil(build_pupil_function(ZernikeCoefficients(4.0), n, pitch))
    c = n // 2
    theta = np.arange(1, 12) * angle / ARCMIN_PER_RAD
    v = math.pi * 8e-3 / 530e-9 * theta
    airy = (2 * j1(v) / v) ** 2
    np.testing.assert_allclose(psf.grid[c, c + 1:c + 12] / psf.grid[c, c], airy, atol=0.02)


def test_bin_psf_preserves_sum_and_symmetry(rng):
    fine = rng.uniform(size=(64, 64))
    fine = fine + fine[::-1, ::-1]
    for k in (2, 4, 8):
        coarse = bin_psf(fine, k)
        assert coarse.sum() == pytest.approx(fine.sum(), rel=1e-12)
    d = np.zeros((64, 64))
    d[32, 32] = 1.0
    coarse = bin_psf(d, 4)
    assert coarse[8, 8] == 1.0 and coarse.sum() == 1.0
    with pytest.raises(OpticsError):
        bin_psf(fine, 3)


def test_fit_psf_crop_and_pad():
    g = np.ones((8, 8)) / 64
    out, kept = fit_psf(g, 4)
    assert kept == pytest.approx(0.25) and out.sum() == pytest.approx(1.0)
    out, kept = fit_psf(g, 16)
    assert kept == 1.0 and out[4:12, 4:12].sum() == pytest.approx(1.0)


@pytest.mark.parametrize("defocus", [0.0, 0.5, 1.5])
def test_compute_psf_unit_sum(defocus):
    z = ZernikeCoefficients(4.0, coeffs={4: diopters_to_defocus_coeff(defocus, 4.0)})
    psf = compute_psf(z, DESK_ANGLE, 128)
    assert abs(psf.grid.sum() - 1.0) < 1e-9
    assert psf.pixel_angle_arcmin == DESK_ANGLE
    assert psf.grid.shape == (128, 128)


def test_defocus_psf_is_point_symmetric():
    z = ZernikeCoefficients(4.0, coeffs={4: diopters_to_defocus_coeff(1.0, 4.0)})
    g = compute_psf(z, DESK_ANGLE, 128).grid
    inner = g[1:, 1:]                      # centred at 64 -> symmetric part is rows 1..127
    np.testing.assert_allclose(inner, inner[::-1, ::-1], atol=1e-12)


def test_desk_binning_matches_direct_coarse_integral():
    # mean-sphere blur radius grows with defocus: second moment increases
    moments = []
    for d in (0.0, 0.5, 1.0):
        z = ZernikeCoefficients(4.0, coeffs={4: diopters_to_defocus_coeff(d, 4.0)})
        g = compute_psf(z, DESK_ANGLE, 128).grid
        y, x = np.mgrid[:128, :128] - 64
        moments.append(float((g * (x * x + y * y)).sum()))
    assert moments[0] < moments[1] < moments[2]


def test_fft_blur_equals_spatial_convolution(rng):
    n = 64
    z = ZernikeCoefficients(4.0, coeffs={4: diopters_to_defocus_coeff(0.25, 4.0)})
    psf = compute_psf(z, DESK_ANGLE, n)
    pixels = rng.uniform(size=(n, n))
    blurred = apply_optical_blur(StimulusImage(pixels, 1.0, 0, DESK_ANGLE), psf).pixels
    np.testing.assert_allclose(blurred, np.clip(brute_circular_convolution(pixels, psf.grid), 0, 1), atol=1e-6)


def test_delta_psf_identity_and_white_field():
    stim = render_landolt(10, 3, 64, DESK_ANGLE)
    out = apply_optical_blur(stim, delta_psf(64, DESK_ANGLE))
    np.testing.assert_allclose(out.pixels, stim.pixels, atol=1e-12)
    psf = compute_psf(ZernikeCoefficients(4.0, coeffs={4: 1.0}), DESK_ANGLE, 64)
    white = StimulusImage(np.ones((64, 64)), 1.0, 0, DESK_ANGLE)
    np.testing.assert_allclose(apply_optical_blur(white, psf).pixels, 1.0, atol=1e-12)


def test_blur_precomputed_transfer_matches():
    stim = render_landolt(6, 1, 64, DESK_ANGLE)
    psf = compute_psf(ZernikeCoefficients(4.0, coeffs={4: 0.5}), DESK_ANGLE, 64)
    a = apply_optical_blur(stim, psf).pixels
    b = apply_optical_blur(stim, psf, otf(psf)).pixels
    np.testing.assert_array_equal(a, b)


def test_blur_errors_and_warning(caplog):
    stim = render_landolt(6, 0, 64, DESK_ANGLE)
    with pytest.raises(OpticsError, match="pixel angle"):
        apply_optical_blur(stim, delta_psf(64, FULL_PIXEL_ANGLE_ARCMIN))
    with pytest.raises(OpticsError, match="shape"):
        apply_optical_blur(stim, delta_psf(32, DESK_ANGLE))
    # 3 D of defocus spreads well beyond a 32 px canvas
    psf = compute_psf(ZernikeCoefficients(4.0, coeffs={4: diopters_to_defocus_coeff(3.0, 4.0)}), DESK_ANGLE, 32)
    assert psf.energy_kept < 0.99
    small = render_landolt(4, 0, 32, DESK_ANGLE)
    with caplog.at_level(logging.WARNING):
        out = apply_optical_blur(small, psf)
    assert "warnings" in out.metadata and "energy" in out.metadata["warnings"][0]


def test_psf_csv(tmp_path):
    psf = compute_psf(ZernikeCoefficients(4.0), DESK_ANGLE, 16)
    save_psf_csv(psf, tmp_path / "psf.csv")
    back = np.loadtxt(tmp_path / "psf.csv", delimiter=",")
    np.testing.assert_allclose(back, psf.grid, rtol=1e-8, atol=1e-15)
