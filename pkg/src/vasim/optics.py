"""
Fourier-optics blur: pupil function -> PSF -> FFT-product convolution.

Sampling follows the usual discrete Fraunhofer relation between the
pupil-plane pitch dx, the grid size N and the angular pitch of the PSF:

    d_theta = wavelength / (N * dx)

so the pupil-plane field width N*dx = wavelength / d_theta is fixed by the
angular pitch alone.  When the stimulus pixels are too coarse for the
pupil to fit that field, the PSF is computed on an integer-oversampled
angular grid and binned back to stimulus pixels (see :func:`compute_psf`).
"""
from __future__ import annotations

import logging
import math
from dataclasses import dataclass
from functools import lru_cache

import numpy as np

from .stimulus import StimulusImage
from .zernike import ZernikeCoefficients, wavefront

log = logging.getLogger(__name__)

ARCMIN_PER_RAD = 60.0 * 180.0 / math.pi
CROP_ENERGY_WARNING = 0.01
DEFAULT_PUPIL_GRID = 512


class OpticsError(ValueError):
    """Inconsistent sampling or mismatched images."""


@dataclass
class PupilFunction:
    grid: np.ndarray
    sample_pitch_um: float
    wavelength_nm: float

    @property
    def n(self) -> int:
        return self.grid.shape[0]

    @property
    def psf_pixel_angle_arcmin(self) -> float:
        dtheta = (self.wavelength_nm * 1e-3) / (self.n * self.sample_pitch_um)
        return dtheta * ARCMIN_PER_RAD


@dataclass
class Psf:
    grid: np.ndarray
    pixel_angle_arcmin: float
    energy_kept: float = 1.0

    @property
    def n(self) -> int:
        return self.grid.shape[0]


def sampling_plan(pixel_angle_arcmin: float, wavelength_nm: float, pupil_grid_n: int,
                  pupil_radius_mm: float | None = None) -> float:
    """
    Pupil-plane pitch in µm that makes one PSF sample span ``pixel_angle_arcmin``.

    With ``pupil_radius_mm`` given, raises :class:`OpticsError` when the pupil
    diameter does not fit in the ``N * dx`` field.
    """
    if pixel_angle_arcmin <= 0 or wavelength_nm <= 0 or pupil_grid_n <= 0:
        raise OpticsError("sampling inputs must be positive")
    dtheta = pixel_angle_arcmin / ARCMIN_PER_RAD
    pitch_um = wavelength_nm * 1e-3 / (pupil_grid_n * dtheta)
    if pupil_radius_mm is not None:
        field_um = pupil_grid_n * pitch_um
        if 2000.0 * pupil_radius_mm > field_um:
            raise OpticsError(
                f"pupil diameter {2 * pupil_radius_mm:g} mm exceeds the pupil-plane field "
                f"{field_um / 1000:.3f} mm (wavelength / pixel angle); use a finer PSF "
                f"angle than {pixel_angle_arcmin:g} arcmin")
    return pitch_um


def psf_oversampling(pixel_angle_arcmin: float, wavelength_nm: float,
                     pupil_radius_mm: float) -> int:
    """Smallest integer subdivision of the pixel angle whose field holds the pupil."""
    field_mm = wavelength_nm * 1e-6 / (pixel_angle_arcmin / ARCMIN_PER_RAD)
    return max(1, int(math.ceil(2.0 * pupil_radius_mm / field_mm - 1e-12)))


def build_pupil_function(z: ZernikeCoefficients, n: int, pitch_um: float) -> PupilFunction:
    """Generalized pupil ``A * exp(i 2 pi W / lambda)`` on an ``n x n`` grid."""
    radius_um = z.pupil_radius_mm * 1000.0
    if 2.0 * radius_um > n * pitch_um:
        raise OpticsError(
            f"pupil ({2 * z.pupil_radius_mm:g} mm) larger than grid ({n * pitch_um / 1000:.3f} mm)")
    ax = (np.arange(n) - n // 2) * pitch_um
    x, y = np.meshgrid(ax, -ax)
    rho = np.hypot(x, y) / radius_um
    inside = rho <= 1.0
    grid = np.zeros((n, n), dtype=complex)
    w_um = wavefront(z, rho[inside], np.arctan2(y[inside], x[inside]))
    phase = 2.0 * np.pi * (w_um * 1000.0 / z.wavelength_nm)
    grid[inside] = np.exp(1j * phase)
    return PupilFunction(grid, pitch_um, z.wavelength_nm)


def psf_from_pupil(p: PupilFunction) -> Psf:
    """Unit-sum intensity PSF, peak-centred at index ``n // 2``."""
    field = np.fft.fftshift(np.fft.fft2(np.fft.ifftshift(p.grid)))
    intensity = field.real ** 2 + field.imag ** 2
    return Psf(intensity / intensity.sum(), p.psf_pixel_angle_arcmin)


@lru_cache(maxsize=8)
def _bin_matrix(n_fine: int, k: int) -> np.ndarray:
    # Coarse pixel c is centred on fine sample n_fine//2 + (c - m//2)*k.  For
    # even k the two edge samples are shared between neighbours with weight
    # 1/2, which keeps the binned PSF symmetric about its centre.
    m = n_fine // k
    offsets = np.arange(-(k // 2), k // 2 + 1)
    weights = np.ones(offsets.size)
    if k % 2 == 0:
        weights[0] = weights[-1] = 0.5
    a = np.zeros((m, n_fine))
    for c in range(m):
        centre = n_fine // 2 + (c - m // 2) * k
        np.add.at(a[c], (centre + offsets) % n_fine, weights)
    a.flags.writeable = False
    return a


def bin_psf(psf: np.ndarray, k: int) -> np.ndarray:
    """Integrate a fine PSF over ``k x k`` blocks (periodic, centre-aligned)."""
    if k == 1:
        return psf.copy()
    if psf.shape[0] % k:
        raise OpticsError("pupil grid must be a multiple of the oversampling factor")
    a = _bin_matrix(psf.shape[0], k)
    return a @ psf @ a.T


def fit_psf(grid: np.ndarray, n_out: int) -> tuple[np.ndarray, float]:
    """Centre-crop or zero-pad a centred PSF to ``n_out``; returns (grid, energy kept)."""
    n = grid.shape[0]
    total = grid.sum()
    if n == n_out:
        return grid, 1.0
    out = np.zeros((n_out, n_out))
    if n > n_out:
        start = n // 2 - n_out // 2
        out[:] = grid[start:start + n_out, start:start + n_out]
    else:
        start = n_out // 2 - n // 2
        out[start:start + n, start:start + n] = grid
    kept = out.sum() / total
    return out / out.sum(), float(kept)


def compute_psf(z: ZernikeCoefficients, pixel_angle_arcmin: float, n_out: int,
                pupil_grid_n: int = DEFAULT_PUPIL_GRID) -> Psf:
    """
    PSF of ``z`` sampled at the stimulus pixel angle on an ``n_out`` grid.

    The pupil is sampled on a ``pupil_grid_n`` grid at ``pixel_angle / k`` with
    the smallest integer ``k`` for which the pupil fits, then the PSF is
    binned by ``k`` and cropped/padded to ``n_out``.
    """
    k = psf_oversampling(pixel_angle_arcmin, z.wavelength_nm, z.pupil_radius_mm)
    while pupil_grid_n % k:
        k += 1
    fine_angle = pixel_angle_arcmin / k
    pitch = sampling_plan(fine_angle, z.wavelength_nm, pupil_grid_n, z.pupil_radius_mm)
    fine = psf_from_pupil(build_pupil_function(z, pupil_grid_n, pitch))
    grid, kept = fit_psf(bin_psf(fine.grid, k), n_out)
    return Psf(grid, pixel_angle_arcmin, kept)


def delta_psf(n: int, pixel_angle_arcmin: float) -> Psf:
    grid = np.zeros((n, n))
    grid[n // 2, n // 2] = 1.0
    return Psf(grid, pixel_angle_arcmin)


def otf(psf: Psf) -> np.ndarray:
    """Transfer function with the PSF origin moved to index 0."""
    return np.fft.fft2(np.fft.ifftshift(psf.grid))


def blur_array(pixels: np.ndarray, transfer: np.ndarray) -> np.ndarray:
    """Circular convolution via FFT product; no clipping."""
    return np.fft.ifft2(np.fft.fft2(pixels) * transfer).real


def apply_optical_blur(img: StimulusImage, psf: Psf, transfer: np.ndarray | None = None) -> StimulusImage:
    """
    Blur a stimulus with a PSF of the same size and pixel angle.

    ``transfer`` may pass a precomputed :func:`otf` to skip one FFT when the
    same PSF is applied repeatedly.
    """
    if not math.isclose(img.pixel_angle_arcmin, psf.pixel_angle_arcmin, rel_tol=1e-9):
        raise OpticsError(
            f"pixel angle mismatch: image {img.pixel_angle_arcmin} vs PSF {psf.pixel_angle_arcmin} arcmin")
    if img.pixels.shape != psf.grid.shape:
        raise OpticsError(f"shape mismatch: image {img.pixels.shape} vs PSF {psf.grid.shape}")
    if transfer is None:
        transfer = otf(psf)
    out = np.clip(blur_array(img.pixels, transfer), 0.0, 1.0)
    meta = dict(img.metadata)
    if psf.energy_kept < 1.0 - CROP_ENERGY_WARNING:
        msg = f"PSF crop discarded {100 * (1 - psf.energy_kept):.1f}% of energy"
        meta.setdefault("warnings", []).append(msg)
        log.warning(msg)
    return StimulusImage(out, img.gap_px, img.orientation, img.pixel_angle_arcmin, meta)


def save_psf_csv(psf: Psf, path) -> None:
    np.savetxt(path, psf.grid, delimiter=",", fmt="%.9g")
