"""
Zernike wavefronts in the OSA/ANSI convention.

Units used throughout the package: coefficients in micrometres, pupil
radii in millimetres, wavelengths in nanometres, angles in radians and
refraction in diopters.  Every conversion between those lives here.
"""
from __future__ import annotations

import json
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Mapping

import numpy as np

SQRT3 = math.sqrt(3.0)
SQRT6 = math.sqrt(6.0)

# OSA indices of the second-order terms
J_OBLIQUE_ASTIG = 3
J_DEFOCUS = 4
J_VERTICAL_ASTIG = 5

MAX_J_4TH_ORDER = 14


class ZernikeError(ValueError):
    """Invalid Zernike index, radius or coefficient file."""


def osa_index(n: int, m: int) -> int:
    """Single OSA/ANSI index ``j = (n(n+2) + m) / 2`` of the term Z_n^m."""
    if n < 0 or abs(m) > n or (n - abs(m)) % 2:
        raise ZernikeError(f"invalid Zernike order (n={n}, m={m})")
    return (n * (n + 2) + m) // 2


def osa_to_nm(j: int) -> tuple[int, int]:
    """Inverse of :func:`osa_index`."""
    if j < 0:
        raise ZernikeError(f"OSA index must be >= 0, got {j}")
    n = int(math.ceil((-3.0 + math.sqrt(9.0 + 8.0 * j)) / 2.0))
    m = 2 * j - n * (n + 2)
    return n, m


def _radial(n: int, m: int, rho: np.ndarray) -> np.ndarray:
    m = abs(m)
    out = np.zeros_like(rho, dtype=float)
    for s in range((n - m) // 2 + 1):
        c = ((-1) ** s * math.factorial(n - s)
             / (math.factorial(s)
                * math.factorial((n + m) // 2 - s)
                * math.factorial((n - m) // 2 - s)))
        out = out + c * rho ** (n - 2 * s)
    return out


def _basis(j: int, rho: np.ndarray, theta: np.ndarray) -> np.ndarray:
    n, m = osa_to_nm(j)
    norm = math.sqrt(2.0 * (n + 1)) if m != 0 else math.sqrt(n + 1.0)
    r = _radial(n, m, rho)
    if m > 0:
        return norm * r * np.cos(m * theta)
    if m < 0:
        return norm * r * np.sin(-m * theta)
    return norm * r


def eval_basis(j: int, rho, theta):
    """
    Evaluate the unit-RMS Zernike polynomial Z_j at polar coordinates.

    ``rho`` must lie in [0, 1]; scalars or arrays are accepted and the
    result has the broadcast shape.
    """
    rho_a = np.asarray(rho, dtype=float)
    theta_a = np.asarray(theta, dtype=float)
    if np.any(rho_a < 0) or np.any(rho_a > 1) or np.any(np.isnan(rho_a)):
        raise ZernikeError("rho outside the unit disk")
    out = _basis(j, rho_a, theta_a)
    if np.ndim(out) == 0:
        return float(out)
    return out


@dataclass(frozen=True)
class ZernikeCoefficients:
    """OSA-indexed wavefront description; absent indices are zero."""

    pupil_radius_mm: float
    wavelength_nm: float = 530.0
    coeffs: Mapping[int, float] = field(default_factory=dict)

    def __post_init__(self):
        if not self.pupil_radius_mm > 0:
            raise ZernikeError("pupil_radius_mm must be positive")
        if not self.wavelength_nm > 0:
            raise ZernikeError("wavelength_nm must be positive")
        clean = {}
        for j, v in dict(self.coeffs).items():
            j = int(j)
            if j < 0:
                raise ZernikeError(f"negative OSA index {j}")
            clean[j] = float(v)
        object.__setattr__(self, "coeffs", clean)

    def __getitem__(self, j: int) -> float:
        return self.coeffs.get(j, 0.0)

    @property
    def max_order(self) -> int:
        nonzero = [j for j, v in self.coeffs.items() if v != 0.0]
        return max((osa_to_nm(j)[0] for j in nonzero), default=0)

    def as_array(self, size: int = MAX_J_4TH_ORDER + 1) -> np.ndarray:
        out = np.zeros(size)
        for j, v in self.coeffs.items():
            if j >= size:
                raise ZernikeError(f"index {j} does not fit in {size} terms")
            out[j] = v
        return out

    def replace(self, **changes) -> "ZernikeCoefficients":
        """Copy with some coefficients (``c4=...`` style keys) or fields changed."""
        coeffs = dict(self.coeffs)
        kw = {}
        for k, v in changes.items():
            if k.startswith("c") and k[1:].isdigit():
                coeffs[int(k[1:])] = v
            else:
                kw[k] = v
        kw.setdefault("pupil_radius_mm", self.pupil_radius_mm)
        kw.setdefault("wavelength_nm", self.wavelength_nm)
        return ZernikeCoefficients(coeffs=coeffs, **kw)

    @classmethod
    def from_array(cls, values, pupil_radius_mm: float, wavelength_nm: float = 530.0):
        return cls(pupil_radius_mm, wavelength_nm,
                   {j: float(v) for j, v in enumerate(values) if v != 0.0})

    # -- JSON file format ------------------------------------------------
    def to_json(self) -> str:
        doc = {
            "pupil_radius_mm": self.pupil_radius_mm,
            "wavelength_nm": self.wavelength_nm,
            "coefficients": [{"j": j, "value_um": v}
                             for j, v in sorted(self.coeffs.items())],
        }
        return json.dumps(doc, indent=2)

    @classmethod
    def from_json(cls, text: str) -> "ZernikeCoefficients":
        try:
            doc = json.loads(text)
            radius = float(doc["pupil_radius_mm"])
            wavelength = float(doc["wavelength_nm"])
            entries = doc["coefficients"]
        except (KeyError, TypeError, ValueError) as exc:
            raise ZernikeError(f"malformed Zernike file: {exc}") from exc
        coeffs: dict[int, float] = {}
        for entry in entries:
            j = int(entry["j"])
            if j in coeffs:
                raise ZernikeError(f"duplicate coefficient index j={j}")
            coeffs[j] = float(entry["value_um"])
        return cls(radius, wavelength, coeffs)

    @classmethod
    def load(cls, path) -> "ZernikeCoefficients":
        return cls.from_json(Path(path).read_text(encoding="utf-8"))

    def save(self, path) -> None:
        Path(path).write_text(self.to_json() + "\n", encoding="utf-8")


def wavefront(z: ZernikeCoefficients, rho: np.ndarray, theta: np.ndarray) -> np.ndarray:
    """Wavefront error (µm) at in-pupil polar samples."""
    w = np.zeros(np.broadcast(rho, theta).shape)
    for j, c in sorted(z.coeffs.items()):
        if c != 0.0:
            w += c * _basis(j, rho, theta)
    return w


def pupil_coordinates(n: int) -> tuple[np.ndarray, np.ndarray]:
    """
    Normalized polar coordinates on an ``n x n`` grid spanning the pupil.

    The grid centre sits at index ``n // 2`` and the pupil edge is
    ``n / 2`` samples away, so the first sample of the centre row lies on
    the rim.
    """
    half = n / 2.0
    ax = (np.arange(n) - n // 2) / half
    x, y = np.meshgrid(ax, -ax)
    return np.hypot(x, y), np.arctan2(y, x)


def wavefront_grid(z: ZernikeCoefficients, n: int) -> np.ndarray:
    """Square wavefront map in µm; samples outside the pupil are NaN."""
    if n < 2:
        raise ZernikeError("grid size must be >= 2")
    rho, theta = pupil_coordinates(n)
    inside = rho <= 1.0
    out = np.full((n, n), np.nan)
    out[inside] = wavefront(z, rho[inside], theta[inside])
    return out


@dataclass(frozen=True)
class PowerVector:
    """Sphero-cylindrical refraction as (M, J0, J45) in diopters."""

    M: float
    J0: float = 0.0
    J45: float = 0.0

    def __post_init__(self):
        if not all(math.isfinite(v) for v in (self.M, self.J0, self.J45)):
            raise ZernikeError("power vector components must be finite")

    @property
    def cylinder(self) -> float:
        """Magnitude of the (negative) cylinder, 2*sqrt(J0^2 + J45^2)."""
        return 2.0 * math.hypot(self.J0, self.J45)


def power_vector_from_zernike(z: ZernikeCoefficients) -> PowerVector:
    r2 = z.pupil_radius_mm ** 2
    return PowerVector(
        M=-4.0 * SQRT3 * z[J_DEFOCUS] / r2,
        J0=-2.0 * SQRT6 * z[J_VERTICAL_ASTIG] / r2,
        J45=-2.0 * SQRT6 * z[J_OBLIQUE_ASTIG] / r2,
    )


def diopters_to_defocus_coeff(M: float, pupil_radius_mm: float) -> float:
    """Defocus coefficient c4 (µm) producing mean sphere ``M`` at the radius."""
    if not pupil_radius_mm > 0:
        raise ZernikeError("pupil radius must be positive")
    return -M * pupil_radius_mm ** 2 / (4.0 * SQRT3)


def astigmatism_to_coeffs(J0: float, J45: float, pupil_radius_mm: float) -> tuple[float, float]:
    """(c3, c5) in µm for the given astigmatic components."""
    k = -pupil_radius_mm ** 2 / (2.0 * SQRT6)
    return J45 * k, J0 * k


def zernike_from_power_vector(p: PowerVector, pupil_radius_mm: float,
                              wavelength_nm: float = 530.0) -> ZernikeCoefficients:
    c3, c5 = astigmatism_to_coeffs(p.J0, p.J45, pupil_radius_mm)
    c4 = diopters_to_defocus_coeff(p.M, pupil_radius_mm)
    return ZernikeCoefficients(pupil_radius_mm, wavelength_nm,
                               {J_OBLIQUE_ASTIG: c3, J_DEFOCUS: c4, J_VERTICAL_ASTIG: c5})


def blur_strength(p: PowerVector) -> float:
    """Dioptric blur strength sqrt(M^2 + J0^2 + J45^2)."""
    return math.sqrt(p.M ** 2 + p.J0 ** 2 + p.J45 ** 2)
