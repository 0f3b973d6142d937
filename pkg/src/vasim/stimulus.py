"""Landolt-C optotypes and the pixel/acuity geometry that goes with them."""
from __future__ import annotations

import math
from dataclasses import dataclass, field
from enum import IntEnum

import numpy as np

TEST_DISTANCE_MM = 5000.0

# A 0.311 mm monitor pixel seen from 5 m.  Puts 3 px at -0.193 logMAR and
# 80 px at 1.233 logMAR, inside 0.005 of both two-decimal range anchors.
FULL_PIXEL_SIZE_MM = 0.311
FULL_PIXEL_ANGLE_ARCMIN = math.degrees(math.atan(FULL_PIXEL_SIZE_MM / TEST_DISTANCE_MM)) * 60.0
DESK_SCALE = 4

SUPERSAMPLE = 4


class StimulusError(ValueError):
    pass


class Orientation(IntEnum):
    """Gap direction of the Landolt C, counter-clockwise from 'gap right'."""

    DEG_0 = 0
    DEG_45 = 1
    DEG_90 = 2
    DEG_135 = 3
    DEG_180 = 4
    DEG_225 = 5
    DEG_270 = 6
    DEG_315 = 7

    @property
    def degrees(self) -> int:
        return 45 * int(self)

    @classmethod
    def from_degrees(cls, deg: float) -> "Orientation":
        k = int(round(deg / 45.0))
        if not math.isclose(k * 45.0, deg) or not 0 <= k < 8:
            raise StimulusError(f"{deg} deg is not a Landolt-C orientation")
        return cls(k)


N_ORIENTATIONS = len(Orientation)


@dataclass
class StimulusImage:
    """Grayscale optotype; 1.0 is white background, 0.0 is black ink."""

    pixels: np.ndarray
    gap_px: float
    orientation: Orientation
    pixel_angle_arcmin: float
    metadata: dict = field(default_factory=dict)

    @property
    def size(self) -> int:
        return self.pixels.shape[0]


def pixel_angle_from_size(pixel_size_mm: float, distance_mm: float = TEST_DISTANCE_MM) -> float:
    return math.degrees(math.atan(pixel_size_mm / distance_mm)) * 60.0


def pixel_size_from_angle(pixel_angle_arcmin: float, distance_mm: float = TEST_DISTANCE_MM) -> float:
    return distance_mm * math.tan(math.radians(pixel_angle_arcmin / 60.0))


def default_pixel_geometry(profile: str = "full") -> tuple[float, float]:
    """(arcmin per pixel, pixel size in mm at 5 m) for a named profile."""
    if profile == "full":
        angle = FULL_PIXEL_ANGLE_ARCMIN
    elif profile == "desk":
        angle = FULL_PIXEL_ANGLE_ARCMIN * DESK_SCALE
    else:
        raise StimulusError(f"unknown profile {profile!r}")
    return angle, pixel_size_from_angle(angle)


def gap_to_logmar(gap_px, pixel_angle_arcmin: float):
    gap = np.asarray(gap_px, dtype=float)
    if np.any(gap <= 0):
        raise StimulusError("gap size must be positive")
    out = np.log10(gap * pixel_angle_arcmin)
    return float(out) if out.ndim == 0 else out


def logmar_to_gap(logmar, pixel_angle_arcmin: float):
    out = 10.0 ** np.asarray(logmar, dtype=float) / pixel_angle_arcmin
    return float(out) if out.ndim == 0 else out


def _unit(deg: float) -> tuple[float, float]:
    c, s = math.cos(math.radians(deg)), math.sin(math.radians(deg))
    # exact zeros keep mirror-image optotypes bit-identical
    return (0.0 if abs(c) < 1e-12 else c), (0.0 if abs(s) < 1e-12 else s)


def landolt_coverage(gap_px: float, orientation, n: int, supersample: int = SUPERSAMPLE) -> np.ndarray:
    """Fraction of each pixel covered by ink (0..1), centre at (n/2, n/2)."""
    o = Orientation(orientation)
    r_out, r_in, half_gap = 2.5 * gap_px, 1.5 * gap_px, 0.5 * gap_px
    c, s = _unit(o.degrees)
    cov = np.zeros((n, n))
    centre = n / 2.0
    lo = max(0, int(math.floor(centre - r_out)) - 1)
    hi = min(n, int(math.ceil(centre + r_out)) + 1)
    sub = (np.arange(supersample) + 0.5) / supersample
    coords = (np.arange(lo, hi)[:, None] + sub[None, :]).ravel() - centre
    x = coords[None, :]
    y = -coords[:, None]          # image rows grow downwards
    d2 = x * x + y * y
    ring = (d2 >= r_in * r_in) & (d2 <= r_out * r_out)
    along = x * c + y * s
    across = -x * s + y * c
    gap = (along > 0) & (np.abs(across) < half_gap)
    ink = (ring & ~gap).astype(float)
    m = hi - lo
    ink = ink.reshape(m, supersample, m, supersample).mean(axis=(1, 3))
    cov[lo:hi, lo:hi] = ink
    return cov


def render_landolt(gap_px: float, orientation, n: int,
                   pixel_angle_arcmin: float) -> StimulusImage:
    """Black Landolt C (outer diameter 5 gap, stroke = gap) on white."""
    if not gap_px > 0:
        raise StimulusError("gap size must be positive")
    if 5.0 * gap_px > n:
        raise StimulusError(f"optotype with gap {gap_px} px does not fit a {n} px canvas")
    pixels = 1.0 - landolt_coverage(gap_px, orientation, n)
    return StimulusImage(pixels, float(gap_px), Orientation(orientation), pixel_angle_arcmin)


def landolt_ink_area(gap_px: float) -> float:
    """Analytic ink area (px^2) of the optotype: annulus minus the gap slot."""
    r_out, r_in, h = 2.5 * gap_px, 1.5 * gap_px, 0.5 * gap_px

    def strip(r):  # area of the disk of radius r with |y| < h, x > 0
        return h * math.sqrt(r * r - h * h) + r * r * math.asin(h / r)

    return math.pi * (r_out ** 2 - r_in ** 2) - (strip(r_out) - strip(r_in))
