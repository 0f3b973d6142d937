"""
Progressive addition lenses: Zernike grids over the lens area, mean-sphere
normalization, VA maps, blur-strength maps and horizontal zone profiles.
"""
from __future__ import annotations

import csv
import json
import math
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .engine import SimConfig, process_pool, simulate_va
from .zernike import (J_DEFOCUS, MAX_J_4TH_ORDER, PowerVector, ZernikeCoefficients,
                      zernike_from_power_vector)

N_TERMS = MAX_J_4TH_ORDER + 1
COEFF_COLUMNS = tuple(f"c{j}" for j in range(N_TERMS))
GRID_COLUMNS = ("x_mm", "y_mm") + COEFF_COLUMNS
MAP_COLUMNS = ("x_mm", "y_mm", "mean_logmar", "sd_logmar", "status")

# generic design stand-ins (not measured lenses)
SYNTHETIC_WIDTHS_MM = {"hard": 1.8, "soft": 3.2}
SYNTHETIC_CORRIDOR_MID_MM = -9.0
SYNTHETIC_J45_CAP_D = 2.5

FAR_REFERENCE_Y = 0.0
INTERMEDIATE_Y = -9.0
NEAR_REFERENCE_Y = -18.0


class PalGridError(ValueError):
    pass


class MissingColumnsError(PalGridError):
    pass


class NonRectangularGridError(PalGridError):
    pass


class DuplicatePointError(PalGridError):
    pass


class NaNValueError(PalGridError):
    pass


class MissingCenterColumnError(PalGridError):
    pass


class OffGridError(PalGridError):
    pass


@dataclass
class PalDesign:
    label: str
    addition_d: float
    xs: np.ndarray                 # ascending, mm
    ys: np.ndarray                 # ascending, mm
    coeffs: np.ndarray             # (len(ys), len(xs), 15) in µm
    pupil_radius_mm: float = 4.0
    wavelength_nm: float = 530.0
    normalized: bool = False

    @property
    def shape(self) -> tuple[int, int]:
        return len(self.ys), len(self.xs)

    @property
    def n_points(self) -> int:
        return len(self.ys) * len(self.xs)

    def zernike(self, iy: int, ix: int) -> ZernikeCoefficients:
        return ZernikeCoefficients.from_array(self.coeffs[iy, ix], self.pupil_radius_mm, self.wavelength_nm)

    def power_vectors(self) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
        """(M, J0, J45) grids in diopters."""
        r2 = self.pupil_radius_mm ** 2
        c = self.coeffs
        return (-4.0 * math.sqrt(3) * c[..., 4] / r2,
                -2.0 * math.sqrt(6) * c[..., 5] / r2,
                -2.0 * math.sqrt(6) * c[..., 3] / r2)

    def center_column(self) -> int:
        hit = np.flatnonzero(self.xs == 0.0)
        if hit.size == 0:
            raise MissingCenterColumnError("grid has no x = 0 column")
        return int(hit[0])

    def sidecar(self) -> dict:
        return {"pupil_radius_mm": self.pupil_radius_mm, "wavelength_nm": self.wavelength_nm,
                "addition_d": self.addition_d, "label": self.label}


def _sidecar_path(path: Path) -> Path:
    return path.with_suffix(".json")


def load_pal_grid(path, sidecar=None) -> PalDesign:
    """Read a ``x_mm,y_mm,c0..c14`` CSV grid and its JSON sidecar."""
    path = Path(path)
    meta = json.loads(Path(sidecar or _sidecar_path(path)).read_text())
    with open(path, newline="") as fh:
        reader = csv.DictReader(fh)
        missing = [c for c in GRID_COLUMNS if c not in (reader.fieldnames or [])]
        if missing:
            raise MissingColumnsError(f"missing columns: {', '.join(missing)}")
        rows = list(reader)
    points = {}
    for k, row in enumerate(rows, start=2):
        try:
            vals = [float(row[c]) for c in GRID_COLUMNS]
        except (TypeError, ValueError) as exc:
            raise PalGridError(f"line {k}: unparseable value ({exc})") from exc
        if any(math.isnan(v) for v in vals):
            raise NaNValueError(f"line {k}: NaN value")
        key = (vals[0], vals[1])
        if key in points:
            raise DuplicatePointError(f"duplicate point x={key[0]:g}, y={key[1]:g}")
        points[key] = vals[2:]
    xs = np.array(sorted({k[0] for k in points}))
    ys = np.array(sorted({k[1] for k in points}))
    if len(points) != len(xs) * len(ys):
        raise NonRectangularGridError(
            f"{len(points)} points do not fill a {len(xs)} x {len(ys)} grid")
    coeffs = np.empty((len(ys), len(xs), N_TERMS))
    for iy, y in enumerate(ys):
        for ix, x in enumerate(xs):
            coeffs[iy, ix] = points[(x, y)]
    design = PalDesign(str(meta.get("label", path.stem)), float(meta.get("addition_d", 0.0)), xs, ys, coeffs,
                       float(meta["pupil_radius_mm"]), float(meta["wavelength_nm"]))
    design.center_column()
    return design


def save_pal_grid(design: PalDesign, path) -> None:
    path = Path(path)
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(GRID_COLUMNS)
        for iy, y in enumerate(design.ys):
            for ix, x in enumerate(design.xs):
                w.writerow([f"{x:g}", f"{y:g}"] + [repr(float(v)) for v in design.coeffs[iy, ix]])
    _sidecar_path(path).write_text(json.dumps(design.sidecar(), indent=2, sort_keys=True) + "\n")


def normalize_mean_sphere(design: PalDesign) -> PalDesign:
    """Subtract each row's corridor (x = 0) defocus from every point of the row."""
    ic = design.center_column()
    coeffs = design.coeffs.copy()
    coeffs[..., J_DEFOCUS] = design.coeffs[..., J_DEFOCUS] - design.coeffs[:, ic:ic + 1, J_DEFOCUS]
    return PalDesign(design.label, design.addition_d, design.xs.copy(), design.ys.copy(), coeffs,
                     design.pupil_radius_mm, design.wavelength_nm, normalized=True)


def _logistic(t):
    return 1.0 / (1.0 + np.exp(-t))


def synthetic_power_profile(y, addition_d: float, width_mm: float,
                            y_mid: float = SYNTHETIC_CORRIDOR_MID_MM):
    """Corridor power p(y) and its slope dp/dy."""
    s = _logistic((y_mid - np.asarray(y, dtype=float)) / width_mm)
    return addition_d * s, -addition_d * s * (1.0 - s) / width_mm


def synthesize_generic_pal(kind: str, addition_d: float = 2.5, extent_mm: float = 20.0,
                           step_mm: float = 1.0, pupil_radius_mm: float = 4.0,
                           wavelength_nm: float = 530.0) -> PalDesign:
    """
    Generic hard/soft progressive lens built from a logistic corridor.

    Mean sphere follows the corridor power p(y); oblique astigmatism grows
    linearly away from the corridor as |p'(y)| |x| so that the cylinder
    gradient across x is 2 |p'(y)|.  J45 is capped at 2.5 D; J0 is zero.
    """
    if kind not in SYNTHETIC_WIDTHS_MM:
        raise ValueError(f"kind must be one of {sorted(SYNTHETIC_WIDTHS_MM)}")
    if not addition_d > 0:
        raise ValueError("addition must be positive")
    k = int(round(extent_mm / step_mm))
    axis = np.arange(-k, k + 1) * step_mm
    p, dp = synthetic_power_profile(axis, addition_d, SYNTHETIC_WIDTHS_MM[kind])
    coeffs = np.zeros((len(axis), len(axis), N_TERMS))
    for iy in range(len(axis)):
        for ix, x in enumerate(axis):
            j45 = math.copysign(min(abs(dp[iy]) * abs(x), SYNTHETIC_J45_CAP_D), x) if x else 0.0
            z = zernike_from_power_vector(PowerVector(float(p[iy]), 0.0, j45), pupil_radius_mm, wavelength_nm)
            coeffs[iy, ix] = z.as_array(N_TERMS)
    return PalDesign(kind, addition_d, axis.copy(), axis.copy(), coeffs, pupil_radius_mm, wavelength_nm)


@dataclass
class VaMap:
    xs: np.ndarray
    ys: np.ndarray
    mean_logmar: np.ndarray        # (ny, nx), NaN where failed
    sd_logmar: np.ndarray
    status: np.ndarray             # (ny, nx) of str
    provenance: dict = field(default_factory=dict)

    def to_csv(self, path) -> None:
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(MAP_COLUMNS)
            for iy, y in enumerate(self.ys):
                for ix, x in enumerate(self.xs):
                    w.writerow([f"{x:g}", f"{y:g}", f"{self.mean_logmar[iy, ix]:.6f}",
                                f"{self.sd_logmar[iy, ix]:.6f}", self.status[iy, ix]])

    @classmethod
    def from_csv(cls, path, provenance: dict | None = None) -> "VaMap":
        with open(path, newline="") as fh:
            rows = list(csv.DictReader(fh))
        xs = np.array(sorted({float(r["x_mm"]) for r in rows}))
        ys = np.array(sorted({float(r["y_mm"]) for r in rows}))
        if len(rows) != len(xs) * len(ys):
            raise NonRectangularGridError("VA map is not a complete grid")
        mean = np.full((len(ys), len(xs)), np.nan)
        sd = np.full_like(mean, np.nan)
        status = np.empty(mean.shape, dtype=object)
        xi = {x: i for i, x in enumerate(xs)}
        yi = {y: i for i, y in enumerate(ys)}
        for r in rows:
            iy, ix = yi[float(r["y_mm"])], xi[float(r["x_mm"])]
            mean[iy, ix] = float(r["mean_logmar"])
            sd[iy, ix] = float(r["sd_logmar"])
            status[iy, ix] = r["status"]
        return cls(xs, ys, mean, sd, status, provenance or {})


def _map_row(args):
    design, iy, observer, cfg = args
    out = []
    for ix in range(len(design.xs)):
        try:
            r = simulate_va(design.zernike(iy, ix), observer, cfg, key=(ix, iy))
            out.append((r.mean_logmar, r.sd_logmar, "ok"))
        except Exception as exc:  # a failed point must not abort the map
            out.append((math.nan, math.nan, f"failed: {type(exc).__name__}: {exc}".replace(",", ";")))
    return out


def simulate_pal_map(design: PalDesign, observer, cfg: SimConfig, workers: int = 1,
                     progress=None) -> VaMap:
    """
    Simulated VA at every grid point of a normalized design.

    Each point is an independent :func:`simulate_va` seeded by
    (master seed, column index, row index); the eye contributes no
    aberrations.  Rows are processed in parallel when ``workers > 1`` and
    assembled in grid order.
    """
    if not design.normalized:
        raise PalGridError("normalize_mean_sphere must be applied before simulating a map")
    ny, nx = design.shape
    jobs = [(design, iy, observer, cfg) for iy in range(ny)]
    if workers > 1:
        with process_pool(workers) as ex:
            rows = []
            for iy, row in enumerate(ex.map(_map_row, jobs)):
                rows.append(row)
                if progress:
                    progress(iy + 1, ny)
    else:
        rows = []
        for iy, job in enumerate(jobs):
            rows.append(_map_row(job))
            if progress:
                progress(iy + 1, ny)
    mean = np.array([[p[0] for p in r] for r in rows])
    sd = np.array([[p[1] for p in r] for r in rows])
    status = np.array([[p[2] for p in r] for r in rows], dtype=object)
    prov = {"design": design.label, "addition_d": design.addition_d,
            "model": getattr(observer, "metadata", {}).get("id", type(observer).__name__)}
    return VaMap(design.xs.copy(), design.ys.copy(), mean, sd, status, prov)


def blur_strength_map(design: PalDesign) -> np.ndarray:
    M, J0, J45 = design.power_vectors()
    return np.sqrt(M ** 2 + J0 ** 2 + J45 ** 2)


def extract_profile(va_map: VaMap, y_mm: float) -> list[tuple[float, float]]:
    """The row at ``y_mm`` as ascending (x, logMAR) pairs."""
    hit = np.flatnonzero(np.isclose(va_map.ys, y_mm, atol=1e-9))
    if hit.size == 0:
        rows = ", ".join(f"{y:g}" for y in va_map.ys)
        raise OffGridError(f"y = {y_mm:g} mm is not a grid row; available rows: {rows}")
    iy = int(hit[0])
    return [(float(x), float(v)) for x, v in zip(va_map.xs, va_map.mean_logmar[iy])]


def grid_row(values: np.ndarray, ys: np.ndarray, y_mm: float) -> np.ndarray:
    hit = np.flatnonzero(np.isclose(ys, y_mm, atol=1e-9))
    if hit.size == 0:
        raise OffGridError(f"y = {y_mm:g} mm is not a grid row")
    return values[int(hit[0])]


def good_va_width(profile, threshold_logmar: float = 0.2) -> float:
    """
    Width (mm) of the contiguous run of points with VA <= threshold that
    contains the point nearest x = 0; zero when that point fails.
    """
    if not profile:
        raise ValueError("empty profile")
    xs = np.array([p[0] for p in profile])
    va = np.array([p[1] for p in profile])
    ok = va <= threshold_logmar
    c = int(np.argmin(np.abs(xs)))
    if not ok[c]:
        return 0.0
    lo = c
    while lo > 0 and ok[lo - 1]:
        lo -= 1
    hi = c
    while hi < len(xs) - 1 and ok[hi + 1]:
        hi += 1
    return float(xs[hi] - xs[lo])
