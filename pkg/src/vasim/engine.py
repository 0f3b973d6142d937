"""
One simulated acuity measurement and defocus sweeps built from it.

A measurement couples a BestPEST staircase to an observer: each trial the
staircase proposes a gap, a randomly oriented Landolt C of that gap is
rendered and blurred with the PSF of the optical system, and the observer's
answer is scored against the true orientation.
"""
from __future__ import annotations

import csv
import math
import multiprocessing
from concurrent.futures import ProcessPoolExecutor
from dataclasses import asdict, dataclass, field, replace
from typing import Callable, Sequence

import numpy as np

from .cnn import ModelShapeError
from .optics import Psf, apply_optical_blur, compute_psf, otf
from .profiles import get_profile
from .staircase import PsychometricParams, Staircase
from .stimulus import N_ORIENTATIONS, Orientation, StimulusImage, gap_to_logmar, render_landolt
from .zernike import J_DEFOCUS, ZernikeCoefficients, diopters_to_defocus_coeff

Observer = Callable[[StimulusImage], Orientation]


def process_pool(workers: int) -> ProcessPoolExecutor:
    # spawn, not fork: forking after the OpenMP runtime has started is unsafe
    return ProcessPoolExecutor(max_workers=workers, mp_context=multiprocessing.get_context("spawn"))


@dataclass(frozen=True)
class SimConfig:
    profile: str = "desk"
    repetitions: int = 10
    trials: int = 30
    pupil_radius_mm: float = 4.0
    wavelength_nm: float = 530.0
    pupil_grid_n: int = 512
    seed: int = 0
    beta: float = 2.0
    guess_rate: float = 0.125
    lapse_rate: float = 0.02

    def __post_init__(self):
        get_profile(self.profile)
        if self.repetitions < 1 or self.trials < 1:
            raise ValueError("repetitions and trials must be >= 1")

    @property
    def image_size(self) -> int:
        return get_profile(self.profile).image_size

    @property
    def pixel_angle_arcmin(self) -> float:
        return get_profile(self.profile).pixel_angle_arcmin

    @property
    def psychometric(self) -> PsychometricParams:
        prof = get_profile(self.profile)
        return PsychometricParams.for_range(
            prof.candidate_max, prof.gap_step, beta=self.beta,
            gamma=self.guess_rate, lapse=self.lapse_rate, trials=self.trials)

    def logmar_bounds(self) -> tuple[float, float]:
        c = self.psychometric.alpha_candidates
        return gap_to_logmar(c[0], self.pixel_angle_arcmin), gap_to_logmar(c[-1], self.pixel_angle_arcmin)


@dataclass
class VaResult:
    mean_logmar: float
    logmars: list
    sd_logmar: float
    final_gaps: list
    metadata: dict = field(default_factory=dict)


def repetition_rng(seed: int, key: Sequence[int], rep: int) -> np.random.Generator:
    """Independent stream per (master seed, measurement key, repetition)."""
    return np.random.default_rng(np.random.SeedSequence([int(seed), *map(int, key), int(rep)]))


def _check_observer(observer, cfg: SimConfig) -> None:
    n = getattr(observer, "input_size", None)
    if n is not None and n != cfg.image_size:
        raise ModelShapeError(
            f"observer expects {n} px images but profile {cfg.profile!r} renders {cfg.image_size} px")


def measurement_psf(z: ZernikeCoefficients, cfg: SimConfig) -> Psf:
    zc = replace(z, wavelength_nm=cfg.wavelength_nm)
    return compute_psf(zc, cfg.pixel_angle_arcmin, cfg.image_size, cfg.pupil_grid_n)


def simulate_va(z: ZernikeCoefficients, observer: Observer, cfg: SimConfig,
                key: Sequence[int] = (), psf: Psf | None = None,
                cache_responses: bool = True) -> VaResult:
    """
    Repeated staircase measurements of logMAR acuity through aberrations ``z``.

    ``key`` extends the seed so that different grid points draw different
    orientation sequences.  The PSF is computed once and reused by every
    trial.  With ``cache_responses`` (valid for deterministic observers) the
    answer to each (gap, orientation) stimulus is computed once.
    """
    _check_observer(observer, cfg)
    if psf is None:
        psf = measurement_psf(z, cfg)
    tf = otf(psf)
    n, angle = cfg.image_size, cfg.pixel_angle_arcmin
    params = cfg.psychometric
    answers: dict[tuple[float, int], bool] = {}
    warnings: list[str] = []

    def trial(gap: float, o: Orientation) -> bool:
        k = (gap, int(o))
        if cache_responses and k in answers:
            return answers[k]
        stim = apply_optical_blur(render_landolt(gap, o, n, angle), psf, tf)
        for w in stim.metadata.get("warnings", ()):
            if w not in warnings:
                warnings.append(w)
        ok = Orientation(observer(stim)) == o
        answers[k] = ok
        return ok

    finals = []
    for rep in range(cfg.repetitions):
        rng = repetition_rng(cfg.seed, key, rep)
        sc = Staircase(params)
        while not sc.finished:
            gap = sc.propose()
            o = Orientation(int(rng.integers(N_ORIENTATIONS)))
            sc.record(gap, trial(gap, o))
        finals.append(sc.final_threshold())
    logmars = [gap_to_logmar(g, angle) for g in finals]
    sd = float(np.std(logmars, ddof=1)) if len(logmars) > 1 else 0.0
    meta = {"config": asdict(cfg), "psf_energy_kept": psf.energy_kept}
    if warnings:
        meta["warnings"] = warnings
    return VaResult(float(np.mean(logmars)), logmars, sd, finals, meta)


def _sweep_point(args):
    z, observer, cfg = args
    return simulate_va(z, observer, cfg)


def defocus_sweep(base: ZernikeCoefficients, levels: Sequence[float], observer: Observer,
                  cfg: SimConfig, workers: int = 1) -> list[tuple[float, VaResult]]:
    """VA at each added spherical defocus (D); results in input order."""
    if not math.isclose(base.pupil_radius_mm, cfg.pupil_radius_mm):
        raise ValueError(
            f"base wavefront radius {base.pupil_radius_mm} mm differs from the configured "
            f"pupil radius {cfg.pupil_radius_mm} mm")
    levels = [float(d) for d in levels]
    if not all(math.isfinite(d) for d in levels):
        raise ValueError("defocus levels must be finite")
    jobs = []
    for d in levels:
        c4 = base[J_DEFOCUS] + diopters_to_defocus_coeff(d, cfg.pupil_radius_mm)
        jobs.append((base.replace(c4=c4), observer, cfg))
    if workers > 1 and len(jobs) > 1:
        with process_pool(workers) as ex:
            results = list(ex.map(_sweep_point, jobs))
    else:
        results = [_sweep_point(j) for j in jobs]
    return list(zip(levels, results))


def parse_range(text: str) -> list[float]:
    """``start:step:stop`` (inclusive) or a comma-separated list."""
    if ":" in text:
        start, step, stop = (float(t) for t in text.split(":"))
        if step == 0:
            raise ValueError("range step must be non-zero")
        count = int(math.floor((stop - start) / step + 1e-9)) + 1
        if count < 1:
            raise ValueError(f"empty range {text!r}")
        return [round(start + k * step, 10) for k in range(count)]
    return [float(t) for t in text.split(",") if t.strip()]


def write_va_csv(rows: Sequence[tuple[float | None, VaResult]], path, first_column: str | None = "defocus_d") -> None:
    reps = max(len(r.logmars) for _, r in rows)
    header = ([first_column] if first_column else []) + ["mean_logmar", "sd_logmar"] + \
        [f"rep{k}" for k in range(1, reps + 1)]
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(header)
        for level, r in rows:
            row = [f"{level:.4f}"] if first_column else []
            row += [f"{r.mean_logmar:.6f}", f"{r.sd_logmar:.6f}"] + [f"{v:.6f}" for v in r.logmars]
            w.writerow(row)


def read_sweep_csv(path) -> list[dict]:
    with open(path, newline="") as fh:
        return [{k: float(v) for k, v in row.items()} for row in csv.DictReader(fh)]
