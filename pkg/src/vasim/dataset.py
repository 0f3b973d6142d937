"""Labelled Landolt-C corpora for training and testing the CNN observer."""
from __future__ import annotations

import csv
import json
from dataclasses import asdict, dataclass
from pathlib import Path

import numpy as np
from PIL import Image

from .optics import apply_optical_blur, compute_psf, otf
from .profiles import Profile
from .stimulus import N_ORIENTATIONS, Orientation, render_landolt
from .zernike import J_DEFOCUS, ZernikeCoefficients, diopters_to_defocus_coeff

CORPUS_FORMAT_VERSION = 1
MANIFEST_COLUMNS = ("index", "orientation_deg", "gap_px", "defocus_d", "split")


class DatasetError(ValueError):
    pass


@dataclass(frozen=True)
class DatasetSpec:
    images_per_orientation: int
    train_per_orientation: int
    gap_min: float
    gap_max: float
    defocus_max_d: float
    defocus_step_d: float
    seed: int = 0
    gap_step: float = 1.0

    def __post_init__(self):
        if not 0 < self.train_per_orientation < self.images_per_orientation:
            raise DatasetError("need 0 < train_per_orientation < images_per_orientation")
        if not self.defocus_step_d > 0:
            raise DatasetError("defocus step must be positive")
        if not 0 < self.gap_min <= self.gap_max:
            raise DatasetError("invalid gap range")
        if not self.gap_step > 0:
            raise DatasetError("gap step must be positive")

    @classmethod
    def from_profile(cls, profile: Profile, seed: int = 0, **overrides) -> "DatasetSpec":
        kw = dict(
            images_per_orientation=profile.images_per_orientation,
            train_per_orientation=profile.train_per_orientation,
            gap_min=profile.gap_min, gap_max=profile.gap_max, gap_step=profile.gap_step,
            defocus_max_d=profile.defocus_max_d, defocus_step_d=profile.defocus_step_d,
            seed=seed)
        kw.update(overrides)
        return cls(**kw)

    @property
    def gap_sizes(self) -> np.ndarray:
        """Every gap the corpus can draw: gap_min, gap_min + step, ..., gap_max."""
        k = int(round((self.gap_max - self.gap_min) / self.gap_step))
        return self.gap_min + np.arange(k + 1) * self.gap_step

    @property
    def defocus_levels(self) -> np.ndarray:
        k = int(round(self.defocus_max_d / self.defocus_step_d))
        return np.arange(-k, k + 1) * self.defocus_step_d

    @property
    def n_train(self) -> int:
        return self.train_per_orientation * N_ORIENTATIONS

    @property
    def n_test(self) -> int:
        return (self.images_per_orientation - self.train_per_orientation) * N_ORIENTATIONS


@dataclass
class DatasetPlan:
    """The pre-drawn (orientation, gap, defocus, split) tuple of every image."""

    orientation: np.ndarray
    gap_px: np.ndarray
    defocus_d: np.ndarray
    is_train: np.ndarray

    def __len__(self):
        return len(self.orientation)


def plan_dataset(spec: DatasetSpec) -> DatasetPlan:
    """Draw every image's parameters serially from the seed, without rendering."""
    rng = np.random.default_rng(spec.seed)
    per = spec.images_per_orientation
    levels = spec.defocus_levels
    gaps = spec.gap_sizes[rng.integers(0, len(spec.gap_sizes), size=(N_ORIENTATIONS, per))]
    level_idx = rng.integers(0, len(levels), size=(N_ORIENTATIONS, per))
    orient = np.repeat(np.arange(N_ORIENTATIONS), per)
    is_train = np.tile(np.arange(per) < spec.train_per_orientation, N_ORIENTATIONS)
    return DatasetPlan(orient, gaps.ravel(), levels[level_idx.ravel()], is_train)


@dataclass
class Corpus:
    images: np.ndarray          # (N, n, n) float32 in [0, 1]
    orientation: np.ndarray     # (N,) orientation index
    gap_px: np.ndarray
    defocus_d: np.ndarray
    is_train: np.ndarray
    pixel_angle_arcmin: float
    spec: DatasetSpec | None = None

    def __len__(self):
        return len(self.orientation)

    def split(self, name: str) -> tuple[np.ndarray, np.ndarray]:
        if name not in ("train", "test"):
            raise DatasetError(f"unknown split {name!r}")
        mask = self.is_train if name == "train" else ~self.is_train
        return self.images[mask], self.orientation[mask]


def generate_dataset(spec: DatasetSpec, image_size: int, pixel_angle_arcmin: float,
                     pupil_radius_mm: float = 4.0, wavelength_nm: float = 530.0,
                     pupil_grid_n: int = 512) -> Corpus:
    """Render and blur every planned image; bit-identical for a given spec."""
    plan = plan_dataset(spec)
    transfers = {}
    for d in np.unique(plan.defocus_d):
        z = ZernikeCoefficients(pupil_radius_mm, wavelength_nm,
                                {J_DEFOCUS: diopters_to_defocus_coeff(float(d), pupil_radius_mm)})
        psf = compute_psf(z, pixel_angle_arcmin, image_size, pupil_grid_n)
        transfers[float(d)] = (psf, otf(psf))
    images = np.empty((len(plan), image_size, image_size), dtype=np.float32)
    for i in range(len(plan)):
        stim = render_landolt(float(plan.gap_px[i]), int(plan.orientation[i]), image_size, pixel_angle_arcmin)
        psf, tf = transfers[float(plan.defocus_d[i])]
        images[i] = apply_optical_blur(stim, psf, tf).pixels
    return Corpus(images, plan.orientation.copy(), plan.gap_px.copy(), plan.defocus_d.copy(),
                  plan.is_train.copy(), pixel_angle_arcmin, spec)


def image_filename(index: int, orientation: int, gap: float, defocus_d: float) -> str:
    return f"{index}_{Orientation(orientation).degrees}_{float(gap):g}_{int(round(defocus_d * 100))}.png"


def write_corpus(corpus: Corpus, directory) -> Path:
    """One PNG per image under ``train/`` and ``test/`` plus ``manifest.csv``."""
    root = Path(directory)
    for split in ("train", "test"):
        (root / split).mkdir(parents=True, exist_ok=True)
    rows = []
    for i in range(len(corpus)):
        split = "train" if corpus.is_train[i] else "test"
        name = image_filename(i, corpus.orientation[i], corpus.gap_px[i], corpus.defocus_d[i])
        px = np.round(np.clip(corpus.images[i], 0, 1) * 255).astype(np.uint8)
        Image.fromarray(px, mode="L").save(root / split / name, format="PNG")
        rows.append((i, Orientation(int(corpus.orientation[i])).degrees, f"{float(corpus.gap_px[i]):g}",
                     f"{corpus.defocus_d[i]:.2f}", split))
    with open(root / "manifest.csv", "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(MANIFEST_COLUMNS)
        w.writerows(rows)
    info = {"format_version": CORPUS_FORMAT_VERSION,
            "pixel_angle_arcmin": corpus.pixel_angle_arcmin,
            "image_size": int(corpus.images.shape[1]),
            "spec": asdict(corpus.spec) if corpus.spec else None}
    (root / "corpus.json").write_text(json.dumps(info, indent=2, sort_keys=True) + "\n")
    return root


def read_corpus(directory) -> Corpus:
    root = Path(directory)
    try:
        info = json.loads((root / "corpus.json").read_text())
        with open(root / "manifest.csv", newline="") as fh:
            rows = list(csv.DictReader(fh))
    except FileNotFoundError as exc:
        raise DatasetError(f"{root} is not a corpus directory: {exc}") from exc
    if info.get("format_version") != CORPUS_FORMAT_VERSION:
        raise DatasetError(f"unsupported corpus format {info.get('format_version')}")
    n = int(info["image_size"])
    images = np.empty((len(rows), n, n), dtype=np.float32)
    orient, gap, defocus, is_train = [], [], [], []
    for k, row in enumerate(rows):
        d = float(row["defocus_d"])
        name = image_filename(int(row["index"]), Orientation.from_degrees(float(row["orientation_deg"])),
                              float(row["gap_px"]), d)
        with Image.open(root / row["split"] / name) as im:
            images[k] = np.asarray(im, dtype=np.float32) / 255.0
        orient.append(int(Orientation.from_degrees(float(row["orientation_deg"]))))
        gap.append(float(row["gap_px"]))
        defocus.append(d)
        is_train.append(row["split"] == "train")
    spec = DatasetSpec(**info["spec"]) if info.get("spec") else None
    return Corpus(images, np.array(orient), np.array(gap), np.array(defocus),
                  np.array(is_train), float(info["pixel_angle_arcmin"]), spec)
