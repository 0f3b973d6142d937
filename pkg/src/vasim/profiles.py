"""Named scale profiles: the full 512 px pipeline and a 4x coarser desk variant."""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .stimulus import DESK_SCALE, FULL_PIXEL_ANGLE_ARCMIN, pixel_size_from_angle


@dataclass(frozen=True)
class Profile:
    name: str
    image_size: int
    pixel_angle_arcmin: float
    # training corpus
    gap_min: float
    gap_max: float
    # gap sizes are multiples of gap_step (corpus and staircase alike)
    gap_step: float
    images_per_orientation: int
    train_per_orientation: int
    defocus_max_d: float
    defocus_step_d: float
    # staircase stimulus range: gap_step, 2 gap_step, ..., candidate_max
    candidate_max: float
    max_epochs: int

    @property
    def pixel_size_mm(self) -> float:
        return pixel_size_from_angle(self.pixel_angle_arcmin)

    @property
    def candidates(self) -> np.ndarray:
        return np.arange(1, int(round(self.candidate_max / self.gap_step)) + 1) * self.gap_step


FULL = Profile(
    name="full",
    image_size=512,
    pixel_angle_arcmin=FULL_PIXEL_ANGLE_ARCMIN,
    gap_min=3,
    gap_max=80,
    gap_step=1.0,
    # 1762 training + 562 testing images per orientation, matching the
    # reported totals of 14,096 and 4,496
    images_per_orientation=2324,
    train_per_orientation=1762,
    defocus_max_d=3.0,
    defocus_step_d=0.25,
    candidate_max=80,
    max_epochs=30,
)

# Coarser pixels shrink every optotype by 4; the corpus is narrowed to
# defocus levels where most gaps stay resolvable so a CPU-trained model
# reaches a usable accuracy.  Gaps come in quarter pixels, so the staircase
# presents the same visual angles as the full profile (0.25 desk px is one
# full-profile px) and the 4x supersampled renderer draws them exactly.
DESK = Profile(
    name="desk",
    image_size=128,
    pixel_angle_arcmin=FULL_PIXEL_ANGLE_ARCMIN * DESK_SCALE,
    gap_min=1,
    gap_max=20,
    gap_step=0.25,
    images_per_orientation=200,
    train_per_orientation=150,
    defocus_max_d=0.5,
    defocus_step_d=0.25,
    candidate_max=20,
    max_epochs=20,
)

PROFILES = {p.name: p for p in (FULL, DESK)}


def get_profile(name: str) -> Profile:
    try:
        return PROFILES[name]
    except KeyError:
        raise ValueError(f"unknown profile {name!r}; choose from {sorted(PROFILES)}") from None
