"""Bland-Altman agreement between simulated and reference acuity."""
from __future__ import annotations

import csv
import json
from dataclasses import dataclass

import numpy as np

LOA_Z = 1.96


class AgreementError(ValueError):
    pass


@dataclass
class BlandAltmanReport:
    bias: float
    sd_diff: float
    loa_low: float
    loa_high: float
    means: np.ndarray
    diffs: np.ndarray

    @property
    def n(self) -> int:
        return len(self.diffs)

    def fraction_within_limits(self) -> float:
        return float(np.mean((self.diffs >= self.loa_low) & (self.diffs <= self.loa_high)))

    def to_dict(self) -> dict:
        return {
            "bias": self.bias, "sd_diff": self.sd_diff,
            "loa_low": self.loa_low, "loa_high": self.loa_high, "n": self.n,
            "pairs": [{"mean": float(m), "diff": float(d)} for m, d in zip(self.means, self.diffs)],
        }

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=2)


def bland_altman(a, b) -> BlandAltmanReport:
    """Differences ``a - b``; limits of agreement ``bias +/- 1.96 SD`` (n-1 SD)."""
    a = np.asarray(a, dtype=float)
    b = np.asarray(b, dtype=float)
    if a.shape != b.shape or a.ndim != 1:
        raise AgreementError(f"paired inputs must be equal-length vectors ({a.shape} vs {b.shape})")
    if len(a) < 2:
        raise AgreementError("need at least two pairs")
    d = a - b
    bias = float(d.mean())
    sd = float(d.std(ddof=1))
    return BlandAltmanReport(bias, sd, bias - LOA_Z * sd, bias + LOA_Z * sd, (a + b) / 2.0, d)


def apply_offset_correction(sim, bias: float) -> np.ndarray:
    return np.asarray(sim, dtype=float) - bias


def read_pairs_csv(path) -> tuple[np.ndarray, np.ndarray]:
    with open(path, newline="") as fh:
        reader = csv.DictReader(fh)
        if not {"sim_logmar", "ref_logmar"} <= set(reader.fieldnames or ()):
            raise AgreementError("pairs CSV needs columns sim_logmar,ref_logmar")
        rows = list(reader)
    return (np.array([float(r["sim_logmar"]) for r in rows]),
            np.array([float(r["ref_logmar"]) for r in rows]))
