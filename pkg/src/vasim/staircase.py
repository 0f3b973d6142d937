"""
BestPEST: maximum-likelihood adaptive staircase over a grid of threshold
candidates, with a logistic psychometric function of fixed shape.

The psychometric function is evaluated on a log10 scale of the gap size:

    psi(x; alpha) = gamma + (1 - gamma - lapse) / (1 + exp(-beta (log10 x - log10 alpha)))

Each trial is presented at the current maximum-likelihood threshold.
"""
from __future__ import annotations

import csv
from dataclasses import dataclass, field

import numpy as np


class StaircaseError(RuntimeError):
    pass


@dataclass(frozen=True)
class PsychometricParams:
    beta: float = 2.0
    gamma: float = 0.125
    lapse: float = 0.02
    alpha_candidates: tuple = tuple(range(1, 81))
    trials: int = 30

    def __post_init__(self):
        object.__setattr__(self, "alpha_candidates", tuple(float(a) for a in self.alpha_candidates))
        c = np.asarray(self.alpha_candidates)
        if not 0 <= self.gamma < 1 or not 0 <= self.lapse < 1 or self.gamma + self.lapse >= 1:
            raise ValueError("need 0 <= gamma, lapse < 1 and gamma + lapse < 1")
        if not self.beta > 0:
            raise ValueError("beta must be positive")
        if len(c) == 0 or np.any(c <= 0) or np.any(np.diff(c) <= 0):
            raise ValueError("candidates must be positive and strictly increasing")
        if self.trials < 1:
            raise ValueError("trials must be >= 1")

    @classmethod
    def for_range(cls, candidate_max: float, step: float = 1.0, **kw) -> "PsychometricParams":
        """Candidates ``step, 2 step, ..., candidate_max``."""
        k = int(round(candidate_max / step))
        return cls(alpha_candidates=tuple(i * step for i in range(1, k + 1)), **kw)


def psychometric_probability(x, alpha, p: PsychometricParams = PsychometricParams()):
    """Probability of a correct response at gap ``x`` for threshold ``alpha``."""
    u = np.log10(np.asarray(x, dtype=float)) - np.log10(np.asarray(alpha, dtype=float))
    out = p.gamma + (1.0 - p.gamma - p.lapse) / (1.0 + np.exp(-p.beta * u))
    return float(out) if np.ndim(out) == 0 else out


@dataclass
class Staircase:
    """A single BestPEST session."""

    params: PsychometricParams
    loglik: np.ndarray = field(init=False)
    history: list = field(default_factory=list)
    last_presented: float | None = None

    def __post_init__(self):
        self.loglik = np.zeros(len(self.params.alpha_candidates))
        self._cand = np.asarray(self.params.alpha_candidates)

    @property
    def finished(self) -> bool:
        return len(self.history) >= self.params.trials

    def ml_alpha(self) -> float:
        # np.argmax takes the first maximum, i.e. the smallest gap on ties
        return float(self._cand[int(np.argmax(self.loglik))])

    def propose(self) -> float:
        if self.finished:
            raise StaircaseError("staircase already terminated")
        if not self.history:
            return float(self._cand[(len(self._cand) - 1) // 2])
        return self.ml_alpha()

    def record(self, gap_px: float, correct: bool) -> "Staircase":
        if self.finished:
            raise StaircaseError("staircase already terminated")
        psi = psychometric_probability(gap_px, self._cand, self.params)
        self.loglik += np.log(psi) if correct else np.log1p(-psi)
        self.history.append((float(gap_px), bool(correct)))
        self.last_presented = float(gap_px)
        return self

    def final_threshold(self) -> float:
        """Gap of the last presented stimulus."""
        if not self.finished:
            raise StaircaseError(
                f"staircase not finished ({len(self.history)}/{self.params.trials} trials)")
        return self.last_presented

    def run(self, respond) -> float:
        """Drive the session with ``respond(gap) -> bool`` until termination."""
        while not self.finished:
            gap = self.propose()
            self.record(gap, bool(respond(gap)))
        return self.final_threshold()

    def write_trace(self, path) -> None:
        """CSV ``trial,gap_px,correct,ml_alpha`` replaying the session."""
        replay = Staircase(self.params)
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(["trial", "gap_px", "correct", "ml_alpha"])
            for k, (gap, ok) in enumerate(self.history, start=1):
                replay.record(gap, ok)
                w.writerow([k, f"{gap:g}", int(ok), f"{replay.ml_alpha():g}"])


def start(params: PsychometricParams = PsychometricParams()) -> Staircase:
    return Staircase(params)
