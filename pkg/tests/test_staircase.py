import math

import numpy as np
import pytest

from vasim.staircase import (
    PsychometricParams, StaircaseError, psychometric_probability, start,
)

P = PsychometricParams()


def test_psychometric_examples():
    assert psychometric_probability(1e-6, 30, P) == pytest.approx(0.125, abs=1e-6)
    assert psychometric_probability(30, 30, P) == pytest.approx(0.5525, abs=1e-12)
    assert psychometric_probability(1e9, 30, P) == pytest.approx(0.98, abs=1e-6)


def test_psychometric_vectorised_and_monotone():
    x = np.arange(1, 81)
    p = psychometric_probability(x, 20.0, P)
    assert np.all(np.diff(p) > 0)
    assert np.all((p >= P.gamma) & (p <= 1 - P.lapse))


def test_params_validation():
    with pytest.raises(ValueError):
        PsychometricParams(gamma=0.6, lapse=0.5)
    with pytest.raises(ValueError):
        PsychometricParams(alpha_candidates=(3, 2))
    with pytest.raises(ValueError):
        PsychometricParams(beta=0)
    assert PsychometricParams.for_range(20).alpha_candidates[-1] == 20.0


def test_start_examples():
    s = start(P)
    assert s.propose() == 40.0
    assert len(s.history) == 0
    assert start(PsychometricParams(alpha_candidates=(5,))).propose() == 5.0
    assert start(PsychometricParams.for_range(20)).propose() == 10.0


def _brute_ml(history, cand):
    # likelihood over the candidate grid computed independently per candidate
    best, best_ll = None, -math.inf
    for a in cand:
        ll = 0.0
        for x, ok in history:
            psi = 0.125 + 0.855 / (1 + math.exp(-2.0 * (math.log10(x) - math.log10(a))))
            ll += math.log(psi if ok else 1 - psi)
        if ll > best_ll + 1e-12:
            best, best_ll = a, ll
    return best


def test_first_response_moves_proposal():
    up = start(P).record(40, True).propose()
    down = start(P).record(40, False).propose()
    assert up <= 40 and down >= 40
    assert up == _brute_ml([(40, True)], range(1, 81))
    assert down == _brute_ml([(40, False)], range(1, 81))


def test_proposals_match_brute_force(rng):
    s = start(P)
    for _ in range(30):
        g = s.propose()
        s.record(g, bool(rng.random() < psychometric_probability(g, 25, P)))
        if not s.finished:
            assert s.propose() == _brute_ml(s.history, range(1, 81))


def test_loglik_favours_consistent_candidate():
    p = PsychometricParams(alpha_candidates=(5, 20, 80))
    s = start(p)
    before = s.loglik.copy()
    s.record(20, True)
    s.record(10, False)
    gain = s.loglik - before
    assert gain[1] > gain[0] and gain[1] > gain[2]
    assert np.all(np.isfinite(s.loglik))


def test_termination_after_30():
    s = start(P)
    for _ in range(29):
        s.record(s.propose(), True)
    assert not s.finished
    with pytest.raises(StaircaseError, match="not finished"):
        s.final_threshold()
    s.record(s.propose(), True)
    assert s.finished
    with pytest.raises(StaircaseError):
        s.propose()
    with pytest.raises(StaircaseError):
        s.record(10, True)


def test_stub_observers_pin_floor_and_ceiling():
    s = start(P)
    seen = []
    s.run(lambda g: seen.append(g) or True)
    assert s.final_threshold() == 1.0
    assert 1.0 in seen[:29]
    assert start(P).run(lambda g: False) == 80.0


def test_logistic_observer_median(rng):
    finals = []
    for _ in range(200):
        finals.append(start(P).run(lambda g: rng.random() < psychometric_probability(g, 30.0, P)))
    assert abs(math.log10(np.median(finals)) - math.log10(30.0)) <= 0.1


def test_trace_csv(tmp_path):
    s = start(P)
    s.run(lambda g: g > 12)
    s.write_trace(tmp_path / "t.csv")
    lines = (tmp_path / "t.csv").read_text().splitlines()
    assert lines[0] == "trial,gap_px,correct,ml_alpha"
    assert len(lines) == 31
    last = lines[-1].split(",")
    assert last[0] == "30" and float(last[1]) == s.final_threshold()
    assert float(last[3]) == s.ml_alpha()
