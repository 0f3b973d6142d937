import numpy as np
import pytest

from vasim.stimulus import Orientation


class PerfectObserver:
    """Reads the true orientation off the stimulus."""

    def __call__(self, stim):
        return stim.orientation


class WrongObserver:
    def __call__(self, stim):
        return Orientation((int(stim.orientation) + 1) % 8)


@pytest.fixture
def perfect_observer():
    return PerfectObserver()


@pytest.fixture
def wrong_observer():
    return WrongObserver()


@pytest.fixture
def rng():
    return np.random.default_rng(12345)


def pytest_terminal_summary(terminalreporter):
    try:
        from test_acceptance import RESULTS
    except ImportError:
        return
    if RESULTS:
        terminalreporter.section("acceptance criteria")
        for line in RESULTS:
            terminalreporter.write_line(line)
