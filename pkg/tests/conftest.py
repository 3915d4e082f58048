from __future__ import annotations

import numpy as np
import pytest

from rbmlab import RandomSource, TimeGrid


@pytest.fixture
def rng():
    return RandomSource(1234)


@pytest.fixture
def grid():
    return TimeGrid(1.0, 1000)


def random_frame(rs: np.random.Generator, d: int) -> np.ndarray:
    q, r = np.linalg.qr(rs.standard_normal((d, d)))
    return q * np.sign(np.diag(r))


ACCEPTANCE_LINES = pytest.StashKey[list]()


@pytest.fixture
def acceptance_log(request):
    """Collects one verdict line per acceptance criterion for the terminal summary."""
    return request.config.stash.setdefault(ACCEPTANCE_LINES, [])


def pytest_terminal_summary(terminalreporter, exitstatus, config):
    lines = config.stash.get(ACCEPTANCE_LINES, [])
    if lines:
        terminalreporter.section("acceptance criteria")
        for line in sorted(lines, key=lambda s: int(s.split()[1].rstrip(":"))):
            terminalreporter.write_line(line)
