import numpy as np
import pytest

from submodnet.diffgraph import ParamStore


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


def store_with(**arrays):
    s = ParamStore()
    for name, v in arrays.items():
        s.add(name, v)
    return s


# one line per acceptance criterion, printed after the run
ACCEPTANCE: list[str] = []


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE:
        terminalreporter.section("acceptance criteria")
        for line in sorted(ACCEPTANCE, key=lambda s: int(s.split()[2].rstrip(":"))):
            terminalreporter.write_line(line)
