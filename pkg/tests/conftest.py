import numpy as np
import pytest

from maxlab.process import make_time_grid
from maxlab.rng import RandomStream


@pytest.fixture
def stream():
    return RandomStream(20240611, ("tests",))


@pytest.fixture
def unit_grid():
    return make_time_grid(0.0, 1.0, 1024)


def within(x, target, tol):
    return abs(float(x) - target) <= tol


@pytest.fixture
def rng():
    return np.random.default_rng(7)


def pytest_configure(config):
    config.acceptance_lines = {}


@pytest.fixture
def criterion(request):
    """Record one PASS/FAIL line for an acceptance criterion and assert it."""
    def record(n, ok, detail):
        line = f"criterion {n:2d}: {'PASS' if ok else 'FAIL'}  {detail}"
        request.config.acceptance_lines[n] = line
        print(line)
        assert ok, line
    return record


def pytest_terminal_summary(terminalreporter, config):
    lines = getattr(config, "acceptance_lines", {})
    if lines:
        terminalreporter.write_sep("=", "acceptance criteria")
        for n in sorted(lines):
            terminalreporter.write_line(lines[n])
