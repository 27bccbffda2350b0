import numpy as np
import pytest

from thbpass.model import SystemConfig, sample_users
from thbpass.shade import FeasibleBox, random_layouts


@pytest.fixture
def cfg():
    return SystemConfig()


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


def crandn(rng, *shape):
    return (rng.standard_normal(shape) + 1j * rng.standard_normal(shape)) / np.sqrt(2)


def random_scenario(cfg, rng):
    """Users plus one feasible layout."""
    users = sample_users(cfg, rng)
    layout = random_layouts(FeasibleBox.from_config(cfg), 1, rng)[0]
    return users, layout


ACCEPTANCE_LINES = []


@pytest.fixture
def acceptance():
    """Record one PASS/FAIL line per acceptance criterion; returns whether it passed."""
    def record(number: int, ok: bool, detail: str) -> bool:
        line = f"criterion {number:2d}: {'PASS' if ok else 'FAIL'}  {detail}"
        ACCEPTANCE_LINES.append(line)
        print(line)
        return ok

    return record


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in sorted(ACCEPTANCE_LINES):
            terminalreporter.write_line(line)
