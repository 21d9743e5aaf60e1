from __future__ import annotations

import numpy as np
import pytest
from hypothesis import HealthCheck, settings

from fbsde_equilibrium.merton import build_merton_problem, preset_policy, preset_setup
from fbsde_equilibrium.model import TimeGrid

settings.register_profile(
    "pkg", deadline=None, max_examples=40,
    suppress_health_check=[HealthCheck.too_slow, HealthCheck.function_scoped_fixture],
)
settings.load_profile("pkg")

ACCEPTANCE_LINES: list[str] = []


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in sorted(ACCEPTANCE_LINES, key=lambda s: int(s.split()[1].rstrip(":"))):
            terminalreporter.write_line(line)


@pytest.fixture
def acceptance_log():
    """Record one PASS/FAIL line per criterion (also printed immediately)."""

    def log(number: int, passed: bool, detail: str) -> None:
        line = f"criterion {number}: {'PASS' if passed else 'FAIL'} {detail}"
        print(line)
        ACCEPTANCE_LINES.append(line)

    return log


@pytest.fixture(scope="session")
def grid100():
    return TimeGrid(0.0, 1.0, 100)


@pytest.fixture(scope="session")
def grid20():
    return TimeGrid(0.0, 1.0, 20)


def merton_case(name: str, grid: TimeGrid, x0: float = 1.0, overrides=None):
    setup = preset_setup(name, overrides)
    problem = build_merton_problem(setup, grid, x0)
    return setup, problem, preset_policy(name, setup, grid)


@pytest.fixture(scope="session")
def baseline20(grid20):
    return merton_case("merton_exponential", grid20)


@pytest.fixture(scope="session")
def baseline100(grid100):
    return merton_case("merton_exponential", grid100)


def relerr(a, b) -> float:
    return float(np.abs(a - b) / np.maximum(np.abs(b), 1e-300))
