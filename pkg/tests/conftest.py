import os

import numpy as np
import pytest
from hypothesis import HealthCheck, settings

from nsvd.fields import ModelParams, PeriodicGrid

settings.register_profile(
    "nsvd", deadline=None, max_examples=25, suppress_health_check=[HealthCheck.too_slow]
)
settings.register_profile("stress", parent=settings.get_profile("nsvd"), max_examples=1000)
settings.load_profile(os.environ.get("NSVD_HYPOTHESIS_PROFILE", "nsvd"))

SEED = 20240611


@pytest.fixture
def rng(request):
    # Seed derived from the test name so each test is reproducible on its own.
    seed = SEED + sum(map(ord, request.node.name))
    print(f"rng seed {seed}")
    return np.random.default_rng(seed)


@pytest.fixture(scope="session")
def grid8():
    return PeriodicGrid(8)


@pytest.fixture(scope="session")
def grid16():
    return PeriodicGrid(16)


@pytest.fixture(scope="session")
def params():
    return ModelParams(mu=0.05, nu=0.05, alpha=0.1, beta=0.5, r=3.0, horizon=0.2)


_ACCEPTANCE_LINES: list[str] = []


@pytest.fixture
def report_criterion():
    """Record one PASS/FAIL line per acceptance criterion; printed in the terminal summary."""

    def record(number: int, title: str, passed: bool, detail: str) -> None:
        line = f"{'PASS' if passed else 'FAIL'} criterion {number:2d} {title}: {detail}"
        print(line)
        _ACCEPTANCE_LINES.append(line)

    return record


def pytest_terminal_summary(terminalreporter):
    if _ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in sorted(_ACCEPTANCE_LINES, key=lambda s: int(s.split()[2])):
            terminalreporter.write_line(line)
