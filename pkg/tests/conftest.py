import numpy as np
import pytest

from dpcert.models import synth_dataset

_ACCEPTANCE: list[str] = []


def record(criterion: str, ok: bool, detail: str = "") -> None:
    """Log one acceptance line; printed again in the terminal summary."""
    line = f"{'PASS' if ok else 'FAIL'}  {criterion}" + (f"  [{detail}]" if detail else "")
    print(line)
    _ACCEPTANCE.append(line)


def pytest_terminal_summary(terminalreporter):
    if _ACCEPTANCE:
        terminalreporter.section("acceptance criteria")
        for line in _ACCEPTANCE:
            terminalreporter.write_line(line)


@pytest.fixture
def rng():
    return np.random.default_rng(12345)


@pytest.fixture(scope="session")
def two_gaussians_small():
    return synth_dataset("two_gaussians", 400, 2, seed=3)
