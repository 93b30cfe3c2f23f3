import numpy as np
import pytest

from difftest._alloc import tune_allocator
from difftest.model import ParameterSpace, make_model2, make_ou_model

tune_allocator()


@pytest.fixture(scope="session")
def ou():
    return make_ou_model()


@pytest.fixture(scope="session")
def model2():
    return make_model2()


@pytest.fixture(scope="session")
def ou_space():
    return ParameterSpace.uniform(1, 1)


@pytest.fixture
def rng():
    return np.random.default_rng(12345)


# -- acceptance summary -----------------------------------------------------------

ACCEPTANCE_LINES: list[str] = []


@pytest.fixture(scope="session")
def criterion():
    """Record one PASS/FAIL line for an acceptance criterion, then assert it."""

    def record(label: str, ok: bool, detail: str) -> None:
        line = f"{'PASS' if ok else 'FAIL'}  {label}: {detail}"
        ACCEPTANCE_LINES.append(line)
        print(line)
        assert ok, line

    return record


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in ACCEPTANCE_LINES:
            terminalreporter.write_line(line)
