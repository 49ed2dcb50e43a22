import numpy as np
import pytest

from pushsum_gne import make_electricity_market, make_quadratic_toy, paper_fig1


@pytest.fixture
def market():
    return make_electricity_market(N=5, seed=0)


@pytest.fixture
def static_market():
    return make_electricity_market(N=5, seed=0, time_varying=False)


@pytest.fixture
def toy():
    return make_quadratic_toy(N=2, seed=0)


@pytest.fixture
def fig1():
    return paper_fig1(5)


@pytest.fixture
def rng():
    return np.random.default_rng(12345)


ACCEPTANCE_LINES: list[str] = []


@pytest.fixture
def acceptance_record():
    """Collects one PASS/FAIL line per acceptance criterion for the terminal summary."""

    def record(number: int, title: str, ok: bool, detail: str):
        ACCEPTANCE_LINES.append(f"criterion {number} {'PASS' if ok else 'FAIL'}  {title}: {detail}")
        return ok

    return record


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in sorted(ACCEPTANCE_LINES):
            terminalreporter.write_line(line)
