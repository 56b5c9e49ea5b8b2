from pathlib import Path

import pytest

from gridcp.grid_model import Branch, Bus, BusKind, GridCase, Generator, load_case
from gridcp.study import builtin_case

FIXTURES = Path(__file__).parent / "fixtures"


def two_bus(p=0.5, q=0.0, r=0.0, x=0.1, b=0.0, rating=1.2):
    return GridCase(
        buses=[Bus(1, BusKind.SLACK, 1.0), Bus(2, BusKind.PQ, p_load=p, q_load=q)],
        branches=[Branch(1, 1, 2, r, x, b, rating=rating)],
        generators=[Generator(1, 0.0)],
    )


def chain(n=3):
    buses = [Bus(1, BusKind.SLACK, 1.0)] + [Bus(i, BusKind.PQ, p_load=0.1) for i in range(2, n + 1)]
    branches = [Branch(i, i, i + 1, 0.01, 0.1, rating=1.0) for i in range(1, n)]
    return GridCase(buses, branches, [Generator(1, 0.0)])


@pytest.fixture(scope="session")
def rts24():
    return builtin_case("case24_ieee_rts")


@pytest.fixture(scope="session")
def case118():
    return builtin_case("case118")


@pytest.fixture(scope="session")
def three_bus():
    return load_case(FIXTURES / "three_bus.json")


# one line per acceptance criterion, printed after the run
ACCEPTANCE_LINES: list[str] = []


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in sorted(ACCEPTANCE_LINES):
            terminalreporter.write_line(line)
