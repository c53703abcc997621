import numpy as np
import pytest

from routerank.synthworld.network import generate_network
from routerank.synthworld.simulate import simulate_logs
from routerank.trainer import prepare

ACCEPTANCE_LINES: list[str] = []


@pytest.fixture(scope="session")
def small_world():
    graph = generate_network(12, 12, seed=5, corruption_rate=0.02)
    records, users = simulate_logs(graph, 150, 3000, seed=5)
    return graph, records, users


@pytest.fixture(scope="session")
def small_data(small_world):
    graph, records, _ = small_world
    return prepare(graph, records)


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


@pytest.fixture
def criterion(capsys):
    """Record one PASS/FAIL line for an acceptance criterion, then assert it."""

    def check(name: str, ok: bool, detail: str) -> None:
        line = f"{'PASS' if ok else 'FAIL'}  {name}: {detail}"
        ACCEPTANCE_LINES.append(line)
        with capsys.disabled():
            print(f"\n{line}")
        assert ok, line

    return check


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in ACCEPTANCE_LINES:
            terminalreporter.write_line(line)
