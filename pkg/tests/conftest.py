import numpy as np
import pytest

from reggraph.graph_library import GRAPH_NAMES, make_graph

# haar-based graphs need a power-of-two length, so every library loop uses n = 16
LIB_N = 16


def library_graphs(n: int = LIB_N):
    """``(name, graph, alpha)`` for every named graph on a 1-D grid."""
    return [(name,) + make_graph(name, (n,)) for name in GRAPH_NAMES]


@pytest.fixture
def rng():
    return np.random.default_rng(12345)


def step(n: int) -> np.ndarray:
    u = np.zeros(n)
    u[n // 2:] = 1.0
    return u


# one line per acceptance criterion, filled by tests/test_acceptance.py
ACCEPTANCE_LINES = {}


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for num in sorted(ACCEPTANCE_LINES):
            terminalreporter.write_line(ACCEPTANCE_LINES[num])
