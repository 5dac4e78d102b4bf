import sys
from pathlib import Path

import numpy as np
import pytest

sys.path.insert(0, str(Path(__file__).parent))

from graphdebias.graph import build_graph  # noqa: E402


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


@pytest.fixture
def star():
    """One user connected to two items."""
    return build_graph([(0, 0), (0, 1)])


def random_graph(rng, n_users=3, n_items=3, p=0.6):
    pairs = [(u, i) for u in range(n_users) for i in range(n_items) if rng.random() < p]
    if not pairs:
        pairs = [(0, 0)]
    return build_graph(pairs, n_users, n_items)


def pytest_terminal_summary(terminalreporter):
    mod = sys.modules.get("test_acceptance")
    lines = getattr(mod, "REPORT", None)
    if lines:
        terminalreporter.section("acceptance criteria")
        for line in sorted(lines):
            terminalreporter.write_line(line)
