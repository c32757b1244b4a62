import sys
from pathlib import Path

import numpy as np
import pytest
from hypothesis import HealthCheck, settings, strategies as st

sys.path.insert(0, str(Path(__file__).parent))

from bmpmoments.model import BmpModel  # noqa: E402

settings.register_profile(
    "default", max_examples=40, deadline=None, suppress_health_check=[HealthCheck.too_slow]
)
settings.load_profile("default")

ACCEPTANCE_LINES: list[str] = []


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in ACCEPTANCE_LINES:
            terminalreporter.write_line(line)


@st.composite
def small_models(draw, max_n=3, max_children=4, max_atoms=3):
    """Valid random models with ``n <= max_n`` and at most ``max_children`` offspring."""
    n = draw(st.integers(1, max_n))
    rate = st.floats(0.0, 2.0, allow_nan=False)
    Q = np.zeros((n, n))
    for x in range(n):
        for y in range(n):
            if x != y:
                Q[x, y] = draw(rate)
        Q[x, x] = -Q[x].sum()
    gamma = [draw(st.floats(0.0, 2.0, allow_nan=False)) for _ in range(n)]
    laws = []
    for _ in range(n):
        k = draw(st.integers(1, max_atoms))
        w = np.array([draw(st.floats(0.05, 1.0)) for _ in range(k)])
        w = w / w.sum()
        atoms = []
        for p in w:
            size = draw(st.integers(0, max_children))
            children = tuple(draw(st.integers(0, n - 1)) for _ in range(size))
            atoms.append((float(p), children))
        laws.append(atoms)
    # exact renormalisation so the stochasticity check passes
    laws = [[(p / sum(q for q, _ in law), c) for p, c in law] for law in laws]
    return BmpModel(n, Q, gamma, laws)


@pytest.fixture
def rng():
    return np.random.default_rng(20261014)
