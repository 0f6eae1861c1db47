import numpy as np
import pytest

from bilat.model import cell_probs

OME_COUNTS = np.array([[[8, 2, 8], [11, 2, 2]], [[6, 6, 10], [3, 1, 5]], [[0, 1, 3], [1, 0, 6]]])


def random_tables(n, rng, max_j=4, max_m=50, min_m=5):
    """Nondegenerate tables sampled from the model at random feasible parameters."""
    out = []
    while len(out) < n:
        J = int(rng.integers(1, max_j + 1))
        m = int(rng.integers(min_m, max_m + 1))
        g = rng.uniform(0.05, 0.95, J)
        d = rng.uniform(0.4, 2.0, J)
        p = rng.uniform(0.1, 0.9, J) / ((2 - g) * np.maximum(1, d))
        counts = np.empty((J, 2, 3))
        for j in range(J):
            counts[j, 0] = rng.multinomial(m, cell_probs(p[j], g[j]))
            counts[j, 1] = rng.multinomial(m, cell_probs(d[j] * p[j], g[j]))
        if np.all(counts[..., 1:].sum(axis=-1) > 0):
            out.append(counts)
    return out


@pytest.fixture
def ome_counts():
    return OME_COUNTS.copy()


ACCEPTANCE_LINES = []


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in ACCEPTANCE_LINES:
            terminalreporter.write_line(line)
