import numpy as np
import pytest

from taskbasis.testbed import collection_with_spectrum
from taskbasis.vecstore import TaskVectorMatrix

# filled by test_acceptance.py, printed at the end of the session
ACCEPTANCE_LINES: list[str] = []


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in ACCEPTANCE_LINES:
            terminalreporter.write_line(line)


def unit_trace(eigenvalues):
    """Scale a spectrum so Tr(G) = T (mean squared task-vector norm 1)."""
    lam = np.asarray(eigenvalues, dtype=float)
    return lam * lam.size / lam.sum()


def achievable_fixture(seed=0):
    """T=6 collection whose top-2 Gram eigenspace is spanned by strictly positive
    vectors (all ones and a positive tilt)."""
    top = np.column_stack([np.ones(6), [1.5, 1.3, 1.1, 0.9, 0.7, 0.5]])
    return collection_with_spectrum(top, unit_trace([10, 6, 1, 0.5, 0.2, 0.1]), d=64, seed=seed)


def sign_mixed_fixture(seed=0):
    """T=6 collection with an isolated top eigenvector of alternating signs."""
    v = np.array([1, -1, 1, -1, 1, -1]) / np.sqrt(6)
    return collection_with_spectrum(v, unit_trace([10, 1, 0.5, 0.3, 0.2, 0.1]), d=64, seed=seed)


def random_collection(rng, d, T, theta0=False):
    cols = rng.standard_normal((d, T))
    return TaskVectorMatrix(cols, theta0=rng.standard_normal(d) if theta0 else None)


@pytest.fixture
def rng():
    return np.random.default_rng(12345)
