import numpy as np
import pytest


@pytest.fixture
def rng():
    return np.random.default_rng(20240607)


def direct_dft2(a):
    """O(N^4) unitary 2D DFT with DC at index 0."""
    h, w = a.shape
    out = np.zeros((h, w), dtype=complex)
    rows = np.arange(h)
    cols = np.arange(w)
    for u in range(h):
        for v in range(w):
            phase = np.exp(-2j * np.pi * (np.outer(rows, np.ones(w)) * u / h
                                          + np.outer(np.ones(h), cols) * v / w))
            out[u, v] = np.sum(a * phase)
    return out / np.sqrt(h * w)


def pytest_terminal_summary(terminalreporter):
    import sys
    mod = sys.modules.get("test_acceptance")
    if mod is not None and mod.RESULTS:
        terminalreporter.section("acceptance criteria")
        for line in mod.RESULTS:
            terminalreporter.write_line(line)
