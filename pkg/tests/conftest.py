import numpy as np
import pytest


def fd_gradient(loss_fn, flat, h=1e-5):
    """Central finite differences of ``loss_fn()`` w.r.t. each entry of ``flat`` (mutated in place)."""
    grad = np.zeros_like(flat)
    for i in range(flat.size):
        old = flat[i]
        flat[i] = old + h
        up = float(loss_fn())
        flat[i] = old - h
        down = float(loss_fn())
        flat[i] = old
        grad[i] = (up - down) / (2 * h)
    return grad


def max_rel_err(a, b, floor=1e-5):
    a, b = np.asarray(a, float), np.asarray(b, float)
    return float(np.max(np.abs(a - b) / np.maximum(np.maximum(np.abs(a), np.abs(b)), floor)))


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


ACCEPTANCE_LINES = []


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in sorted(ACCEPTANCE_LINES, key=lambda s: int(s.split()[1].rstrip(":"))):
            terminalreporter.write_line(line)
