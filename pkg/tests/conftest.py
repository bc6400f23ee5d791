import numpy as np
import pytest

from ngembed.params import Architecture, build


def fd_grad(f, theta, h=1e-6):
    """Central finite-difference gradient (or Jacobian along the last axis)."""
    theta = np.asarray(theta, dtype=float)
    cols = []
    for i in range(theta.size):
        e = np.zeros_like(theta)
        e[i] = h
        cols.append((np.asarray(f(theta + e)) - np.asarray(f(theta - e))) / (2 * h))
    return np.stack(cols, axis=-1)


def rel_err(a, b):
    a, b = np.asarray(a), np.asarray(b)
    return float(np.max(np.abs(a - b)) / max(np.max(np.abs(b)), 1e-300))


def small_net(d=1, m=1, widths=(6, 5), period=None, seed=0, periodic_width=4, output_bias=False):
    if period is None:
        period = (2.0,) * d
    arch = Architecture(d, m, widths=widths, period=period, periodic_width=periodic_width,
                        output_bias=output_bias)
    return build(arch, seed)


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


def pytest_terminal_summary(terminalreporter):
    import sys

    mod = sys.modules.get("test_acceptance")
    lines = getattr(mod, "RESULTS", None)
    if lines:
        terminalreporter.section("acceptance criteria")
        for line in lines:
            terminalreporter.write_line(line)
