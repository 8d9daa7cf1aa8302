import numpy as np
import pytest

from signmap.domain import SensorParams

ACCEPTANCE_LINES = []


def record_acceptance(line: str) -> None:
    ACCEPTANCE_LINES.append(line)
    print(line)


def pytest_terminal_summary(terminalreporter, exitstatus, config):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in ACCEPTANCE_LINES:
            terminalreporter.write_line(line)


def central_diff_position(f, x, h=1e-5):
    """Central finite differences of a scalar function of a 2-vector."""
    x = np.asarray(x, dtype=float)
    g = np.zeros(2)
    for k in range(2):
        step = h * max(1.0, abs(x[k]))
        e = np.zeros(2)
        e[k] = step
        g[k] = (f(x + e) - f(x - e)) / (2.0 * step)
    return g


def central_diff_params(f, params: SensorParams, h=1e-6):
    """Central differences over the 8 unconstrained parameter coordinates."""
    u0 = params.to_unconstrained()
    g = np.zeros(8)
    for k in range(8):
        if not np.isfinite(u0[k]):
            continue
        up, um = u0.copy(), u0.copy()
        up[k] += h
        um[k] -= h
        g[k] = (f(SensorParams.from_unconstrained(up))
                - f(SensorParams.from_unconstrained(um))) / (2.0 * h)
    return g


def rel_err(a, b, floor=1e-8):
    a = np.asarray(a, dtype=float)
    b = np.asarray(b, dtype=float)
    return np.max(np.abs(a - b) / np.maximum(floor, np.abs(b)))


@pytest.fixture
def rng():
    return np.random.default_rng(1234)
