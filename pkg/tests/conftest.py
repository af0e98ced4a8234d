import numpy as np
import pytest
from hypothesis import HealthCheck, settings
from threadpoolctl import threadpool_limits

settings.register_profile("default", deadline=None, max_examples=40, suppress_health_check=[HealthCheck.too_slow])
settings.load_profile("default")

# single-threaded BLAS keeps results bitwise reproducible
threadpool_limits(1)


def direct_conv(x, w, b):
    """Direct-sum same-length cross-correlation; x [T, C], w [f, C]."""
    T, C = x.shape
    f = w.shape[0]
    left = (f - 1) // 2
    out = np.zeros(T)
    for t in range(T):
        s = b
        for j in range(f):
            src = t + j - left
            if 0 <= src < T:
                for c in range(C):
                    s += w[j, c] * x[src, c]
        out[t] = s
    return out


def central_diff(fn, arr, h=1e-6):
    g = np.zeros_like(arr, dtype=np.float64)
    for idx in np.ndindex(arr.shape):
        orig = arr[idx]
        arr[idx] = orig + h
        up = fn()
        arr[idx] = orig - h
        down = fn()
        arr[idx] = orig
        g[idx] = (up - down) / (2 * h)
    return g


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


# PASS/FAIL lines from the acceptance suite, repeated in the terminal summary
ACCEPTANCE_LINES = []


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in sorted(ACCEPTANCE_LINES, key=lambda s: int(s.split()[1].rstrip(":"))):
            terminalreporter.write_line(line)
