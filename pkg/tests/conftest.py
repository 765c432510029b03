import numpy as np
from hypothesis import HealthCheck, settings

from ifmlab.losses import EmbeddingBatch

settings.register_profile(
    "default",
    deadline=None,
    max_examples=60,
    suppress_health_check=[HealthCheck.too_slow],
)
settings.load_profile("default")


def unit_rows(rng, n, d):
    G = rng.normal(size=(n, d))
    return G / np.linalg.norm(G, axis=1, keepdims=True)


def random_batch(rng, d=8, m=4):
    V = unit_rows(rng, m + 2, d)
    return EmbeddingBatch(V[0], V[1], V[2:])


def central_diff(f, x, h=1e-6):
    """Central-difference gradient of scalar ``f`` at flat array ``x``."""
    x = np.asarray(x, dtype=float)
    g = np.zeros_like(x)
    for i in range(x.size):
        up, dn = x.copy(), x.copy()
        up.flat[i] += h
        dn.flat[i] -= h
        g.flat[i] = (f(up) - f(dn)) / (2 * h)
    return g


def rel_err(a, b):
    a, b = np.asarray(a), np.asarray(b)
    return float(np.max(np.abs(a - b)) / max(1.0, float(np.max(np.abs(b)))))


# one summary line per acceptance criterion, printed after the run
ACCEPTANCE_LINES: dict = {}


def record_criterion(number, passed, detail):
    ACCEPTANCE_LINES[number] = f"{'PASS' if passed else 'FAIL'}  criterion {number:>2}: {detail}"
    print(ACCEPTANCE_LINES[number])


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for n in sorted(ACCEPTANCE_LINES):
            terminalreporter.write_line(ACCEPTANCE_LINES[n])
