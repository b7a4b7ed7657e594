import numpy as np
import pytest


@pytest.fixture
def rng():
    return np.random.default_rng(20240611)


def dense_D(n1, n2):
    """Periodic forward-difference matrix (2n x n), assembled from index arithmetic."""
    n = n1 * n2
    D = np.zeros((2 * n, n))
    for k1 in range(n1):
        for k2 in range(n2):
            i = k1 * n2 + k2
            D[i, k1 * n2 + (k2 + 1) % n2] += 1.0
            D[i, i] -= 1.0
            D[n + i, ((k1 + 1) % n1) * n2 + k2] += 1.0
            D[n + i, i] -= 1.0
    return D


def brute_xcorr(a, b):
    n1, n2 = a.shape
    out = np.zeros((n1, n2))
    for j1 in range(n1):
        for j2 in range(n2):
            s = 0.0
            for k1 in range(n1):
                for k2 in range(n2):
                    s += a[k1, k2] * b[(j1 + k1) % n1, (j2 + k2) % n2]
            out[j1, j2] = s
    return out


def fd_gradient(f, x, h=1e-6):
    g = np.zeros_like(x)
    for idx in np.ndindex(x.shape):
        e = np.zeros_like(x)
        e[idx] = h
        g[idx] = (f(x + e) - f(x - e)) / (2 * h)
    return g


def power_iteration(apply, shape, rng, iters=300):
    v = rng.standard_normal(shape)
    v /= np.linalg.norm(v)
    lam = 0.0
    for _ in range(iters):
        w = apply(v)
        lam = float(np.linalg.norm(w))
        v = w / lam
    return lam


ACCEPTANCE_LINES = []


def report(criterion: str, passed: bool, detail: str) -> bool:
    """Record one acceptance line; it is echoed in the terminal summary."""
    line = f"criterion {criterion}: {'PASS' if passed else 'FAIL'}  {detail}"
    ACCEPTANCE_LINES.append(line)
    print(line)
    return passed


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.write_sep("=", "acceptance criteria")
        for line in ACCEPTANCE_LINES:
            terminalreporter.write_line(line)
