"""Shared fixtures and independent oracles."""

import numpy as np
import pytest

from neardgd.graph import build_topology, metropolis_weights
from neardgd.objective import generate_quadratic


def naive_matmul(a, b):
    """Triple-loop product, deliberately free of BLAS."""
    n, m = len(a), len(b[0])
    inner = len(b)
    out = [[0.0] * m for _ in range(n)]
    for i in range(n):
        for j in range(m):
            s = 0.0
            for t in range(inner):
                s += float(a[i][t]) * float(b[t][j])
            out[i][j] = s
    return np.array(out)


def power_iteration_beta(w, iters=20000, seed=0):
    """Second largest |eigenvalue| of a symmetric doubly-stochastic ``w`` via power iteration
    on ``w - 11^T/n`` (which removes the unit eigenvalue)."""
    n = w.shape[0]
    deflated = w - np.full((n, n), 1.0 / n)
    v = np.random.default_rng(seed).standard_normal(n)
    lam = 0.0
    for _ in range(iters):
        nxt = deflated @ v
        norm = np.linalg.norm(nxt)
        if norm == 0.0:
            return 0.0
        lam = norm / np.linalg.norm(v)
        v = nxt / norm
    return lam


@pytest.fixture(scope="session")
def ring10():
    return metropolis_weights(build_topology("cyclic", 10, c=4))


@pytest.fixture(scope="session")
def inst_k100():
    return generate_quadratic(10, 10, 1e2, 0)


@pytest.fixture(scope="session")
def inst_k1e4():
    return generate_quadratic(10, 10, 1e4, 0)


# --- acceptance summary: one line per criterion ---------------------------------

_CRITERIA: dict[int, tuple[str, list[str]]] = {}


def pytest_configure(config):
    config.addinivalue_line("markers", "criterion(number, title): acceptance criterion")


@pytest.hookimpl(hookwrapper=True)
def pytest_runtest_makereport(item, call):
    outcome = yield
    rep = outcome.get_result()
    mark = item.get_closest_marker("criterion")
    if mark is None or rep.when not in ("setup", "call"):
        return
    number, title = mark.args
    entry = _CRITERIA.setdefault(number, (title, []))
    if rep.when == "call" or rep.failed:
        entry[1].append("PASS" if rep.passed else "FAIL")


def pytest_terminal_summary(terminalreporter):
    if not _CRITERIA:
        return
    terminalreporter.section("acceptance criteria")
    for number in sorted(_CRITERIA):
        title, results = _CRITERIA[number]
        verdict = "PASS" if results and all(r == "PASS" for r in results) else "FAIL"
        terminalreporter.write_line(f"criterion {number:>2}: {verdict}  {title}")
