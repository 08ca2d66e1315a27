import numpy as np
import pytest

from arealrisk.lattice import AdjacencyGraph, graph_from_edges, grid_regions, build_adjacency


def rook_grid_graph(nrows, ncols):
    return build_adjacency(grid_regions(nrows, ncols), rule="rook")


def cycle_graph(n):
    return graph_from_edges(n, [(i, (i + 1) % n) for i in range(n)])


def random_graph(rng, n, p=0.3):
    w = (rng.random((n, n)) < p).astype(np.int8)
    w = np.triu(w, 1)
    w = w + w.T
    return AdjacencyGraph(tuple(f"g{k}" for k in range(n)), w)


def brute_force_moran(values, w):
    """Literal double loop with the n/((n-1) S^2 w..) prefactor."""
    n = len(values)
    zbar = sum(values) / n
    s2 = sum((v - zbar) ** 2 for v in values) / (n - 1)
    wtot = 0.0
    acc = 0.0
    for i in range(n):
        for j in range(n):
            wtot += w[i][j]
            acc += w[i][j] * (values[i] - zbar) * (values[j] - zbar)
    return n / ((n - 1) * s2 * wtot) * acc


@pytest.fixture
def rng():
    return np.random.default_rng(20240611)


def pytest_terminal_summary(terminalreporter):
    import sys
    mod = sys.modules.get("test_acceptance")
    if mod is None or not mod.RESULTS:
        return
    tr = terminalreporter
    tr.section("acceptance criteria")
    for k in sorted(mod.TITLES):
        checks = mod.RESULTS.get(k)
        if not checks:
            tr.write_line(f"Criterion {k:2d} {mod.TITLES[k]}: NOT RUN")
            continue
        verdict = "PASS" if all(ok for _, ok in checks) else "FAIL"
        tr.write_line(f"Criterion {k:2d} {mod.TITLES[k]}: {verdict}")
        for check, ok in checks:
            if not ok:
                tr.write_line(f"    failed check: {check}")
