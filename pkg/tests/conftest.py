import numpy as np
import pytest

from gridveil.grid import Edge, NetworkModel, NodeParams, bundled


@pytest.fixture(scope="session")
def star():
    return bundled("star5")


@pytest.fixture(scope="session")
def ieee30():
    return bundled("ieee30")


def random_network(rng, n_boundary=4, n_interior=3, extra_edges=4, low=1.0, high=100.0):
    """Connected random network: a random spanning tree plus a few chords.

    Boundary nodes are generators with parameters inside the default bounds.
    """
    n = n_boundary + n_interior
    order = rng.permutation(n)
    pairs = {tuple(sorted((int(order[i]), int(order[rng.integers(0, i)])))) for i in range(1, n)}
    while len(pairs) < min(n - 1 + extra_edges, n * (n - 1) // 2):
        i, j = rng.choice(n, 2, replace=False)
        pairs.add((int(min(i, j)), int(max(i, j))))
    edges = [Edge(i, j, float(rng.uniform(low, high))) for i, j in sorted(pairs)]
    nodes = []
    for i in range(n):
        if i < n_boundary:
            nodes.append(
                NodeParams(i + 1, True, m=float(rng.uniform(2, 20)), d=float(rng.uniform(1, 10)), t=0.05, r=0.04,
                           load=float(rng.uniform(0, 0.3)))
            )
        else:
            nodes.append(NodeParams(i + 1, load=float(rng.uniform(0, 0.3))))
    return NetworkModel(nodes, edges, list(range(n_boundary)), list(range(n_boundary, n)))


# one line per acceptance criterion, printed after the run
CRITERIA: dict[int, str] = {}


def record(number: int, ok: bool, detail: str) -> bool:
    line = f"criterion {number:>2}: {'PASS' if ok else 'FAIL'}  {detail}"
    CRITERIA[number] = line
    print(line)
    return ok


def pytest_terminal_summary(terminalreporter):
    if CRITERIA:
        terminalreporter.write_sep("=", "acceptance criteria")
        for number in sorted(CRITERIA):
            terminalreporter.write_line(CRITERIA[number])
