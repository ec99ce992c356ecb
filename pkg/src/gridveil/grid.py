"""Network data model, weighted Laplacian construction and network file I/O.

Conventions used throughout the package:

* Nodes are addressed internally by their 0-based position in
  ``NetworkModel.nodes``; the ``id`` field keeps the external bus number
  used in files and reports.
* The weighted Laplacian has *negative* diagonal,
  ``K = -C diag(k) C^T``, so the swing equation reads
  ``M dw/dt = K delta + p - load - D w``.
"""
from __future__ import annotations

import json
from collections import deque
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np

# error codes, one per invariant
DUPLICATE_EDGE = "duplicate-edge"
SELF_LOOP = "self-loop"
NONPOSITIVE_WEIGHT = "nonpositive-weight"
NODE_INDEX = "node-index"
BAD_REACTANCE = "bad-reactance"
ANGLE_SPREAD = "angle-spread"
BAD_VOLTAGE = "bad-voltage"
PARTITION_OVERLAP = "partition-overlap"
PARTITION_INCOMPLETE = "partition-incomplete"
GENERATOR_INTERIOR = "generator-interior"
INTERIOR_DAMPING = "interior-damping"
GENERATOR_PARAMS = "generator-params"
LOAD_NODE_PARAMS = "load-node-params"
DISCONNECTED = "disconnected"
MALFORMED = "malformed-file"

DATA_DIR = Path(__file__).parent / "data"


class NetworkError(ValueError):
    """Invalid network data. ``code`` identifies the violated invariant."""

    def __init__(self, code: str, message: str):
        super().__init__(f"[{code}] {message}")
        self.code = code


@dataclass(frozen=True)
class NodeParams:
    id: int
    is_generator: bool = False
    m: float = 0.0
    d: float = 0.0
    t: float = 0.0
    r: float = 0.0
    load: float = 0.0


@dataclass(frozen=True)
class Edge:
    src: int
    dst: int
    k: float
    kind: str = "line"

    @property
    def pair(self) -> tuple[int, int]:
        return (min(self.src, self.dst), max(self.src, self.dst))


@dataclass(frozen=True)
class NominalPoint:
    v0: np.ndarray
    delta0: np.ndarray

    def __post_init__(self):
        object.__setattr__(self, "v0", np.asarray(self.v0, dtype=float))
        object.__setattr__(self, "delta0", np.asarray(self.delta0, dtype=float))
        if self.v0.shape != self.delta0.shape:
            raise NetworkError(MALFORMED, "v0 and delta0 must have the same length")
        if np.any(self.v0 <= 0):
            bad = int(np.flatnonzero(self.v0 <= 0)[0])
            raise NetworkError(BAD_VOLTAGE, f"non-positive nominal voltage at node index {bad}")

    @classmethod
    def flat(cls, n: int) -> "NominalPoint":
        return cls(np.ones(n), np.zeros(n))


@dataclass
class NetworkModel:
    nodes: list[NodeParams]
    edges: list[Edge]
    boundary: list[int]
    interior: list[int]
    base_mva: float = 100.0
    droop_is_inverse: bool = False
    name: str = ""
    reactances: dict[tuple[int, int], float] | None = field(default=None, repr=False)

    @property
    def n(self) -> int:
        return len(self.nodes)

    @property
    def ids(self) -> list[int]:
        return [node.id for node in self.nodes]

    @property
    def weights(self) -> np.ndarray:
        return np.array([e.k for e in self.edges], dtype=float)

    def with_weights(self, k: Sequence[float]) -> "NetworkModel":
        k = np.asarray(k, dtype=float)
        if k.shape != (len(self.edges),):
            raise ValueError(f"expected {len(self.edges)} weights, got shape {k.shape}")
        edges = [replace(e, k=float(w)) for e, w in zip(self.edges, k)]
        return replace(self, edges=edges)

    def laplacian(self) -> np.ndarray:
        return build_laplacian(self.edges, self.n)

    def node_array(self, attr: str, which: Iterable[int] | None = None) -> np.ndarray:
        idx = range(self.n) if which is None else which
        return np.array([getattr(self.nodes[i], attr) for i in idx], dtype=float)

    def droop_gains(self, which: Iterable[int] | None = None) -> np.ndarray:
        """Droop gain entering ``dp/dt = -T (p + R w)``; ``1/r`` under the inverse convention."""
        r = self.node_array("r", which)
        if self.droop_is_inverse:
            with np.errstate(divide="ignore"):
                return np.where(r > 0, 1.0 / np.where(r > 0, r, 1.0), 0.0)
        return r

    @property
    def loads(self) -> np.ndarray:
        return self.node_array("load")


def _check_edges(edges: Sequence[Edge], n: int) -> None:
    seen: set[tuple[int, int]] = set()
    for e in edges:
        if not (0 <= e.src < n and 0 <= e.dst < n):
            raise NetworkError(NODE_INDEX, f"edge ({e.src}, {e.dst}) references a node outside 0..{n - 1}")
        if e.src == e.dst:
            raise NetworkError(SELF_LOOP, f"self-loop at node index {e.src}")
        if not e.k > 0:
            raise NetworkError(NONPOSITIVE_WEIGHT, f"edge ({e.src}, {e.dst}) has weight {e.k}")
        if e.pair in seen:
            raise NetworkError(DUPLICATE_EDGE, f"duplicate edge {e.pair}")
        seen.add(e.pair)


def build_laplacian(edges: Sequence[Edge], n: int) -> np.ndarray:
    """Weighted Laplacian with ``K_ij = k_ij`` off the diagonal and zero row sums."""
    _check_edges(edges, n)
    K = np.zeros((n, n))
    for e in edges:
        K[e.src, e.dst] = e.k
        K[e.dst, e.src] = e.k
    # diagonal from the off-diagonal sum so rows cancel exactly
    K[np.diag_indices(n)] = -K.sum(axis=1)
    return K


def derive_edge_weights(
    reactances: dict[tuple[int, int], float], nominal: NominalPoint
) -> list[Edge]:
    """Power-flow sensitivities ``k_ij = v_i v_j cos(delta_i - delta_j) / x_ij``."""
    edges = []
    for (i, j), x in reactances.items():
        if not x > 0:
            raise NetworkError(BAD_REACTANCE, f"edge ({i}, {j}) has reactance {x}")
        spread = nominal.delta0[i] - nominal.delta0[j]
        if abs(spread) >= np.pi / 2:
            raise NetworkError(ANGLE_SPREAD, f"edge ({i}, {j}) nominal angle spread {spread:.4f} rad >= pi/2")
        k = nominal.v0[i] * nominal.v0[j] / x * np.cos(spread)
        edges.append(Edge(i, j, float(k)))
    return edges


def incidence_matrix(edges: Sequence[Edge], n: int) -> np.ndarray:
    """Node-edge incidence, +1 at ``src`` and -1 at ``dst``; ``-C diag(k) C^T`` is the Laplacian."""
    _check_edges(edges, n)
    C = np.zeros((n, len(edges)))
    for col, e in enumerate(edges):
        C[e.src, col] = 1.0
        C[e.dst, col] = -1.0
    return C


def complete_graph_pairs(n: int) -> list[tuple[int, int]]:
    """Lexicographic pairs ``(i, j), i < j`` -- the reduced-network edge layout."""
    return [(i, j) for i in range(n) for j in range(i + 1, n)]


def pair_incidence(pairs: Sequence[tuple[int, int]], n: int) -> np.ndarray:
    C = np.zeros((n, len(pairs)))
    for col, (i, j) in enumerate(pairs):
        C[i, col] = 1.0
        C[j, col] = -1.0
    return C


def _is_connected(n: int, edges: Sequence[Edge]) -> bool:
    if n == 0:
        return True
    adj: list[list[int]] = [[] for _ in range(n)]
    for e in edges:
        adj[e.src].append(e.dst)
        adj[e.dst].append(e.src)
    seen = {0}
    queue = deque([0])
    while queue:
        for nb in adj[queue.popleft()]:
            if nb not in seen:
                seen.add(nb)
                queue.append(nb)
    return len(seen) == n


def check_network(model: NetworkModel) -> list[NetworkError]:
    """Collect every invariant violation in ``model`` (empty list if valid)."""
    problems: list[NetworkError] = []
    n = model.n
    try:
        _check_edges(model.edges, n)
    except NetworkError as err:
        problems.append(err)

    gamma, beta = set(model.boundary), set(model.interior)
    overlap = gamma & beta
    if overlap:
        ids = sorted(model.nodes[i].id for i in overlap if 0 <= i < n)
        problems.append(NetworkError(PARTITION_OVERLAP, f"nodes {ids} are both boundary and interior"))
    if gamma | beta != set(range(n)) or len(model.boundary) != len(gamma) or len(model.interior) != len(beta):
        missing = sorted(model.nodes[i].id for i in set(range(n)) - gamma - beta)
        problems.append(NetworkError(PARTITION_INCOMPLETE, f"partition does not cover nodes exactly once; missing {missing}"))

    for i, node in enumerate(model.nodes):
        if node.is_generator:
            if not (node.m > 0 and node.t > 0):
                problems.append(NetworkError(GENERATOR_PARAMS, f"generator {node.id} needs m > 0 and t > 0"))
            if i in beta:
                problems.append(NetworkError(GENERATOR_INTERIOR, f"generator {node.id} is an interior node"))
        elif node.m != 0 or node.t != 0 or node.r != 0:
            problems.append(NetworkError(LOAD_NODE_PARAMS, f"non-generator {node.id} must have m = t = r = 0"))
        if i in beta and node.d != 0:
            problems.append(NetworkError(INTERIOR_DAMPING, f"interior node {node.id} has damping {node.d}"))

    if not _is_connected(n, model.edges):
        problems.append(NetworkError(DISCONNECTED, "network graph is not connected"))
    return problems


def validate_network(model: NetworkModel) -> NetworkModel:
    problems = check_network(model)
    if problems:
        raise problems[0]
    return model


# ---------------------------------------------------------------------------
# file I/O


def _require(obj: dict, key: str, where: str):
    if key not in obj:
        raise NetworkError(MALFORMED, f"{where}: missing field '{key}'")
    return obj[key]


def network_from_dict(data: dict, *, validate: bool = True) -> NetworkModel:
    if not isinstance(data, dict):
        raise NetworkError(MALFORMED, "network file must hold a JSON object")
    raw_nodes = _require(data, "nodes", "network")
    nodes = []
    for pos, raw in enumerate(raw_nodes):
        where = f"nodes[{pos}]"
        try:
            nodes.append(
                NodeParams(
                    id=int(_require(raw, "id", where)),
                    is_generator=bool(raw.get("is_generator", False)),
                    m=float(raw.get("m", 0.0)),
                    d=float(raw.get("d", 0.0)),
                    t=float(raw.get("t", 0.0)),
                    r=float(raw.get("r", 0.0)),
                    load=float(raw.get("load", 0.0)),
                )
            )
        except (TypeError, ValueError, AttributeError) as err:
            if isinstance(err, NetworkError):
                raise
            raise NetworkError(MALFORMED, f"{where}: {err}") from err
    index = {node.id: pos for pos, node in enumerate(nodes)}
    if len(index) != len(nodes):
        raise NetworkError(MALFORMED, "node ids are not unique")

    def lookup(node_id, where):
        try:
            return index[int(node_id)]
        except (KeyError, TypeError, ValueError):
            raise NetworkError(NODE_INDEX, f"{where}: unknown node id {node_id!r}") from None

    n = len(nodes)
    nominal = None
    if data.get("nominal") is not None:
        nom = data["nominal"]
        nominal = NominalPoint(_require(nom, "v0", "nominal"), _require(nom, "delta0", "nominal"))
        if nominal.v0.shape != (n,):
            raise NetworkError(MALFORMED, f"nominal point has {nominal.v0.size} entries for {n} nodes")

    edges: list[Edge] = []
    reactances: dict[tuple[int, int], float] = {}
    for pos, raw in enumerate(_require(data, "edges", "network")):
        where = f"edges[{pos}]"
        i = lookup(_require(raw, "from", where), where)
        j = lookup(_require(raw, "to", where), where)
        kind = str(raw.get("kind", "line"))
        if raw.get("x") is not None:
            reactances[(i, j)] = float(raw["x"])
        if raw.get("k") is not None:
            k = float(raw["k"])
        elif raw.get("x") is not None:
            k = derive_edge_weights({(i, j): float(raw["x"])}, nominal or NominalPoint.flat(n))[0].k
        else:
            raise NetworkError(MALFORMED, f"{where}: needs a weight 'k' or a reactance 'x'")
        edges.append(Edge(i, j, k, kind))

    boundary = [lookup(b, "boundary") for b in _require(data, "boundary", "network")]
    if "interior" in data:
        interior = [lookup(b, "interior") for b in data["interior"]]
    else:
        bset = set(boundary)
        interior = [i for i in range(n) if i not in bset]
    model = NetworkModel(
        nodes=nodes,
        edges=edges,
        boundary=boundary,
        interior=interior,
        base_mva=float(data.get("base_mva", 100.0)),
        droop_is_inverse=bool(data.get("droop_is_inverse", False)),
        name=str(data.get("name", "")),
        reactances=reactances or None,
    )
    return validate_network(model) if validate else model


def network_to_dict(model: NetworkModel) -> dict:
    ids = model.ids
    edges = []
    for e in model.edges:
        entry = {"from": ids[e.src], "to": ids[e.dst], "k": e.k}
        if model.reactances and (e.src, e.dst) in model.reactances:
            entry["x"] = model.reactances[(e.src, e.dst)]
        if e.kind != "line":
            entry["kind"] = e.kind
        edges.append(entry)
    return {
        "name": model.name,
        "base_mva": model.base_mva,
        "droop_is_inverse": model.droop_is_inverse,
        "nodes": [
            {"id": nd.id, "is_generator": nd.is_generator, "m": nd.m, "d": nd.d, "t": nd.t, "r": nd.r, "load": nd.load}
            for nd in model.nodes
        ],
        "edges": edges,
        "boundary": [ids[i] for i in model.boundary],
        "interior": [ids[i] for i in model.interior],
    }


def load_network(path: str | Path, *, validate: bool = True) -> NetworkModel:
    path = Path(path)
    if not path.exists() and (DATA_DIR / path.name).exists() and path.parent == Path("."):
        path = DATA_DIR / path.name
    try:
        data = json.loads(path.read_text())
    except json.JSONDecodeError as err:
        raise NetworkError(MALFORMED, f"{path}: {err}") from err
    return network_from_dict(data, validate=validate)


def save_network(model: NetworkModel, path: str | Path) -> None:
    Path(path).write_text(json.dumps(network_to_dict(model), indent=1) + "\n")


def bundled(name: str) -> NetworkModel:
    """Load a bundled dataset: ``"ieee30"`` or ``"star5"``."""
    return load_network(DATA_DIR / f"{name.removesuffix('.json')}.json")
