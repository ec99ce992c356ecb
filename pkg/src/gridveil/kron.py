"""Kron reduction of a weighted Laplacian onto the boundary nodes."""
from __future__ import annotations

from dataclasses import dataclass, replace
from typing import Sequence

import numpy as np
import scipy.linalg

from .grid import NetworkModel, complete_graph_pairs, pair_incidence


class KronError(ValueError):
    pass


@dataclass(frozen=True)
class ReducedModel:
    """Kron-reduced swing dynamics on the boundary nodes.

    ``boundary`` and ``interior`` are positions in the source network;
    ``ids`` are the external ids of the boundary nodes in reduced order.
    ``r`` is the droop gain as it enters the dynamics (already inverted
    when the source network uses the ``1/R`` convention).
    """

    boundary: tuple[int, ...]
    interior: tuple[int, ...]
    ids: tuple[int, ...]
    k_red: np.ndarray
    k_ac: np.ndarray
    k_r: np.ndarray
    m: np.ndarray
    d: np.ndarray
    t: np.ndarray
    r: np.ndarray

    @property
    def n(self) -> int:
        return len(self.boundary)

    @property
    def pairs(self) -> list[tuple[int, int]]:
        return complete_graph_pairs(self.n)

    def incidence(self) -> np.ndarray:
        return pair_incidence(self.pairs, self.n)

    def with_params(self, k_r=None, m=None, d=None) -> "ReducedModel":
        """Copy with new reduced edge weights / inertia / damping; ``k_ac`` is kept."""
        changes = {}
        if k_r is not None:
            k_r = np.asarray(k_r, dtype=float)
            changes["k_r"] = k_r
            changes["k_red"] = laplacian_from_weights(k_r, self.n)
        if m is not None:
            changes["m"] = np.asarray(m, dtype=float)
        if d is not None:
            changes["d"] = np.asarray(d, dtype=float)
        return replace(self, **changes)

    def to_dict(self) -> dict:
        return {
            "boundary_ids": list(self.ids),
            "edge_order": [[self.ids[i], self.ids[j]] for i, j in self.pairs],
            "k_r": self.k_r.tolist(),
            "k_red": self.k_red.tolist(),
            "k_ac": self.k_ac.tolist(),
            "m": self.m.tolist(),
            "d": self.d.tolist(),
            "t": self.t.tolist(),
            "r": self.r.tolist(),
            "boundary": list(self.boundary),
            "interior": list(self.interior),
        }

    @classmethod
    def from_dict(cls, data: dict) -> "ReducedModel":
        n = len(data["boundary_ids"])
        k_ac = np.asarray(data["k_ac"], dtype=float).reshape(n, -1)
        return cls(
            boundary=tuple(data.get("boundary", range(n))),
            interior=tuple(data.get("interior", range(n, n + k_ac.shape[1]))),
            ids=tuple(data["boundary_ids"]),
            k_red=np.asarray(data["k_red"], dtype=float),
            k_ac=k_ac,
            k_r=np.asarray(data["k_r"], dtype=float),
            m=np.asarray(data["m"], dtype=float),
            d=np.asarray(data["d"], dtype=float),
            t=np.asarray(data["t"], dtype=float),
            r=np.asarray(data["r"], dtype=float),
        )


def laplacian_from_weights(k_r: np.ndarray, n: int) -> np.ndarray:
    """``-C_r diag(k_r) C_r^T`` over the complete-graph edge layout."""
    C = pair_incidence(complete_graph_pairs(n), n)
    return -(C * k_r) @ C.T


def _check_partition(n: int, gamma: Sequence[int], beta: Sequence[int]) -> None:
    g, b = set(gamma), set(beta)
    if g & b:
        raise KronError(f"boundary and interior overlap at {sorted(g & b)}")
    if len(g) != len(gamma) or len(b) != len(beta) or g | b != set(range(n)):
        raise KronError("boundary and interior must partition all nodes exactly once")


def partition(K: np.ndarray, gamma: Sequence[int], beta: Sequence[int]):
    """Blocks ``(K_gg, K_gb, K_bg, K_bb)`` in the given node orderings."""
    _check_partition(K.shape[0], gamma, beta)
    g = np.asarray(gamma, dtype=int)
    b = np.asarray(beta, dtype=int)
    return K[np.ix_(g, g)], K[np.ix_(g, b)], K[np.ix_(b, g)], K[np.ix_(b, b)]


def _isolated_interior(K_gb: np.ndarray, K_bb: np.ndarray) -> list[int] | None:
    """Positions (within beta) of an interior component with no boundary tie, if any."""
    nb = K_bb.shape[0]
    unseen = set(range(nb))
    while unseen:
        comp, stack = set(), [unseen.pop()]
        while stack:
            i = stack.pop()
            comp.add(i)
            for j in np.flatnonzero(K_bb[i]):
                if j != i and j in unseen:
                    unseen.discard(j)
                    stack.append(j)
        if not np.any(K_gb[:, sorted(comp)]):
            return sorted(comp)
    return None


def kron_reduce(K: np.ndarray, gamma: Sequence[int], beta: Sequence[int]):
    """Schur complement onto ``gamma``.

    Returns ``(K_red, K_ac)`` with ``K_red = K_gg - K_gb K_bb^-1 K_bg`` and
    ``K_ac = -K_gb K_bb^-1``.
    """
    K_gg, K_gb, K_bg, K_bb = partition(K, gamma, beta)
    if len(beta) == 0:
        return K_gg.copy(), np.zeros((len(gamma), 0))
    isolated = _isolated_interior(K_gb, K_bb)
    if isolated is not None:
        raise KronError(f"interior component {[beta[i] for i in isolated]} has no path to the boundary; K_bb is singular")
    # -K_bb is symmetric positive definite for a connected positive-weight graph
    try:
        factor = scipy.linalg.cho_factor(-K_bb)
    except np.linalg.LinAlgError as err:
        raise KronError(f"K_bb is not invertible: {err}") from err
    X = scipy.linalg.cho_solve(factor, K_bg)  # -K_bb^-1 K_bg
    K_red = K_gg + K_gb @ X
    K_ac = X.T  # -K_gb K_bb^-1 by symmetry
    off = ~np.eye(len(gamma), dtype=bool)
    K_red = 0.5 * (K_red + K_red.T)
    scale = max(np.abs(K_red).max(), 1.0)
    tiny = off & (K_red < 0) & (K_red > -1e-12 * scale)
    K_red[tiny] = 0.0
    np.fill_diagonal(K_red, 0.0)
    np.fill_diagonal(K_red, -K_red.sum(axis=1))
    return K_red, K_ac


def reduced_edge_weights(K_red: np.ndarray, tol: float = 1e-9) -> np.ndarray:
    """Off-diagonal entries of ``K_red`` over the lexicographic complete graph."""
    K_red = np.asarray(K_red, dtype=float)
    n = K_red.shape[0]
    scale = max(np.abs(K_red).max(), 1.0)
    if np.abs(K_red - K_red.T).max() > tol * scale:
        raise KronError("reduced Laplacian is not symmetric")
    if np.abs(K_red.sum(axis=1)).max() > tol * scale:
        raise KronError("reduced Laplacian rows do not sum to zero")
    return np.array([K_red[i, j] for i, j in complete_graph_pairs(n)])


def reduce_network(model: NetworkModel, weights: np.ndarray | None = None) -> ReducedModel:
    """Kron-reduce ``model`` (optionally with replacement edge weights)."""
    if weights is not None:
        model = model.with_weights(weights)
    K_red, K_ac = kron_reduce(model.laplacian(), model.boundary, model.interior)
    g = model.boundary
    return ReducedModel(
        boundary=tuple(g),
        interior=tuple(model.interior),
        ids=tuple(model.nodes[i].id for i in g),
        k_red=K_red,
        k_ac=K_ac,
        k_r=reduced_edge_weights(K_red),
        m=model.node_array("m", g),
        d=model.node_array("d", g),
        t=model.node_array("t", g),
        r=model.droop_gains(g),
    )
