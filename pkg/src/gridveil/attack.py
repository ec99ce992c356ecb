"""Reverse engineering of original line weights from a Kron-reduced network.

Used as an audit: on an exact reduction the original weights come back,
on a DP release they do not.
"""
from __future__ import annotations

import json
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

from .grid import Edge, NetworkModel, build_laplacian, complete_graph_pairs
from .kron import kron_reduce, reduce_network, reduced_edge_weights
from .privacy import PrivacyParams, dp_release

OVER = "over-determined"
WELL = "well-determined"
UNDER = "under-determined"


class NotStarReducible(ValueError):
    pass


class NonIdentifiable(ValueError):
    pass


@dataclass(frozen=True)
class RecoveryProblem:
    """Known original topology plus observed reduced weights.

    ``pairs`` are original edges as node-index pairs; the reduced weights
    ``k_prime`` follow the lexicographic complete-graph order on ``boundary``.
    """

    k_prime: np.ndarray
    pairs: tuple[tuple[int, int], ...]
    n: int
    boundary: tuple[int, ...]
    interior: tuple[int, ...]
    include_diagonal: bool = False

    def __post_init__(self):
        object.__setattr__(self, "k_prime", np.asarray(self.k_prime, dtype=float))
        nb = len(self.boundary)
        if self.k_prime.shape != (nb * (nb - 1) // 2,):
            raise ValueError(f"expected {nb * (nb - 1) // 2} reduced weights, got {self.k_prime.shape}")

    @property
    def n_equations(self) -> int:
        return self.k_prime.size

    @property
    def n_unknowns(self) -> int:
        return len(self.pairs)

    @property
    def determinacy(self) -> str:
        if self.n_equations > self.n_unknowns:
            return OVER
        if self.n_equations == self.n_unknowns:
            return WELL
        return UNDER

    @classmethod
    def from_network(cls, model: NetworkModel, k_prime, **kw) -> "RecoveryProblem":
        return cls(
            k_prime,
            tuple((e.src, e.dst) for e in model.edges),
            model.n,
            tuple(model.boundary),
            tuple(model.interior),
            **kw,
        )


@dataclass
class RecoveryReport:
    k_hat: np.ndarray
    residual_norm: float
    rel_error: float | None = None
    iters: int = 0
    determinacy: str = OVER
    history: list[float] = field(default_factory=list)

    def to_dict(self) -> dict:
        return {
            "k_hat": np.asarray(self.k_hat).tolist(),
            "residual_norm": self.residual_norm,
            "rel_error": self.rel_error,
            "iters": self.iters,
            "determinacy": self.determinacy,
        }

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=1)


def recovery_residuals(k, problem: RecoveryProblem) -> np.ndarray:
    """Reduced weights implied by candidate ``k`` minus the observed ones.

    With ``include_diagonal`` the diagonal rows of the reduction identity
    are appended (they are implied by the off-diagonal rows for a true
    Laplacian, but weight degree errors more heavily).
    """
    k = np.asarray(k, dtype=float)
    if np.any(k <= 0):
        raise ValueError("candidate weights must be positive")
    edges = [Edge(i, j, float(w)) for (i, j), w in zip(problem.pairs, k)]
    K_red, _ = kron_reduce(build_laplacian(edges, problem.n), problem.boundary, problem.interior)
    res = reduced_edge_weights(K_red) - problem.k_prime
    if problem.include_diagonal:
        nb = len(problem.boundary)
        target = np.zeros((nb, nb))
        for (i, j), w in zip(complete_graph_pairs(nb), problem.k_prime):
            target[i, j] = target[j, i] = w
        res = np.concatenate([res, np.diag(K_red) + target.sum(axis=1)])
    return res


def recover_star(k_prime) -> np.ndarray:
    """Closed-form star weights from the reduced complete graph.

    For a single interior hub, ``k'_ij = k_i k_j / S`` with ``S = sum k``,
    so ``y_i = sqrt(k'_ij k'_in / k'_jn) = k_i / sqrt(S)`` and
    ``k_i = y_i * sum(y)``.
    """
    k_prime = np.asarray(k_prime, dtype=float)
    nb = int(round((1 + np.sqrt(1 + 8 * k_prime.size)) / 2))
    if nb * (nb - 1) // 2 != k_prime.size or nb < 3:
        raise ValueError("need reduced weights of a complete graph on at least 3 nodes")
    W = np.zeros((nb, nb))
    for (i, j), w in zip(complete_graph_pairs(nb), k_prime):
        W[i, j] = W[j, i] = w
    y = np.empty(nb)
    for i in range(nb):
        j, l = [a for a in range(nb) if a != i][:2]
        if W[j, l] <= 0:
            raise NotStarReducible(f"reduced weight ({j}, {l}) is not positive")
        radicand = W[i, j] * W[i, l] / W[j, l]
        if not radicand > 0:
            raise NotStarReducible(f"negative radicand for node {i}; weights are not star-reducible")
        y[i] = np.sqrt(radicand)
    return y * y.sum()


def _jacobian(fun, k, r0, rel_step=1e-7):
    J = np.empty((r0.size, k.size))
    for i in range(k.size):
        h = rel_step * max(abs(k[i]), 1.0)
        kp = k.copy()
        kp[i] += h
        J[:, i] = (fun(kp) - r0) / h
    return J


def gauss_newton_recover(
    problem: RecoveryProblem,
    init,
    *,
    tol: float = 1e-10,
    max_iter: int = 200,
    damping: float = 1e-3,
    floor: float = 1e-6,
    truth=None,
) -> RecoveryReport:
    """Damped Gauss-Newton on the reduction residuals, forward-difference Jacobian."""
    if problem.determinacy == UNDER:
        raise NonIdentifiable(
            f"{problem.n_equations} equations for {problem.n_unknowns} unknowns; "
            "the reduced network alone cannot identify the original weights"
        )
    fun = lambda k: recovery_residuals(k, problem)  # noqa: E731
    k = np.maximum(np.asarray(init, dtype=float), floor)
    r = fun(k)
    norm = float(np.linalg.norm(r))
    history = [norm]
    it = 0
    lam = damping
    while norm >= tol and it < max_iter:
        J = _jacobian(fun, k, r)
        if np.linalg.matrix_rank(J) < k.size:
            raise NonIdentifiable("rank-deficient Jacobian; weights are not locally identifiable")
        JtJ, Jtr = J.T @ J, J.T @ r
        while True:
            step = np.linalg.solve(JtJ + lam * np.eye(k.size), -Jtr)
            trial = np.maximum(k + step, floor)
            r_trial = fun(trial)
            trial_norm = float(np.linalg.norm(r_trial))
            if trial_norm < norm:
                k, r, norm = trial, r_trial, trial_norm
                lam = max(lam / 10, 1e-12)
                break
            lam *= 10
            if lam > 1e12:
                break
        it += 1
        history.append(norm)
        if lam > 1e12:
            break
    rel = None
    if truth is not None:
        truth = np.asarray(truth, dtype=float)
        rel = float(np.linalg.norm(k - truth) / np.linalg.norm(truth))
    return RecoveryReport(k, norm, rel, it, problem.determinacy, history)


def relative_error(k_hat, k_true) -> float:
    k_hat, k_true = np.asarray(k_hat, dtype=float), np.asarray(k_true, dtype=float)
    return float(np.linalg.norm(k_hat - k_true) / np.linalg.norm(k_true))


def audit_star(model: NetworkModel, params: PrivacyParams, seeds: Sequence[int]) -> tuple[float, np.ndarray]:
    """Star-attack error on the exact reduction and on DP releases, one per seed."""
    truth = model.weights
    baseline = relative_error(recover_star(reduce_network(model).k_r), truth)
    errors = np.array([relative_error(recover_star(dp_release(model, params, seed=s).k_r0), truth) for s in seeds])
    return baseline, errors


def star_network_pairs(n_leaves: int) -> list[tuple[int, int]]:
    return [(i, n_leaves) for i in range(n_leaves)]


def is_star(model: NetworkModel) -> bool:
    if len(model.interior) != 1:
        return False
    hub = model.interior[0]
    return all(hub in (e.src, e.dst) for e in model.edges) and len(model.edges) == len(model.boundary)


__all__ = [
    "RecoveryProblem",
    "RecoveryReport",
    "recovery_residuals",
    "recover_star",
    "gauss_newton_recover",
    "audit_star",
    "NotStarReducible",
    "NonIdentifiable",
]
