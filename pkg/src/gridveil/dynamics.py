"""Forward-Euler simulation of the linearized swing dynamics.

State layout for the reduced system is ``x = [w; delta; p]`` over the
boundary nodes, so ``x`` has ``3 n`` entries.
"""
from __future__ import annotations

import csv
import hashlib
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np
import scipy.linalg

from .grid import NetworkModel, validate_network
from .kron import KronError, ReducedModel, partition


class SimulationError(RuntimeError):
    def __init__(self, message: str, step: int | None = None):
        super().__init__(message if step is None else f"{message} (step {step})")
        self.step = step


@dataclass(frozen=True)
class SimConfig:
    dt: float = 0.01
    horizon: float = 30.0

    def __post_init__(self):
        if not self.dt > 0:
            raise ValueError("dt must be positive")
        ratio = self.horizon / self.dt
        if self.horizon <= 0 or abs(ratio - round(ratio)) > 1e-9 * max(ratio, 1):
            raise ValueError(f"horizon {self.horizon} is not a positive multiple of dt {self.dt}")

    @property
    def steps(self) -> int:
        return int(round(self.horizon / self.dt))

    @property
    def times(self) -> np.ndarray:
        return np.arange(self.steps + 1) * self.dt


@dataclass(frozen=True)
class LoadEvent:
    """Step change in load, held from ``time`` on."""

    time: float
    boundary: np.ndarray
    interior: np.ndarray

    def __post_init__(self):
        if self.time < 0:
            raise ValueError("event time must be non-negative")
        object.__setattr__(self, "boundary", np.asarray(self.boundary, dtype=float))
        object.__setattr__(self, "interior", np.asarray(self.interior, dtype=float))

    @classmethod
    def from_buses(cls, time: float, deltas, boundary: Sequence[int], interior: Sequence[int]) -> "LoadEvent":
        """Split a per-bus load-delta vector (source network order) into the two blocks."""
        deltas = np.asarray(deltas, dtype=float)
        return cls(time, deltas[list(boundary)], deltas[list(interior)])

    def scaled(self, a: float) -> "LoadEvent":
        return LoadEvent(self.time, a * self.boundary, a * self.interior)


@dataclass
class Trajectory:
    dt: float
    omega: np.ndarray  # (steps + 1, n)
    delta: np.ndarray
    p: np.ndarray
    ids: tuple[int, ...] = ()
    metadata: dict = field(default_factory=dict)
    interior_delta: np.ndarray | None = None

    @property
    def steps(self) -> int:
        return self.omega.shape[0] - 1

    @property
    def times(self) -> np.ndarray:
        return np.arange(self.steps + 1) * self.dt

    @property
    def states(self) -> np.ndarray:
        return np.hstack([self.omega, self.delta, self.p])

    def to_csv(self, path: str | Path) -> None:
        ids = self.ids or tuple(range(self.omega.shape[1]))
        header = ["t"] + [f"{v}_{i}" for v in ("omega", "delta", "p") for i in ids]
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(header)
            for t, row in zip(self.times, self.states):
                w.writerow([f"{t:.15g}"] + [f"{v:.15g}" for v in row])

    @classmethod
    def from_csv(cls, path: str | Path) -> "Trajectory":
        with open(path, newline="") as fh:
            rows = list(csv.reader(fh))
        header, body = rows[0], np.array(rows[1:], dtype=float)
        n = (len(header) - 1) // 3
        ids = tuple(int(h.split("_", 1)[1]) for h in header[1 : n + 1])
        dt = float(body[1, 0] - body[0, 0]) if len(body) > 1 else 0.0
        return cls(dt, body[:, 1 : n + 1], body[:, n + 1 : 2 * n + 1], body[:, 2 * n + 1 :], ids)


def extract_frequencies(traj: Trajectory) -> np.ndarray:
    """Frequency states as an ``(n, steps + 1)`` matrix."""
    return traj.omega.T.copy()


def _event_steps(events: Sequence[LoadEvent], dt: float) -> list[int]:
    times = [e.time for e in events]
    if times != sorted(times):
        raise ValueError("events must be sorted by time")
    return [int(math.ceil(e.time / dt - 1e-9)) for e in events]


def load_schedule(events: Sequence[LoadEvent], n_gamma: int, n_beta: int, config: SimConfig):
    """Per-step active loads ``(l_gamma, l_beta)`` with shapes ``(steps, n)``."""
    N = config.steps
    lg = np.zeros((N, n_gamma))
    lb = np.zeros((N, n_beta))
    for e, start in zip(events, _event_steps(events, config.dt)):
        if e.boundary.shape != (n_gamma,) or e.interior.shape != (n_beta,):
            raise ValueError("load event dimensions do not match the model")
        if start < N:
            lg[start:] += e.boundary
            lb[start:] += e.interior
    return lg, lb


def system_matrix(model: ReducedModel) -> np.ndarray:
    """Jacobian ``A`` of ``dx/dt = A x + b(load)`` for ``x = [w; delta; p]``."""
    n = model.n
    if np.any(model.m <= 0):
        bad = int(np.flatnonzero(model.m <= 0)[0])
        raise SimulationError(f"boundary node {model.ids[bad] if model.ids else bad} has non-positive inertia")
    inv_m = 1.0 / model.m
    A = np.zeros((3 * n, 3 * n))
    A[:n, :n] = -np.diag(inv_m * model.d)
    A[:n, n : 2 * n] = inv_m[:, None] * model.k_red
    A[:n, 2 * n :] = np.diag(inv_m)
    A[n : 2 * n, :n] = np.eye(n)
    A[2 * n :, :n] = -np.diag(model.t * model.r)
    A[2 * n :, 2 * n :] = -np.diag(model.t)
    return A


def forcing(model: ReducedModel, lg: np.ndarray, lb: np.ndarray) -> np.ndarray:
    """Load forcing ``b_n`` per step, shape ``(steps, 3 n)``."""
    n = model.n
    b = np.zeros((lg.shape[0], 3 * n))
    b[:, :n] = -(lg + lb @ model.k_ac.T) / model.m
    return b


def step_reduced(state: np.ndarray, model: ReducedModel, load, dt: float) -> np.ndarray:
    """One explicit Euler step of the reduced dynamics; ``state = [w, delta, p]``."""
    n = model.n
    w, delta, p = state[:n], state[n : 2 * n], state[2 * n :]
    lg, lb = (np.asarray(a, dtype=float) for a in load)
    if np.any(model.m <= 0):
        raise SimulationError("boundary node with non-positive inertia")
    swing = model.k_red @ delta - model.d * w + p - lg - model.k_ac @ lb
    return np.concatenate([w + dt * swing / model.m, delta + dt * w, p - dt * model.t * (p + model.r * w)])


def _first_bad_row(X: np.ndarray) -> int | None:
    bad = ~np.isfinite(X).all(axis=1)
    return int(np.argmax(bad)) if bad.any() else None


def euler(A: np.ndarray, b: np.ndarray, dt: float) -> np.ndarray:
    """States ``x_0 = 0, x_{n+1} = x_n + dt (A x_n + b_n)``; returns ``(steps + 1, dim)``."""
    N, s = b.shape
    X = np.zeros((N + 1, s))
    Phi = np.eye(s) + dt * A
    u = dt * b
    x = X[0]
    with np.errstate(over="ignore", invalid="ignore"):
        for k in range(N):
            x = Phi.dot(x)
            x += u[k]
            X[k + 1] = x
    bad = _first_bad_row(X)
    if bad is not None:
        raise SimulationError("non-finite state", bad)
    return X


def model_hash(model: ReducedModel) -> str:
    h = hashlib.sha256()
    for arr in (model.k_red, model.k_ac, model.m, model.d, model.t, model.r):
        h.update(np.ascontiguousarray(arr, dtype=float).tobytes())
    return h.hexdigest()[:16]


def simulate_reduced(model: ReducedModel, events: Sequence[LoadEvent], config: SimConfig = SimConfig()) -> Trajectory:
    n = model.n
    lg, lb = load_schedule(events, n, model.k_ac.shape[1], config)
    X = euler(system_matrix(model), forcing(model, lg, lb), config.dt)
    meta = {"model_hash": model_hash(model), "events": [e.time for e in events]}
    return Trajectory(config.dt, X[:, :n], X[:, n : 2 * n], X[:, 2 * n :], model.ids, meta)


def simulate_full(model: NetworkModel, events: Sequence[LoadEvent], config: SimConfig = SimConfig()) -> Trajectory:
    """Simulate the unreduced network, solving the interior algebraic rows each step."""
    validate_network(model)
    g, b = model.boundary, model.interior
    K_gg, K_gb, K_bg, K_bb = partition(model.laplacian(), g, b)
    m = model.node_array("m", g)
    d = model.node_array("d", g)
    t = model.node_array("t", g)
    r = model.droop_gains(g)
    ng, nb = len(g), len(b)
    lg, lb = load_schedule(events, ng, nb, config)
    if nb:
        try:
            lu = scipy.linalg.lu_factor(K_bb, check_finite=True)
        except (np.linalg.LinAlgError, ValueError) as err:
            raise KronError(f"K_bb is singular: {err}") from err
        if np.any(np.abs(np.diag(lu[0])) < 1e-14 * np.abs(K_bb).max()):
            raise KronError("K_bb is singular")

    N, dt = config.steps, config.dt
    W = np.zeros((N + 1, ng))
    Dl = np.zeros((N + 1, ng))
    P = np.zeros((N + 1, ng))
    Db = np.zeros((N + 1, nb))
    w, delta, p = W[0], Dl[0], P[0]
    with np.errstate(over="ignore", invalid="ignore"):
        for k in range(N):
            if nb:
                delta_b = scipy.linalg.lu_solve(lu, lb[k] - K_bg @ delta, check_finite=False)
                Db[k] = delta_b
                flow = K_gg @ delta + K_gb @ delta_b
            else:
                flow = K_gg @ delta
            w_next = w + dt * (flow - d * w + p - lg[k]) / m
            delta = delta + dt * w
            p = p - dt * t * (p + r * w)
            w = w_next
            W[k + 1], Dl[k + 1], P[k + 1] = w, delta, p
        if nb:
            load_end = lb[-1] if N else np.zeros(nb)
            Db[N] = scipy.linalg.lu_solve(lu, load_end - K_bg @ delta, check_finite=False)
    bad = _first_bad_row(np.hstack([W, Dl, P]))
    if bad is not None:
        raise SimulationError("non-finite state", bad)
    ids = tuple(model.nodes[i].id for i in g)
    return Trajectory(dt, W, Dl, P, ids, {"events": [e.time for e in events]}, interior_delta=Db)
