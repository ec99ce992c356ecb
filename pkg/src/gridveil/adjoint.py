"""Fidelity-restoring post-processing: fit reduced weights, inertia and damping
to a public frequency trajectory by projected gradient descent.

Gradients come from the discrete adjoint of the forward-Euler recursion, so
they are exact (to rounding) for the discretized loss

    J = sum_{n<N} dt ||w_n - w_ref_n||^2 + rho ||theta - theta0||^2.

As ``dt -> 0`` the backward recursion below becomes the continuous adjoint ODE
``dlambda/dt = -(df/dx)^T lambda - (dl/dx)^T`` with ``lambda(T) = 0``.
"""
from __future__ import annotations

import csv
import logging
from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np

from .dynamics import (
    LoadEvent,
    SimConfig,
    SimulationError,
    Trajectory,
    extract_frequencies,
    forcing,
    load_schedule,
    simulate_reduced,
    system_matrix,
)
from .kron import ReducedModel
from .privacy import Bounds, ObfuscatedModel, project

log = logging.getLogger(__name__)


class OptimizationDiverged(RuntimeError):
    pass


@dataclass(frozen=True)
class Theta:
    k: np.ndarray
    m: np.ndarray
    d: np.ndarray

    def __post_init__(self):
        for name in ("k", "m", "d"):
            object.__setattr__(self, name, np.asarray(getattr(self, name), dtype=float))

    @property
    def vector(self) -> np.ndarray:
        return np.concatenate([self.k, self.m, self.d])

    @property
    def sizes(self) -> tuple[int, int, int]:
        return (self.k.size, self.m.size, self.d.size)

    def from_vector(self, v) -> "Theta":
        nk, nm, _ = self.sizes
        v = np.asarray(v, dtype=float)
        return Theta(v[:nk], v[nk : nk + nm], v[nk + nm :])

    def project(self, bounds: Bounds) -> "Theta":
        return Theta(project(self.k, bounds.k), project(self.m, bounds.m), project(self.d, bounds.d))

    def within(self, bounds: Bounds) -> bool:
        return all(
            np.all(v >= lo) and np.all(v <= hi)
            for v, (lo, hi) in ((self.k, bounds.k), (self.m, bounds.m), (self.d, bounds.d))
        )

    @classmethod
    def of(cls, model: ReducedModel) -> "Theta":
        return cls(model.k_r.copy(), model.m.copy(), model.d.copy())


@dataclass(frozen=True)
class LossSpec:
    reference: np.ndarray  # (n, steps + 1) public frequency trajectory
    anchor: Theta
    rho: float = 1e-4

    def __post_init__(self):
        if self.rho < 0:
            raise ValueError("rho must be non-negative")


@dataclass(frozen=True)
class OptConfig:
    eta: float = 100.0
    max_iters: int = 500
    rho: float = 1e-4
    bounds: Bounds = Bounds()
    tol: float | None = 1e-8
    divergence_factor: float = 10.0
    # optional boolean mask over Theta.vector; False coordinates stay at the anchor
    free: tuple | None = None

    def __post_init__(self):
        if not self.eta > 0 or self.max_iters < 1:
            raise ValueError("need eta > 0 and max_iters >= 1")
        if self.free is not None:
            object.__setattr__(self, "free", tuple(bool(f) for f in self.free))


@dataclass(frozen=True)
class AdjointTrace:
    lam: np.ndarray  # (steps + 1, 3 n); lam[N] = 0

    @property
    def mu(self) -> np.ndarray:
        return self.lam[0]


@dataclass
class LossTrace:
    mismatch: list[float] = field(default_factory=list)
    reg: list[float] = field(default_factory=list)
    grad_norm: list[float] = field(default_factory=list)
    clipped: list[tuple[bool, bool, bool]] = field(default_factory=list)

    def append(self, mismatch, reg, grad_norm, clipped=(False, False, False)):
        self.mismatch.append(float(mismatch))
        self.reg.append(float(reg))
        self.grad_norm.append(float(grad_norm))
        self.clipped.append(tuple(bool(c) for c in clipped))

    def to_csv(self, path: str | Path) -> None:
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["iter", "mismatch", "reg", "grad_norm"])
            for i, row in enumerate(zip(self.mismatch, self.reg, self.grad_norm)):
                w.writerow([i] + [repr(v) for v in row])


@dataclass(frozen=True)
class FitProblem:
    """Public ingredients of the fit: the released model skeleton (``k_ac``,
    governor and droop gains), training events and time grid."""

    template: ReducedModel
    events: tuple[LoadEvent, ...]
    sim: SimConfig = SimConfig()

    def model(self, theta: Theta) -> ReducedModel:
        return self.template.with_params(k_r=theta.k, m=theta.m, d=theta.d)

    def simulate(self, theta: Theta) -> Trajectory:
        return simulate_reduced(self.model(theta), self.events, self.sim)

    def loads(self):
        t = self.template
        return load_schedule(self.events, t.n, t.k_ac.shape[1], self.sim)


def _check_grid(traj: Trajectory, spec: LossSpec) -> None:
    if spec.reference.shape != traj.omega.T.shape:
        raise ValueError(f"reference grid {spec.reference.shape} does not match trajectory {traj.omega.T.shape}")


def loss(traj: Trajectory, spec: LossSpec, theta: Theta) -> tuple[float, float, float]:
    """``(J, mismatch, regularization)`` with a left-rectangle time integral."""
    _check_grid(traj, spec)
    err = extract_frequencies(traj)[:, :-1] - spec.reference[:, :-1]
    mismatch = traj.dt * float(np.sum(err * err))
    diff = theta.vector - spec.anchor.vector
    reg = spec.rho * float(diff @ diff)
    return mismatch + reg, mismatch, reg


def _running_grad(traj: Trajectory, spec: LossSpec) -> np.ndarray:
    """``(dl/dx_n)^T`` for n < N, shape ``(steps, 3 n)``."""
    n = traj.omega.shape[1]
    g = np.zeros((traj.steps, 3 * n))
    g[:, :n] = 2.0 * (traj.omega[:-1] - spec.reference.T[:-1])
    return g


def adjoint_backward(traj: Trajectory, problem: FitProblem, spec: LossSpec, theta: Theta) -> AdjointTrace:
    """``lam_N = 0``, ``lam_n = lam_{n+1} + dt (A^T lam_{n+1} + dl/dx_n)``."""
    _check_grid(traj, spec)
    A = system_matrix(problem.model(theta))
    dt, N = traj.dt, traj.steps
    g = dt * _running_grad(traj, spec)
    PhiT = (np.eye(A.shape[0]) + dt * A).T
    lam = np.zeros((N + 1, A.shape[0]))
    x = lam[N]
    with np.errstate(over="ignore", invalid="ignore"):
        for k in range(N - 1, -1, -1):
            x = PhiT.dot(x)
            x += g[k]
            lam[k] = x
    bad = ~np.isfinite(lam).all(axis=1)
    if bad.any():
        raise SimulationError("non-finite adjoint state", int(np.flatnonzero(bad)[-1]))
    return AdjointTrace(lam)


def _swing_rhs(traj: Trajectory, model: ReducedModel, problem: FitProblem) -> np.ndarray:
    """``K_red delta - D w + p - l_gamma - K_ac l_beta`` for n < N."""
    lg, lb = problem.loads()
    return traj.delta[:-1] @ model.k_red.T - model.d * traj.omega[:-1] + traj.p[:-1] - lg - lb @ model.k_ac.T


def gradient(traj: Trajectory, adj: AdjointTrace, problem: FitProblem, spec: LossSpec, theta: Theta) -> Theta:
    """``dJ/dtheta = sum_n dt lam_{n+1}^T df/dtheta(x_n) + 2 rho (theta - theta0)``."""
    model = problem.model(theta)
    n, dt = model.n, traj.dt
    lam_w = adj.lam[1:, :n]  # lam_{n+1}, frequency block
    scaled = lam_w / model.m
    C = model.incidence()
    # d(K_red delta)/dk_e = -c_e (c_e^T delta)
    g_k = -dt * np.einsum("ne,ne->e", scaled @ C, traj.delta[:-1] @ C)
    g_m = -dt * np.sum(scaled * _swing_rhs(traj, model, problem), axis=0) / model.m
    g_d = -dt * np.sum(scaled * traj.omega[:-1], axis=0)
    reg = 2.0 * spec.rho * (theta.vector - spec.anchor.vector)
    return theta.from_vector(np.concatenate([g_k, g_m, g_d]) + reg)


def objective(problem: FitProblem, spec: LossSpec, theta: Theta) -> float:
    return loss(problem.simulate(theta), spec, theta)[0]


def value_and_gradient(problem: FitProblem, spec: LossSpec, theta: Theta):
    traj = problem.simulate(theta)
    adj = adjoint_backward(traj, problem, spec, theta)
    return loss(traj, spec, theta), gradient(traj, adj, problem, spec, theta), traj


def fd_gradient(problem: FitProblem, spec: LossSpec, theta: Theta, h: float = 1e-5) -> Theta:
    """Central differences with relative step ``h`` per coordinate."""
    v = theta.vector
    g = np.zeros_like(v)
    for i in range(v.size):
        step = h * max(abs(v[i]), 1e-8)
        up, dn = v.copy(), v.copy()
        up[i] += step
        dn[i] -= step
        g[i] = (objective(problem, spec, theta.from_vector(up)) - objective(problem, spec, theta.from_vector(dn))) / (
            up[i] - dn[i]
        )
    return theta.from_vector(g)


def sensitivity_gradient(problem: FitProblem, spec: LossSpec, theta: Theta) -> Theta:
    """Gradient via forward state sensitivities ``S_n = dx_n/dtheta``.

    Costs one extra ``3n x |theta|`` recursion; used only to cross-check the
    adjoint gradient.
    """
    model = problem.model(theta)
    traj = problem.simulate(theta)
    _check_grid(traj, spec)
    n, dt, N = model.n, traj.dt, traj.steps
    A = system_matrix(model)
    C = model.incidence()
    nk = C.shape[1]
    P = nk + 2 * n
    rhs = _swing_rhs(traj, model, problem)
    g_run = _running_grad(traj, spec)
    S = np.zeros((3 * n, P))
    total = np.zeros(P)
    F = np.zeros((3 * n, P))
    idx = np.arange(n)
    for k in range(N):
        total += dt * (g_run[k] @ S)
        # df/dtheta at x_k, frequency rows only
        F[:n, :nk] = -(C * (traj.delta[k] @ C)) / model.m[:, None]
        F[idx, nk + idx] = -rhs[k] / model.m**2
        F[idx, nk + n + idx] = -traj.omega[k] / model.m
        S = S + dt * (A @ S + F)
    total += 2.0 * spec.rho * (theta.vector - spec.anchor.vector)
    return theta.from_vector(total)


def reference_from(traj: Trajectory) -> np.ndarray:
    return extract_frequencies(traj)


def fit_problem(obf: ObfuscatedModel, events: Sequence[LoadEvent], sim: SimConfig = SimConfig()) -> FitProblem:
    """Fit problem built from released quantities only."""
    return FitProblem(obf.reduced, tuple(events), sim)


def postprocess(
    obf: ObfuscatedModel,
    reference: np.ndarray,
    cfg: OptConfig,
    events: Sequence[LoadEvent],
    sim: SimConfig = SimConfig(),
) -> tuple[Theta, LossTrace]:
    """Projected gradient descent from the DP release toward the public trajectory.

    Reads only the release (anchor, ``k_ac``, public ``t``/``r``), the public
    reference trajectory and the public training events.
    """
    problem = fit_problem(obf, events, sim)
    theta = Theta.of(obf.reduced)
    spec = LossSpec(np.asarray(reference, dtype=float), theta, cfg.rho)
    trace = LossTrace()
    bounds = cfg.bounds
    initial = None
    clipped = (False, False, False)
    for it in range(cfg.max_iters + 1):
        (_, mismatch, reg), grad, _ = value_and_gradient(problem, spec, theta)
        trace.append(mismatch, reg, np.linalg.norm(grad.vector), clipped)
        if initial is None:
            initial = mismatch
        elif mismatch > cfg.divergence_factor * max(initial, np.finfo(float).tiny):
            raise OptimizationDiverged(
                f"mismatch {mismatch:.3e} at iteration {it} exceeds {cfg.divergence_factor}x initial {initial:.3e}"
            )
        if it == cfg.max_iters or (cfg.tol is not None and mismatch <= cfg.tol):
            break
        raw = theta.from_vector(theta.vector - cfg.eta * grad.vector)
        theta = raw.project(bounds)
        if cfg.free is not None:
            free = np.asarray(cfg.free)
            raw = theta.from_vector(np.where(free, raw.vector, spec.anchor.vector))
            theta = theta.from_vector(np.where(free, theta.vector, spec.anchor.vector))
        clipped = tuple(not np.array_equal(a, b) for a, b in zip((raw.k, raw.m, raw.d), (theta.k, theta.m, theta.d)))
    obf.accountant.post_process("adjoint-postprocessing")
    log.debug("postprocess finished after %d iterations, mismatch %.3e", len(trace.mismatch) - 1, trace.mismatch[-1])
    return theta, trace
