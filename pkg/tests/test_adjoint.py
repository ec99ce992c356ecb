import inspect

import numpy as np
import pytest
from scipy.optimize import minimize_scalar

from gridveil.adjoint import (
    FitProblem,
    LossSpec,
    LossTrace,
    OptConfig,
    OptimizationDiverged,
    Theta,
    adjoint_backward,
    fd_gradient,
    fit_problem,
    gradient,
    loss,
    objective,
    postprocess,
    sensitivity_gradient,
    value_and_gradient,
)
from gridveil.dynamics import LoadEvent, SimConfig, Trajectory, extract_frequencies, simulate_reduced
from gridveil.grid import NetworkModel
from gridveil.kron import ReducedModel, laplacian_from_weights, reduce_network
from gridveil.privacy import NON_PRIVATE, Bounds, ObfuscatedModel, PrivacyParams, dp_release


def random_reduced(rng, n, n_interior=2):
    nk = n * (n - 1) // 2
    k = rng.uniform(1, 20, nk)
    k_ac = rng.uniform(0.1, 1, (n, n_interior))
    k_ac /= k_ac.sum(axis=0)
    return ReducedModel(
        boundary=tuple(range(n)),
        interior=tuple(range(n, n + n_interior)),
        ids=tuple(range(1, n + 1)),
        k_red=laplacian_from_weights(k, n),
        k_ac=k_ac,
        k_r=k,
        m=rng.uniform(2, 20, n),
        d=rng.uniform(1, 10, n),
        t=rng.uniform(0.05, 2, n),
        r=rng.uniform(0.04, 25, n),
    )


def random_instance(seed, n=None, horizon=2.0, rho=1e-3):
    rng = np.random.default_rng(seed)
    n = n or int(rng.integers(3, 7))
    truth = random_reduced(rng, n)
    events = (
        LoadEvent(0.0, rng.uniform(0, 0.3, n), rng.uniform(0, 0.3, 2)),
        LoadEvent(0.5, rng.uniform(-0.2, 0.2, n), rng.uniform(-0.2, 0.2, 2)),
    )
    sim = SimConfig(0.01, horizon)
    reference = extract_frequencies(simulate_reduced(truth, events, sim))
    anchor = Theta(truth.k_r * rng.uniform(0.5, 1.5, truth.k_r.size), truth.m + rng.uniform(-1, 1, n),
                   truth.d + rng.uniform(-0.5, 0.5, n))
    theta = Theta(anchor.k * rng.uniform(0.9, 1.1, anchor.k.size), anchor.m * 1.05, anchor.d * 0.95)
    problem = FitProblem(truth, events, sim)
    return problem, LossSpec(reference, anchor, rho), theta


def test_loss_zero_and_offset(star):
    red = reduce_network(star)
    sim = SimConfig(0.01, 3.0)
    traj = simulate_reduced(red, [LoadEvent(0.0, np.ones(4) * 0.1, np.zeros(1))], sim)
    theta = Theta.of(red)
    assert loss(traj, LossSpec(extract_frequencies(traj), theta), theta) == (0.0, 0.0, 0.0)
    ref = extract_frequencies(traj).copy()
    ref[2] += 0.01
    _, mismatch, _ = loss(traj, LossSpec(ref, theta, 0.0), theta)
    assert mismatch == pytest.approx(0.01**2 * 3.0, rel=1e-12)


def test_loss_resummation():
    problem, spec, theta = random_instance(1)
    traj = problem.simulate(theta)
    J, mismatch, reg = loss(traj, spec, theta)
    total = 0.0
    for step in range(traj.steps):
        for i in range(traj.omega.shape[1]):
            total += traj.dt * (traj.omega[step, i] - spec.reference[i, step]) ** 2
    assert mismatch == pytest.approx(total, rel=1e-12)
    assert reg == pytest.approx(spec.rho * sum((a - b) ** 2 for a, b in zip(theta.vector, spec.anchor.vector)),
                                rel=1e-12)
    assert J == mismatch + reg


def test_grid_mismatch():
    problem, spec, theta = random_instance(2)
    traj = problem.simulate(theta)
    bad = LossSpec(spec.reference[:, :-1], spec.anchor)
    with pytest.raises(ValueError):
        loss(traj, bad, theta)
    with pytest.raises(ValueError):
        LossSpec(spec.reference, spec.anchor, rho=-1.0)


def test_adjoint_vanishes_on_own_trajectory():
    problem, spec, theta = random_instance(3)
    traj = problem.simulate(theta)
    own = LossSpec(extract_frequencies(traj), theta, spec.rho)
    adj = adjoint_backward(traj, problem, own, theta)
    assert not adj.lam.any()
    g = gradient(traj, adj, problem, own, theta)
    assert not g.vector.any()
    # pure regularization
    shifted = LossSpec(extract_frequencies(traj), spec.anchor, spec.rho)
    g = gradient(traj, adjoint_backward(traj, problem, shifted, theta), problem, shifted, theta)
    assert np.array_equal(g.vector, 2 * spec.rho * (theta.vector - spec.anchor.vector))


def test_one_step_horizon():
    problem, spec, theta = random_instance(4, n=3, horizon=0.01)
    problem = FitProblem(problem.template, problem.events, SimConfig(0.01, 0.01))
    ref = np.random.default_rng(0).normal(size=(3, 2))
    spec = LossSpec(ref, theta, 0.0)
    adj = adjoint_backward(problem.simulate(theta), problem, spec, theta)
    expected = np.zeros(9)
    expected[:3] = 0.01 * 2 * (0.0 - ref[:, 0])
    assert np.allclose(adj.mu, expected, atol=1e-18)
    assert not adj.lam[-1].any()


def test_adjoint_against_unrolled_chain_rule():
    problem, spec, theta = random_instance(5, n=3, horizon=0.5)
    traj = problem.simulate(theta)
    adj = adjoint_backward(traj, problem, spec, theta)
    from gridveil.dynamics import system_matrix

    A = system_matrix(problem.model(theta))
    Phi = np.eye(9) + traj.dt * A
    # lam_0 = sum_k (Phi^T)^k dt dl/dx_k, explicit powers
    lam0 = np.zeros(9)
    for k in range(traj.steps):
        g = np.zeros(9)
        g[:3] = 2 * (traj.omega[k] - spec.reference[:, k])
        lam0 += np.linalg.matrix_power(Phi.T, k) @ (traj.dt * g)
    assert np.allclose(adj.mu, lam0, rtol=1e-10, atol=1e-16)


@pytest.mark.parametrize("seed", range(3))
def test_gradient_matches_oracles(seed):
    problem, spec, theta = random_instance(100 + seed, n=6)
    (_, g, _) = value_and_gradient(problem, spec, theta)
    fd = fd_gradient(problem, spec, theta, h=1e-5)
    sens = sensitivity_gradient(problem, spec, theta)
    scale = np.abs(g.vector).max()
    assert np.all(np.abs(g.vector - fd.vector) <= 1e-6 * np.maximum(np.abs(fd.vector), 1e-3 * scale))
    assert np.allclose(g.vector, sens.vector, rtol=1e-10, atol=1e-10 * scale)


def test_descent_with_small_step():
    problem, spec, theta = random_instance(7, n=4, horizon=3.0)
    values = [objective(problem, spec, theta)]
    eta = 1.0
    for _ in range(10):
        (_, g, _) = value_and_gradient(problem, spec, theta)
        # backtrack until the step decreases J
        while True:
            trial = theta.from_vector(theta.vector - eta * g.vector).project(Bounds())
            if objective(problem, spec, trial) <= values[-1]:
                break
            eta /= 2
        theta = trial
        values.append(objective(problem, spec, theta))
    assert all(b <= a for a, b in zip(values, values[1:]))
    assert values[-1] < values[0]


def test_projection():
    theta = Theta(np.array([0.5, 150.0, 3.0]), np.array([0.0, 50.0]), np.array([2.0, -1.0]))
    p = theta.project(Bounds())
    assert p.within(Bounds()) and not theta.within(Bounds())
    assert np.array_equal(p.project(Bounds()).vector, p.vector)


def _star_release(star, m_shift=0.0, eps=NON_PRIVATE):
    red = reduce_network(star)
    events = [LoadEvent(0.0, np.array([0.1, 0.2, 0.3, 0.1]), np.array([0.5]))]
    reference = extract_frequencies(simulate_reduced(red, events))
    m = red.m.copy()
    m[0] += m_shift
    obf = ObfuscatedModel(red.with_params(m=m), star.weights, PrivacyParams(eps), Bounds(), 0)
    return red, obf, events, reference


def test_nonprivate_release_is_fixed_point(star):
    obf = dp_release(star, PrivacyParams(NON_PRIVATE), seed=0)
    red = reduce_network(star)
    events = [LoadEvent(0.0, np.array([0.1, 0.2, 0.3, 0.1]), np.array([0.5]))]
    reference = extract_frequencies(simulate_reduced(red, events))
    theta, trace = postprocess(obf, reference, OptConfig(max_iters=5, tol=None), events)
    assert trace.mismatch[0] == 0.0
    assert np.array_equal(theta.vector, Theta.of(obf.reduced).vector)


def test_single_inertia_recovery(star):
    red, obf, events, reference = _star_release(star, m_shift=5.0)
    anchor = Theta.of(obf.reduced)
    problem = fit_problem(obf, events)
    spec = LossSpec(reference, anchor, 0.0)
    line = minimize_scalar(lambda v: objective(problem, spec, Theta(anchor.k, np.r_[v, anchor.m[1:]], anchor.d)),
                           bounds=(1, 40), method="bounded", options={"xatol": 1e-8}).x
    free = np.zeros(anchor.vector.size, bool)
    free[anchor.k.size] = True
    theta, trace = postprocess(obf, reference, OptConfig(eta=1e4, rho=0.0, max_iters=60, tol=None, free=free), events)
    assert theta.m[0] == pytest.approx(red.m[0], rel=0.02)
    assert theta.m[0] == pytest.approx(line, rel=0.02)
    assert np.array_equal(theta.m[1:], anchor.m[1:]) and np.array_equal(theta.k, anchor.k)
    assert trace.mismatch[-1] < 1e-3 * trace.mismatch[0]


def test_anchor_consistency(star):
    _, obf, events, reference = _star_release(star, m_shift=5.0)
    anchor = Theta.of(obf.reduced).vector
    dists = []
    for rho in (1e-6, 1e-4, 1e-2):
        theta, _ = postprocess(obf, reference, OptConfig(eta=10, rho=rho, max_iters=40, tol=None), events)
        dists.append(np.linalg.norm(theta.vector - anchor))
    assert dists[0] > dists[1] > dists[2]


def test_divergence_guard(star):
    _, obf, events, reference = _star_release(star, m_shift=5.0)
    with pytest.raises(OptimizationDiverged, match="iteration"):
        postprocess(obf, reference, OptConfig(eta=1e7, max_iters=20, tol=None), events)


def test_trace_and_accountant(star, tmp_path):
    _, obf, events, reference = _star_release(star, m_shift=5.0, eps=1.0)
    obf.accountant.spend("stand-in", 1.0, 1.0)
    theta, trace = postprocess(obf, reference, OptConfig(max_iters=3, tol=None), events)
    assert theta.within(Bounds())
    assert obf.accountant.total == 1.0 and obf.accountant.entries[-1]["kind"] == "post-processing"
    trace.to_csv(tmp_path / "trace.csv")
    lines = (tmp_path / "trace.csv").read_text().splitlines()
    assert lines[0] == "iter,mismatch,reg,grad_norm" and len(lines) == 5


def test_tolerance_stops_early(star):
    _, obf, events, reference = _star_release(star, m_shift=5.0)
    _, trace = postprocess(obf, reference, OptConfig(max_iters=50, tol=1.0), events)
    assert len(trace.mismatch) == 1


def _reachable_types(obj, seen=None):
    seen = set() if seen is None else seen
    if id(obj) in seen:
        return set()
    seen.add(id(obj))
    found = {type(obj)}
    children = []
    if hasattr(obj, "__dataclass_fields__"):
        children = [getattr(obj, f) for f in obj.__dataclass_fields__]
    elif isinstance(obj, (list, tuple)):
        children = list(obj)
    elif isinstance(obj, dict):
        children = list(obj.values())
    for c in children:
        found |= _reachable_types(c, seen)
    return found


def test_postprocess_inputs_exclude_source(ieee30):
    """The fit sees the release only; the source network is unreachable."""
    params = inspect.signature(postprocess).parameters
    assert list(params) == ["obf", "reference", "cfg", "events", "sim"]
    obf = dp_release(ieee30, PrivacyParams(0.5), seed=0)
    problem = fit_problem(obf, [LoadEvent.from_buses(0.0, 0.2 * ieee30.loads, ieee30.boundary, ieee30.interior)])
    assert NetworkModel not in _reachable_types(obf) | _reachable_types(problem)
    true = reduce_network(ieee30)
    for name in ("m", "d", "k_r"):
        assert not np.array_equal(getattr(problem.template, name), getattr(true, name))


def test_loss_trace_append():
    t = LossTrace()
    t.append(1.0, 0.5, 2.0, (True, False, False))
    assert t.clipped == [(True, False, False)] and t.mismatch == [1.0]
