"""Experiment orchestration: release -> post-process -> fidelity, swept over (epsilon, replica)."""
from __future__ import annotations

import csv
import dataclasses
import json
import logging
import os
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field
from fractions import Fraction
from pathlib import Path
from typing import Sequence

import numpy as np

from .adjoint import LossTrace, OptConfig, postprocess
from .dynamics import LoadEvent, SimConfig, Trajectory, extract_frequencies, simulate_reduced
from .grid import NetworkModel, load_network, validate_network
from .kron import ReducedModel, reduce_network
from .privacy import Bounds, PrivacyParams, dp_release, release_manifest

log = logging.getLogger(__name__)

SEED_ENV = "GRIDVEIL_SEED"
TRANSIENT_SEED_OFFSET = 10**6
QUICK = {"replicas": 20, "max_iters": 150}


class ReplicaError(RuntimeError):
    def __init__(self, epsilon, replica, err):
        super().__init__(f"epsilon={epsilon} replica={replica}: {type(err).__name__}: {err}")
        self.epsilon, self.replica = epsilon, replica


@dataclass
class ExperimentConfig:
    network: str = "ieee30.json"
    dt: float = 0.01
    horizon: float = 30.0
    epsilons: list = field(default_factory=lambda: [0.5, 1.0, 2.0])
    alpha_k: float = 1.0
    alpha_m: float = 1.0
    alpha_d: float = 1.0
    split: list = field(default_factory=lambda: ["1/3", "1/3", "1/3"])
    eta: float = 100.0
    max_iters: int = 500
    rho: float = 1e-4
    tol: float | None = 1e-8
    k_bounds: list = field(default_factory=lambda: [1.0, 100.0])
    m_bounds: list = field(default_factory=lambda: [1.0, 40.0])
    d_bounds: list = field(default_factory=lambda: [1.0, 40.0])
    replicas: int = 100
    base_seed: int = 0
    transient_mode: str = "random"
    transient_count: int = 10
    transient_time: float = 10.0
    transient_magnitude: float = 1.0
    training_scale: float = 0.2
    training_time: float = 0.0
    reference: str | None = None
    governor_rate: float | None = None
    droop_is_inverse: bool | None = None
    output: str = "out"
    workers: int = 1
    save_trajectories: bool = False

    def __post_init__(self):
        if self.replicas < 1:
            raise ValueError("replicas must be >= 1")
        if self.transient_mode not in ("random", "preset"):
            raise ValueError(f"unknown transient mode {self.transient_mode!r}")
        self.epsilons = [float(e) for e in self.epsilons]

    @classmethod
    def from_dict(cls, data: dict) -> "ExperimentConfig":
        names = {f.name for f in dataclasses.fields(cls)}
        unknown = set(data) - names
        if unknown:
            raise ValueError(f"unknown config fields {sorted(unknown)}")
        return cls(**data)

    @classmethod
    def from_json(cls, path: str | Path) -> "ExperimentConfig":
        cfg = cls.from_dict(json.loads(Path(path).read_text()))
        base = Path(path).parent
        for attr in ("network", "reference"):
            value = getattr(cfg, attr)
            if value and not Path(value).is_absolute() and (base / value).exists():
                setattr(cfg, attr, str(base / value))
        return cfg

    def to_dict(self) -> dict:
        return dataclasses.asdict(self)

    def with_env(self) -> "ExperimentConfig":
        seed = os.environ.get(SEED_ENV)
        return dataclasses.replace(self, base_seed=int(seed)) if seed else self

    def quick(self) -> "ExperimentConfig":
        return dataclasses.replace(self, **QUICK)

    @property
    def sim(self) -> SimConfig:
        return SimConfig(self.dt, self.horizon)

    @property
    def bounds(self) -> Bounds:
        return Bounds(tuple(self.k_bounds), tuple(self.m_bounds), tuple(self.d_bounds))

    @property
    def opt(self) -> OptConfig:
        return OptConfig(eta=self.eta, max_iters=self.max_iters, rho=self.rho, bounds=self.bounds, tol=self.tol)

    def privacy(self, epsilon: float) -> PrivacyParams:
        return PrivacyParams(epsilon, self.alpha_k, self.alpha_m, self.alpha_d, tuple(Fraction(s) for s in self.split))

    def release_seed(self, replica: int) -> int:
        return self.base_seed + replica

    def transient_seed(self, replica: int) -> int:
        return self.base_seed + replica + TRANSIENT_SEED_OFFSET

    def load_model(self) -> NetworkModel:
        model = load_network(self.network)
        if self.governor_rate is not None:
            nodes = [dataclasses.replace(n, t=self.governor_rate) if n.is_generator else n for n in model.nodes]
            model = dataclasses.replace(model, nodes=nodes)
        if self.droop_is_inverse is not None:
            model = dataclasses.replace(model, droop_is_inverse=bool(self.droop_is_inverse))
        return validate_network(model)


# ---------------------------------------------------------------- transients

# (label, kind, buses, value): kind "scale" multiplies nominal loads,
# "add" adds p.u. at each bus, "shed" removes the full nominal load
FIG5_PRESET = (
    ("uniform +5%", "scale", None, 0.05),
    ("+0.2 p.u. at buses 3, 4", "add", (3, 4), 0.2),
    ("+0.2 p.u. at buses 5, 20", "add", (5, 20), 0.2),
    ("load loss at buses 10, 30", "shed", (10, 30), None),
    ("+0.5 p.u. at bus 1", "add", (1,), 0.5),
)


@dataclass(frozen=True)
class TransientSpec:
    mode: str = "random"
    count: int = 10
    time: float = 10.0
    magnitude: float = 1.0
    low: float = -0.3
    high: float = 0.5
    max_buses: int = 3

    @classmethod
    def of(cls, cfg: ExperimentConfig) -> "TransientSpec":
        return cls(cfg.transient_mode, cfg.transient_count, cfg.transient_time, cfg.transient_magnitude)


@dataclass
class Transient:
    label: str
    deltas: np.ndarray  # per bus, source network order
    time: float

    def events(self, model: NetworkModel) -> list[LoadEvent]:
        return [LoadEvent.from_buses(self.time, self.deltas, model.boundary, model.interior)]


def preset_transients(model: NetworkModel, time: float = 10.0, magnitude: float = 1.0) -> list[Transient]:
    pos = {node.id: i for i, node in enumerate(model.nodes)}
    out = []
    for label, kind, buses, value in FIG5_PRESET:
        deltas = np.zeros(model.n)
        if kind == "scale":
            deltas = value * model.loads
        else:
            for b in buses:
                if b not in pos:
                    raise ValueError(f"preset transient refers to missing bus {b}")
                deltas[pos[b]] = value if kind == "add" else -model.loads[pos[b]]
        out.append(Transient(label, magnitude * deltas, time))
    return out


def generate_transients(rng: np.random.Generator, spec: TransientSpec, model: NetworkModel) -> list[Transient]:
    """Preset Fig.-5 suite, or ``count`` random step loads on 1 to ``max_buses`` buses."""
    if spec.mode == "preset":
        return preset_transients(model, spec.time, spec.magnitude)
    out = []
    for i in range(spec.count):
        nbus = int(rng.integers(1, spec.max_buses + 1))
        buses = rng.choice(model.n, size=nbus, replace=False)
        deltas = np.zeros(model.n)
        deltas[buses] = rng.uniform(spec.low, spec.high, size=nbus)
        ids = ", ".join(str(model.nodes[b].id) for b in sorted(buses))
        out.append(Transient(f"random {i}: buses {ids}", spec.magnitude * deltas, spec.time))
    return out


# ---------------------------------------------------------------- fidelity


def trajectory_mismatch(a: np.ndarray, b: np.ndarray, dt: float) -> float:
    """Left-rectangle ``sum_n dt ||a_n - b_n||^2`` over frequency matrices ``(n, steps+1)``."""
    if a.shape != b.shape:
        raise ValueError(f"trajectory grids differ: {a.shape} vs {b.shape}")
    diff = a[:, :-1] - b[:, :-1]
    return float(dt * np.sum(diff * diff))


@dataclass
class FidelityEntry:
    mean: float
    per_transient: list[float]


def evaluate_fidelity(
    model_ref: ReducedModel, model_test: ReducedModel, suite: Sequence[list[LoadEvent]], sim: SimConfig = SimConfig()
) -> FidelityEntry:
    """Mean frequency mismatch of ``model_test`` against ``model_ref`` over a transient suite."""
    if model_ref.ids != model_test.ids or model_ref.k_ac.shape != model_test.k_ac.shape:
        raise ValueError("models are defined on different grids")
    values = []
    for events in suite:
        ref = extract_frequencies(simulate_reduced(model_ref, events, sim))
        test = extract_frequencies(simulate_reduced(model_test, events, sim))
        values.append(trajectory_mismatch(test, ref, sim.dt))
    return FidelityEntry(float(np.mean(values)) if values else 0.0, values)


@dataclass
class FidelityMetrics:
    """Rows ``(epsilon, replica, transient, L_lap, L_pp)`` plus summaries."""

    rows: list[tuple] = field(default_factory=list)

    def add(self, epsilon, replica, lap: FidelityEntry, pp: FidelityEntry) -> None:
        for t, (a, b) in enumerate(zip(lap.per_transient, pp.per_transient)):
            self.rows.append((epsilon, replica, t, a, b))

    def per_replica(self, epsilon) -> tuple[np.ndarray, np.ndarray]:
        reps = sorted({r[1] for r in self.rows if r[0] == epsilon})
        lap = np.array([np.mean([r[3] for r in self.rows if r[0] == epsilon and r[1] == k]) for k in reps])
        pp = np.array([np.mean([r[4] for r in self.rows if r[0] == epsilon and r[1] == k]) for k in reps])
        return lap, pp

    def summary(self) -> list[dict]:
        out = []
        for eps in sorted({r[0] for r in self.rows}):
            lap, pp = self.per_replica(eps)
            row = {"epsilon": eps, "replicas": lap.size}
            for name, v in (("L_lap", lap), ("L_pp", pp)):
                row[f"{name}_mean"] = float(v.mean())
                row[f"{name}_p10"] = float(np.percentile(v, 10))
                row[f"{name}_p90"] = float(np.percentile(v, 90))
            out.append(row)
        return out

    def write(self, path: str | Path) -> None:
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(["epsilon", "replica", "transient", "L_lap", "L_pp"])
            for eps, rep, t, a, b in self.rows:
                w.writerow([repr(float(eps)), rep, t, repr(float(a)), repr(float(b))])

    @classmethod
    def read(cls, path: str | Path) -> "FidelityMetrics":
        with open(path, newline="") as fh:
            rows = list(csv.DictReader(fh))
        return cls(
            [(float(r["epsilon"]), int(r["replica"]), int(r["transient"]), float(r["L_lap"]), float(r["L_pp"])) for r in rows]
        )


# ---------------------------------------------------------------- pipeline


def training_events(model: NetworkModel, cfg: ExperimentConfig) -> list[LoadEvent]:
    """Uniform step of ``training_scale`` times the nominal loads."""
    return [LoadEvent.from_buses(cfg.training_time, cfg.training_scale * model.loads, model.boundary, model.interior)]


def training_reference(truth: ReducedModel, model: NetworkModel, cfg: ExperimentConfig) -> np.ndarray:
    if cfg.reference:
        traj = Trajectory.from_csv(cfg.reference)
        if tuple(traj.ids) != tuple(truth.ids):
            raise ValueError(f"reference trajectory ids {traj.ids} do not match boundary {truth.ids}")
        return extract_frequencies(traj)
    return extract_frequencies(simulate_reduced(truth, training_events(model, cfg), cfg.sim))


@dataclass
class ReplicaResult:
    epsilon: float
    replica: int
    lap: FidelityEntry
    pp: FidelityEntry
    trace: LossTrace
    manifest: dict
    params: list[tuple]  # (class, index, true, laplace, postprocessed)
    trajectories: dict = field(default_factory=dict)


def run_pipeline(cfg: ExperimentConfig, epsilon: float, replica: int, model: NetworkModel | None = None) -> ReplicaResult:
    """Release, post-process and score one (epsilon, replica)."""
    try:
        model = cfg.load_model() if model is None else model
        truth = reduce_network(model)
        sim = cfg.sim
        train = training_events(model, cfg)
        reference = training_reference(truth, model, cfg)
        obf = dp_release(model, cfg.privacy(epsilon), cfg.bounds, seed=cfg.release_seed(replica))
        manifest = release_manifest(obf)
        theta, trace = postprocess(obf, reference, cfg.opt, train, sim)
        fitted = obf.reduced.with_params(theta.k, theta.m, theta.d)
        rng = np.random.default_rng(cfg.transient_seed(replica))
        suite = [t.events(model) for t in generate_transients(rng, TransientSpec.of(cfg), model)]
        lap = evaluate_fidelity(truth, obf.reduced, suite, sim)
        pp = evaluate_fidelity(truth, fitted, suite, sim)
    except Exception as err:  # noqa: BLE001 - re-raised with context
        raise ReplicaError(epsilon, replica, err) from err

    manifest.update(
        post_processed=True,
        accountant=release_manifest(obf)["accountant"],
        theta={"k_r": theta.k.tolist(), "m": theta.m.tolist(), "d": theta.d.tolist()},
        iterations=len(trace.mismatch) - 1,
        metrics={"L_lap": lap.mean, "L_pp": pp.mean},
    )
    params = []
    for cls, true, lap_v, pp_v in (
        ("k_r", truth.k_r, obf.k_r0, theta.k),
        ("m", truth.m, obf.m0, theta.m),
        ("d", truth.d, obf.d0, theta.d),
    ):
        params += [(cls, i, float(a), float(b), float(c)) for i, (a, b, c) in enumerate(zip(true, lap_v, pp_v))]
    trajs = {}
    if cfg.save_trajectories:
        trajs = {
            "reference": simulate_reduced(truth, train, sim),
            "laplace": simulate_reduced(obf.reduced, train, sim),
            "postprocessed": simulate_reduced(fitted, train, sim),
        }
    return ReplicaResult(epsilon, replica, lap, pp, trace, manifest, params, trajs)


def _job(args):
    cfg, eps, rep = args
    return run_pipeline(cfg, eps, rep)


def _eps_tag(eps: float) -> str:
    return f"{eps:g}"


def run_sweep(cfg: ExperimentConfig, out: str | Path | None = None) -> FidelityMetrics:
    """All (epsilon, replica) pipelines; outputs do not depend on ``workers``."""
    out = Path(out or cfg.output)
    out.mkdir(parents=True, exist_ok=True)
    jobs = [(cfg, eps, rep) for eps in cfg.epsilons for rep in range(cfg.replicas)]
    if cfg.workers > 1:
        with ProcessPoolExecutor(max_workers=cfg.workers) as pool:
            results = list(pool.map(_job, jobs))
    else:
        results = [_job(j) for j in jobs]
    results.sort(key=lambda r: (cfg.epsilons.index(r.epsilon), r.replica))

    metrics = FidelityMetrics()
    params: dict[float, list] = {}
    for res in results:
        tag = f"{_eps_tag(res.epsilon)}_{res.replica}"
        metrics.add(res.epsilon, res.replica, res.lap, res.pp)
        res.trace.to_csv(out / f"loss_trace_{tag}.csv")
        (out / f"manifest_{tag}.json").write_text(json.dumps(res.manifest, indent=1))
        params.setdefault(res.epsilon, []).extend(row + (res.replica,) for row in res.params)
        for name, traj in res.trajectories.items():
            traj.to_csv(out / f"trajectory_{name}_{tag}.csv")
    metrics.write(out / "metrics.csv")
    for eps, rows in params.items():
        with open(out / f"params_{_eps_tag(eps)}.csv", "w", newline="") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(["class", "index", "true", "laplace", "postprocessed", "replica"])
            for cls, i, a, b, c, rep in rows:
                w.writerow([cls, i, repr(a), repr(b), repr(c), rep])
    with open(out / "summary.csv", "w", newline="") as fh:
        rows = metrics.summary()
        w = csv.DictWriter(fh, fieldnames=list(rows[0]), lineterminator="\n")
        w.writeheader()
        w.writerows(rows)
    (out / "config.json").write_text(json.dumps(cfg.to_dict(), indent=1))
    return metrics
