"""``gridveil`` command line."""
from __future__ import annotations

import argparse
import dataclasses
import json
import logging
import sys
import typing
from pathlib import Path

import numpy as np

from . import adjoint, attack, harness
from .dynamics import LoadEvent, SimConfig, Trajectory, extract_frequencies, simulate_full, simulate_reduced
from .grid import NetworkError, check_network, load_network
from .kron import ReducedModel, reduce_network
from .privacy import Bounds, PrivacyParams, dp_release, obfuscated_from_manifest, release_manifest

log = logging.getLogger("gridveil")


def _write_json(data, path):
    text = json.dumps(data, indent=1)
    if path in (None, "-"):
        print(text)
    else:
        Path(path).write_text(text + "\n")


def _parse_event(text: str, model) -> LoadEvent:
    """``TIME:BUS=DELTA,BUS=DELTA`` with bus ids and deltas in p.u."""
    time, _, body = text.partition(":")
    pos = {node.id: i for i, node in enumerate(model.nodes)}
    deltas = np.zeros(model.n)
    for item in filter(None, body.split(",")):
        bus, _, value = item.partition("=")
        if int(bus) not in pos:
            raise SystemExit(f"event refers to unknown bus {bus}")
        deltas[pos[int(bus)]] += float(value)
    return LoadEvent.from_buses(float(time), deltas, model.boundary, model.interior)


def _events(args, model) -> list[LoadEvent]:
    events = [_parse_event(e, model) for e in args.event or []]
    if args.uniform is not None:
        events.append(LoadEvent.from_buses(args.time, args.uniform * model.loads, model.boundary, model.interior))
    if args.preset is not None:
        events += harness.preset_transients(model, args.time)[args.preset].events(model)
    return sorted(events, key=lambda e: e.time)


def _add_event_args(p):
    p.add_argument("--event", action="append", help="step load TIME:BUS=DELTA[,BUS=DELTA...] (repeatable)")
    p.add_argument("--uniform", type=float, help="uniform step as a fraction of nominal loads")
    p.add_argument("--preset", type=int, choices=range(5), help="index into the five preset transients")
    p.add_argument("--time", type=float, default=0.0, help="activation time for --uniform/--preset")


def cmd_simulate(args) -> int:
    model = load_network(args.network)
    sim = SimConfig(args.dt, args.horizon)
    events = _events(args, model)
    if args.reduced:
        traj = simulate_reduced(ReducedModel.from_dict(json.loads(Path(args.reduced).read_text())), events, sim)
    elif args.mode == "reduced":
        traj = simulate_reduced(reduce_network(model), events, sim)
    else:
        traj = simulate_full(model, events, sim)
    traj.to_csv(args.out)
    return 0


def cmd_reduce(args) -> int:
    _write_json(reduce_network(load_network(args.network)).to_dict(), args.out)
    return 0


def cmd_release(args) -> int:
    model = load_network(args.network)
    params = PrivacyParams(args.epsilon, args.alpha_k, args.alpha_m, args.alpha_d)
    obf = dp_release(model, params, Bounds(), seed=args.seed)
    _write_json(release_manifest(obf), args.out)
    return 0


def cmd_postprocess(args) -> int:
    manifest = json.loads(Path(args.manifest).read_text())
    obf = obfuscated_from_manifest(manifest)
    model = load_network(args.network)  # only public loads are read from it
    sim = SimConfig(args.dt, args.horizon)
    events = _events(args, model) or [
        LoadEvent.from_buses(0.0, 0.2 * model.loads, model.boundary, model.interior)
    ]
    reference = extract_frequencies(Trajectory.from_csv(args.reference))
    cfg = adjoint.OptConfig(eta=args.eta, max_iters=args.max_iters, rho=args.rho, bounds=obf.bounds, tol=args.tol)
    theta, trace = adjoint.postprocess(obf, reference, cfg, events, sim)
    manifest.update(
        post_processed=True,
        accountant=release_manifest(obf)["accountant"],
        theta={"k_r": theta.k.tolist(), "m": theta.m.tolist(), "d": theta.d.tolist()},
        iterations=len(trace.mismatch) - 1,
    )
    _write_json(manifest, args.out)
    if args.trace:
        trace.to_csv(args.trace)
    return 0


def cmd_attack(args) -> int:
    data = json.loads(Path(args.reduced).read_text())
    if "reduced" in data:  # a release manifest
        data = data["reduced"]
    k_prime = np.asarray(data["k_r"], dtype=float)
    model = load_network(args.network)
    truth = model.weights if args.truth else None
    method = args.method
    if method == "auto":
        method = "star" if attack.is_star(model) else "gauss-newton"
    if method == "star":
        k_hat = attack.recover_star(k_prime)
        res = attack.recovery_residuals(k_hat, attack.RecoveryProblem.from_network(model, k_prime))
        report = attack.RecoveryReport(
            k_hat,
            float(np.linalg.norm(res)),
            attack.relative_error(k_hat, truth) if truth is not None else None,
            0,
            attack.RecoveryProblem.from_network(model, k_prime).determinacy,
        )
    else:
        problem = attack.RecoveryProblem.from_network(model, k_prime)
        report = attack.gauss_newton_recover(problem, np.ones(len(model.edges)), truth=truth)
    _write_json(report.to_dict(), args.out)
    return 0


def cmd_validate(args) -> int:
    try:
        model = load_network(args.network, validate=False)
    except NetworkError as err:
        print(f"{args.network}: {err}")
        return 1
    errors = check_network(model)
    for err in errors:
        print(f"{args.network}: {err}")
    if not errors:
        print(f"{args.network}: ok ({model.n} nodes, {len(model.edges)} edges, {len(model.boundary)} boundary)")
    return 1 if errors else 0


def _config_type(f: dataclasses.Field):
    hint = typing.get_type_hints(harness.ExperimentConfig)[f.name]
    args = [a for a in typing.get_args(hint) if a is not type(None)]
    base = args[0] if args else hint
    if base is bool:
        return {"type": lambda s: s.lower() in ("1", "true", "yes", "on")}
    if base is list:
        kind = str if f.name == "split" else float
        return {"type": kind, "nargs": "+"}
    return {"type": base}


def _add_config_args(p):
    for f in dataclasses.fields(harness.ExperimentConfig):
        flags = [f"--{f.name}"] + ([f"--{f.name.replace('_', '-')}"] if "_" in f.name else [])
        p.add_argument(*flags, dest=f.name, default=None, **_config_type(f))


def cmd_sweep(args) -> int:
    cfg = harness.ExperimentConfig.from_json(args.config) if args.config else harness.ExperimentConfig()
    if args.quick:
        cfg = cfg.quick()
    cfg = cfg.with_env()
    overrides = {f.name: getattr(args, f.name) for f in dataclasses.fields(cfg) if getattr(args, f.name) is not None}
    cfg = dataclasses.replace(cfg, **overrides)
    metrics = harness.run_sweep(cfg)
    for row in metrics.summary():
        print(
            f"epsilon={row['epsilon']:g}  L_lap={row['L_lap_mean']:.3e}  L_pp={row['L_pp_mean']:.3e}  "
            f"({row['replicas']} replicas)"
        )
    return 0


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="gridveil", description="DP release of grid frequency-dynamics models")
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("simulate", help="simulate a network and write a trajectory CSV")
    p.add_argument("network")
    p.add_argument("--mode", choices=("full", "reduced"), default="full")
    p.add_argument("--reduced", help="ReducedModel JSON to simulate instead of the network")
    p.add_argument("--dt", type=float, default=0.01)
    p.add_argument("--horizon", type=float, default=30.0)
    p.add_argument("-o", "--out", required=True)
    _add_event_args(p)
    p.set_defaults(func=cmd_simulate)

    p = sub.add_parser("reduce", help="Kron-reduce a network to ReducedModel JSON")
    p.add_argument("network")
    p.add_argument("-o", "--out", default="-")
    p.set_defaults(func=cmd_reduce)

    p = sub.add_parser("release", help="DP release of a network (manifest JSON)")
    p.add_argument("network")
    p.add_argument("--epsilon", type=float, required=True)
    p.add_argument("--alpha-k", "--alpha_k", dest="alpha_k", type=float, default=1.0)
    p.add_argument("--alpha-m", "--alpha_m", dest="alpha_m", type=float, default=1.0)
    p.add_argument("--alpha-d", "--alpha_d", dest="alpha_d", type=float, default=1.0)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("-o", "--out", default="-")
    p.set_defaults(func=cmd_release)

    p = sub.add_parser("postprocess", help="fit a release to a public reference trajectory")
    p.add_argument("manifest")
    p.add_argument("--reference", required=True, help="trajectory CSV of the public training event")
    p.add_argument("--network", required=True, help="network file supplying the public nominal loads")
    p.add_argument("--eta", type=float, default=100.0)
    p.add_argument("--max-iters", "--max_iters", dest="max_iters", type=int, default=500)
    p.add_argument("--rho", type=float, default=1e-4)
    p.add_argument("--tol", type=float, default=None)
    p.add_argument("--dt", type=float, default=0.01)
    p.add_argument("--horizon", type=float, default=30.0)
    p.add_argument("--trace", help="write the LossTrace CSV here")
    p.add_argument("-o", "--out", default="-")
    _add_event_args(p)
    p.set_defaults(func=cmd_postprocess)

    p = sub.add_parser("attack", help="recover original weights from a reduced model or manifest")
    p.add_argument("reduced")
    p.add_argument("--network", required=True, help="network with the assumed original topology")
    p.add_argument("--truth", action="store_true", help="report error against the network's weights")
    p.add_argument("--method", choices=("auto", "star", "gauss-newton"), default="auto")
    p.add_argument("-o", "--out", default="-")
    p.set_defaults(func=cmd_attack)

    p = sub.add_parser("sweep", help="run the (epsilon, replica) experiment")
    p.add_argument("--config", help="ExperimentConfig JSON")
    p.add_argument("--quick", action="store_true", help=f"CI profile {harness.QUICK}")
    _add_config_args(p)
    p.set_defaults(func=cmd_sweep)

    p = sub.add_parser("validate", help="lint a network file")
    p.add_argument("network")
    p.set_defaults(func=cmd_validate)
    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.DEBUG if args.verbose else logging.WARNING, format="%(levelname)s %(message)s")
    try:
        return args.func(args)
    except (ValueError, RuntimeError, OSError) as err:
        print(f"error: {err}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
