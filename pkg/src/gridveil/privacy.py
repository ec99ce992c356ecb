"""Laplace mechanism, two-step DP release of a grid model and a privacy accountant."""
from __future__ import annotations

import math
from dataclasses import dataclass, field
from fractions import Fraction
from typing import Sequence

import numpy as np

from .grid import NetworkModel, validate_network
from .kron import ReducedModel, reduce_network

NON_PRIVATE = math.inf

# fixed labels for RNG sub-streams; new parameter classes get new labels
STREAM_LABELS = {"inertia": 1, "damping": 2, "network": 3}


def _fraction(x) -> Fraction:
    return x if isinstance(x, Fraction) else Fraction(x).limit_denominator(10**6)


@dataclass(frozen=True)
class PrivacyParams:
    epsilon: float
    alpha_k: float = 1.0
    alpha_m: float = 1.0
    alpha_d: float = 1.0
    # budget fractions for (inertia, damping, network)
    split: tuple = (Fraction(1, 3), Fraction(1, 3), Fraction(1, 3))

    def __post_init__(self):
        if not self.epsilon > 0:
            raise ValueError("epsilon must be positive")
        if min(self.alpha_k, self.alpha_m, self.alpha_d) <= 0:
            raise ValueError("adjacency parameters must be positive")
        fracs = tuple(_fraction(s) for s in self.split)
        if len(fracs) != 3 or min(fracs) <= 0 or sum(fracs) != 1:
            raise ValueError(f"budget split {self.split} must be three positive fractions summing to 1")
        object.__setattr__(self, "split", fracs)

    @property
    def private(self) -> bool:
        return math.isfinite(self.epsilon)

    def exact_budget(self, release: str):
        """Privacy loss assigned to ``release`` (``inertia``, ``damping`` or ``network``)."""
        if not self.private:
            return NON_PRIVATE
        return Fraction(self.epsilon) * self.split[("inertia", "damping", "network").index(release)]

    def budget(self, release: str) -> float:
        return float(self.exact_budget(release))

    def scale(self, release: str) -> float:
        alpha = {"inertia": self.alpha_m, "damping": self.alpha_d, "network": self.alpha_k}[release]
        return alpha / self.budget(release) if self.private else 0.0


@dataclass(frozen=True)
class Bounds:
    k: tuple[float, float] = (1.0, 100.0)
    m: tuple[float, float] = (1.0, 40.0)
    d: tuple[float, float] = (1.0, 40.0)

    def __post_init__(self):
        for name in ("k", "m", "d"):
            lo, hi = getattr(self, name)
            if not 0 < lo < hi:
                raise ValueError(f"bounds for {name} must satisfy 0 < lower < upper, got {(lo, hi)}")

    def to_dict(self) -> dict:
        return {"k": list(self.k), "m": list(self.m), "d": list(self.d)}

    @classmethod
    def from_dict(cls, data: dict) -> "Bounds":
        return cls(**{key: tuple(val) for key, val in data.items()})


def project(x, bounds: tuple[float, float]) -> np.ndarray:
    return np.clip(np.asarray(x, dtype=float), bounds[0], bounds[1])


class PrivacyAccountant:
    """Sequential-composition ledger; post-processing entries cost nothing.

    Consumption is tracked with exact rationals so that splitting
    ``epsilon`` into fractions adds back up to exactly ``epsilon``.
    """

    def __init__(self):
        self.entries: list[dict] = []
        self._total = Fraction(0)
        self._infinite = False

    def _log(self, label, eps, adjacency, kind):
        self.entries.append(
            {"label": label, "epsilon": eps, "adjacency": adjacency, "kind": kind, "timestamp": len(self.entries)}
        )

    def spend(self, label: str, epsilon, adjacency: float) -> None:
        if math.isinf(epsilon):
            self._infinite = True
            self._log(label, NON_PRIVATE, adjacency, "non-private")
            return
        eps = Fraction(epsilon)
        if eps <= 0:
            raise ValueError("a DP release must consume positive epsilon")
        self._total += eps
        self._log(label, float(eps), adjacency, "laplace")

    def post_process(self, label: str) -> None:
        self._log(label, 0.0, None, "post-processing")

    @property
    def total(self) -> float:
        return NON_PRIVATE if self._infinite else float(self._total)

    @property
    def exact_total(self):
        """Consumed budget as an exact rational (``inf`` when non-private)."""
        return NON_PRIVATE if self._infinite else self._total

    def to_list(self) -> list[dict]:
        return [dict(e) for e in self.entries]

    @classmethod
    def from_list(cls, entries: Sequence[dict]) -> "PrivacyAccountant":
        acc = cls()
        for e in entries:
            if e["kind"] == "post-processing":
                acc.post_process(e["label"])
            else:
                acc.spend(e["label"], float(e["epsilon"]), e["adjacency"])
        return acc


def laplace_sample(scale: float, n: int, rng: np.random.Generator) -> np.ndarray:
    """``n`` i.i.d. zero-mean Laplace draws by inverse CDF."""
    if scale < 0:
        raise ValueError("Laplace scale must be non-negative")
    u = rng.random(n) - 0.5
    if scale == 0:
        return np.zeros(n)
    tail = np.maximum(1.0 - 2.0 * np.abs(u), np.finfo(float).tiny)
    return -scale * np.sign(u) * np.log(tail)


def substream(seed: int, label: str) -> np.random.Generator:
    return np.random.default_rng(np.random.SeedSequence([int(seed), STREAM_LABELS[label]]))


def _check_source(x: np.ndarray, bounds: tuple[float, float], name: str) -> None:
    if np.any(x < bounds[0]) or np.any(x > bounds[1]):
        raise ValueError(f"source {name} lies outside its bounds {bounds}")


def obfuscate_inertia_damping(m, d, params: PrivacyParams, bounds: Bounds, rng):
    """Perturb inertia and damping with Laplace noise and clip to ``bounds``.

    ``rng`` is a single generator (inertia drawn first) or a pair
    ``(rng_inertia, rng_damping)``.
    """
    m = np.asarray(m, dtype=float)
    d = np.asarray(d, dtype=float)
    _check_source(m, bounds.m, "inertia")
    _check_source(d, bounds.d, "damping")
    rng_m, rng_d = rng if isinstance(rng, tuple) else (rng, rng)
    m0 = project(m + laplace_sample(params.scale("inertia"), m.size, rng_m), bounds.m)
    d0 = project(d + laplace_sample(params.scale("damping"), d.size, rng_d), bounds.d)
    return m0, d0


def obfuscate_network(k, params: PrivacyParams, bounds: Bounds, rng: np.random.Generator) -> np.ndarray:
    k = np.asarray(k, dtype=float)
    if np.any(k <= 0):
        raise ValueError("edge weights must be positive")
    return project(k + laplace_sample(params.scale("network"), k.size, rng), bounds.k)


@dataclass
class ObfuscatedModel:
    """Public output of the DP release.  Holds nothing derived from the source
    model other than through the Laplace mechanism (``t`` and ``r`` are public).
    """

    reduced: ReducedModel  # Kron reduction of the perturbed network, perturbed m/d
    k0: np.ndarray  # perturbed full-network edge weights
    params: PrivacyParams
    bounds: Bounds
    seed: int
    accountant: PrivacyAccountant = field(default_factory=PrivacyAccountant)

    @property
    def m0(self) -> np.ndarray:
        return self.reduced.m

    @property
    def d0(self) -> np.ndarray:
        return self.reduced.d

    @property
    def k_r0(self) -> np.ndarray:
        return self.reduced.k_r

    @property
    def k_ac0(self) -> np.ndarray:
        return self.reduced.k_ac


def dp_release(model: NetworkModel, params: PrivacyParams, bounds: Bounds = Bounds(), seed: int = 0) -> ObfuscatedModel:
    """Steps 1-2: Laplace obfuscation of (m, d, k), then Kron reduction."""
    validate_network(model)
    g = model.boundary
    acc = PrivacyAccountant()
    m0, d0 = obfuscate_inertia_damping(
        model.node_array("m", g),
        model.node_array("d", g),
        params,
        bounds,
        (substream(seed, "inertia"), substream(seed, "damping")),
    )
    acc.spend("inertia", params.exact_budget("inertia"), params.alpha_m)
    acc.spend("damping", params.exact_budget("damping"), params.alpha_d)
    k0 = obfuscate_network(model.weights, params, bounds, substream(seed, "network"))
    acc.spend("network", params.exact_budget("network"), params.alpha_k)
    reduced = reduce_network(model, k0).with_params(m=m0, d=d0)
    acc.post_process("kron-reduction")
    return ObfuscatedModel(reduced=reduced, k0=k0, params=params, bounds=bounds, seed=seed, accountant=acc)


def laplace_log_density_ratio(x, x_adj, outcome, scale: float, alpha: float | None = None) -> float:
    """``|log f(outcome - x) / f(outcome - x_adj)|`` for the product Laplace density."""
    x = np.atleast_1d(np.asarray(x, dtype=float))
    x_adj = np.atleast_1d(np.asarray(x_adj, dtype=float))
    outcome = np.atleast_1d(np.asarray(outcome, dtype=float))
    diff = np.abs(x - x_adj)
    if np.count_nonzero(diff) > 1:
        raise ValueError("inputs differ in more than one coordinate; not adjacent")
    if alpha is not None and diff.max(initial=0.0) > alpha * (1 + 1e-12):
        raise ValueError(f"inputs differ by {diff.max()} > alpha = {alpha}; not adjacent")
    if not scale > 0:
        raise ValueError("scale must be positive")
    return float(abs(np.sum(np.abs(outcome - x_adj) - np.abs(outcome - x)) / scale))


def _eps_json(eps):
    return "inf" if math.isinf(eps) else eps


def _eps_from_json(value) -> float:
    return math.inf if value in ("inf", "Infinity", None) else float(value)


def release_manifest(obf: ObfuscatedModel) -> dict:
    """JSON-ready record of a release; the unit of reproducibility."""
    p = obf.params
    return {
        "seed": obf.seed,
        "epsilon": _eps_json(p.epsilon),
        "alphas": {"k": p.alpha_k, "m": p.alpha_m, "d": p.alpha_d},
        "split": [str(s) for s in p.split],
        "bounds": obf.bounds.to_dict(),
        "accountant": [dict(e, epsilon=_eps_json(e["epsilon"])) for e in obf.accountant.to_list()],
        "epsilon_spent": _eps_json(obf.accountant.total),
        "k0": obf.k0.tolist(),
        "reduced": obf.reduced.to_dict(),
        "post_processed": False,
    }


def obfuscated_from_manifest(data: dict) -> ObfuscatedModel:
    a = data["alphas"]
    params = PrivacyParams(
        _eps_from_json(data["epsilon"]), a["k"], a["m"], a["d"], tuple(Fraction(s) for s in data["split"])
    )
    entries = [dict(e, epsilon=_eps_from_json(e["epsilon"])) for e in data["accountant"]]
    return ObfuscatedModel(
        reduced=ReducedModel.from_dict(data["reduced"]),
        k0=np.asarray(data["k0"], dtype=float),
        params=params,
        bounds=Bounds.from_dict(data["bounds"]),
        seed=int(data["seed"]),
        accountant=PrivacyAccountant.from_list(entries),
    )
