"""Differentially private release of power-grid frequency-dynamics models."""
from .adjoint import LossTrace, OptConfig, Theta, postprocess
from .attack import RecoveryProblem, RecoveryReport, gauss_newton_recover, recover_star
from .dynamics import LoadEvent, SimConfig, Trajectory, simulate_full, simulate_reduced
from .grid import NetworkError, NetworkModel, bundled, load_network
from .kron import ReducedModel, kron_reduce, reduce_network
from .privacy import Bounds, PrivacyAccountant, PrivacyParams, dp_release

__version__ = "0.1.0"
