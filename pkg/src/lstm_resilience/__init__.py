"""Resilience analysis for LSTM networks.

Forward-invariant state boxes, delta-ISS certificates, recovery-time bounds,
penalised training and a two-tank benchmark.
"""

from .invariant_set import GammaSequences, bounds, compute_sequences, eta_infinity_approx, membership
from .lstm_core import LstmLayerParams, LstmParams, LstmState, load_params, save_params, simulate, step, zero_state
from .recovery_time import RecoveryConfig, bound_recovery_time, empirical_recovery_time, rescale_tolerance
from .stability_cert import Certificate, beta_tilde, certify, induced_2norm, spectral_radius_2x2

__version__ = "0.1.0"

__all__ = [
    "Certificate",
    "GammaSequences",
    "LstmLayerParams",
    "LstmParams",
    "LstmState",
    "RecoveryConfig",
    "beta_tilde",
    "bound_recovery_time",
    "bounds",
    "certify",
    "compute_sequences",
    "empirical_recovery_time",
    "eta_infinity_approx",
    "induced_2norm",
    "load_params",
    "membership",
    "rescale_tolerance",
    "save_params",
    "simulate",
    "spectral_radius_2x2",
    "step",
    "zero_state",
]
