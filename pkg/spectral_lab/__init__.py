"""Sobolev norm growth experiments for time-dependent perturbations of discrete-spectrum operators."""
from spectral_lab.errors import (
    ClusterEscapeError,
    ConfigError,
    DerivativeUnavailableError,
    DomainError,
    HermiticityError,
    InsufficientDataError,
    ModelValidationError,
    PeriodicityError,
    SpectralLabError,
    StateBlowUpError,
)
from spectral_lab.spectral_core import Envelope, OperatorMatrix, OperatorSampler, SpectralModel, StateVector

__all__ = [
    "ClusterEscapeError",
    "ConfigError",
    "DerivativeUnavailableError",
    "DomainError",
    "Envelope",
    "HermiticityError",
    "InsufficientDataError",
    "ModelValidationError",
    "OperatorMatrix",
    "OperatorSampler",
    "PeriodicityError",
    "SpectralLabError",
    "SpectralModel",
    "StateBlowUpError",
    "StateVector",
]
