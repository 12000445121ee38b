"""Exception hierarchy shared by the spectral lab modules.

Every error carries the pipeline ``stage`` that raised it so the command line
driver can report where an experiment stopped and pick an exit code.
"""


class SpectralLabError(Exception):
    """Base class for all errors raised by the lab."""

    exit_code = 1

    def __init__(self, message: str, stage: str = "library"):
        super().__init__(message)
        self.stage = stage

    def __str__(self) -> str:
        return f"[{self.stage}] {self.args[0]}"


class DomainError(SpectralLabError, ValueError):
    """An argument lies outside the domain of an operation."""


class DerivativeUnavailableError(DomainError):
    """A time derivative beyond the sampler's declared order was requested."""

    def __init__(self, order: int, max_order: int, stage: str = "sampler"):
        super().__init__(
            f"derivative unavailable: order {order} requested, sampler declares {max_order}",
            stage,
        )


class HermiticityError(SpectralLabError):
    """A generator or counter-term failed its symmetry check."""


class PeriodicityError(SpectralLabError):
    """A generator declared periodic is not periodic at the sampled times."""


class InsufficientDataError(SpectralLabError):
    """Too few samples (or too short a time span) for a fit."""


class ConfigError(SpectralLabError):
    exit_code = 2


class ModelValidationError(SpectralLabError):
    """A model failed its own spectral self-validation."""

    exit_code = 3


class ClusterEscapeError(SpectralLabError):
    """An eigenvalue of a level operator left its assigned cluster."""

    exit_code = 4

    def __init__(self, message: str, m: int | None = None, t: float | None = None,
                 j: int | None = None, stage: str = "adiabatic"):
        details = ", ".join(
            f"{name}={value}" for name, value in (("m", m), ("t", t), ("j", j)) if value is not None
        )
        super().__init__(f"{message} ({details})" if details else message, stage)
        self.m = m
        self.t = t
        self.j = j


class StateBlowUpError(SpectralLabError):
    exit_code = 5
