"""JSON experiment files parsed into frozen dataclasses.

Unknown keys at any level are rejected so that a typo never silently falls
back to a default.
"""
import json
import logging
from dataclasses import asdict, dataclass, field, fields, replace
from pathlib import Path
from typing import Optional, Tuple

from spectral_lab.errors import ConfigError, SpectralLabError
from spectral_lab.models import DriveTerm, LatticeDrive, ModelSpec
from spectral_lab.propagator import PropagatorConfig
from spectral_lab.spectral_core import Envelope

logger = logging.getLogger(__name__)

SCHEMA_VERSION = 1
FIT_REGIMES = ("polynomial", "exponential", "loglog")
INITIAL_KINDS = ("mode", "gaussian", "band_limited", "delta")


@dataclass(frozen=True)
class InitialStateConfig:
    kind: str = "mode"
    index: int = 0
    center: float = 0.0
    width: float = 1.0
    band: Optional[int] = None
    site: Optional[Tuple[int, ...]] = None

    def __post_init__(self):
        if self.kind not in INITIAL_KINDS:
            raise ConfigError(f"unknown initial state kind '{self.kind}', expected one of {INITIAL_KINDS}", "config")


@dataclass(frozen=True)
class AdiabaticConfig:
    """Depth M directly, or through the target exponent epsilon."""

    M: Optional[int] = None
    epsilon: Optional[float] = None
    J: Optional[int] = None
    n_nodes: int = 16
    window: Optional[Tuple[float, float]] = None
    p_list: Tuple[float, ...] = (0.0, 1.0)
    n_vectors: int = 200
    check_points: int = 4
    duhamel: bool = True

    def __post_init__(self):
        if (self.M is None) == (self.epsilon is None):
            raise ConfigError("adiabatic section needs exactly one of 'M' and 'epsilon'", "config")
        if self.M is not None and self.M < 0:
            raise ConfigError(f"adiabatic depth M={self.M} must be nonnegative", "config")
        if self.epsilon is not None and self.epsilon <= 0:
            raise ConfigError(f"epsilon={self.epsilon} must be positive", "config")


@dataclass(frozen=True)
class FitConfig:
    regime: str = "polynomial"
    t_min: float = 0.0
    k: Optional[float] = None
    tau: Optional[float] = None
    epsilons: Tuple[float, ...] = ()

    def __post_init__(self):
        if self.regime not in FIT_REGIMES:
            raise ConfigError(f"unknown fit regime '{self.regime}', expected one of {FIT_REGIMES}", "config")


@dataclass(frozen=True)
class FloquetConfig:
    period: Optional[float] = None
    check_points: int = 16


@dataclass(frozen=True)
class OutputConfig:
    directory: str = "results"
    spectrum: str = "spectrum.csv"
    clusters: str = "clusters.json"
    trajectory: str = "trajectory.csv"
    fit: str = "fit.json"
    epsilon: str = "epsilon.csv"
    hierarchy: str = "hierarchy.json"
    floquet: str = "floquet.csv"

    def path(self, name: str) -> Path:
        return Path(self.directory) / getattr(self, name)


@dataclass(frozen=True)
class ExperimentConfig:
    model: ModelSpec
    propagation: PropagatorConfig = field(default_factory=PropagatorConfig)
    sobolev_ks: Tuple[float, ...] = (1.0,)
    initial_state: InitialStateConfig = field(default_factory=InitialStateConfig)
    adiabatic: Optional[AdiabaticConfig] = None
    fit: FitConfig = field(default_factory=FitConfig)
    floquet: Optional[FloquetConfig] = None
    output: OutputConfig = field(default_factory=OutputConfig)
    seed: int = 0
    threads: Optional[int] = None
    schema_version: int = SCHEMA_VERSION

    def __post_init__(self):
        if not self.sobolev_ks or any(k < 0 for k in self.sobolev_ks):
            raise ConfigError(f"sobolev_ks must be nonempty and nonnegative, got {self.sobolev_ks}", "config")
        s, t = self.propagation.t_span
        if not min(s, t) <= self.fit.t_min < max(s, t):
            raise ConfigError(f"fit window t_min={self.fit.t_min} outside t_span {self.propagation.t_span}", "config")
        if self.fit.k is not None and self.fit.k not in self.sobolev_ks:
            raise ConfigError(f"fit.k={self.fit.k} is not among sobolev_ks {self.sobolev_ks}", "config")

    @property
    def fit_ks(self) -> Tuple[float, ...]:
        return self.sobolev_ks if self.fit.k is None else (self.fit.k,)

    def to_dict(self) -> dict:
        return asdict(self)


def _section(cls, data, name: str, convert: Optional[dict] = None):
    """Instantiate ``cls`` from a JSON object, rejecting keys it does not declare."""
    if not isinstance(data, dict):
        raise ConfigError(f"section '{name}' must be an object", "config")
    allowed = {f.name for f in fields(cls)}
    unknown = sorted(set(data) - allowed)
    if unknown:
        raise ConfigError(f"unknown key(s) in '{name}': {', '.join(unknown)}", "config")
    values = dict(data)
    for key, function in (convert or {}).items():
        if key in values and values[key] is not None:
            values[key] = function(values[key])
    try:
        return cls(**values)
    except ConfigError:
        raise
    except (TypeError, ValueError, SpectralLabError) as exc:
        raise ConfigError(f"invalid section '{name}': {exc}", "config") from exc


def _envelope(data) -> Envelope:
    return _section(Envelope, data, "envelope", {"coefficients": tuple})


def _drive(items) -> Tuple[DriveTerm, ...]:
    if not isinstance(items, list):
        raise ConfigError("model.drive must be a list of terms", "config")
    return tuple(_section(DriveTerm, item, "drive", {"envelope": _envelope}) for item in items)


def parse_config(data: dict) -> ExperimentConfig:
    """Build an ExperimentConfig from a decoded JSON document."""
    if not isinstance(data, dict):
        raise ConfigError("experiment file must hold a JSON object", "config")
    version = data.get("schema_version")
    if version != SCHEMA_VERSION:
        raise ConfigError(f"unsupported schema_version {version!r}, expected {SCHEMA_VERSION}", "config")
    allowed = {f.name for f in fields(ExperimentConfig)}
    unknown = sorted(set(data) - allowed)
    if unknown:
        raise ConfigError(f"unknown top-level key(s): {', '.join(unknown)}", "config")
    if "model" not in data:
        raise ConfigError("experiment file has no 'model' section", "config")

    seed = data.get("seed", 0)
    if not isinstance(seed, int):
        raise ConfigError(f"seed must be an integer, got {seed!r}", "config")
    model_data = dict(data["model"]) if isinstance(data["model"], dict) else data["model"]
    if isinstance(model_data, dict) and isinstance(model_data.get("lattice_drive"), dict):
        model_data["lattice_drive"] = {"seed": seed, **model_data["lattice_drive"]}
    model = _section(ModelSpec, model_data, "model", {
        "p_coefficients": tuple,
        "drive": _drive,
        "lattice_drive": lambda value: _section(LatticeDrive, value, "lattice_drive"),
    })
    sections = {
        "propagation": lambda value: _section(PropagatorConfig, value, "propagation", {"t_span": tuple}),
        "initial_state": lambda value: _section(InitialStateConfig, value, "initial_state", {"site": tuple}),
        "adiabatic": lambda value: _section(AdiabaticConfig, value, "adiabatic",
                                            {"window": tuple, "p_list": tuple}),
        "fit": lambda value: _section(FitConfig, value, "fit", {"epsilons": tuple}),
        "floquet": lambda value: _section(FloquetConfig, value, "floquet"),
        "output": lambda value: _section(OutputConfig, value, "output"),
    }
    values = {"model": model, "seed": seed, "schema_version": version}
    for name, parse in sections.items():
        if data.get(name) is not None:
            values[name] = parse(data[name])
    if "sobolev_ks" in data:
        values["sobolev_ks"] = tuple(float(k) for k in data["sobolev_ks"])
    if data.get("threads") is not None:
        values["threads"] = int(data["threads"])
    try:
        return ExperimentConfig(**values)
    except ConfigError:
        raise
    except (TypeError, ValueError, SpectralLabError) as exc:
        raise ConfigError(f"invalid experiment: {exc}", "config") from exc


def load_config(path) -> ExperimentConfig:
    path = Path(path)
    try:
        with path.open() as handle:
            data = json.load(handle)
    except FileNotFoundError as exc:
        raise ConfigError(f"config file not found: {path}", "config") from exc
    except json.JSONDecodeError as exc:
        raise ConfigError(f"config file {path} is not valid JSON: {exc}", "config") from exc
    config = parse_config(data)
    logger.info("loaded %s experiment from %s", config.model.kind, path)
    return config


def with_overrides(config: ExperimentConfig, seed: Optional[int] = None, out: Optional[str] = None,
                   threads: Optional[int] = None) -> ExperimentConfig:
    """Apply command-line overrides; a seed override also reseeds the lattice drive."""
    if seed is not None:
        model = config.model
        if model.kind == "lattice":
            model = replace(model, lattice_drive=replace(model.lattice_drive, seed=seed))
        config = replace(config, seed=seed, model=model)
    if out is not None:
        config = replace(config, output=replace(config.output, directory=str(out)))
    if threads is not None:
        config = replace(config, threads=threads)
    return config
