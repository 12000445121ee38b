"""Experiment driver: config ingestion, orchestration, growth fits and result files."""
import argparse
import json
import logging
from concurrent.futures import ThreadPoolExecutor
from dataclasses import asdict, dataclass, replace
from pathlib import Path
from typing import Dict, List, Optional, Sequence

import numpy as np
import pandas as pd
from scipy.stats import linregress

from spectral_lab.adiabatic import adiabatic_propagate, build_hierarchy, duhamel_compare, norm_equivalence
from spectral_lab.clusters import (
    choose_constants_smooth,
    delta_exponent,
    detect_clusters,
    dyadic_regroup,
    json_float,
)
from spectral_lab.errors import (
    ConfigError,
    DomainError,
    InsufficientDataError,
    ModelValidationError,
    SpectralLabError,
)
from spectral_lab.experiment_config import ExperimentConfig, load_config, with_overrides
from spectral_lab.models import BuiltModel, build_model, initial_state
from spectral_lab.propagator import Trajectory, bound_verdict, floquet_operator, propagate
from spectral_lab.spectral_core import OperatorSampler

logger = logging.getLogger(__name__)

COMMANDS = ("spectrum", "clusters", "propagate", "adiabatic", "growth", "floquet")
MIN_FIT_POINTS = 10
STABILITY_TOL = 0.02


@dataclass(frozen=True)
class FitReport:
    """Fitted growth exponent (or rate) with its standard error and the bound it is held against."""

    regime: str
    value: float
    stderr: float
    bound: Optional[float]
    verdict: str
    n_points: int
    t_min: float
    k: Optional[float] = None
    reference: Optional[float] = None

    def to_dict(self) -> dict:
        return {key: json_float(value) for key, value in asdict(self).items()}


def fit_growth(times: Sequence[float], norms: Sequence[float], regime: str = "polynomial",
               t_min: Optional[float] = None, bound: Optional[float] = None, s: Optional[float] = None,
               k: Optional[float] = None, min_points: int = MIN_FIT_POINTS) -> FitReport:
    """Least-squares growth fit of log‖ψ(t)‖ on the samples with t at or past t_min.

    Regressors per regime: log⟨t-s⟩ (polynomial), t - s (exponential) and
    log log⟨t-s⟩ (loglog). The polynomial and loglog fits need ⟨t-s⟩ to span a
    decade.
    """
    times = np.asarray(times, dtype=float)
    norms = np.asarray(norms, dtype=float)
    if times.shape != norms.shape:
        raise DomainError(f"{times.size} times for {norms.size} norms", "growth_cli")
    s = float(times[0]) if s is None else s
    elapsed = np.abs(times - s)
    start = 0.0 if t_min is None else abs(t_min - s)
    keep = (elapsed >= start - 1e-12) & (norms > 0)
    if regime == "loglog":
        keep &= elapsed > 0
    if keep.sum() < min_points:
        raise InsufficientDataError(
            f"insufficient span: {int(keep.sum())} points past t_min, need {min_points}", "growth_cli")
    bracket = np.sqrt(1.0 + elapsed[keep] ** 2)
    if regime == "polynomial":
        x = np.log(bracket)
    elif regime == "exponential":
        x = elapsed[keep]
    elif regime == "loglog":
        x = np.log(np.log(bracket))
    else:
        raise DomainError(f"unknown fit regime '{regime}'", "growth_cli")
    if regime != "exponential" and bracket.max() / bracket.min() < 10.0:
        raise InsufficientDataError(
            f"insufficient span: <t-s> covers {bracket.min():.3g}..{bracket.max():.3g}, less than a decade",
            "growth_cli")
    fit = linregress(x, np.log(norms[keep]))
    verdict = bound_verdict(fit.slope, fit.stderr, bound) if bound is not None else "inconclusive"
    report = FitReport(regime, float(fit.slope), float(fit.stderr), bound, verdict, int(keep.sum()),
                       float(s if t_min is None else t_min), k)
    logger.info("%s fit k=%s: %.4f ± %.4f (bound %s) -> %s", regime, k, fit.slope, fit.stderr, bound, verdict)
    return report


def compare_epsilon_bound(traj: Trajectory, k: float, epsilon_list: Sequence[float],
                          t_min: Optional[float] = None) -> pd.DataFrame:
    """Smallest C with ‖ψ(t)‖_k ≤ C⟨t-s⟩^ε‖ψ_s‖_k over the window, per ε.

    C is also taken over the first half of the window; ``stabilized`` says the
    second half did not raise it by more than 2%.
    """
    norms = traj.norm_series(k)
    s = traj.times[0]
    elapsed = np.abs(traj.times - s)
    keep = elapsed >= (0.0 if t_min is None else abs(t_min - s))
    bracket = np.sqrt(1.0 + elapsed[keep] ** 2)
    relative = norms[keep] / norms[0]
    half = elapsed[keep] <= elapsed[keep].min() + 0.5 * (elapsed[keep].max() - elapsed[keep].min())
    rows = []
    for epsilon in epsilon_list:
        ratio = relative / bracket ** epsilon
        constant, early = float(ratio.max()), float(ratio[half].max())
        rows.append({"epsilon": float(epsilon), "C": constant, "C_half": early,
                     "stabilized": bool(constant <= (1.0 + STABILITY_TOL) * early)})
    return pd.DataFrame(rows)


def log_power_bound(k: float, mu: float, nu: float) -> float:
    """(k/2)(μ/(μ+1) - ν)^{-1}."""
    margin = mu / (mu + 1) - nu
    if margin <= 0:
        raise DomainError(f"perturbation order too high: nu={nu} >= mu/(mu+1)={mu / (mu + 1):.6g}", "growth_cli")
    return 0.5 * k / margin


def _json_default(value):
    if isinstance(value, np.generic):
        return value.item()
    if isinstance(value, np.ndarray):
        return value.tolist()
    if isinstance(value, pd.DataFrame):
        return value.to_dict(orient="records")
    raise TypeError(f"{type(value).__name__} is not JSON serializable")


def _write_json(path: Path, payload: dict) -> Path:
    with path.open("w") as handle:
        json.dump(payload, handle, indent=2, default=_json_default)
    return path


def _initial(cfg: ExperimentConfig, built: BuiltModel):
    state = cfg.initial_state
    return initial_state(built, state.kind, index=state.index, center=state.center, width=state.width,
                         band=state.band, site=state.site, seed=cfg.seed)


def _perturbation(built: BuiltModel) -> OperatorSampler:
    if built.spec.kind not in ("torus", "anharmonic"):
        raise ConfigError(f"the adiabatic hierarchy needs a torus or anharmonic model, not {built.spec.kind}",
                          "adiabatic")
    if built.perturbation is not None:
        return built.perturbation
    return OperatorSampler.constant(np.zeros((built.model.dim,) * 2), label="V=0")


def _fit_bound(cfg: ExperimentConfig, built: BuiltModel, k: float) -> Optional[float]:
    regime = cfg.fit.regime
    if regime == "polynomial" and cfg.fit.tau is not None:
        return k / (2.0 * (1.0 - cfg.fit.tau))
    if regime == "loglog":
        mu = built.spec.expected_mu
        if mu is None or mu <= 0:
            raise ConfigError(f"loglog regime needs a model with a positive gap exponent, not {built.spec.kind}",
                              "growth")
        return log_power_bound(k, mu, (built.perturbation or built.generator).nu)
    return None


def _spectrum(cfg: ExperimentConfig, built: BuiltModel) -> Dict[str, Path]:
    lam = built.model.eigenvalues
    frame = pd.DataFrame({"index": np.arange(lam.size), "eigenvalue": lam,
                          "observed": np.arange(lam.size) < built.model.observe_dim})
    path = cfg.output.path("spectrum")
    frame.to_csv(path, index=False)
    return {"spectrum": path}


def _clusters(cfg: ExperimentConfig, built: BuiltModel) -> Dict[str, Path]:
    dec = detect_clusters(built.model)
    payload = {"model": built.spec.kind, "validation": built.validation, "clusters": dec.to_dict()}
    if cfg.adiabatic is not None and cfg.adiabatic.J is not None:
        payload["regrouped"] = dyadic_regroup(dec, cfg.adiabatic.J).to_dict()
    return {"clusters": _write_json(cfg.output.path("clusters"), payload)}


def _propagate(cfg: ExperimentConfig, built: BuiltModel) -> Trajectory:
    traj = propagate(built.model, built.generator, _initial(cfg, built), cfg.propagation, cfg.sobolev_ks)
    traj.to_csv(cfg.output.path("trajectory"))
    return traj


def _growth(cfg: ExperimentConfig, built: BuiltModel) -> Dict[str, Path]:
    traj = _propagate(cfg, built)
    fits = []
    for k in cfg.fit_ks:
        report = fit_growth(traj.times, traj.norm_series(k), cfg.fit.regime, cfg.fit.t_min,
                            _fit_bound(cfg, built, k), k=k)
        if built.spec.kind == "dilation_harmonic" and cfg.fit.regime == "exponential":
            report = replace(report, reference=float(k))
        fits.append(report.to_dict())
    artifacts = {"trajectory": cfg.output.path("trajectory")}
    payload = {"model": built.spec.kind, "regime": cfg.fit.regime, "fits": fits,
               "conservation_drift": traj.conservation_drift}
    if cfg.fit.epsilons:
        table = pd.concat([compare_epsilon_bound(traj, k, cfg.fit.epsilons, cfg.fit.t_min).assign(k=k)
                           for k in cfg.fit_ks], ignore_index=True)
        table.to_csv(cfg.output.path("epsilon"), index=False)
        artifacts["epsilon"] = cfg.output.path("epsilon")
    artifacts["fit"] = _write_json(cfg.output.path("fit"), payload)
    if cfg.adiabatic is not None:
        artifacts.update(_adiabatic(cfg, built))
    return artifacts


def _depth(cfg: ExperimentConfig, built: BuiltModel, V: OperatorSampler) -> int:
    if cfg.adiabatic.M is not None:
        return cfg.adiabatic.M
    mu = built.spec.expected_mu
    delta = delta_exponent(mu, V.nu)
    M = choose_constants_smooth(cfg.adiabatic.epsilon, mu, delta, max(cfg.sobolev_ks) / 2.0)
    logger.info("epsilon=%g selects depth M=%d", cfg.adiabatic.epsilon, M)
    return M


def _adiabatic(cfg: ExperimentConfig, built: BuiltModel) -> Dict[str, Path]:
    settings = cfg.adiabatic
    V = _perturbation(built)
    window = settings.window or tuple(sorted(cfg.propagation.t_span))
    hier = build_hierarchy(built.model, V, _depth(cfg, built, V), settings.J, window=window,
                           n_nodes=settings.n_nodes, threads=cfg.threads)
    psi = _initial(cfg, built)
    _, flow = adiabatic_propagate(hier, psi, cfg.propagation, cfg.sobolev_ks, settings.check_points)
    payload = {"hierarchy": hier.summary(), "adiabatic_flow": flow}
    if settings.duhamel:
        payload["duhamel"] = duhamel_compare(hier, psi, cfg.propagation)
    check_times = hier.times[:: max(1, hier.times.size // 4)]
    equivalence = norm_equivalence(hier, hier.M, settings.p_list, check_times, settings.n_vectors, cfg.seed)
    payload["norm_equivalence"] = {"c0": equivalence.c0, "c1": equivalence.c1, "c2": equivalence.c2,
                                   "stability": equivalence.stability, "stable": equivalence.stable,
                                   "table": equivalence.table}
    return {"hierarchy": _write_json(cfg.output.path("hierarchy"), payload)}


def _floquet(cfg: ExperimentConfig, built: BuiltModel) -> Dict[str, Path]:
    settings = cfg.floquet
    period = settings.period if settings is not None and settings.period else built.generator.period
    if not period:
        raise ConfigError("floquet needs a period: set floquet.period or use a single-frequency drive", "floquet")
    result = floquet_operator(built.model, built.generator, period, cfg.propagation,
                              settings.check_points if settings is not None else 16)
    path = cfg.output.path("floquet")
    result.to_frame().to_csv(path, index=False)
    logger.info("Floquet unitarity defect %.3e", result.unitarity_defect)
    return {"floquet": path}


def run_experiment(cfg: ExperimentConfig, command: str = "growth") -> Dict[str, Path]:
    """Build the model and write the artifacts of one subcommand.

    Args:
        cfg: parsed experiment
        command: one of spectrum, clusters, propagate, adiabatic, growth, floquet

    Returns:
        mapping from artifact name to the file written
    """
    if command not in COMMANDS:
        raise ConfigError(f"unknown command '{command}', expected one of {COMMANDS}", "growth_cli")
    Path(cfg.output.directory).mkdir(parents=True, exist_ok=True)
    try:
        built = build_model(cfg.model)
    except DomainError as exc:
        raise ModelValidationError(f"model build failed: {exc.args[0]}", exc.stage) from exc
    logger.info("built %s model: dim %d, observed %d", built.spec.kind, built.model.dim, built.model.observe_dim)
    if command == "spectrum":
        return _spectrum(cfg, built)
    if command == "clusters":
        return _clusters(cfg, built)
    if command == "propagate":
        _propagate(cfg, built)
        return {"trajectory": cfg.output.path("trajectory")}
    if command == "adiabatic":
        if cfg.adiabatic is None:
            raise ConfigError("the adiabatic command needs an 'adiabatic' section", "growth_cli")
        return _adiabatic(cfg, built)
    if command == "floquet":
        return _floquet(cfg, built)
    return _growth(cfg, built)


def _guarded(cfg: ExperimentConfig, command: str) -> int:
    try:
        run_experiment(cfg, command)
    except SpectralLabError as exc:
        logger.error("%s failed: %s", command, exc)
        return exc.exit_code
    return 0


def run_sweep(configs: Sequence[ExperimentConfig], threads: Optional[int] = None,
              command: str = "growth") -> List[int]:
    """Run independent experiments on a thread pool; returns their exit codes in input order."""
    with ThreadPoolExecutor(max_workers=threads or min(4, max(1, len(configs)))) as pool:
        return list(pool.map(lambda cfg: _guarded(cfg, command), configs))


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", required=True, help="Path to the experiment JSON file.")
    common.add_argument("--seed", type=int, default=None, help="Override the experiment seed.")
    common.add_argument("--out", default=None, help="Override the output directory.")
    common.add_argument("--threads", type=int, default=None, help="Worker threads for parallel sweeps.")
    common.add_argument("--verbose", action="store_true", help="Log at DEBUG level.")

    parser = argparse.ArgumentParser(description="Sobolev norm growth experiments on truncated Hilbert scales.")
    commands = parser.add_subparsers(dest="command", required=True)
    helps = {
        "spectrum": "Write the eigenvalues of the reference operator.",
        "clusters": "Write the cluster decomposition and gap fits.",
        "propagate": "Write the trajectory CSV.",
        "adiabatic": "Build the counter-term hierarchy and write its reports.",
        "growth": "Propagate and fit the norm growth.",
        "floquet": "Write the eigenphases of the monodromy operator.",
    }
    for name in COMMANDS:
        commands.add_parser(name, parents=[common], help=helps[name])
    return parser


def main(argv: Optional[Sequence[str]] = None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.DEBUG if args.verbose else logging.INFO,
                        format="%(asctime)s %(levelname)s %(name)s: %(message)s")
    try:
        cfg = with_overrides(load_config(args.config), seed=args.seed, out=args.out, threads=args.threads)
        artifacts = run_experiment(cfg, args.command)
    except SpectralLabError as exc:
        logger.error("%s failed: %s", args.command, exc)
        return exc.exit_code
    for name, path in artifacts.items():
        print(f"{name}: {path}")
    return 0


if __name__ == "__main__":
    raise SystemExit(main())
