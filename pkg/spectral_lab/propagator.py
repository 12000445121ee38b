"""Unitary time stepping for i ψ'(t) = L(t) ψ(t) and the regularization machinery around it."""
import logging
import math
from dataclasses import dataclass, field, replace
from typing import Callable, Dict, Mapping, Optional, Sequence, Tuple

import numpy as np
import pandas as pd
from scipy.linalg import eigh, eigvals, lu_factor, lu_solve
from scipy.stats import linregress

from spectral_lab.errors import (
    DomainError,
    HermiticityError,
    InsufficientDataError,
    PeriodicityError,
    StateBlowUpError,
)
from spectral_lab.spectral_core import (
    OperatorMatrix,
    OperatorSampler,
    SpectralModel,
    StateVector,
    commutator_with_diagonal,
    hermitian_defect,
    scale_operator_norm,
    sobolev_norms,
)

logger = logging.getLogger(__name__)

INTEGRATORS = ("exponential-midpoint", "crank-nicolson", "strang-split")
BLOW_UP_THRESHOLD = 1e12
STEP_HERMITIAN_TOL = 1e-10
PERIODICITY_TOL = 1e-10


@dataclass(frozen=True)
class PropagatorConfig:
    dt: float = 1e-3
    t_span: Tuple[float, float] = (0.0, 1.0)
    integrator: str = "exponential-midpoint"
    record_every: int = 1

    def __post_init__(self):
        if not self.dt > 0:
            raise DomainError(f"time step dt={self.dt} must be positive", "propagator")
        s, t = self.t_span
        if s == t:
            raise DomainError(f"degenerate time span [{s}, {t}]", "propagator")
        if self.integrator not in INTEGRATORS:
            raise DomainError(f"unknown integrator '{self.integrator}', expected one of {INTEGRATORS}", "propagator")
        if self.record_every < 1:
            raise DomainError("record_every must be at least 1", "propagator")
        object.__setattr__(self, "t_span", (float(s), float(t)))

    @property
    def n_steps(self) -> int:
        s, t = self.t_span
        return max(1, math.ceil(abs(t - s) / self.dt - 1e-9))

    @property
    def step(self) -> float:
        """Signed step that divides the span exactly."""
        s, t = self.t_span
        return (t - s) / self.n_steps

    def with_span(self, s: float, t: float) -> "PropagatorConfig":
        return replace(self, t_span=(s, t))


@dataclass(frozen=True, eq=False)
class Trajectory:
    """Recorded states with their Sobolev norms; times are strictly monotone in the propagation direction."""

    times: np.ndarray
    states: np.ndarray
    norms: Dict[float, np.ndarray]
    drift: np.ndarray
    label: str = ""
    span: Tuple[float, float] = (0.0, 0.0)
    extras: dict = field(default_factory=dict)

    def __post_init__(self):
        steps = np.diff(self.times)
        if steps.size and not (np.all(steps > 0) or np.all(steps < 0)):
            raise DomainError("trajectory times must be strictly monotone", "propagator")
        for k, series in self.norms.items():
            if len(series) != len(self.times):
                raise DomainError(f"norm series k={k} has {len(series)} samples for {len(self.times)} times",
                                  "propagator")

    @property
    def conservation_drift(self) -> float:
        return float(self.drift.max()) if self.drift.size else 0.0

    @property
    def final_state(self) -> StateVector:
        return StateVector(self.states[-1])

    def norm_series(self, k: float) -> np.ndarray:
        if k not in self.norms:
            raise DomainError(f"trajectory has no norms for k={k}; recorded {sorted(self.norms)}", "propagator")
        return self.norms[k]

    def to_frame(self) -> pd.DataFrame:
        columns = {"t": self.times}
        for k in sorted(self.norms):
            columns[norm_column(k)] = self.norms[k]
        columns["conservation_drift"] = self.drift
        return pd.DataFrame(columns)

    def to_csv(self, path) -> None:
        self.to_frame().to_csv(path, index=False)


def norm_column(k: float) -> str:
    return f"norm_k{k:g}"


def _apply_rows(weights: np.ndarray, psi: np.ndarray) -> np.ndarray:
    return weights[:, None] * psi if psi.ndim == 2 else weights * psi


class _Stepper:
    """One-step rules sharing the decomposition cache of a constant generator."""

    def __init__(self, L: OperatorSampler, integrator: str):
        if integrator == "strang-split" and L.split is None:
            raise DomainError("strang-split needs a generator of the form constant + diagonal(t)", "propagator")
        self.L = L
        self.integrator = integrator
        self._eig: Optional[Tuple[np.ndarray, np.ndarray]] = None
        self._lu: Dict[float, tuple] = {}

    def _checked(self, matrix: np.ndarray, t: float) -> np.ndarray:
        defect = hermitian_defect(matrix)
        if defect > STEP_HERMITIAN_TOL * max(1.0, np.linalg.norm(matrix)):
            raise HermiticityError(f"generator not hermitian at t={t:.6g}: defect {defect:.3e}", "propagator")
        return 0.5 * (matrix + matrix.conj().T)

    def _decomposition(self, t: float) -> Tuple[np.ndarray, np.ndarray]:
        if self.integrator == "strang-split":
            if self._eig is None:
                self._eig = eigh(self._checked(np.asarray(self.L.split[0], dtype=complex), t))
            return self._eig
        if self.L.is_constant:
            if self._eig is None:
                self._eig = eigh(self._checked(self.L.eval(t), t))
            return self._eig
        return eigh(self._checked(self.L.eval(t), t))

    def __call__(self, psi: np.ndarray, t: float, h: float) -> np.ndarray:
        mid = t + h / 2.0
        if self.integrator == "exponential-midpoint":
            w, Q = self._decomposition(mid)
            return Q @ _apply_rows(np.exp(-1j * h * w), Q.conj().T @ psi)
        if self.integrator == "crank-nicolson":
            key = h if self.L.is_constant else None
            factors = self._lu.get(key) if key is not None else None
            if factors is None:
                G = self._checked(self.L.eval(mid), mid)
                identity = np.eye(G.shape[0])
                factors = (lu_factor(identity + 0.5j * h * G), identity - 0.5j * h * G)
                if key is not None:
                    self._lu[key] = factors
            lu, explicit = factors
            return lu_solve(lu, explicit @ psi)
        w, Q = self._decomposition(mid)
        diagonal_part = self.L.split[1]
        half = np.exp(-0.5j * h * diagonal_part(mid)) if diagonal_part is not None else np.ones(w.size)
        psi = _apply_rows(half, psi)
        psi = Q @ _apply_rows(np.exp(-1j * h * w), Q.conj().T @ psi)
        return _apply_rows(half, psi)


def _check_blow_up(psi: np.ndarray, t: float) -> None:
    if not np.all(np.isfinite(psi)) or np.abs(psi).max() > BLOW_UP_THRESHOLD:
        raise StateBlowUpError(f"state blow-up at t={t:.6g}: truncation too small for this workload", "propagator")


def _evolve(L: OperatorSampler, psi: np.ndarray, cfg: PropagatorConfig,
            record: Optional[Callable[[int, float, np.ndarray], None]] = None) -> np.ndarray:
    stepper = _Stepper(L, cfg.integrator)
    s = cfg.t_span[0]
    h = cfg.step
    if record is not None:
        record(0, s, psi)
    for n in range(cfg.n_steps):
        t = s + n * h
        psi = stepper(psi, t, h)
        _check_blow_up(psi, t + h)
        if record is not None:
            record(n + 1, s + (n + 1) * h, psi)
    return psi


def propagate(model: SpectralModel, L: OperatorSampler, psi_s, cfg: PropagatorConfig,
              ks: Sequence[float] = (1.0,)) -> Trajectory:
    """Propagate ψ_s over cfg.t_span and record Sobolev norms every cfg.record_every steps.

    Args:
        model: spectral model defining the norms
        L: hermitian generator in the H-eigenbasis
        psi_s: initial state
        cfg: time stepping configuration
        ks: Sobolev indices to record

    Returns:
        Trajectory with norms per k and the ℓ² conservation drift
    """
    psi = np.array(psi_s, dtype=complex)
    if psi.shape != (L.dim,):
        raise DomainError(f"state of shape {psi.shape} does not match generator dim {L.dim}", "propagator")
    times, states = [], []
    last = cfg.n_steps

    def record(n: int, t: float, state: np.ndarray) -> None:
        if n % cfg.record_every == 0 or n == last:
            times.append(t)
            states.append(state.copy())

    _evolve(L, psi, cfg, record)
    states = np.array(states)
    initial = np.linalg.norm(states[0])
    drift = np.abs(np.linalg.norm(states, axis=1) - initial)
    norms = {float(k): sobolev_norms(model, states, k) for k in ks}
    logger.debug("propagated %s over %s with %d steps, drift %.3e",
                 L.label, cfg.t_span, cfg.n_steps, drift.max())
    return Trajectory(np.array(times), states, norms, drift, label=L.label, span=cfg.t_span)


def propagator_matrix(L: OperatorSampler, cfg: PropagatorConfig) -> np.ndarray:
    """U(t, s) as a dense matrix, the flow of the identity."""
    return _evolve(L, np.eye(L.dim, dtype=complex), cfg)


def propagator_snapshots(L: OperatorSampler, cfg: PropagatorConfig, every: int = 1) -> Tuple[np.ndarray, np.ndarray]:
    """U(t_n, s) at every ``every``-th step and at the final time."""
    if every < 1:
        raise DomainError("snapshot spacing must be at least 1", "propagator")
    times, matrices = [], []
    last = cfg.n_steps

    def record(n: int, t: float, state: np.ndarray) -> None:
        if n % every == 0 or n == last:
            times.append(t)
            matrices.append(state.copy())

    _evolve(L, np.eye(L.dim, dtype=complex), cfg, record)
    return np.array(times), np.array(matrices)


def integrator_order(model: SpectralModel, L: OperatorSampler, psi, cfg: PropagatorConfig,
                     refinements: int = 3) -> dict:
    """Measured order of the final-state defect against a reference at a tenth of the finest step."""
    dts = [cfg.dt / 2 ** i for i in range(refinements)]
    reference = _evolve(L, np.array(psi, dtype=complex), replace(cfg, dt=dts[-1] / 10))
    defects = [float(np.linalg.norm(_evolve(L, np.array(psi, dtype=complex), replace(cfg, dt=dt)) - reference))
               for dt in dts]
    order = float(linregress(np.log(dts), np.log(defects)).slope)
    logger.info("integrator %s: measured order %.3f", cfg.integrator, order)
    return {"order": order, "dts": dts, "defects": defects}


@dataclass(frozen=True, eq=False)
class SmoothingOperator:
    matrix: OperatorMatrix
    diagonal: np.ndarray
    N: float
    m_bar: int
    report: dict


def smoothing_operator(model: SpectralModel, N: float, m_bar: int, eta: float = 0.5) -> SmoothingOperator:
    """R_N = (1 + H^m̄/N)^{-1} together with its measured mapping properties.

    The report holds, on the observed block, ‖R_N‖ from H^k to H^{k+2m̄} (at
    most N), ‖R_N‖ on H^k (at most 1), and ‖R_N - 1‖ from H^{k+2m̄} and from
    H^{k+2m̄η} to H^k scaled by N and N^η. The operators are diagonal so the
    values do not depend on k.
    """
    if N <= 0:
        raise DomainError(f"smoothing parameter N={N} must be positive", "propagator")
    if m_bar < 1:
        raise DomainError(f"m_bar={m_bar} must be a positive integer", "propagator")
    powers = model.eigenvalues ** m_bar
    diagonal = 1.0 / (1.0 + powers / N)
    n = model.observe_dim
    observed_powers, observed = powers[:n], diagonal[:n]
    defect = 1.0 - observed
    gain = float((observed_powers * observed).max())
    report = {
        "gain_norm": gain,
        "gain_pass": bool(gain <= N * (1 + 1e-12)),
        "bounded_norm": float(observed.max()),
        "defect_times_N": float((defect / observed_powers).max() * N),
        "eta": eta,
        "defect_eta_times_N_eta": float((defect / observed_powers ** eta).max() * N ** eta),
    }
    return SmoothingOperator(OperatorMatrix(np.diag(diagonal), hermitian=True), diagonal, N, m_bar, report)


def regularized_generator(L: OperatorSampler, R_N) -> OperatorSampler:
    """t ↦ R_N L(t) R_N."""
    matrix = R_N.matrix if isinstance(R_N, SmoothingOperator) else R_N
    return L.conjugated(np.asarray(matrix))


def regularized_generator_defect(model: SpectralModel, L: OperatorSampler, N_list: Sequence[float],
                                 m_bar: int, eta: float, k: float, times: Sequence[float]) -> pd.DataFrame:
    """max_t ‖(L_N - L)(t)‖ from H^{k+2m̄(1+η)} to H^k, and the same scaled by N^η."""
    source = (k + 2 * m_bar * (1 + eta)) / 2.0
    rows = []
    for N in N_list:
        L_N = regularized_generator(L, smoothing_operator(model, N, m_bar))
        defect = max(scale_operator_norm(model, L_N.eval(t) - L.eval(t), k / 2.0, source) for t in times)
        rows.append({"N": float(N), "defect": defect, "scaled_defect": defect * N ** eta})
    return pd.DataFrame(rows)


def log_log_slope(x: Sequence[float], y: Sequence[float]) -> float:
    x, y = np.asarray(x, dtype=float), np.asarray(y, dtype=float)
    keep = (x > 0) & (y > 0)
    if keep.sum() < 2:
        raise InsufficientDataError("need two positive samples for a log-log slope", "propagator")
    return float(linregress(np.log(x[keep]), np.log(y[keep])).slope)


def flow_convergence_study(model: SpectralModel, L: OperatorSampler, L_n_family: Mapping[float, OperatorSampler],
                           psi, cfg: PropagatorConfig, k: float = 0.0, m_order: float = 2.0,
                           check_times: Optional[Sequence[float]] = None) -> pd.DataFrame:
    """‖U_n(t,s)ψ - U(t,s)ψ‖_k for each member of the family at every check time.

    One row per (n, t), t being the recorded step nearest the requested check
    time. Each row also carries, per n, the uniform commutator bound
    sup ‖[L_n, H] H^{-1}‖ and the generator defect sup ‖L_n - L‖ from H^{k+m}
    to H^k on the observed block, both taken over the check times.
    """
    psi = np.array(psi, dtype=complex)
    s, t = cfg.t_span
    check_times = list(check_times) if check_times is not None else list(np.linspace(s, t, 5))
    if any(r < s - 1e-12 or r > t + 1e-12 for r in check_times):
        raise DomainError(f"check times must lie in [{s}, {t}]", "propagator")
    dense = replace(cfg, record_every=1)
    exact = propagate(model, L, psi, dense, ks=())
    picks = [int(np.argmin(np.abs(exact.times - r))) for r in check_times]
    lam = model.eigenvalues
    rows = []
    for n, L_n in sorted(L_n_family.items()):
        approx = propagate(model, L_n, psi, dense, ks=())
        defects = sobolev_norms(model, approx.states[picks] - exact.states[picks], k)
        commutator_bound = max(scale_operator_norm(model, commutator_with_diagonal(L_n.eval(r), lam), 0.0, 1.0)
                               for r in check_times)
        generator_defect = max(scale_operator_norm(model, L_n.eval(r) - L.eval(r), k / 2.0, (k + m_order) / 2.0)
                               for r in check_times)
        for index, defect in zip(picks, defects):
            rows.append({
                "n": float(n),
                "t": float(exact.times[index]),
                "defect": float(defect),
                "commutator_bound": commutator_bound,
                "generator_defect": generator_defect,
            })
    table = pd.DataFrame(rows)
    logger.info("flow convergence over %d family members at %d check times, worst defect %.3g",
                len(L_n_family), len(picks), table["defect"].max() if rows else 0.0)
    return table


def growth_bound_check(traj: Trajectory, k: float, tau: float, min_samples: int = 10) -> dict:
    """Fit ‖ψ(t)‖_k against log⟨t-s⟩ and against t, and compare with k/(2(1-τ)).

    The polynomial verdict is "inconclusive" when ⟨t-s⟩ spans less than a decade.
    """
    if not 0 <= tau < 1:
        raise DomainError(f"tau={tau} must lie in [0, 1)", "propagator")
    norms = traj.norm_series(k)
    if len(norms) < min_samples:
        raise InsufficientDataError(f"trajectory too short: {len(norms)} samples < {min_samples}", "propagator")
    elapsed = np.abs(traj.times - traj.times[0])
    bracket = np.sqrt(1.0 + elapsed ** 2)
    log_norm = np.log(norms)
    poly = linregress(np.log(bracket), log_norm)
    expo = linregress(elapsed, log_norm)
    bound = k / (2.0 * (1.0 - tau))
    decade = bool(bracket[-1] / bracket[0] >= 10.0)
    if not decade:
        verdict = "inconclusive"
    else:
        verdict = bound_verdict(poly.slope, poly.stderr, bound)
    report = {
        "k": k, "tau": tau, "bound": bound,
        "poly_exponent": float(poly.slope), "poly_stderr": float(poly.stderr),
        "exp_rate": float(expo.slope), "exp_stderr": float(expo.stderr),
        "decade_span": decade, "verdict": verdict,
    }
    logger.info("growth check k=%g: exponent %.4f (bound %.4f) -> %s", k, poly.slope, bound, verdict)
    return report


def bound_verdict(value: float, stderr: float, bound: float) -> str:
    if value - bound > 3.0 * stderr:
        return "violated"
    if value <= bound:
        return "respected"
    return "inconclusive"


@dataclass(frozen=True, eq=False)
class FloquetResult:
    operator: OperatorMatrix
    eigenphases: np.ndarray
    unitarity_defect: float
    period: float

    def to_frame(self) -> pd.DataFrame:
        return pd.DataFrame({"index": np.arange(self.eigenphases.size), "eigenphase": self.eigenphases})


def floquet_operator(model: SpectralModel, L: OperatorSampler, period: float, cfg: PropagatorConfig,
                     check_points: int = 16) -> FloquetResult:
    """Monodromy U(s+T, s) where s = cfg.t_span[0]."""
    if period <= 0:
        raise DomainError(f"period T={period} must be positive", "propagator")
    s = cfg.t_span[0]
    for t in np.linspace(s, s + period, check_points, endpoint=False):
        now = L.eval(t)
        later = L.eval(t + period)
        gap = float(np.linalg.norm(later - now))
        if gap > PERIODICITY_TOL * max(1.0, np.linalg.norm(now)):
            raise PeriodicityError(f"L(t+T) != L(t) at t={t:.6g}: difference {gap:.3e}", "propagator")
    U = propagator_matrix(L, cfg.with_span(s, s + period))
    phases = np.sort(np.angle(eigvals(U)))
    defect = float(np.linalg.norm(U.conj().T @ U - np.eye(U.shape[0]), 2))
    logger.info("Floquet operator of %s over T=%g: unitarity defect %.3e", L.label, period, defect)
    return FloquetResult(OperatorMatrix(U), phases, defect, period)


def phase_set_distance(first: Sequence[float], second: Sequence[float]) -> float:
    """Largest distance on the unit circle from a phase in either set to the nearest phase of the other."""
    a = np.exp(1j * np.asarray(first, dtype=float))
    b = np.exp(1j * np.asarray(second, dtype=float))
    gaps = np.abs(a[:, None] - b[None, :])
    return float(max(gaps.min(axis=1).max(), gaps.min(axis=0).max()))
