"""Adiabatic hierarchy of counter-terms built from cluster projectors.

Level m carries H_m(t) = L(t) + B_0(t) + ... + B_{m-1}(t), its spectral
projectors Π_{m,j}(t) onto the enlarged clusters σ̃_j, and the counter-term
B_m(t) = i Σ_j Π_{m,j} ∂_{(t,L)}Π_{m,j}. Blocks B_{m,j} = Π_{m,j} ∂_{(t,L)}Π_{m,j}
are kept without the factor i, which is applied when the blocks are summed.

Everything is computed from the eigen decomposition of H_m(t): with
F_pq = ⟨p|Ḣ_m|q⟩/(λ_q - λ_p) for p, q in different clusters, the counter-term
in that eigenbasis is (L' - iF) restricted to the cross-cluster entries.
"""
import logging
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field, replace
from typing import Dict, List, Optional, Sequence, Tuple

import numpy as np
import pandas as pd
from scipy.integrate import simpson, trapezoid
from scipy.interpolate import BarycentricInterpolator
from scipy.linalg import eigh, solve, svdvals
from scipy.stats import linregress

from spectral_lab.clusters import (
    ClusterDecomposition,
    choose_J_smooth,
    delta_exponent,
    detect_clusters,
    dyadic_regroup,
    japanese_bracket,
    json_float,
    perturbed_clusters,
)
from spectral_lab.errors import (
    ClusterEscapeError,
    DerivativeUnavailableError,
    DomainError,
    HermiticityError,
    InsufficientDataError,
)
from spectral_lab.propagator import PropagatorConfig, Trajectory, propagate, propagator_snapshots
from spectral_lab.spectral_core import (
    OperatorMatrix,
    OperatorSampler,
    SpectralModel,
    central_derivative,
    hermitian_defect,
    projector_algebra_residuals,
    symmetrize,
)

logger = logging.getLogger(__name__)

ALGEBRA_TOL = 1e-10
COUNTER_HERMITIAN_TOL = 1e-8
SINGULAR_COND = 1e12
DECAY_TOLERANCE = 0.15
HIERARCHY_FD_STEP = 1e-3
ESCAPE_MESSAGE = "spectrum escaped clusters — increase J"


def _operator_norm(A: np.ndarray) -> float:
    if A.size == 0:
        return 0.0
    return float(svdvals(A)[0])


@dataclass(frozen=True, eq=False)
class LevelSpectrum:
    """Eigen decomposition of H_m(t) with the cluster label (0-based) of every eigenvalue."""

    eigenvalues: np.ndarray
    eigenvectors: np.ndarray
    labels: np.ndarray

    def projector(self, j: int) -> np.ndarray:
        Q = self.eigenvectors[:, self.labels == j]
        return Q @ Q.conj().T

    def projectors(self, n_clusters: int) -> np.ndarray:
        return np.array([self.projector(j) for j in range(n_clusters)])


@dataclass(frozen=True, eq=False)
class CounterTerm:
    total: np.ndarray
    block_norms: np.ndarray
    hermitian_defect: float


def _reference_counts(dec: ClusterDecomposition, dim: int) -> Optional[np.ndarray]:
    if dec.member_index.size != dim:
        return None
    return np.bincount(dec.member_index, minlength=dec.n_clusters)


def _cluster_spectrum(H: np.ndarray, dec: ClusterDecomposition, counts: Optional[np.ndarray] = None,
                      m: Optional[int] = None, t: Optional[float] = None) -> LevelSpectrum:
    w, Q = eigh(symmetrize(H))
    labels = dec.assign(w)
    outside = np.flatnonzero(labels < 0)
    if outside.size:
        value = w[outside[0]]
        nearest = int(np.argmin(np.abs(dec.intervals - value).min(axis=1)))
        raise ClusterEscapeError(ESCAPE_MESSAGE, m, t, nearest + 1)
    if counts is not None:
        ranks = np.bincount(labels, minlength=dec.n_clusters)
        changed = np.flatnonzero(ranks != counts)
        if changed.size:
            j = int(changed[0])
            raise ClusterEscapeError(f"cluster rank changed from {counts[j]} to {ranks[j]}", m, t, j + 1)
    return LevelSpectrum(w, Q, labels)


def cluster_projectors(H_m, dec: ClusterDecomposition) -> List[np.ndarray]:
    """Spectral projectors of H_m onto each σ̃_j, grouped from its eigenvectors."""
    H = np.asarray(H_m, dtype=complex)
    spectrum = _cluster_spectrum(H, dec, _reference_counts(dec, H.shape[0]))
    return list(spectrum.projectors(dec.n_clusters))


def _transitions(spectrum: LevelSpectrum, dH: np.ndarray) -> np.ndarray:
    """F_pq = Ḣ'_pq / (λ_q - λ_p) across clusters, zero inside a cluster."""
    Q, w, labels = spectrum.eigenvectors, spectrum.eigenvalues, spectrum.labels
    rotated = Q.conj().T @ dH @ Q
    cross = labels[:, None] != labels[None, :]
    F = np.zeros_like(rotated)
    np.divide(rotated, w[None, :] - w[:, None], out=F, where=cross)
    return F


class LevelEvaluator:
    """Exact level operators at arbitrary times.

    Results are cached per (m, t), so the finite differences feeding Ḃ_i reuse
    every decomposition they share. An evaluator is not shared between threads.
    """

    def __init__(self, L: OperatorSampler, dec: ClusterDecomposition, fd_step: float = HIERARCHY_FD_STEP):
        self.L = L
        self.dec = dec
        self.fd_step = fd_step
        self.counts = _reference_counts(dec, L.dim)
        self._spectra: Dict[Tuple[int, float], LevelSpectrum] = {}
        self._transitions: Dict[Tuple[int, float], np.ndarray] = {}
        self._counters: Dict[Tuple[int, float], CounterTerm] = {}

    def generator(self, m: int, t: float) -> np.ndarray:
        H = self.L.eval(t).copy()
        for i in range(m):
            H += self.counter(i, t).total
        return H

    def generator_derivative(self, m: int, t: float) -> np.ndarray:
        dH = self.L.derivative(t, 1).copy()
        for i in range(m):
            dH += central_derivative(lambda r, i=i: self.counter(i, r).total, t, 1, self.fd_step)
        return dH

    def spectrum(self, m: int, t: float) -> LevelSpectrum:
        key = (m, float(t))
        if key not in self._spectra:
            self._spectra[key] = _cluster_spectrum(self.generator(m, t), self.dec, self.counts, m, t)
        return self._spectra[key]

    def transitions(self, m: int, t: float) -> np.ndarray:
        key = (m, float(t))
        if key not in self._transitions:
            self._transitions[key] = _transitions(self.spectrum(m, t), self.generator_derivative(m, t))
        return self._transitions[key]

    def projectors(self, m: int, t: float) -> np.ndarray:
        return self.spectrum(m, t).projectors(self.dec.n_clusters)

    def projector_derivatives(self, m: int, t: float) -> np.ndarray:
        """∂_tΠ_{m,j}(t) for every cluster from first-order eigenvector perturbation."""
        spectrum = self.spectrum(m, t)
        F = self.transitions(m, t)
        Q, labels = spectrum.eigenvectors, spectrum.labels
        derivatives = []
        for j in range(self.dec.n_clusters):
            inside = labels == j
            into = np.outer(~inside, inside)
            out_of = np.outer(inside, ~inside)
            rotated = np.where(into, F, 0.0) - np.where(out_of, F, 0.0)
            derivatives.append(Q @ rotated @ Q.conj().T)
        return np.array(derivatives)

    def _eigenbasis_blocks(self, m: int, t: float) -> Tuple[LevelSpectrum, np.ndarray]:
        """(-F - iL') in the eigenbasis of H_m; block j is its rows in j and columns outside j."""
        spectrum = self.spectrum(m, t)
        Q = spectrum.eigenvectors
        rotated_L = Q.conj().T @ self.L.eval(t) @ Q
        return spectrum, -self.transitions(m, t) - 1j * rotated_L

    def counter(self, m: int, t: float) -> CounterTerm:
        key = (m, float(t))
        if key in self._counters:
            return self._counters[key]
        spectrum, unfactored = self._eigenbasis_blocks(m, t)
        Q, labels = spectrum.eigenvectors, spectrum.labels
        cross = labels[:, None] != labels[None, :]
        total = Q @ np.where(cross, 1j * unfactored, 0.0) @ Q.conj().T
        defect = hermitian_defect(total)
        if defect >= COUNTER_HERMITIAN_TOL * max(1.0, np.linalg.norm(total)):
            raise HermiticityError(f"projector family inconsistent: B_{m} defect {defect:.3e} at t={t:.6g}",
                                   "adiabatic")
        norms = np.array([_operator_norm(unfactored[np.ix_(labels == j, labels != j)])
                          for j in range(self.dec.n_clusters)])
        term = CounterTerm(symmetrize(total), norms, defect)
        self._counters[key] = term
        return term

    def counter_blocks(self, m: int, t: float) -> List[np.ndarray]:
        spectrum, unfactored = self._eigenbasis_blocks(m, t)
        Q, labels = spectrum.eigenvectors, spectrum.labels
        blocks = []
        for j in range(self.dec.n_clusters):
            mask = np.outer(labels == j, labels != j)
            blocks.append(Q @ np.where(mask, unfactored, 0.0) @ Q.conj().T)
        return blocks


@dataclass(frozen=True, eq=False)
class HierarchyLevel:
    m: int
    times: np.ndarray
    counter_terms: np.ndarray
    block_norms: np.ndarray
    spectra: tuple = ()
    algebra: dict = field(default_factory=dict)
    hermitian_defect: float = 0.0
    interpolant: Optional[BarycentricInterpolator] = None

    @property
    def algebra_pass(self) -> bool:
        return all(value <= ALGEBRA_TOL for value in self.algebra.values())

    @property
    def sup_block_norms(self) -> np.ndarray:
        return self.block_norms.max(axis=0)

    def projectors(self, index: int, n_clusters: int) -> np.ndarray:
        if not self.spectra:
            raise DomainError("hierarchy was built without keeping level spectra", "adiabatic")
        return self.spectra[index].projectors(n_clusters)

    def counter_term_at(self, t: float) -> np.ndarray:
        """B_m(t) by barycentric interpolation between the sample times."""
        lo, hi = self.times[0], self.times[-1]
        slack = 1e-9 * max(1.0, hi - lo)
        if not lo - slack <= t <= hi + slack:
            raise DomainError(f"t={t:.6g} outside the hierarchy window [{lo:.6g}, {hi:.6g}]", "adiabatic")
        return np.asarray(self.interpolant(t), dtype=complex)


@dataclass(frozen=True, eq=False)
class AdiabaticHierarchy:
    model: SpectralModel
    L: OperatorSampler
    decomposition: ClusterDecomposition
    levels: Tuple[HierarchyLevel, ...]
    M: int
    J: int
    mu: float
    nu: float
    delta: float
    fd_step: float = HIERARCHY_FD_STEP
    checks: dict = field(default_factory=dict)

    @property
    def times(self) -> np.ndarray:
        return self.levels[0].times

    @property
    def window(self) -> Tuple[float, float]:
        return float(self.times[0]), float(self.times[-1])

    def evaluator(self) -> LevelEvaluator:
        return LevelEvaluator(self.L, self.decomposition, self.fd_step)

    def level(self, m: int) -> HierarchyLevel:
        if not 0 <= m <= self.M:
            raise DomainError(f"level m={m} outside 0..{self.M}", "adiabatic")
        return self.levels[m]

    def adiabatic_generator(self, m: Optional[int] = None) -> OperatorSampler:
        """t ↦ L(t) - B_m(t), with B_m interpolated between sample times."""
        level = self.level(self.M if m is None else m)
        vanishing = not np.any(level.counter_terms)
        return OperatorSampler(lambda t: self.L.eval(t) - level.counter_term_at(t), self.L.dim,
                               max_order=0, nu=self.L.nu, constant=self.L.is_constant and vanishing,
                               label=f"L-B_{level.m}")

    def summary(self) -> dict:
        fits = []
        for m in range(self.M + 1):
            try:
                fits.append(block_decay_fit(self, m))
            except InsufficientDataError:
                fits.append(None)
        return {
            "M": self.M,
            "J": self.J,
            "mu": json_float(self.mu),
            "nu": json_float(self.nu),
            "delta": json_float(self.delta),
            "window": list(self.window),
            "sample_times": self.times.tolist(),
            "decomposition": self.decomposition.to_dict(),
            "levels": [
                {
                    "m": level.m,
                    "block_norms": level.sup_block_norms.tolist(),
                    "hermitian_defect": level.hermitian_defect,
                    "algebra": level.algebra,
                    "algebra_pass": level.algebra_pass,
                }
                for level in self.levels
            ],
            "decay_fits": [None if fit is None else {key: json_float(value) for key, value in fit.items()}
                           for fit in fits],
            "monotonicity": block_monotonicity(self),
            "checks": {key: json_float(value) for key, value in self.checks.items()},
        }

    to_dict = summary


@dataclass(frozen=True, eq=False)
class LambdaOperator:
    """Λ_m(t) = Σ_j 2^{(j-1)(μ+1)} Π_{m,j}(t)."""

    weights: np.ndarray
    projectors: np.ndarray

    def __post_init__(self):
        if np.any(np.diff(self.weights) <= 0):
            raise DomainError("cluster weights must be strictly increasing", "adiabatic")

    def matrix(self, p: float = 1.0) -> np.ndarray:
        return np.tensordot(self.weights ** p, self.projectors, axes=1)

    def apply(self, psi, p: float = 1.0) -> np.ndarray:
        return self.matrix(p) @ np.asarray(psi, dtype=complex)


def cluster_weights(n_clusters: int, mu: float) -> np.ndarray:
    if not np.isfinite(mu) or mu <= 0:
        raise DomainError(f"cluster weights need a positive gap exponent, got mu={mu}", "adiabatic")
    return 2.0 ** (np.arange(n_clusters) * (mu + 1))


def lambda_operator(hier: AdiabaticHierarchy, m: int, t: float) -> LambdaOperator:
    hier.level(m)
    projectors = hier.evaluator().projectors(m, t)
    return LambdaOperator(cluster_weights(hier.decomposition.n_clusters, hier.mu), projectors)


def chebyshev_nodes(s: float, t: float, n: int) -> np.ndarray:
    """Chebyshev-Lobatto points on [s, t] in increasing order."""
    if n < 2:
        raise DomainError(f"need at least 2 Chebyshev nodes, got {n}", "adiabatic")
    x = np.cos(np.pi * np.arange(n) / (n - 1))
    nodes = 0.5 * (s + t) + 0.5 * (t - s) * x
    return np.sort(nodes)


def projector_time_derivative(hier: AdiabaticHierarchy, m: int, t: float, order: int = 1) -> np.ndarray:
    """∂_t^ℓ Π_{m,j}(t) for all j; orders above one differentiate the first-order formula numerically."""
    hier.level(m)
    if order < 1:
        raise DomainError(f"derivative order {order} must be at least 1", "adiabatic")
    if hier.L.max_order < 1:
        raise DerivativeUnavailableError(1, hier.L.max_order, "adiabatic")
    ev = hier.evaluator()
    if order == 1:
        return ev.projector_derivatives(m, t)
    return central_derivative(lambda r: ev.projector_derivatives(m, r), t, order - 1, hier.fd_step)


def counter_term(hier: AdiabaticHierarchy, m: int, t: float) -> Tuple[OperatorMatrix, List[np.ndarray]]:
    """B_m(t) and its unfactored blocks B_{m,j}(t), evaluated exactly at t."""
    hier.level(m)
    ev = hier.evaluator()
    return OperatorMatrix(ev.counter(m, t).total, hermitian=True), ev.counter_blocks(m, t)


def _sample_levels(L: OperatorSampler, dec: ClusterDecomposition, M: int, t: float, fd_step: float,
                   keep_spectra: bool, check_algebra: bool) -> list:
    ev = LevelEvaluator(L, dec, fd_step)
    rows = []
    for m in range(M + 1):
        term = ev.counter(m, t)
        algebra = projector_algebra_residuals(ev.projectors(m, t)) if check_algebra else {}
        rows.append((term, ev.spectrum(m, t) if keep_spectra else None, algebra))
    return rows


def build_hierarchy(model: SpectralModel, V: OperatorSampler, M: int, J: Optional[int] = None,
                    sample_times: Optional[Sequence[float]] = None, *,
                    decomposition: Optional[ClusterDecomposition] = None,
                    window: Optional[Tuple[float, float]] = None, n_nodes: int = 16,
                    threads: Optional[int] = None, keep_spectra: bool = True, check_algebra: bool = True,
                    fd_step: float = HIERARCHY_FD_STEP) -> AdiabaticHierarchy:
    """Iterate H_{m+1} = H_m + B_m for m = 0..M at every sample time.

    Args:
        model: reference operator H; L = H + V
        V: perturbation sampler with derivatives to order M+1
        M: depth of the hierarchy
        J: dyadic parameter; the smallest J keeping clusters from escaping when omitted
        sample_times: times at which the levels are evaluated, Chebyshev nodes
            over ``window`` when omitted
        decomposition: enlarged clusters σ̃_j to use instead of detecting them
        threads: worker count for the per-time evaluations

    Returns:
        AdiabaticHierarchy with per-level counter-terms, block norms and
        projector algebra residuals
    """
    if M < 0:
        raise DomainError(f"depth M={M} must be nonnegative", "adiabatic")
    if V.dim != model.dim:
        raise DomainError(f"perturbation dim {V.dim} does not match model dim {model.dim}", "adiabatic")
    if V.max_order < M + 1:
        raise DerivativeUnavailableError(M + 1, V.max_order, "adiabatic")
    if sample_times is None:
        if window is None:
            raise DomainError("build_hierarchy needs sample_times or a window", "adiabatic")
        sample_times = chebyshev_nodes(window[0], window[1], n_nodes)
    times = np.array(sorted({float(t) for t in sample_times}))
    if times.size < 2:
        raise DomainError("build_hierarchy needs at least two distinct sample times", "adiabatic")

    L = OperatorSampler.constant(model.reference_operator(), label="H") + V
    checks: Dict[str, object] = {}
    if decomposition is None:
        raw = detect_clusters(model)
        delta = delta_exponent(raw.mu, V.nu)
        required = choose_J_smooth(raw, V, delta, model=model, times=times)
        checks["J_required"] = required
        if J is None:
            J = required
        elif J < required:
            logger.warning("J=%d is below the escape bound J=%d; watching for cluster escape", J, required)
        decomposition = perturbed_clusters(dyadic_regroup(raw, J))
    elif J is None:
        J = decomposition.J
    mu, nu = decomposition.mu, V.nu
    delta = float("nan")
    if np.isfinite(mu) and mu > 0 and nu < mu / (mu + 1):
        delta = delta_exponent(mu, nu)

    workers = threads or min(8, times.size)
    with ThreadPoolExecutor(max_workers=workers) as pool:
        rows = list(pool.map(
            lambda t: _sample_levels(L, decomposition, M, t, fd_step, keep_spectra, check_algebra), times))

    levels = []
    for m in range(M + 1):
        terms = [row[m][0] for row in rows]
        counter_terms = np.array([term.total for term in terms])
        algebra = {}
        if check_algebra:
            algebra = {key: max(row[m][2][key] for row in rows) for key in rows[0][m][2]}
        level = HierarchyLevel(
            m=m,
            times=times,
            counter_terms=counter_terms,
            block_norms=np.array([term.block_norms for term in terms]),
            spectra=tuple(row[m][1] for row in rows) if keep_spectra else (),
            algebra=algebra,
            hermitian_defect=max(term.hermitian_defect for term in terms),
            interpolant=BarycentricInterpolator(times, counter_terms, axis=0),
        )
        if check_algebra and not level.algebra_pass:
            logger.warning("projector algebra residuals above %.0e at level %d: %s", ALGEBRA_TOL, m, algebra)
        logger.info("level %d: sup ‖B_m‖ %.3e over %d sample times", m,
                    max(np.linalg.norm(B, 2) for B in counter_terms), times.size)
        levels.append(level)

    return AdiabaticHierarchy(model, L, decomposition, tuple(levels), M, int(J), mu, nu, delta, fd_step, checks)


def adiabatic_propagate(hier: AdiabaticHierarchy, psi_s, cfg: PropagatorConfig, ks: Sequence[float] = (1.0,),
                        check_points: int = 4) -> Tuple[Trajectory, dict]:
    """Propagate under L - B_M and measure how well the flow intertwines the projectors.

    Returns:
        the trajectory, and a report with the intertwining defect
        max_j ‖Π_{M,j}(t)U_ad - U_adΠ_{M,j}(s)‖ (largest over the check times and
        at the final time) plus sup and spread of the recorded H^k norms
    """
    L_ad = hier.adiabatic_generator()
    traj = propagate(hier.model, L_ad, psi_s, cfg, ks)

    ev = hier.evaluator()
    s = cfg.t_span[0]
    initial = ev.projectors(hier.M, s)
    times, flows = propagator_snapshots(L_ad, cfg, every=max(1, cfg.n_steps // max(1, check_points)))
    defects = []
    for t, U in zip(times[1:], flows[1:]):
        current = ev.projectors(hier.M, t)
        defects.append(max(_operator_norm(P_t @ U - U @ P_s) for P_t, P_s in zip(current, initial)))
    report = {
        "intertwining_defect": max(defects) if defects else 0.0,
        "final_defect": defects[-1] if defects else 0.0,
        "check_times": times[1:].tolist(),
        "sup_norms": {k: float(series.max()) for k, series in traj.norms.items()},
        "norm_band": {k: float(series.max() / series.min()) for k, series in traj.norms.items()},
        "conservation_drift": traj.conservation_drift,
    }
    logger.info("adiabatic flow of depth %d: intertwining defect %.3e", hier.M, report["intertwining_defect"])
    return replace(traj, extras={"adiabatic": report}), report


def intertwining_order(hier: AdiabaticHierarchy, psi_s, cfg: PropagatorConfig, refinements: int = 3,
                       agreement: float = 0.3) -> dict:
    """Measured order of the final-time intertwining defect as dt halves.

    ``pair_orders`` are log2 ratios of consecutive defects. ``order`` is fitted
    over the trailing pairs that agree with the finest one within
    ``agreement``; coarser pairs outside that run are reported but not fitted.
    """
    if refinements < 2:
        raise DomainError(f"intertwining order needs at least 2 step sizes, got {refinements}", "adiabatic")
    dts = [cfg.dt / 2 ** i for i in range(refinements)]
    defects = [adiabatic_propagate(hier, psi_s, replace(cfg, dt=dt), ks=(0.0,), check_points=1)[1]["final_defect"]
               for dt in dts]
    if min(defects) <= 0.0:
        raise InsufficientDataError("intertwining defect vanishes, no order to measure", "adiabatic")
    pair_orders = [float(np.log2(coarse / fine)) for coarse, fine in zip(defects[:-1], defects[1:])]
    start = len(pair_orders) - 1
    while start > 0 and abs(pair_orders[start - 1] - pair_orders[-1]) <= agreement:
        start -= 1
    order = float(linregress(np.log(dts[start:]), np.log(defects[start:])).slope)
    logger.info("intertwining defect order %.3f (pair orders %s) fitted from dt=%g", order,
                ", ".join(f"{p:.3f}" for p in pair_orders), dts[start])
    return {"order": order, "dts": dts, "defects": defects, "pair_orders": pair_orders, "fitted_from": dts[start]}


def duhamel_compare(hier: AdiabaticHierarchy, psi_s, cfg: PropagatorConfig,
                    quadrature: str = "trapezoid") -> dict:
    """Residual of U(t,s)ψ = U_ad(t,s)ψ - i∫ U_ad(t,r) B_M(r) U(r,s)ψ dr on the recorded steps.

    The integrand is U_ad(r,s)* B_M(r) U(r,s)ψ, so a single set of U_ad
    snapshots serves every r. Also checks, per cluster, the projected tail
    bound ‖Π_{M,j}(t)U(t,s)ψ‖ ≤ ‖Π_{M,j}(s)ψ‖ + ⟨t-s⟩ sup_r ‖B_{M,j}(r)‖ ‖ψ‖.
    """
    if quadrature not in ("trapezoid", "simpson"):
        raise DomainError(f"unknown quadrature '{quadrature}'", "adiabatic")
    psi = np.array(psi_s, dtype=complex)
    step_cfg = replace(cfg, record_every=1)
    full = propagate(hier.model, hier.L, psi, step_cfg, ks=(0.0,))
    L_ad = hier.adiabatic_generator()
    times, flows = propagator_snapshots(L_ad, step_cfg)
    level = hier.level(hier.M)
    integrand = np.array([U.conj().T @ (level.counter_term_at(r) @ phi)
                          for r, U, phi in zip(times, flows, full.states)])
    rule = trapezoid if quadrature == "trapezoid" else simpson
    integral = rule(integrand, x=times, axis=0)
    rhs = flows[-1] @ (psi - 1j * integral)
    residual = float(np.linalg.norm(full.states[-1] - rhs))

    halved = replace(step_cfg, dt=cfg.dt / 2)
    error_full = np.linalg.norm(propagate(hier.model, hier.L, psi, halved, ks=(0.0,)).states[-1] - full.states[-1])
    error_ad = np.linalg.norm(propagate(hier.model, L_ad, psi, halved, ks=(0.0,)).states[-1] - flows[-1] @ psi)
    integrator_error = float(max(error_full, error_ad))

    ev = hier.evaluator()
    s, t = cfg.t_span
    start, end = ev.projectors(hier.M, s), ev.projectors(hier.M, t)
    sup_blocks = level.sup_block_norms
    elapsed = japanese_bracket(t - s)
    rows = []
    for j in range(hier.decomposition.n_clusters):
        lhs = float(np.linalg.norm(end[j] @ full.states[-1]))
        rhs_j = float(np.linalg.norm(start[j] @ psi) + elapsed * sup_blocks[j] * np.linalg.norm(psi))
        rows.append({"j": j + 1, "lhs": lhs, "rhs": rhs_j, "holds": lhs <= rhs_j + integrator_error + 1e-9})
    tail = pd.DataFrame(rows)

    report = {
        "residual": residual,
        "integrator_error": integrator_error,
        "within_bound": bool(residual <= 10.0 * integrator_error + 1e-12),
        "quadrature": quadrature,
        "tail_bound": tail,
        "tail_bound_holds": bool(tail["holds"].all()),
    }
    logger.info("Duhamel residual %.3e against integrator error %.3e", residual, integrator_error)
    return report


@dataclass(frozen=True, eq=False)
class NormEquivalence:
    c0: float
    c1: float
    c2: float
    table: pd.DataFrame
    stability: float

    @property
    def stable(self) -> bool:
        return self.stability <= 0.1


def _equivalence_ratios(hier: AdiabaticHierarchy, ev: LevelEvaluator, m: int, t: float, c0: Optional[float],
                        X: np.ndarray, ps: Sequence[float]) -> Tuple[float, List[dict]]:
    H_ad = symmetrize(hier.L.eval(t) - ev.counter(m, t).total)
    w, Q = eigh(H_ad)
    shift = 1.0 + max(0.0, -float(w.min())) if c0 is None else c0
    if w.min() + shift <= 0:
        raise DomainError(f"shift c_0 too small: H_ad,{m}({t:.6g}) + c_0 has eigenvalue {w.min() + shift:.3e}",
                          "adiabatic")
    level_spectrum = ev.spectrum(m, t)
    weights = cluster_weights(hier.decomposition.n_clusters, hier.mu)[level_spectrum.labels]
    in_ad = Q.conj().T @ X
    in_level = level_spectrum.eigenvectors.conj().T @ X
    lam = hier.model.eigenvalues
    rows = []
    for p in ps:
        adiabatic = np.linalg.norm(((w + shift) ** p)[:, None] * in_ad, axis=0)
        sobolev = np.linalg.norm((lam ** p)[:, None] * X, axis=0)
        blocks = 2.0 ** (hier.J * p * (hier.mu + 1)) * np.linalg.norm((weights ** p)[:, None] * in_level, axis=0)
        r_sob, r_lam = adiabatic / sobolev, adiabatic / blocks
        rows.append({"t": float(t), "p": float(p),
                     "c1_sobolev": float(r_sob.min()), "c2_sobolev": float(r_sob.max()),
                     "c1_lambda": float(r_lam.min()), "c2_lambda": float(r_lam.max())})
    return shift, rows


def norm_equivalence(hier: AdiabaticHierarchy, m: int, p_list: Sequence[float], sample_times: Sequence[float],
                     n_vectors: int = 200, seed: int = 0, c0: Optional[float] = None) -> NormEquivalence:
    """Empirical c_1, c_2 with c_1‖ψ‖_{2p} ≤ ‖(H_ad,m + c_0)^pψ‖ ≤ c_2‖ψ‖_{2p} and the Λ_m analogue.

    Ratios are taken over Gaussian test vectors in the full truncation. The
    sample is then doubled and the relative change of c_2/c_1 is reported as
    ``stability``.
    """
    hier.level(m)
    if any(p < 0 for p in p_list):
        raise DomainError("norm equivalence powers must be nonnegative", "adiabatic")
    rng = np.random.default_rng(seed)
    dim = hier.L.dim
    X = rng.standard_normal((dim, 2 * n_vectors)) + 1j * rng.standard_normal((dim, 2 * n_vectors))
    ev = hier.evaluator()
    if c0 is None:
        lowest = min(float(eigh(symmetrize(hier.L.eval(t) - ev.counter(m, t).total), eigvals_only=True)[0])
                     for t in sample_times)
        c0 = 1.0 + max(0.0, -lowest)

    def constants(sample: np.ndarray) -> Tuple[pd.DataFrame, float, float]:
        rows = []
        for t in sample_times:
            rows.extend(_equivalence_ratios(hier, ev, m, t, c0, sample, p_list)[1])
        table = pd.DataFrame(rows)
        c1 = float(min(table["c1_sobolev"].min(), table["c1_lambda"].min()))
        c2 = float(max(table["c2_sobolev"].max(), table["c2_lambda"].max()))
        return table, c1, c2

    table, c1, c2 = constants(X[:, :n_vectors])
    _, c1_doubled, c2_doubled = constants(X)
    stability = abs((c2_doubled / c1_doubled) / (c2 / c1) - 1.0)
    logger.info("norm equivalence at level %d: c0=%.4g c1=%.4g c2=%.4g (stability %.3f)", m, c0, c1, c2, stability)
    return NormEquivalence(c0, c1, c2, table, stability)


@dataclass(frozen=True, eq=False)
class ProofChain:
    L: np.ndarray
    K: np.ndarray
    D: np.ndarray
    residuals: dict
    closure: str


def proof_chain_operators(hier: AdiabaticHierarchy, m: int, j: int, t: float) -> ProofChain:
    """L_{m,j} = Π_{m+1,j} - Π_{m,j}, K_{m,j} = Π_{m,j}L_{m,j}, D_{m,j} = Π_{m+1,j}L_{m,j} and their identities.

    D = ΠK(1-L)^{-1} is evaluated with K_{m,j} and, when level m+2 exists, with
    K_{m+1,j}; ``closure`` names the one with the smaller residual. The counter-term split
    is evaluated as
    Π∂Π = D∂Π + Π∂_{(t,L-B_m)}K + iΠQ[B_m,Π] with Π = Π_{m+1,j}, Q = Π_{m,j},
    which follows from the homological equation at level m, and also in the
    form B_{m+1,j} = iD∂Π + Π∂_{(t,-Σ_{i≤m}B_i)}K.
    """
    if not 0 <= m < hier.M:
        raise DomainError(f"proof chain needs levels m and m+1 with m+1 ≤ {hier.M}, got m={m}", "adiabatic")
    if not 1 <= j <= hier.decomposition.n_clusters:
        raise DomainError(f"cluster index j={j} outside 1..{hier.decomposition.n_clusters}", "adiabatic")
    ev = hier.evaluator()
    Q = ev.projectors(m, t)[j - 1]
    P = ev.projectors(m + 1, t)[j - 1]
    identity = np.eye(P.shape[0])
    L_mj = P - Q
    K = Q @ L_mj
    D = P @ L_mj
    gap = identity - L_mj
    if np.linalg.cond(gap) > SINGULAR_COND:
        raise DomainError(f"perturbation step too large: 1 - L_{m},{j} is singular at t={t:.6g}", "adiabatic")
    inverse = solve(gap, identity)
    scale = max(1.0, np.linalg.norm(D))
    residuals = {"D_with_K_m": float(np.linalg.norm(D - P @ K @ inverse)) / scale}
    if m + 2 <= hier.M:
        P_next = ev.projectors(m + 2, t)[j - 1]
        K_next = P @ (P_next - P)
        residuals["D_with_K_m1"] = float(np.linalg.norm(D - P @ K_next @ inverse)) / scale
    closure = min(residuals, key=residuals.get).replace("D_with_", "")

    G = hier.L.eval(t)
    dP = ev.projector_derivatives(m + 1, t)[j - 1]
    dQ = ev.projector_derivatives(m, t)[j - 1]
    B_m = ev.counter(m, t).total
    heisenberg_P = dP + 1j * (G @ P - P @ G)
    dK = dQ @ P + Q @ dP - dQ
    lhs = P @ heisenberg_P
    along_adiabatic = dK + 1j * ((G - B_m) @ K - K @ (G - B_m))
    corrected = D @ heisenberg_P + P @ along_adiabatic + 1j * P @ Q @ (B_m @ P - P @ B_m)
    B_sum = sum(ev.counter(i, t).total for i in range(m + 1))
    printed = 1j * D @ heisenberg_P + P @ (dK - 1j * (B_sum @ K - K @ B_sum))
    block_scale = max(1.0, np.linalg.norm(lhs))
    residuals["B_identity"] = float(np.linalg.norm(lhs - corrected)) / block_scale
    residuals["B_printed"] = float(np.linalg.norm(lhs - printed)) / block_scale
    logger.debug("proof chain m=%d j=%d: residuals %s", m, j, residuals)
    return ProofChain(L_mj, K, D, residuals, closure)


def proof_chain_decay(hier: AdiabaticHierarchy, m: int, t: float) -> pd.DataFrame:
    """Per cluster: Δ̃_{j-1} and the norms of L_{m,j}, K_{m,j}, D_{m,j}."""
    if not 0 <= m < hier.M:
        raise DomainError(f"proof chain needs levels m and m+1 with m+1 ≤ {hier.M}, got m={m}", "adiabatic")
    ev = hier.evaluator()
    lower, upper = ev.projectors(m, t), ev.projectors(m + 1, t)
    gaps = hier.decomposition.lower_gaps
    rows = []
    for j, (Q, P) in enumerate(zip(lower, upper)):
        L_mj = P - Q
        rows.append({"j": j + 1, "lower_gap": float(gaps[j]), "L_norm": _operator_norm(L_mj),
                     "K_norm": _operator_norm(Q @ L_mj), "D_norm": _operator_norm(P @ L_mj)})
    return pd.DataFrame(rows)


def stationarity_residual(hier: AdiabaticHierarchy, m: int, t: float) -> float:
    """max_j ‖∂_tΠ_{m,j} + i[L - B_m, Π_{m,j}]‖ with ∂_tΠ from finite differences of the projectors."""
    hier.level(m)
    ev = hier.evaluator()
    projectors = ev.projectors(m, t)
    derivatives = central_derivative(lambda r: ev.projectors(m, r), t, 1, hier.fd_step)
    G = hier.L.eval(t) - ev.counter(m, t).total
    return max(_operator_norm(dP + 1j * (G @ P - P @ G)) for P, dP in zip(projectors, derivatives))


def homological_residual(hier: AdiabaticHierarchy, m: int, t: float) -> float:
    """max_j ‖i[B_m, Π_{m,j}] - ∂_{(t,L)}Π_{m,j}‖ with the perturbative projector derivatives."""
    hier.level(m)
    ev = hier.evaluator()
    B = ev.counter(m, t).total
    G = hier.L.eval(t)
    return max(_operator_norm(1j * (B @ P - P @ B) - dP - 1j * (G @ P - P @ G))
               for P, dP in zip(ev.projectors(m, t), ev.projector_derivatives(m, t)))


def block_decay_fit(hier: AdiabaticHierarchy, m: int, j_range: Tuple[int, int] = (3, 8),
                    tolerance: float = DECAY_TOLERANCE) -> dict:
    """Slope of log sup_t ‖B_{m,j}‖ against log Δ̃_{j-1} over full blocks with j in j_range."""
    norms = hier.level(m).sup_block_norms
    gaps = hier.decomposition.lower_gaps
    j = np.arange(1, norms.size + 1)
    keep = (j >= j_range[0]) & (j <= j_range[1]) & (norms > 0) & np.isfinite(gaps)
    if hier.decomposition.partial_tail:
        keep &= j < norms.size
    if keep.sum() < 3:
        raise InsufficientDataError(f"block decay fit at level {m} has {int(keep.sum())} usable blocks", "adiabatic")
    fit = linregress(np.log(gaps[keep]), np.log(norms[keep]))
    bound = -hier.delta * (1 + m)
    passed = bool(fit.slope <= bound + tolerance) if np.isfinite(bound) else None
    if passed is False:
        logger.warning("level %d block decay slope %.3f above %.3f", m, fit.slope, bound + tolerance)
    return {"m": m, "slope": float(fit.slope), "stderr": float(fit.stderr), "bound": bound,
            "pass": passed, "j_min": int(j[keep].min()), "j_max": int(j[keep].max())}


def block_monotonicity(hier: AdiabaticHierarchy) -> dict:
    """Whether sup_t ‖B_{m,j}‖ is nonincreasing in m for each j; violations are only logged."""
    table = np.array([level.sup_block_norms for level in hier.levels])
    flags = {}
    for j in range(table.shape[1]):
        column = table[:, j]
        flags[str(j + 1)] = bool(np.all(np.diff(column) <= 1e-12 * max(1.0, column.max())))
    violated = [j for j, ok in flags.items() if not ok]
    if violated:
        logger.warning("block norms increase with m for clusters %s", ", ".join(violated))
    return {"flags": flags, "all_nonincreasing": not violated}


def block_norm_table(hier: AdiabaticHierarchy) -> pd.DataFrame:
    rows = []
    gaps = hier.decomposition.lower_gaps
    for level in hier.levels:
        for j, norm in enumerate(level.sup_block_norms):
            rows.append({"m": level.m, "j": j + 1, "lower_gap": float(gaps[j]), "block_norm": float(norm)})
    return pd.DataFrame(rows)
