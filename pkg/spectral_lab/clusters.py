"""Spectral cluster structure of the reference operator and the constants chosen from it."""
import logging
import math
from dataclasses import dataclass, field, replace
from typing import Dict, List, Optional, Sequence, Tuple

import numpy as np
from scipy.linalg import svdvals
from scipy.stats import linregress

from spectral_lab.errors import DomainError
from spectral_lab.spectral_core import OperatorSampler, SpectralModel

logger = logging.getLogger(__name__)

SUM_IN_CONSTANT = 2 * math.pi ** 2 / 3
EXPONENT_TOL = 0.1
GAP_EXPONENT_FLOOR = 1e-6


@dataclass(frozen=True, eq=False)
class ClusterDecomposition:
    """Ordered disjoint intervals enclosing the spectrum.

    ``blocks`` records, after dyadic regrouping, the half-open range of original
    cluster indices merged into each block. ``reference_gaps`` keeps the gaps of
    the regrouped decomposition once its intervals have been enlarged.
    """

    intervals: np.ndarray
    member_index: np.ndarray
    eigenvalues: np.ndarray
    mu: float = float("nan")
    alpha: float = float("nan")
    beta: float = float("nan")
    J: int = 0
    checks: dict = field(default_factory=dict)
    blocks: Tuple[Tuple[int, int], ...] = ()
    partial_tail: bool = False
    reference_gaps: Optional[np.ndarray] = None

    def __post_init__(self):
        intervals = np.asarray(self.intervals, dtype=float).reshape(-1, 2)
        if np.any(intervals[:, 1] < intervals[:, 0]):
            raise DomainError("cluster interval with max below min", "clusters")
        if np.any(intervals[1:, 0] <= intervals[:-1, 1]):
            raise DomainError("clusters must be pairwise disjoint and increasing", "clusters")
        object.__setattr__(self, "intervals", intervals)
        object.__setattr__(self, "member_index", np.asarray(self.member_index, dtype=int))
        object.__setattr__(self, "eigenvalues", np.asarray(self.eigenvalues, dtype=float))

    @property
    def n_clusters(self) -> int:
        return self.intervals.shape[0]

    @property
    def gaps(self) -> np.ndarray:
        """Δ_j = dist(σ_{j+1}, σ_j), j = 1..n-1."""
        return self.intervals[1:, 0] - self.intervals[:-1, 1]

    @property
    def diameters(self) -> np.ndarray:
        return self.intervals[:, 1] - self.intervals[:, 0]

    @property
    def lower_gaps(self) -> np.ndarray:
        """Δ̃_{j-1} for each cluster j, with Δ̃_0 := Δ̃_1."""
        gaps = self.reference_gaps if self.reference_gaps is not None else self.gaps
        if gaps.size == 0:
            return np.full(self.n_clusters, np.inf)
        return np.concatenate([gaps[:1], gaps])

    def members(self, j: int) -> np.ndarray:
        return np.flatnonzero(self.member_index == j)

    def assign(self, values: np.ndarray) -> np.ndarray:
        """Cluster index of each value, -1 where a value lies in a gap.

        Values below the first or above the last cluster belong to that edge
        cluster, since the truncation has nothing beyond them.
        """
        values = np.asarray(values, dtype=float)
        index = np.searchsorted(self.intervals[:, 0], values, side="right") - 1
        index = np.clip(index, 0, self.n_clusters - 1)
        inside = values <= self.intervals[index, 1]
        inside |= index == self.n_clusters - 1
        inside |= values < self.intervals[0, 0]
        return np.where(inside, index, -1)

    @classmethod
    def from_intervals(cls, intervals, eigenvalues=None, **kwargs) -> "ClusterDecomposition":
        intervals = np.asarray(intervals, dtype=float).reshape(-1, 2)
        values = np.asarray(eigenvalues if eigenvalues is not None else [], dtype=float)
        stub = cls(intervals, np.zeros(0, dtype=int), values, **kwargs)
        members = stub.assign(values) if values.size else np.zeros(0, dtype=int)
        if np.any(members < 0):
            raise DomainError("an eigenvalue lies outside every given interval", "clusters")
        return replace(stub, member_index=members)

    def to_dict(self) -> dict:
        return {
            "intervals": self.intervals.tolist(),
            "gaps": self.gaps.tolist(),
            "diameters": self.diameters.tolist(),
            "mu": json_float(self.mu),
            "alpha": json_float(self.alpha),
            "beta": json_float(self.beta),
            "J": self.J,
            "blocks": [list(b) for b in self.blocks],
            "partial_tail": self.partial_tail,
            "member_index": self.member_index.tolist(),
            "checks": {key: json_float(value) for key, value in self.checks.items()},
        }


def json_float(value):
    if isinstance(value, (bool, np.bool_)):
        return bool(value)
    if isinstance(value, (float, np.floating)):
        return None if not np.isfinite(value) else float(value)
    return value


@dataclass(frozen=True)
class GapThresholdPolicy:
    """A spacing separates clusters unless it is small next to its neighbours.

    Spacing s_i is a boundary when it is not a degeneracy and
    factor * s_i reaches the median of the nonzero spacings within ``window``
    positions on either side. Put the other way round, a spacing is merged
    into a cluster only when the local median exceeds it more than
    ``factor`` times; an evenly spaced spectrum is therefore all singletons.
    """

    factor: float = 3.0
    window: int = 2
    degeneracy_tol: float = 1e-9

    def boundaries(self, eigenvalues: np.ndarray) -> np.ndarray:
        spacings = np.diff(eigenvalues)
        scale = np.maximum(1.0, np.abs(eigenvalues[:-1]))
        degenerate = spacings <= self.degeneracy_tol * scale
        cuts = np.zeros(spacings.size, dtype=bool)
        for i, spacing in enumerate(spacings):
            if degenerate[i]:
                continue
            lo, hi = max(0, i - self.window), min(spacings.size, i + self.window + 1)
            neighbours = [spacings[n] for n in range(lo, hi) if n != i and not degenerate[n]]
            cuts[i] = not neighbours or self.factor * spacing >= np.median(neighbours)
        return cuts


def _power_fit(index: np.ndarray, values: np.ndarray) -> float:
    keep = values > 0
    if keep.sum() < 2:
        return float("nan")
    return float(linregress(np.log(index[keep]), np.log(values[keep])).slope)


def detect_clusters(model: SpectralModel, policy: Optional[GapThresholdPolicy] = None,
                    fit_range: Optional[Tuple[int, int]] = None) -> ClusterDecomposition:
    """Partition the spectrum into clusters and fit the gap law.

    Args:
        model: spectral model whose eigenvalues are clustered
        policy: boundary rule, GapThresholdPolicy() by default
        fit_range: inclusive 1-based range of gap indices j for the fits; by
            default the gaps between clusters inside observe_dim, skipping the
            first quarter of them and always j < 3

    Returns:
        ClusterDecomposition with fitted mu, alpha, beta and a ``checks`` report
    """
    policy = policy or GapThresholdPolicy()
    lam = model.eigenvalues
    if lam.size < 8:
        raise DomainError(f"cluster detection needs at least 8 eigenvalues, got {lam.size}", "clusters")

    cuts = policy.boundaries(lam)
    member_index = np.concatenate([[0], np.cumsum(cuts)])
    n_clusters = int(member_index[-1]) + 1
    if n_clusters < 3:
        raise DomainError(f"insufficient cluster statistics: {n_clusters} clusters found", "clusters")
    intervals = np.array([[lam[member_index == j].min(), lam[member_index == j].max()]
                          for j in range(n_clusters)])
    dec = ClusterDecomposition(intervals, member_index, lam)

    gaps, diameters = dec.gaps, dec.diameters
    if fit_range is None:
        trusted = int(member_index[model.observe_dim - 1])
        top = max(2, min(trusted, gaps.size))
        fit_range = (max(1, min(max(3, trusted // 4), top - 1)), top)
    j_lo, j_hi = max(1, fit_range[0]), min(gaps.size, fit_range[1])
    if j_hi - j_lo < 1:
        raise DomainError(f"fit range {fit_range} holds fewer than 2 gaps", "clusters")
    j = np.arange(j_lo, j_hi + 1, dtype=float)
    window_gaps = gaps[j_lo - 1:j_hi]
    window_diam = diameters[j_lo - 1:j_hi]
    window_min = intervals[j_lo - 1:j_hi, 0]

    mu = float(linregress(np.log(j), np.log(window_gaps)).slope)
    scaled = window_gaps / j ** mu
    alpha = float(max(scaled.max(), (1.0 / scaled).max()))
    beta = float((window_diam / j ** mu).max())
    beta_width = float((window_diam / j ** (mu + 1)).max())
    diameter_exponent = _power_fit(j, window_diam)
    if not np.isfinite(diameter_exponent) or diameter_exponent <= mu + EXPONENT_TOL:
        diameter_bound = "both"
    elif diameter_exponent <= mu + 1 + EXPONENT_TOL:
        diameter_bound = "width"
    else:
        diameter_bound = "neither"
    loc_exponent = _power_fit(j, window_min)
    checks = {
        "hgap_pass": bool(mu > GAP_EXPONENT_FLOOR),
        "fit_j_min": j_lo,
        "fit_j_max": j_hi,
        "diameter_exponent": diameter_exponent,
        "diameter_bound": diameter_bound,
        "beta_width": beta_width,
        "loc_sc_c1": float((window_min / j ** (mu + 1)).min()),
        "loc_sc_exponent": loc_exponent,
        "loc_sc_pass": bool(mu > GAP_EXPONENT_FLOOR and loc_exponent >= mu + 1 - EXPONENT_TOL),
    }
    if not checks["hgap_pass"]:
        logger.warning("gap condition FAIL for %s: fitted gap exponent mu=%.4f", model.label, mu)
    logger.info("%s: %d clusters, mu=%.4f alpha=%.3f beta=%.3f", model.label, n_clusters, mu, alpha, beta)
    return replace(dec, mu=mu, alpha=alpha, beta=beta, checks=checks)


def dyadic_blocks(n_clusters: int, J: int) -> List[Tuple[int, int]]:
    """Index ranges [start, stop) of original clusters per block; the last may be partial."""
    blocks = [(0, 2 ** J)]
    j = 2
    while blocks[-1][1] < n_clusters:
        start, stop = 2 ** (J + j - 2), 2 ** (J + j - 1)
        blocks.append((start, min(stop, n_clusters)))
        j += 1
    return blocks


def dyadic_regroup(dec: ClusterDecomposition, J: int) -> ClusterDecomposition:
    """Merge clusters into blocks σ̃_1 = σ_1..σ_{2^J}, σ̃_j = σ_{2^{J+j-2}+1}..σ_{2^{J+j-1}}."""
    if J < 1:
        raise DomainError(f"dyadic parameter J={J} must be a positive integer", "clusters")
    if dec.n_clusters < 2 ** (J + 1):
        raise DomainError(
            f"too few clusters for J={J}: need {2 ** (J + 1)}, have {dec.n_clusters}", "clusters")

    blocks = dyadic_blocks(dec.n_clusters, J)
    partial = blocks[-1][1] - blocks[-1][0] < (2 ** J if len(blocks) == 1 else blocks[-1][0])
    intervals = np.array([[dec.intervals[a, 0], dec.intervals[b - 1, 1]] for a, b in blocks])
    lookup = np.zeros(dec.n_clusters, dtype=int)
    for index, (a, b) in enumerate(blocks):
        lookup[a:b] = index
    regrouped = ClusterDecomposition(intervals, lookup[dec.member_index], dec.eigenvalues, mu=dec.mu,
                                     J=J, blocks=tuple(blocks), partial_tail=bool(partial))

    full = len(blocks) - (1 if partial else 0)
    checks: Dict[str, object] = {"full_blocks": full}
    if np.isfinite(dec.mu) and full >= 2:
        mu = dec.mu
        j = np.arange(1, full)
        gaps = regrouped.gaps[:full - 1]
        growth = 2.0 ** ((J + j - 1) * mu)
        checks["alpha_tilde"] = float((growth / gaps).max())
        block_index = np.arange(1, full + 1)
        energy = 2.0 ** ((J + block_index - 1) * (mu + 1))
        checks["beta_tilde"] = float((regrouped.diameters[:full] / energy).max())
        c1 = float((intervals[:full, 0] / energy).min())
        c2 = float((intervals[:full, 1] / energy).max())
        checks.update({"loc2_c1": c1, "loc2_c2": c2,
                       "eqenergy_ratio": float((intervals[:full, 1] / intervals[:full, 0]).max()),
                       "eqenergy_pass": bool(np.all(intervals[:full, 1] <= (c2 / c1) * intervals[:full, 0]))})
        regrouped = replace(regrouped, alpha=checks["alpha_tilde"], beta=checks["beta_tilde"])
    regrouped = replace(regrouped, checks=checks)
    logger.debug("regrouped %d clusters into %d blocks with J=%d", dec.n_clusters, len(blocks), J)
    return regrouped


def delta_exponent(mu: float, nu: float) -> float:
    """δ = 1 - ((μ+1)/μ)ν, defined for 0 ≤ ν < μ/(μ+1)."""
    if mu <= 0:
        raise DomainError(f"gap exponent mu={mu} must be positive", "clusters")
    if nu < 0:
        raise DomainError(f"relative order nu={nu} must be nonnegative", "clusters")
    if nu >= mu / (mu + 1) - 1e-12:
        raise DomainError(f"perturbation order too high: nu={nu} >= mu/(mu+1)={mu / (mu + 1):.6g}", "clusters")
    return 1.0 - (mu + 1) / mu * nu


def perturbed_clusters(dec: ClusterDecomposition) -> ClusterDecomposition:
    """Enlarge each σ̃_j by Δ̃_{j-1}/4 on both sides (Δ̃_0 := Δ̃_1)."""
    if dec.J == 0:
        logger.warning("enlarging clusters that were not dyadically regrouped")
    margins = dec.lower_gaps / 4.0
    intervals = dec.intervals + np.outer(margins, [-1.0, 1.0])
    if np.any(intervals[1:, 0] <= intervals[:-1, 1]):
        worst = int(np.argmin(intervals[1:, 0] - intervals[:-1, 1]))
        raise DomainError(f"gap condition violated after enlargement between clusters {worst + 1} and {worst + 2}",
                          "clusters")
    return replace(dec, intervals=intervals, reference_gaps=dec.gaps.copy())


def estimate_resolvent_constant(dec: ClusterDecomposition, nu: float, delta: float,
                                n_points: int = 64) -> float:
    """max_j max_{z on gap midlines} ‖H^ν (H - z)^{-1}‖ · Δ̃_{j-1}^δ on the diagonal model."""
    lam = dec.eigenvalues
    weights = lam ** nu
    lower = dec.lower_gaps
    best = 0.0
    for j in range(dec.n_clusters):
        lines = [dec.intervals[j, 0] - lower[j] / 2.0]
        if j + 1 < dec.n_clusters:
            lines.append(dec.intervals[j, 1] + dec.gaps[j] / 2.0)
        heights = np.linspace(-3.0, 3.0, n_points) * lower[j]
        for x in lines:
            z = x + 1j * heights
            norms = (weights[None, :] / np.abs(lam[None, :] - z[:, None])).max(axis=1)
            best = max(best, float(norms.max()) * lower[j] ** delta)
    logger.debug("resolvent constant %.4g (nu=%g, delta=%g)", best, nu, delta)
    return best


def sup_perturbation_norm(model: SpectralModel, V: OperatorSampler, times: Sequence[float],
                          nu: Optional[float] = None) -> float:
    """sup over sampled t of ‖V(t) H^{-ν}‖ in the full truncation."""
    nu = V.nu if nu is None else nu
    scale = model.eigenvalues ** (-nu)
    return max(float(svdvals(V.eval(t) * scale[None, :])[0]) for t in times)


def choose_J_smooth(dec: ClusterDecomposition, V: OperatorSampler, delta: float, *,
                    model: Optional[SpectralModel] = None, times: Sequence[float] = (0.0,),
                    C_H: Optional[float] = None, sup_norm: Optional[float] = None) -> int:
    """Smallest J ≥ 1 with 2^{Jμδ} ≥ 2^4 C_H sup‖V(t)H^{-ν}‖."""
    if sup_norm is None:
        if model is None:
            raise DomainError("choose_J_smooth needs a model to measure sup‖VH^-ν‖", "clusters")
        sup_norm = sup_perturbation_norm(model, V, times)
    if C_H is None:
        C_H = estimate_resolvent_constant(dec, V.nu, delta)
    target = 16.0 * C_H * sup_norm
    if target <= 1.0:
        return 1
    J = max(1, math.ceil(math.log2(target) / (dec.mu * delta) - 1e-9))
    logger.info("chose J=%d (C_H=%.4g, sup norm=%.4g, mu*delta=%.4g)", J, C_H, sup_norm, dec.mu * delta)
    return J


def choose_constants_smooth(epsilon: float, mu: float, delta: float, n: float) -> int:
    """Smallest M with (μ+1)n / (εμδ) ≤ M+1."""
    if epsilon <= 0:
        raise DomainError(f"epsilon={epsilon} must be positive", "clusters")
    bound = (mu + 1) * n / (epsilon * mu * delta)
    return max(0, math.ceil(bound - 1e-9) - 1)


def td_constant(mu: float, delta: float) -> float:
    growth = 2.0 ** (mu * delta)
    return growth / (growth - 1.0)


def analytic_normalization(c0: float, c1: float) -> Tuple[float, float, float]:
    """(a, c, A) with A = 2π²/3, a = A·c0 and c = 4·c1."""
    return SUM_IN_CONSTANT * c0, 4.0 * c1, SUM_IN_CONSTANT


def sum_in_check(A: float, ell_max: int, k_max: int) -> bool:
    """Check (1+ℓ)² Σ_{n_1+..+n_k=ℓ} Π (1+n_i)^{-2} ≤ A^{k-1} for ℓ ≤ ell_max, 1 ≤ k ≤ k_max."""
    base = 1.0 / (1.0 + np.arange(ell_max + 1)) ** 2
    power = base.copy()
    worst = 0.0
    for k in range(1, k_max + 1):
        if k > 1:
            power = np.convolve(power, base)[:ell_max + 1]
        ratios = (1.0 + np.arange(ell_max + 1)) ** 2 * power / A ** (k - 1)
        worst = max(worst, float(ratios.max()))
    logger.debug("summation inequality worst ratio %.6f for A=%.4f", worst, A)
    return worst <= 1.0 + 1e-12


def japanese_bracket(x: float) -> float:
    return math.sqrt(1.0 + x * x)


def choose_constants_analytic(T: float, mu: float, delta: float, a: float, c: float,
                              td: float, C_hat: float) -> Tuple[int, int]:
    """(J, M) with M+1 = ⌊¼ log⟨T⟩⌋ and J the smallest integer at or above its defining bound.

    The logarithm in J is taken base 2, which is the base in which
    2^{12} [Ĉ_H (a + 2td) c] M ≤ 2^{Jμδ} follows.
    """
    m_plus_one = math.floor(0.25 * math.log(japanese_bracket(T)))
    if m_plus_one < 1:
        raise DomainError(f"time horizon below analytic regime: T={T} gives M+1={m_plus_one}", "clusters")
    M = m_plus_one - 1
    product = C_hat * (a + 2.0 * td) * c
    rhs = (math.log2(M + 1) + 12 + math.log2(product)) / (mu * delta)
    J = max(1, math.ceil(rhs - 1e-9))
    if 2.0 ** 12 * product * M > 2.0 ** (J * mu * delta):
        raise DomainError(f"condition on J fails for J={J}, M={M}", "clusters")
    logger.info("analytic regime: T=%g -> M=%d, J=%d", T, M, J)
    return J, M


def n_cutoff(t: float, s: float, M: int, mu: float, delta: float) -> float:
    """N(t) = log⟨t - s⟩ / ((M+1) μ δ)."""
    if M < 0:
        raise DomainError(f"depth M={M} must be nonnegative", "clusters")
    return math.log(japanese_bracket(t - s)) / ((M + 1) * mu * delta)
