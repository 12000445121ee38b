"""Concrete models: dilation flow, anharmonic oscillators, the 1-D torus and the discrete lattice.

Every builder returns a BuiltModel whose spectral model has already passed its
own spectral self-validation.
"""
import logging
import math
from dataclasses import dataclass, field
from typing import Callable, Dict, List, Optional, Sequence, Tuple, Union

import numpy as np
import pandas as pd
from scipy import sparse
from scipy.linalg import eigh_tridiagonal
from scipy.special import beta as beta_function
from scipy.stats import linregress

from spectral_lab.errors import DomainError, ModelValidationError
from spectral_lab.spectral_core import Envelope, OperatorSampler, SpectralModel, StateVector

logger = logging.getLogger(__name__)

MODEL_KINDS = ("dilation_harmonic", "anharmonic", "torus", "lattice")
HARMONIC_TOL = 1e-2
BOHR_SOMMERFELD_TOL = 2e-2


@dataclass(frozen=True)
class DriveTerm:
    """One term of a declarative drive: a power of x (real line) or a Fourier mode (torus)."""

    mode: int = 1
    envelope: Envelope = field(default_factory=Envelope)

    @classmethod
    def from_dict(cls, data: dict) -> "DriveTerm":
        data = dict(data)
        envelope = Envelope.from_dict(data.pop("envelope", {}))
        return cls(envelope=envelope, **data)


@dataclass(frozen=True)
class LatticeDrive:
    """ω_n(t) = amplitude ⟨n⟩^growth · mean_q c_{n,q} cos(Ω_q t + φ_{n,q}) with seeded coefficients."""

    amplitude: float = 0.0
    growth: float = 0.0
    frequencies: int = 3
    seed: int = 0


@dataclass(frozen=True)
class ModelSpec:
    kind: str
    k: int = 1
    p_coefficients: Tuple[float, ...] = ()
    drive: Tuple[DriveTerm, ...] = ()
    lattice_drive: LatticeDrive = field(default_factory=LatticeDrive)
    grid_points: Optional[int] = None
    radius: Optional[float] = None
    n_modes: int = 400
    cutoff: int = 64
    dimension: int = 1
    box: int = 16
    observe_dim: Optional[int] = None
    declared_mu: Optional[float] = None
    declared_nu: Optional[float] = None

    def __post_init__(self):
        if self.kind not in MODEL_KINDS:
            raise DomainError(f"unknown model kind '{self.kind}', expected one of {MODEL_KINDS}", "models")
        positives = {"k": self.k, "n_modes": self.n_modes, "cutoff": self.cutoff,
                     "dimension": self.dimension, "box": self.box}
        positives.update({name: value for name, value in (("grid_points", self.grid_points),
                                                          ("radius", self.radius)) if value is not None})
        for name, value in positives.items():
            if value <= 0:
                raise DomainError(f"model parameter {name}={value} must be positive", "models")
        expected = self.expected_mu
        if self.declared_mu is not None:
            if expected is None:
                raise DomainError(f"{self.kind} models do not declare a gap exponent", "models")
            if abs(self.declared_mu - expected) > 1e-9:
                raise DomainError(f"declared_mu={self.declared_mu} inconsistent with {self.kind} (mu={expected:g})",
                                  "models")

    @property
    def expected_mu(self) -> Optional[float]:
        if self.kind == "torus":
            return 1.0
        if self.kind == "anharmonic":
            return (self.k - 1) / (self.k + 1)
        if self.kind == "dilation_harmonic":
            return 0.0
        return None


@dataclass(frozen=True, eq=False)
class BuiltModel:
    spec: ModelSpec
    model: SpectralModel
    generator: OperatorSampler
    reference: OperatorSampler
    perturbation: Optional[OperatorSampler] = None
    grid: Optional[np.ndarray] = None
    basis: Optional[np.ndarray] = None
    oracle: Optional[Callable] = None
    sites: Optional[np.ndarray] = None
    validation: dict = field(default_factory=dict)

    def to_grid(self, psi) -> np.ndarray:
        if self.basis is None:
            raise DomainError(f"{self.spec.kind} model has no grid representation", "models")
        return self.basis @ np.asarray(psi, dtype=complex)

    def from_grid(self, values) -> np.ndarray:
        if self.basis is None:
            raise DomainError(f"{self.spec.kind} model has no grid representation", "models")
        return self.basis.T @ np.asarray(values, dtype=complex)

    def derivative_norm(self, psi, order: int = 1) -> float:
        """‖∂_x^ℓ u‖ for the continuum function u represented by ψ."""
        values = self.to_grid(psi)
        D = central_difference(self.grid.size, self.grid[1] - self.grid[0])
        for _ in range(order):
            values = D @ values
        return float(np.linalg.norm(values))


def dirichlet_grid(points: int, radius: float) -> Tuple[np.ndarray, float]:
    x = np.linspace(-radius, radius, points + 2)[1:-1]
    return x, float(x[1] - x[0])


def central_difference(points: int, h: float) -> sparse.csr_matrix:
    return sparse.diags([-np.ones(points - 1), np.ones(points - 1)], [-1, 1], format="csr") / (2.0 * h)


def _schrodinger_tridiagonal(x: np.ndarray, h: float, potential: np.ndarray) -> Tuple[np.ndarray, np.ndarray]:
    return 2.0 / h ** 2 + potential, np.full(x.size - 1, -1.0 / h ** 2)


def build_dilation_model(grid_points: int = 1024, radius: float = 12.0, observe_dim: Optional[int] = None,
                         check_modes: int = 20) -> BuiltModel:
    """Harmonic oscillator H with the dilation generator L = i(x∂ + ∂x)/2.

    The exact flow is ψ(t, x) = e^{t/2} u(e^t x).
    """
    if radius < 10 or grid_points < 512:
        logger.warning("dilation grid below the recommended R >= 10, points >= 512")
    x, h = dirichlet_grid(grid_points, radius)
    diagonal, off = _schrodinger_tridiagonal(x, h, x ** 2)
    lam, Q = eigh_tridiagonal(diagonal, off)
    expected = 2.0 * np.arange(check_modes) + 1.0
    error = np.abs(lam[:check_modes] - expected) / expected
    if error.max() > HARMONIC_TOL:
        raise ModelValidationError(
            f"grid too coarse: harmonic level {int(error.argmax())} off by {error.max():.2%}", "models")

    D = central_difference(grid_points, h)
    X = sparse.diags(x)
    antisymmetric = ((X @ D + D @ X) / 2.0).toarray()
    L_eig = 1j * (Q.T @ antisymmetric @ Q)
    model = SpectralModel(lam, observe_dim or grid_points, "dilation_harmonic", Q, x)
    reference = OperatorSampler.constant(np.diag(lam), label="H_osc")
    generator = OperatorSampler.constant(L_eig, nu=1.0, label="dilation")

    def exact_flow(u: Union[Callable, np.ndarray], t: float) -> np.ndarray:
        stretched = np.exp(t) * x
        values = u(stretched) if callable(u) else np.interp(stretched, x, np.asarray(u), left=0.0, right=0.0)
        return np.exp(t / 2.0) * values

    validation = {"harmonic_max_rel_error": float(error.max()), "checked_modes": check_modes}
    logger.info("dilation model on %d points, R=%g: harmonic law within %.2e", grid_points, radius, error.max())
    return BuiltModel(ModelSpec("dilation_harmonic", grid_points=grid_points, radius=radius, observe_dim=observe_dim),
                      model, generator, reference, grid=x, basis=Q, oracle=exact_flow, validation=validation)


def bohr_sommerfeld_slope(k: int) -> float:
    """b_k in λ_j^{(k+1)/2k} ≈ b_k (j + 1/2)."""
    integral = beta_function(1.0 / (2 * k), 1.5) / k
    return math.pi / integral


def _anharmonic_extent(k: int, n_modes: int) -> Tuple[float, int]:
    top = (bohr_sommerfeld_slope(k) * (n_modes + 0.5)) ** (2.0 * k / (k + 1))
    radius = 1.25 * top ** (1.0 / (2 * k)) + 2.0
    points = int(math.ceil(2 * radius * math.sqrt(top) / 0.25))
    return radius, points


def build_anharmonic_model(k: int, p: Sequence[float] = (), drive: Sequence[DriveTerm] = (),
                           grid_points: Optional[int] = None, radius: Optional[float] = None,
                           n_modes: int = 400, observe_dim: Optional[int] = None,
                           nu: Optional[float] = None) -> BuiltModel:
    """H_k = -d²/dx² + x^{2k} + p(x) in its own eigenbasis, with V(t, x) = Σ f_i(t) x^{m_i}.

    Args:
        k: anharmonic power, k=1 is the harmonic oscillator
        p: coefficients of the lower-order polynomial p(x), constant term first
        drive: terms of V whose ``mode`` is the power of x
        grid_points, radius: finite-difference grid, sized from n_modes when omitted
        n_modes: number of eigenpairs kept (the model dimension)
        observe_dim: trusted dimension, n_modes // 2 by default
        nu: relative order of V, m/(2k) by default with m the top power

    Returns:
        BuiltModel validated against the Bohr-Sommerfeld law
    """
    if k < 1:
        raise DomainError(f"anharmonic power k={k} must be at least 1", "models")
    if len(p) > 2 * k:
        raise DomainError(f"p(x) of degree {len(p) - 1} is not lower order than x^{2 * k}", "models")
    default_radius, default_points = _anharmonic_extent(k, n_modes)
    radius = radius or default_radius
    grid_points = grid_points or default_points
    x, h = dirichlet_grid(grid_points, radius)
    potential = x ** (2 * k) + np.polynomial.polynomial.polyval(x, p) if len(p) else x ** (2 * k)
    diagonal, off = _schrodinger_tridiagonal(x, h, potential)
    lam, Q = eigh_tridiagonal(diagonal, off, select="i", select_range=(0, n_modes - 1))
    if lam[0] <= 0:
        raise ModelValidationError(f"p(x) makes H_k non-positive: lowest eigenvalue {lam[0]:.4g}", "models")

    exponent = (k + 1) / (2.0 * k)
    trusted = observe_dim or n_modes // 2
    j = np.arange(trusted)
    fit = linregress(j, lam[:trusted] ** exponent)
    expected_slope = bohr_sommerfeld_slope(k)
    slope_error = abs(fit.slope - expected_slope) / expected_slope
    if slope_error > BOHR_SOMMERFELD_TOL or fit.rvalue < 0.999:
        raise ModelValidationError(
            f"grid under-resolved: Bohr-Sommerfeld slope {fit.slope:.4f} vs {expected_slope:.4f}", "models")

    degree = max((term.mode for term in drive), default=0)
    if drive and degree >= k - 1:
        logger.warning("drive degree m=%d is not below k-1=%d; the gap route does not apply", degree, k - 1)
    nu = degree / (2.0 * k) if nu is None else nu
    model = SpectralModel(lam, trusted, f"anharmonic_k{k}", Q, x)
    reference = OperatorSampler.constant(np.diag(lam), label=f"H_{k}")
    perturbation = None
    generator = reference
    if drive:
        terms = [(Q.T @ (x[:, None] ** term.mode * Q), term.envelope) for term in drive]
        perturbation = OperatorSampler.from_terms(terms, nu=nu, label="V")
        generator = reference + perturbation
    validation = {"bohr_sommerfeld_slope": float(fit.slope), "expected_slope": expected_slope,
                  "slope_rel_error": slope_error, "rvalue": float(fit.rvalue)}
    logger.info("anharmonic k=%d: %d modes on %d points, R=%.2f, slope error %.2e",
                k, n_modes, grid_points, radius, slope_error)
    spec = ModelSpec("anharmonic", k=k, p_coefficients=tuple(p), drive=tuple(drive), grid_points=grid_points,
                     radius=radius, n_modes=n_modes, observe_dim=trusted, declared_nu=nu)
    return BuiltModel(spec, model, generator, reference, perturbation, grid=x, basis=Q, validation=validation)


def torus_modes(cutoff: int) -> np.ndarray:
    """Fourier modes ordered 0, -1, 1, -2, 2, ... so that n² + 1 is nondecreasing."""
    modes = [0]
    for n in range(1, cutoff + 1):
        modes.extend([-n, n])
    return np.array(modes)


def build_torus_model(drive: Sequence[DriveTerm] = (), cutoff: int = 64,
                      observe_dim: Optional[int] = None, nu: float = 0.0) -> BuiltModel:
    """H = -d²/dx² + 1 on Fourier modes |n| ≤ cutoff, V(t, x) = Σ f_i(t) cos(m_i x)."""
    if cutoff < 32:
        raise DomainError(f"torus cutoff {cutoff} below the minimum of 32", "models")
    widest = max((abs(term.mode) for term in drive), default=0)
    if widest > cutoff / 4:
        raise DomainError(f"drive bandwidth {widest} exceeds cutoff/4 = {cutoff / 4:g}", "models")
    modes = torus_modes(cutoff)
    lam = modes.astype(float) ** 2 + 1.0
    if np.any(lam != modes ** 2 + 1) or np.any(np.diff(lam) < 0):
        raise ModelValidationError("torus spectrum is not the exact n² + 1 sequence", "models")
    model = SpectralModel(lam, observe_dim, "torus")
    reference = OperatorSampler.constant(np.diag(lam), label="H_torus")
    perturbation = None
    generator = reference
    if drive:
        difference = modes[:, None] - modes[None, :]
        terms = []
        for term in drive:
            m = abs(term.mode)
            if m == 0:
                band = (difference == 0).astype(float)
            else:
                band = 0.5 * ((difference == m).astype(float) + (difference == -m).astype(float))
            terms.append((band, term.envelope))
        perturbation = OperatorSampler.from_terms(terms, nu=nu, label="V")
        generator = reference + perturbation
    spec = ModelSpec("torus", drive=tuple(drive), cutoff=cutoff, observe_dim=observe_dim, declared_nu=nu)
    return BuiltModel(spec, model, generator, reference, perturbation, sites=modes,
                      validation={"exact_spectrum": True})


def lattice_sites(d: int, box: int) -> np.ndarray:
    """Sites of {-box..box}^d sorted by ⟨n⟩, ties broken lexicographically."""
    axes = [np.arange(-box, box + 1)] * d
    sites = np.stack(np.meshgrid(*axes, indexing="ij"), axis=-1).reshape(-1, d)
    radius = (sites ** 2).sum(axis=1)
    order = np.lexsort(tuple(sites[:, i] for i in reversed(range(d))) + (radius,))
    return sites[order]


def _lattice_frequencies(drive: LatticeDrive, weights: np.ndarray):
    rng = np.random.default_rng(drive.seed)
    count = weights.size
    coefficients = rng.uniform(-1.0, 1.0, (count, drive.frequencies))
    omegas = rng.uniform(0.5, 2.0, drive.frequencies)
    phases = rng.uniform(0.0, 2 * np.pi, (count, drive.frequencies))
    scale = drive.amplitude * weights / drive.frequencies

    def omega(t: float, order: int = 0) -> np.ndarray:
        angle = omegas[None, :] * t + phases + order * np.pi / 2
        return scale * (coefficients * omegas[None, :] ** order * np.cos(angle)).sum(axis=1)

    return omega


def build_lattice_model(d: int = 1, box: int = 16, drive: Optional[LatticeDrive] = None,
                        observe_dim: Optional[int] = None) -> BuiltModel:
    """L(t) = H_0 + diag(ω_n(t)) on the box {-M..M}^d with reference H = diag(⟨n⟩).

    H_0 is the nearest-neighbour hopping with Dirichlet truncation. The observed
    block drops the outer shell of width M/4.
    """
    if box < 8:
        raise DomainError(f"lattice box radius {box} below the minimum of 8", "models")
    drive = drive or LatticeDrive()
    sites = lattice_sites(d, box)
    bracket = np.sqrt(1.0 + (sites ** 2).sum(axis=1))
    position = {tuple(site): index for index, site in enumerate(sites)}
    rows, cols = [], []
    for index, site in enumerate(sites):
        for axis in range(d):
            neighbour = site.copy()
            neighbour[axis] += 1
            other = position.get(tuple(neighbour))
            if other is not None:
                rows.extend([index, other])
                cols.extend([other, index])
    hopping = sparse.coo_matrix((np.ones(len(rows)), (rows, cols)), shape=(sites.shape[0],) * 2).toarray()

    if observe_dim is None:
        inner = box - box // 4
        observe_dim = int(np.count_nonzero((sites ** 2).sum(axis=1) <= inner ** 2))
    model = SpectralModel(bracket, observe_dim, f"lattice_d{d}")
    reference = OperatorSampler.constant(np.diag(bracket), label="H_bracket")
    if not np.array_equal(np.diag(reference.eval(0.0)).real, bracket):
        raise ModelValidationError("lattice reference is not diag(<n>)", "models")
    hopping_matrix = hopping.astype(complex)

    if drive.amplitude == 0:
        generator = OperatorSampler.constant(hopping_matrix, label="H_0")
    else:
        omega = _lattice_frequencies(drive, bracket ** drive.growth)
        generator = OperatorSampler(lambda t: hopping_matrix + np.diag(omega(t)), hopping.shape[0],
                                    derivative=lambda t, order: np.diag(omega(t, order)).astype(complex),
                                    max_order=8, split=(hopping_matrix, omega), label="H_0+omega")
    spec = ModelSpec("lattice", dimension=d, box=box, lattice_drive=drive, observe_dim=observe_dim)
    return BuiltModel(spec, model, generator, reference, sites=sites, validation={"diagonal_exact": True})


def build_model(spec: ModelSpec) -> BuiltModel:
    if spec.kind == "dilation_harmonic":
        return build_dilation_model(spec.grid_points or 1024, spec.radius or 12.0, spec.observe_dim)
    if spec.kind == "anharmonic":
        return build_anharmonic_model(spec.k, spec.p_coefficients, spec.drive, spec.grid_points, spec.radius,
                                      spec.n_modes, spec.observe_dim, spec.declared_nu)
    if spec.kind == "torus":
        return build_torus_model(spec.drive, spec.cutoff, spec.observe_dim, spec.declared_nu or 0.0)
    return build_lattice_model(spec.dimension, spec.box, spec.lattice_drive, spec.observe_dim)


def gaussian_profile(x: np.ndarray, center: float = 0.0, width: float = 1.0) -> np.ndarray:
    return (math.pi * width ** 2) ** -0.25 * np.exp(-((x - center) ** 2) / (2 * width ** 2))


def initial_state(built: BuiltModel, kind: str = "mode", *, index: int = 0, center: float = 0.0,
                  width: float = 1.0, band: Optional[int] = None, site: Optional[Sequence[int]] = None,
                  seed: int = 0) -> StateVector:
    """Normalized initial datum: mode, gaussian, band_limited or delta."""
    dim = built.model.dim
    if kind == "mode":
        return StateVector.basis(dim, index)
    if kind == "gaussian":
        values = gaussian_profile(built.grid, center, width) if built.grid is not None else None
        if values is None:
            raise DomainError("gaussian initial states need a real-line model", "models")
        coords = built.from_grid(values * math.sqrt(built.grid[1] - built.grid[0]))
    elif kind == "band_limited":
        band = band or max(1, built.model.observe_dim // 4)
        rng = np.random.default_rng(seed)
        coords = np.zeros(dim, dtype=complex)
        coords[:band] = rng.standard_normal(band) + 1j * rng.standard_normal(band)
    elif kind == "delta":
        if built.sites is None or built.spec.kind != "lattice":
            raise DomainError("delta initial states need a lattice model", "models")
        target = tuple(site) if site is not None else (0,) * built.sites.shape[1]
        matches = np.flatnonzero((built.sites == np.array(target)).all(axis=1))
        if matches.size == 0:
            raise DomainError(f"site {target} is outside the lattice box", "models")
        return StateVector.basis(dim, int(matches[0]))
    else:
        raise DomainError(f"unknown initial state kind '{kind}'", "models")
    return StateVector(coords / np.linalg.norm(coords))


def nohineq_check(built: BuiltModel, mu: float, n_vectors: int = 50, seed: int = 0,
                  band: Optional[int] = None) -> pd.DataFrame:
    """Measured C in ‖x^j ∂^ℓ u‖ ≤ C ‖H_k^μ u‖ for every j/(2k) + ℓ/2 ≤ μ.

    Test vectors are random combinations of the lowest ``band`` eigenfunctions.
    """
    if built.grid is None:
        raise DomainError("the x^j d^l inequality needs a real-line model", "models")
    k = built.spec.k
    lam = built.model.eigenvalues
    band = band or built.model.observe_dim // 2
    rng = np.random.default_rng(seed)
    coords = np.zeros((built.model.dim, n_vectors))
    coords[:band] = rng.standard_normal((band, n_vectors))
    grid_values = built.basis @ coords
    D = central_difference(built.grid.size, built.grid[1] - built.grid[0])
    scale_norms = np.sqrt(((lam ** (2 * mu))[:, None] * coords ** 2).sum(axis=0))

    rows: List[Dict[str, float]] = []
    for ell in range(0, int(2 * mu) + 1):
        derived = grid_values
        for _ in range(ell):
            derived = D @ derived
        j = 0
        while j / (2.0 * k) + ell / 2.0 <= mu + 1e-12:
            weighted = built.grid[:, None] ** j * derived
            ratios = np.linalg.norm(weighted, axis=0) / scale_norms
            rows.append({"j": j, "ell": ell, "constant": float(ratios.max())})
            j += 1
    table = pd.DataFrame(rows)
    logger.info("x^j d^l inequality at mu=%g: largest constant %.4g", mu, table["constant"].max())
    return table
