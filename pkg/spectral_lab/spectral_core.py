"""Hilbert scale of a positive reference operator H in truncated spectral coordinates.

All operators live in the eigenbasis of H, which is stored only through its
eigenvalues. Norms are trusted on the first ``observe_dim`` coordinates while
computations run in the full ``dim``.
"""
import logging
from dataclasses import dataclass
from typing import Callable, Sequence

import numpy as np
import pandas as pd
from scipy.linalg import svdvals

from spectral_lab.errors import DerivativeUnavailableError, DomainError, HermiticityError

logger = logging.getLogger(__name__)

HERMITIAN_TOL = 1e-12
DEFAULT_FD_STEP = 1e-4
ANALYTIC_ORDER = 64


@dataclass(frozen=True, eq=False)
class SpectralModel:
    """Eigenvalues of H plus the truncation in which they are trusted.

    ``basis`` and ``grid`` are only set for models discretized on a grid; the
    columns of ``basis`` are the eigenvectors of H in grid coordinates.
    """

    eigenvalues: np.ndarray
    observe_dim: int | None = None
    label: str = "model"
    basis: np.ndarray | None = None
    grid: np.ndarray | None = None

    def __post_init__(self):
        lam = np.array(self.eigenvalues, dtype=float).reshape(-1)
        if lam.size == 0:
            raise DomainError("a spectral model needs at least one eigenvalue", "spectral_core")
        if np.any(lam <= 0) or not np.all(np.isfinite(lam)):
            raise DomainError("reference operator must be positive: all eigenvalues > 0", "spectral_core")
        if np.any(np.diff(lam) < 0):
            raise DomainError("eigenvalues must be listed in nondecreasing order", "spectral_core")
        lam.setflags(write=False)
        object.__setattr__(self, "eigenvalues", lam)

        observe = self.observe_dim if self.observe_dim is not None else max(1, lam.size // 4)
        if not 1 <= observe <= lam.size:
            raise DomainError(f"observe_dim={observe} must lie in [1, {lam.size}]", "spectral_core")
        object.__setattr__(self, "observe_dim", int(observe))

    @property
    def dim(self) -> int:
        return self.eigenvalues.size

    def powers(self, exponent: float) -> np.ndarray:
        return self.eigenvalues ** exponent

    def reference_operator(self) -> np.ndarray:
        return np.diag(self.eigenvalues).astype(complex)

    def with_observe_dim(self, observe_dim: int) -> "SpectralModel":
        return SpectralModel(self.eigenvalues, observe_dim, self.label, self.basis, self.grid)


@dataclass(frozen=True, eq=False)
class OperatorMatrix:
    """Snapshot of an operator in the H-eigenbasis."""

    entries: np.ndarray
    hermitian: bool = False

    def __post_init__(self):
        entries = np.array(self.entries, dtype=complex)
        if entries.ndim != 2 or entries.shape[0] != entries.shape[1]:
            raise DomainError(f"operator must be a square matrix, got shape {entries.shape}", "spectral_core")
        if self.hermitian:
            defect = hermitian_defect(entries)
            if defect > HERMITIAN_TOL * max(np.linalg.norm(entries), 1e-300):
                raise HermiticityError(f"operator flagged hermitian has defect {defect:.3e}", "spectral_core")
        object.__setattr__(self, "entries", entries)

    def __array__(self, dtype=None, copy=None):
        return self.entries if dtype is None else self.entries.astype(dtype)

    @property
    def dim(self) -> int:
        return self.entries.shape[0]


@dataclass(frozen=True, eq=False)
class StateVector:
    coords: np.ndarray

    def __post_init__(self):
        coords = np.array(self.coords, dtype=complex).reshape(-1)
        if not np.all(np.isfinite(coords)):
            raise DomainError("state coordinates must be finite", "spectral_core")
        object.__setattr__(self, "coords", coords)

    def __array__(self, dtype=None, copy=None):
        return self.coords if dtype is None else self.coords.astype(dtype)

    @classmethod
    def basis(cls, dim: int, index: int) -> "StateVector":
        coords = np.zeros(dim, dtype=complex)
        coords[index] = 1.0
        return cls(coords)


def as_matrix(A) -> np.ndarray:
    return np.asarray(A, dtype=complex)


def hermitian_defect(A) -> float:
    A = as_matrix(A)
    return float(np.linalg.norm(A - A.conj().T))


def symmetrize(A) -> np.ndarray:
    A = as_matrix(A)
    return 0.5 * (A + A.conj().T)


def sobolev_norm(model: SpectralModel, psi, k: float) -> float:
    """‖ψ‖_k = (Σ_{j ≤ observe_dim} λ_j^k |ψ_j|²)^{1/2}."""
    if k < 0:
        raise DomainError(f"Sobolev index k={k} < 0 rejected (dual norms are not represented)", "spectral_core")
    n = model.observe_dim
    coords = np.asarray(psi, dtype=complex)[:n]
    return float(np.sqrt(np.sum(model.eigenvalues[:n] ** k * np.abs(coords) ** 2)))


def sobolev_norms(model: SpectralModel, states: np.ndarray, k: float) -> np.ndarray:
    """Row-wise sobolev_norm for a stack of states of shape (n_times, dim)."""
    if k < 0:
        raise DomainError(f"Sobolev index k={k} < 0 rejected (dual norms are not represented)", "spectral_core")
    n = model.observe_dim
    weights = model.eigenvalues[:n] ** k
    return np.sqrt(np.abs(np.asarray(states)[:, :n]) ** 2 @ weights)


def scale_operator_norm(model: SpectralModel, A, a: float, b: float) -> float:
    """Largest singular value of D^a A D^{-b} on the observed block, D = diag(λ)."""
    n = model.observe_dim
    block = as_matrix(A)[:n, :n]
    lam = model.eigenvalues[:n]
    scaled = (lam ** a)[:, None] * block * (lam ** (-b))[None, :]
    return float(svdvals(scaled)[0])


def commutator(A, B) -> OperatorMatrix:
    A = as_matrix(A)
    B = as_matrix(B)
    if A.shape != B.shape:
        raise DomainError(f"commutator of mismatched shapes {A.shape} and {B.shape}", "spectral_core")
    return OperatorMatrix(A @ B - B @ A)


def commutator_with_diagonal(A, diagonal: np.ndarray) -> np.ndarray:
    """[A, diag(d)] with entries A_ij (d_j - d_i)."""
    A = as_matrix(A)
    return A * (diagonal[None, :] - diagonal[:, None])


def central_derivative(f: Callable[[float], np.ndarray], t: float, order: int = 1,
                       h: float = DEFAULT_FD_STEP) -> np.ndarray:
    """Nested central differences with one Richardson step per level.

    The step grows as h**(1/order) so that roundoff stays below the truncation
    error for the nested levels.
    """
    if order == 0:
        return np.asarray(f(t))
    step = h ** (1.0 / order) if order > 1 else h

    def nested(s: float, level: int) -> np.ndarray:
        if level == 0:
            return np.asarray(f(s), dtype=complex)

        def diff(width: float) -> np.ndarray:
            return (nested(s + width, level - 1) - nested(s - width, level - 1)) / (2.0 * width)

        return (4.0 * diff(step / 2.0) - diff(step)) / 3.0

    return nested(t, order)


@dataclass(frozen=True)
class Envelope:
    """Scalar time profile with analytic derivatives of every order."""

    kind: str = "constant"
    amplitude: float = 1.0
    omega: float = 0.0
    phase: float = 0.0
    coefficients: tuple = ()

    def __post_init__(self):
        if self.kind not in ("constant", "harmonic", "polynomial"):
            raise DomainError(f"unknown envelope kind '{self.kind}'", "spectral_core")

    def value(self, t: float) -> float:
        return self.derivative(t, 0)

    def derivative(self, t: float, order: int) -> float:
        if self.kind == "constant":
            return self.amplitude if order == 0 else 0.0
        if self.kind == "harmonic":
            return self.amplitude * self.omega ** order * np.cos(self.omega * t + self.phase + order * np.pi / 2)
        poly = np.polynomial.Polynomial(self.coefficients or (0.0,))
        return float(poly.deriv(order)(t)) if order else float(poly(t))

    @property
    def period(self) -> float | None:
        if self.kind == "constant":
            return 0.0
        if self.kind == "harmonic" and self.omega != 0:
            return 2 * np.pi / abs(self.omega)
        return None

    @classmethod
    def from_dict(cls, data: dict) -> "Envelope":
        data = dict(data)
        if "coefficients" in data:
            data["coefficients"] = tuple(data["coefficients"])
        return cls(**data)

    def to_dict(self) -> dict:
        return {"kind": self.kind, "amplitude": self.amplitude, "omega": self.omega,
                "phase": self.phase, "coefficients": list(self.coefficients)}


class OperatorSampler:
    """Time-dependent operator t ↦ matrix in the H-eigenbasis.

    Derivatives come from an analytic callback when one is given, otherwise
    from Richardson-extrapolated central differences. ``split`` holds
    ``(K, d)`` when the sampler is K + diag(d(t)) with K constant.
    """

    def __init__(self, func: Callable[[float], np.ndarray], dim: int, *,
                 derivative: Callable[[float, int], np.ndarray] | None = None,
                 max_order: int = 0, nu: float = 0.0, hermitian: bool = True,
                 constant: bool = False, fd_step: float = DEFAULT_FD_STEP,
                 split: tuple | None = None, label: str = "sampler"):
        self._func = func
        self._derivative = derivative
        self.dim = int(dim)
        self.max_order = int(max_order)
        self.nu = float(nu)
        self.hermitian = hermitian
        self.is_constant = constant
        self.fd_step = fd_step
        self.split = split
        self.label = label
        self.period: float | None = None

    def __repr__(self) -> str:
        return f"OperatorSampler({self.label!r}, dim={self.dim}, max_order={self.max_order}, nu={self.nu})"

    def eval(self, t: float) -> np.ndarray:
        return np.asarray(self._func(t), dtype=complex)

    __call__ = eval

    def derivative(self, t: float, order: int = 1) -> np.ndarray:
        if order == 0:
            return self.eval(t)
        if order > self.max_order:
            raise DerivativeUnavailableError(order, self.max_order)
        if self.is_constant:
            return np.zeros((self.dim, self.dim), dtype=complex)
        if self._derivative is not None:
            return np.asarray(self._derivative(t, order), dtype=complex)
        return central_derivative(self.eval, t, order, self.fd_step)

    @classmethod
    def constant(cls, matrix, nu: float = 0.0, max_order: int = ANALYTIC_ORDER,
                 label: str = "constant") -> "OperatorSampler":
        matrix = as_matrix(matrix).copy()
        matrix.setflags(write=False)
        return cls(lambda t: matrix, matrix.shape[0], max_order=max_order, nu=nu,
                   hermitian=hermitian_defect(matrix) <= HERMITIAN_TOL * max(np.linalg.norm(matrix), 1.0),
                   constant=True, split=(matrix, None), label=label)

    @classmethod
    def from_terms(cls, terms: Sequence[tuple], nu: float = 0.0, max_order: int = ANALYTIC_ORDER,
                   static=None, label: str = "terms") -> "OperatorSampler":
        """V(t) = static + Σ_i f_i(t) A_i with exact derivatives from the envelopes."""
        if not terms and static is None:
            raise DomainError("a term sampler needs at least one term or a static part", "spectral_core")
        matrices = [as_matrix(A) for A, _ in terms]
        envelopes = [env for _, env in terms]
        dim = matrices[0].shape[0] if matrices else as_matrix(static).shape[0]
        stack = np.array(matrices) if matrices else np.zeros((0, dim, dim), dtype=complex)
        base = as_matrix(static) if static is not None else np.zeros((dim, dim), dtype=complex)

        def coefficients(t: float, order: int) -> np.ndarray:
            return np.array([env.derivative(t, order) for env in envelopes], dtype=float)

        def value(t: float) -> np.ndarray:
            if not envelopes:
                return base
            return base + np.tensordot(coefficients(t, 0), stack, axes=1)

        def derivative(t: float, order: int) -> np.ndarray:
            if not envelopes:
                return np.zeros((dim, dim), dtype=complex)
            return np.tensordot(coefficients(t, order), stack, axes=1)

        split = None
        if all(_is_diagonal(A) for A in matrices):
            diagonals = np.array([np.diag(A) for A in matrices]) if matrices else np.zeros((0, dim))
            split = (base, lambda t: coefficients(t, 0) @ diagonals if envelopes else np.zeros(dim))
        hermitian = all(hermitian_defect(A) <= HERMITIAN_TOL * max(np.linalg.norm(A), 1.0) for A in matrices + [base])
        constant = all(env.kind == "constant" for env in envelopes)
        sampler = cls(value, dim, derivative=derivative, max_order=max_order, nu=nu,
                      hermitian=hermitian, constant=constant, split=split, label=label)
        periods = {env.period for env in envelopes if env.period != 0.0}
        sampler.period = periods.pop() if len(periods) == 1 and None not in periods else None
        return sampler

    def __add__(self, other: "OperatorSampler") -> "OperatorSampler":
        if self.dim != other.dim:
            raise DomainError(f"cannot add samplers of dims {self.dim} and {other.dim}", "spectral_core")
        split = None
        if self.split is not None and other.split is not None:
            (k1, d1), (k2, d2) = self.split, other.split
            if d1 is None or d2 is None:
                d = d2 if d1 is None else d1
            else:
                d = lambda t: d1(t) + d2(t)
            split = (as_matrix(k1) + as_matrix(k2), d)

        def derivative(t: float, order: int) -> np.ndarray:
            return self.derivative(t, order) + other.derivative(t, order)

        total = OperatorSampler(lambda t: self.eval(t) + other.eval(t), self.dim, derivative=derivative,
                                max_order=min(self.max_order, other.max_order), nu=max(self.nu, other.nu),
                                hermitian=self.hermitian and other.hermitian,
                                constant=self.is_constant and other.is_constant, split=split,
                                label=f"{self.label}+{other.label}")
        if self.is_constant:
            total.period = other.period
        elif other.is_constant or self.period == other.period:
            total.period = self.period
        return total

    def scaled(self, factor: float) -> "OperatorSampler":
        split = None
        if self.split is not None:
            k, d = self.split
            split = (factor * as_matrix(k), None if d is None else (lambda t: factor * d(t)))
        return OperatorSampler(lambda t: factor * self.eval(t), self.dim,
                               derivative=lambda t, order: factor * self.derivative(t, order),
                               max_order=self.max_order, nu=self.nu,
                               hermitian=self.hermitian and np.isreal(factor), constant=self.is_constant,
                               split=split, label=f"{factor}*{self.label}")

    def conjugated(self, R) -> "OperatorSampler":
        """t ↦ R·L(t)·R for a fixed (hermitian) R."""
        R = as_matrix(R)
        return OperatorSampler(lambda t: R @ self.eval(t) @ R, self.dim,
                               derivative=lambda t, order: R @ self.derivative(t, order) @ R,
                               max_order=self.max_order, nu=self.nu, hermitian=self.hermitian,
                               constant=self.is_constant, label=f"R({self.label})R")


def _is_diagonal(A: np.ndarray) -> bool:
    return not np.any(A - np.diag(np.diag(A)))


def heisenberg_derivative(L, A: OperatorSampler, t: float) -> OperatorMatrix:
    """∂_{(t,L)}A = ∂_t A + i[L, A]."""
    if A.max_order < 1:
        raise DerivativeUnavailableError(1, A.max_order, "heisenberg_derivative")
    L = as_matrix(L)
    At = A.eval(t)
    return OperatorMatrix(A.derivative(t, 1) + 1j * (L @ At - At @ L))


def commutator_tau_scan(model: SpectralModel, L: OperatorSampler, taus: Sequence[float],
                        times: Sequence[float], powers: Sequence[int] = (1, 2)) -> pd.DataFrame:
    """sup_t ‖[L(t),H]H^{-τ}‖ per τ, plus ‖[L,H^k]H^{-k+θ}‖ with θ = 1 - τ."""
    if len(times) == 0:
        raise DomainError("commutator scan needs at least one sample time", "spectral_core")
    lam = model.eigenvalues
    samples = [L.eval(t) for t in times]
    rows = []
    for tau in taus:
        row = {"tau": float(tau),
               "commutator_norm": max(scale_operator_norm(model, commutator_with_diagonal(S, lam), 0.0, tau)
                                      for S in samples)}
        theta = 1.0 - tau
        for k in powers:
            row[f"power_k{k}"] = max(
                scale_operator_norm(model, commutator_with_diagonal(S, lam ** k), 0.0, k - theta)
                for S in samples)
        rows.append(row)
    logger.debug("commutator scan over %d taus and %d times", len(taus), len(times))
    return pd.DataFrame(rows)


def projector_algebra_residuals(projectors) -> dict:
    """Frobenius residuals of idempotency, hermiticity, orthogonality and completeness."""
    P = np.asarray(projectors, dtype=complex)
    n, dim = P.shape[0], P.shape[1]
    idempotency = max(np.linalg.norm(P[j] @ P[j] - P[j]) for j in range(n))
    hermiticity = max(np.linalg.norm(P[j] - P[j].conj().T) for j in range(n))
    orthogonality = max((np.linalg.norm(P[i] @ P[j]) for i in range(n) for j in range(n) if i != j), default=0.0)
    completeness = np.linalg.norm(P.sum(axis=0) - np.eye(dim))
    return {"idempotency": float(idempotency), "hermiticity": float(hermiticity),
            "orthogonality": float(orthogonality), "completeness": float(completeness)}
