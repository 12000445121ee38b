import numpy as np
import pytest

from spectral_lab.clusters import ClusterDecomposition
from spectral_lab.models import DriveTerm, build_torus_model
from spectral_lab.spectral_core import Envelope, OperatorSampler, SpectralModel

TOY_EIGENVALUES = (1.0, 2.0, 10.0, 11.0)
TOY_INTERVALS = [[0.5, 2.5], [9.5, 11.5]]


def toy_coupling(amplitude=0.3, omega=0.5):
    """Cross-cluster coupling of the 4x4 toy rotating slowly between two real patterns."""
    A = np.zeros((4, 4))
    A[0, 2] = A[2, 0] = A[1, 3] = A[3, 1] = 1.0
    B = np.zeros((4, 4))
    B[0, 3] = B[3, 0] = B[1, 2] = B[2, 1] = 1.0
    return OperatorSampler.from_terms([
        (A, Envelope("harmonic", amplitude, omega)),
        (B, Envelope("harmonic", amplitude, omega, -np.pi / 2)),
    ], label="V_toy")


@pytest.fixture
def toy_model():
    return SpectralModel(np.array(TOY_EIGENVALUES), observe_dim=4, label="toy")


@pytest.fixture
def toy_decomposition():
    return ClusterDecomposition.from_intervals(TOY_INTERVALS, TOY_EIGENVALUES, mu=1.0, J=1)


@pytest.fixture
def toy_coupling_sampler():
    return toy_coupling()


@pytest.fixture
def small_torus():
    return build_torus_model(cutoff=32, observe_dim=33)


@pytest.fixture
def driven_torus():
    drive = (DriveTerm(1, Envelope("harmonic", 0.3, 1.0)),)
    return build_torus_model(drive, cutoff=32, observe_dim=33)
