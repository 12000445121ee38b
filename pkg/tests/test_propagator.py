import math

import numpy as np
import pytest

from spectral_lab.errors import DomainError, HermiticityError, PeriodicityError
from spectral_lab.models import (
    DriveTerm,
    LatticeDrive,
    build_anharmonic_model,
    build_dilation_model,
    build_lattice_model,
    build_torus_model,
    initial_state,
)
from spectral_lab.propagator import (
    PropagatorConfig,
    bound_verdict,
    floquet_operator,
    flow_convergence_study,
    growth_bound_check,
    integrator_order,
    log_log_slope,
    norm_column,
    phase_set_distance,
    propagate,
    propagator_matrix,
    propagator_snapshots,
    regularized_generator,
    regularized_generator_defect,
    smoothing_operator,
)
from spectral_lab.spectral_core import Envelope, OperatorSampler, SpectralModel, StateVector


def rabi_generator(energy=1.0, coupling=0.4, omega=4.0):
    sigma_x = np.array([[0.0, 1.0], [1.0, 0.0]])
    return OperatorSampler.from_terms([(sigma_x, Envelope("harmonic", coupling, omega))],
                                      static=np.diag([0.0, energy]), label="rabi")


@pytest.mark.parametrize("kwargs", [
    {"dt": 0.0},
    {"t_span": (1.0, 1.0)},
    {"integrator": "rk4"},
    {"record_every": 0},
])
def test_config_validation(kwargs):
    with pytest.raises(DomainError):
        PropagatorConfig(**kwargs)


def test_config_step_divides_span():
    cfg = PropagatorConfig(dt=0.3, t_span=(0.0, 1.0))
    assert cfg.n_steps == 4
    assert cfg.step == pytest.approx(0.25)
    assert PropagatorConfig(dt=0.3, t_span=(1.0, 0.0)).step == pytest.approx(-0.25)


def test_stationary_state_only_rotates_phase(small_torus):
    j = 5
    lam = small_torus.model.eigenvalues[j]
    cfg = PropagatorConfig(dt=0.01, t_span=(0.0, 1.0))
    traj = propagate(small_torus.model, small_torus.generator, StateVector.basis(small_torus.model.dim, j), cfg,
                     ks=(0.0, 1.0))
    expected = np.zeros(small_torus.model.dim, dtype=complex)
    expected[j] = np.exp(-1j * lam)
    assert np.allclose(traj.states[-1], expected, atol=1e-12)
    assert np.allclose(traj.norm_series(1.0), math.sqrt(lam))
    assert traj.conservation_drift < 1e-13


def test_group_property(driven_torus):
    psi = StateVector.basis(driven_torus.model.dim, 0)
    cfg = PropagatorConfig(dt=0.01, t_span=(0.0, 1.0))
    direct = propagate(driven_torus.model, driven_torus.generator, psi, cfg).states[-1]
    first = propagate(driven_torus.model, driven_torus.generator, psi, cfg.with_span(0.0, 0.5)).states[-1]
    second = propagate(driven_torus.model, driven_torus.generator, first, cfg.with_span(0.5, 1.0)).states[-1]
    assert np.linalg.norm(direct - second) < 1e-10


@pytest.mark.parametrize("integrator", ["exponential-midpoint", "crank-nicolson"])
def test_integrators_are_unitary(driven_torus, integrator):
    psi = np.ones(driven_torus.model.dim) / math.sqrt(driven_torus.model.dim)
    cfg = PropagatorConfig(dt=0.02, t_span=(0.0, 2.0), integrator=integrator)
    traj = propagate(driven_torus.model, driven_torus.generator, psi, cfg)
    assert traj.conservation_drift < 1e-10


def test_trajectory_recording_and_columns(driven_torus):
    cfg = PropagatorConfig(dt=0.01, t_span=(0.0, 1.0), record_every=30)
    traj = propagate(driven_torus.model, driven_torus.generator, StateVector.basis(driven_torus.model.dim, 1), cfg,
                     ks=(1.0, 2.0))
    assert traj.times.tolist() == pytest.approx([0.0, 0.3, 0.6, 0.9, 1.0])
    frame = traj.to_frame()
    assert list(frame.columns) == ["t", "norm_k1", "norm_k2", "conservation_drift"]
    assert norm_column(0.5) == "norm_k0.5"
    with pytest.raises(DomainError):
        traj.norm_series(3.0)


def test_backward_propagation_inverts_forward(driven_torus):
    psi = StateVector.basis(driven_torus.model.dim, 2)
    forward = propagate(driven_torus.model, driven_torus.generator, psi, PropagatorConfig(dt=0.01, t_span=(0.0, 1.0)))
    backward = propagate(driven_torus.model, driven_torus.generator, forward.states[-1],
                         PropagatorConfig(dt=0.01, t_span=(1.0, 0.0)))
    assert backward.times[0] > backward.times[-1]
    assert np.linalg.norm(backward.states[-1] - np.asarray(psi)) < 1e-10


def test_state_shape_is_checked(driven_torus):
    with pytest.raises(DomainError):
        propagate(driven_torus.model, driven_torus.generator, np.ones(3), PropagatorConfig())


def test_non_hermitian_generator_rejected():
    model = SpectralModel(np.array([1.0, 2.0]), observe_dim=2)
    L = OperatorSampler(lambda t: np.array([[0.0, 1.0], [0.0, 0.0]]), 2, max_order=1)
    with pytest.raises(HermiticityError):
        propagate(model, L, np.array([1.0, 0.0]), PropagatorConfig(dt=0.1, t_span=(0.0, 0.2)))


@pytest.mark.parametrize("integrator", ["exponential-midpoint", "crank-nicolson"])
def test_integrator_order_is_two(integrator):
    model = SpectralModel(np.array([1.0, 2.0]), observe_dim=2)
    report = integrator_order(model, rabi_generator(), np.array([1.0, 0.0]),
                              PropagatorConfig(dt=0.02, t_span=(0.0, 1.0), integrator=integrator))
    assert report["order"] == pytest.approx(2.0, abs=0.3)


def test_strang_split_on_driven_lattice():
    built = build_lattice_model(d=1, box=8, drive=LatticeDrive(amplitude=0.5, growth=1.0, seed=2))
    psi = np.zeros(built.model.dim, dtype=complex)
    psi[0] = 1.0
    cfg = PropagatorConfig(dt=0.01, t_span=(0.0, 0.5), integrator="strang-split")
    traj = propagate(built.model, built.generator, psi, cfg)
    assert traj.conservation_drift < 1e-10
    order = integrator_order(built.model, built.generator, psi, cfg)
    assert order["order"] == pytest.approx(2.0, abs=0.3)


def test_strang_split_needs_a_split_generator():
    L = OperatorSampler(lambda t: np.eye(2), 2, max_order=1)
    model = SpectralModel(np.array([1.0, 2.0]), observe_dim=2)
    with pytest.raises(DomainError, match="strang-split"):
        propagate(model, L, np.array([1.0, 0.0]), PropagatorConfig(integrator="strang-split"))


def test_propagator_matrix_and_snapshots():
    L = rabi_generator()
    cfg = PropagatorConfig(dt=0.01, t_span=(0.0, 1.0))
    U = propagator_matrix(L, cfg)
    assert np.allclose(U.conj().T @ U, np.eye(2), atol=1e-12)
    times, flows = propagator_snapshots(L, cfg, every=25)
    assert times.tolist() == pytest.approx([0.0, 0.25, 0.5, 0.75, 1.0])
    assert np.allclose(flows[0], np.eye(2))
    assert np.allclose(flows[-1], U)
    with pytest.raises(DomainError):
        propagator_snapshots(L, cfg, every=0)


def test_smoothing_operator_example():
    model = SpectralModel(np.array([1.0, 2.0]), observe_dim=2)
    R = smoothing_operator(model, 2.0, 1)
    assert R.diagonal == pytest.approx([2 / 3, 1 / 2])
    assert R.report["gain_pass"]
    assert R.report["bounded_norm"] <= 1.0
    assert smoothing_operator(model, 1e12, 1).diagonal == pytest.approx([1.0, 1.0])
    with pytest.raises(DomainError):
        smoothing_operator(model, 0.0, 1)


def test_smoothing_defect_decays_like_one_over_N(small_torus):
    Ns = [2.0 ** i for i in range(6, 13)]
    defects = [smoothing_operator(small_torus.model, N, 1).report["defect_times_N"] / N for N in Ns]
    assert log_log_slope(Ns, defects) == pytest.approx(-1.0, abs=0.05)


def test_regularized_generator_of_a_diagonal():
    lam = np.array([1.0, 4.0, 9.0])
    model = SpectralModel(lam, observe_dim=3)
    L = OperatorSampler.from_terms([(np.diag([2.0, -1.0, 0.5]), Envelope("harmonic", 1.0, 1.0))])
    R = smoothing_operator(model, 3.0, 1)
    L_N = regularized_generator(L, R)
    expected = np.diag([2.0, -1.0, 0.5]) * math.cos(0.4) * np.diag((1 + lam / 3.0) ** -2.0)
    assert np.allclose(L_N.eval(0.4), expected)
    far = regularized_generator(L, smoothing_operator(model, 1e12, 1))
    assert np.allclose(far.eval(0.4), L.eval(0.4))


def test_regularized_generator_defect_is_bounded(driven_torus):
    table = regularized_generator_defect(driven_torus.model, driven_torus.generator, [2.0 ** i for i in range(2, 9)],
                                         m_bar=1, eta=0.5, k=1.0, times=[0.0, 0.5])
    assert list(table.columns) == ["N", "defect", "scaled_defect"]
    assert table["defect"].is_monotonic_decreasing
    assert table["scaled_defect"].max() / table["scaled_defect"].min() < 5.0


def test_flow_convergence_with_identical_family(driven_torus):
    cfg = PropagatorConfig(dt=0.05, t_span=(0.0, 0.5))
    family = {n: driven_torus.generator for n in (1.0, 2.0, 4.0)}
    psi = StateVector.basis(driven_torus.model.dim, 0)
    table = flow_convergence_study(driven_torus.model, driven_torus.generator, family, psi, cfg)
    assert table["defect"].max() == 0.0
    assert table["generator_defect"].max() == 0.0
    assert len(table) == 15
    assert table.groupby("n").size().tolist() == [5, 5, 5]
    assert table["t"].between(0.0, 0.5).all()


def test_flow_convergence_of_regularized_family(driven_torus):
    cfg = PropagatorConfig(dt=0.05, t_span=(0.0, 1.0))
    L = driven_torus.generator
    family = {N: regularized_generator(L, smoothing_operator(driven_torus.model, N, 1)) for N in (16.0, 256.0, 4096.0)}
    psi = StateVector.basis(driven_torus.model.dim, 0)
    table = flow_convergence_study(driven_torus.model, L, family, psi, cfg, check_times=[0.0, 0.5, 1.0])
    assert list(table.columns) == ["n", "t", "defect", "commutator_bound", "generator_defect"]
    assert table["t"].tolist()[:3] == pytest.approx([0.0, 0.5, 1.0])
    assert table.loc[table["t"] == 0.0, "defect"].max() == 0.0
    for t in (0.5, 1.0):
        by_n = table[np.isclose(table["t"], t)].sort_values("n")["defect"]
        assert by_n.is_monotonic_decreasing
        assert by_n.iloc[-1] < 1e-2
    assert table.groupby("n")["generator_defect"].first().is_monotonic_decreasing


def test_flow_convergence_rejects_check_times_outside_span(driven_torus):
    cfg = PropagatorConfig(dt=0.05, t_span=(0.0, 0.5))
    psi = StateVector.basis(driven_torus.model.dim, 0)
    with pytest.raises(DomainError, match="check times"):
        flow_convergence_study(driven_torus.model, driven_torus.generator, {1.0: driven_torus.generator}, psi, cfg,
                               check_times=[0.25, 2.0])


@pytest.mark.parametrize("eta", [0.5, 1.0])
def test_regularized_defect_decays_at_rate_eta(eta):
    torus = build_torus_model((DriveTerm(1, Envelope("harmonic", 0.3, 1.0)),), cutoff=64, observe_dim=129)
    table = regularized_generator_defect(torus.model, torus.generator, [2.0 ** i for i in range(4, 11)],
                                         m_bar=1, eta=eta, k=1.0, times=[0.0, 0.5])
    assert log_log_slope(table["N"], table["defect"]) <= -eta + 0.1


ACCEPTANCE_MODELS = {
    "torus": lambda: build_torus_model((DriveTerm(1, Envelope("harmonic", 0.3, 1.0)),), cutoff=32),
    "anharmonic": lambda: build_anharmonic_model(3, drive=(DriveTerm(1, Envelope("harmonic", 0.5, 1.0)),),
                                                 n_modes=80),
    "lattice": lambda: build_lattice_model(d=1, box=16, drive=LatticeDrive(amplitude=1.0, seed=2)),
    "dilation": lambda: build_dilation_model(grid_points=1024, radius=12.0),
}


@pytest.mark.slow
@pytest.mark.parametrize("name", sorted(ACCEPTANCE_MODELS))
def test_exponential_midpoint_conserves_the_norm(name):
    built = ACCEPTANCE_MODELS[name]()
    psi = initial_state(built, "band_limited", band=8, seed=4)
    cfg = PropagatorConfig(dt=1e-3, t_span=(0.0, 1.0), record_every=100)
    traj = propagate(built.model, built.generator, psi, cfg, ks=())
    assert cfg.integrator == "exponential-midpoint"
    assert traj.conservation_drift <= 1e-9 * (cfg.t_span[1] - cfg.t_span[0])


def test_growth_bound_check_time_independent(small_torus):
    psi = np.zeros(small_torus.model.dim, dtype=complex)
    psi[:4] = 0.5
    traj = propagate(small_torus.model, small_torus.generator, psi, PropagatorConfig(dt=0.5, t_span=(0.0, 20.0)))
    report = growth_bound_check(traj, 1.0, 0.0)
    assert report["poly_exponent"] == pytest.approx(0.0, abs=1e-10)
    assert report["decade_span"]
    assert report["verdict"] == "respected"
    with pytest.raises(DomainError):
        growth_bound_check(traj, 1.0, 1.0)


@pytest.mark.parametrize("value, expected", [(1.0, "violated"), (0.4, "respected"), (0.6, "inconclusive")])
def test_bound_verdict(value, expected):
    assert bound_verdict(value, 0.1, 0.5) == expected


def test_floquet_of_constant_generator(small_torus):
    T = 0.7
    cfg = PropagatorConfig(dt=0.01, t_span=(0.0, 1.0))
    result = floquet_operator(small_torus.model, small_torus.reference, T, cfg)
    expected = np.diag(np.exp(-1j * small_torus.model.eigenvalues * T))
    assert np.allclose(result.operator.entries, expected, atol=1e-10)
    assert result.unitarity_defect < 1e-12
    assert list(result.to_frame().columns) == ["index", "eigenphase"]


def test_floquet_phases_invariant_under_origin_shift(driven_torus):
    period = driven_torus.generator.period
    assert period == pytest.approx(2 * math.pi)
    cfg = PropagatorConfig(dt=0.01, t_span=(0.0, 1.0))
    n_steps = cfg.with_span(0.0, period).n_steps
    shift = 7 * period / n_steps
    base = floquet_operator(driven_torus.model, driven_torus.generator, period, cfg)
    shifted = floquet_operator(driven_torus.model, driven_torus.generator, period, cfg.with_span(shift, shift + 1.0))
    assert phase_set_distance(base.eigenphases, shifted.eigenphases) < 1e-8


@pytest.mark.slow
def test_floquet_rabi_against_fine_reference():
    model = SpectralModel(np.array([1.0, 2.0]), observe_dim=2)
    L = rabi_generator()
    period = L.period
    coarse = floquet_operator(model, L, period, PropagatorConfig(dt=1e-3))
    fine = floquet_operator(model, L, period, PropagatorConfig(dt=1e-5))
    assert phase_set_distance(coarse.eigenphases, fine.eigenphases) < 1e-4


def test_floquet_rejects_wrong_period(driven_torus):
    with pytest.raises(PeriodicityError):
        floquet_operator(driven_torus.model, driven_torus.generator, 1.0, PropagatorConfig(dt=0.01))
    with pytest.raises(DomainError):
        floquet_operator(driven_torus.model, driven_torus.generator, -1.0, PropagatorConfig(dt=0.01))
