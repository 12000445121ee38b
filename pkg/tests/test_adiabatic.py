import json

import numpy as np
import pytest
from scipy.linalg import eigh

from spectral_lab.adiabatic import (
    ESCAPE_MESSAGE,
    adiabatic_propagate,
    block_decay_fit,
    block_monotonicity,
    block_norm_table,
    build_hierarchy,
    chebyshev_nodes,
    cluster_projectors,
    counter_term,
    duhamel_compare,
    homological_residual,
    intertwining_order,
    lambda_operator,
    norm_equivalence,
    projector_time_derivative,
    proof_chain_decay,
    proof_chain_operators,
    stationarity_residual,
)
from spectral_lab.errors import ClusterEscapeError, DerivativeUnavailableError, DomainError
from spectral_lab.models import DriveTerm, build_torus_model, initial_state
from spectral_lab.propagator import PropagatorConfig
from spectral_lab.spectral_core import Envelope, OperatorSampler, StateVector

MIDGAP = 6.0
FD_STEP = 1e-3


def split_projectors(G):
    w, Q = eigh(0.5 * (G + G.conj().T))
    low, high = Q[:, w < MIDGAP], Q[:, w >= MIDGAP]
    return np.array([low @ low.conj().T, high @ high.conj().T])


def fd(f, t, h=FD_STEP):
    return (f(t + h) - f(t - h)) / (2 * h)


def brute_force_counter(L, level_generator, t):
    """i Σ_j Π_j (∂_tΠ_j + i[L, Π_j]) with every derivative taken by finite differences."""
    P = split_projectors(level_generator(t))
    dP = fd(lambda r: split_projectors(level_generator(r)), t)
    G = L(t)
    return 1j * sum(P_j @ (dP_j + 1j * (G @ P_j - P_j @ G)) for P_j, dP_j in zip(P, dP))


@pytest.fixture
def toy_hierarchy(toy_model, toy_decomposition, toy_coupling_sampler):
    return build_hierarchy(toy_model, toy_coupling_sampler, 2, decomposition=toy_decomposition,
                           window=(0.0, 2.0), n_nodes=12)


@pytest.fixture
def free_hierarchy(toy_model, toy_decomposition):
    zero = OperatorSampler.constant(np.zeros((4, 4)))
    return build_hierarchy(toy_model, zero, 1, decomposition=toy_decomposition, window=(0.0, 2.0), n_nodes=6)


def test_zero_perturbation_gives_zero_counter_terms(free_hierarchy):
    for level in free_hierarchy.levels:
        assert np.abs(level.counter_terms).max() < 1e-12
        assert level.algebra_pass
    traj, report = adiabatic_propagate(free_hierarchy, StateVector.basis(4, 0),
                                       PropagatorConfig(dt=0.01, t_span=(0.0, 1.0)))
    assert report["intertwining_defect"] < 1e-10
    assert traj.extras["adiabatic"] is report


def test_hierarchy_metadata(toy_hierarchy):
    assert toy_hierarchy.M == 2
    assert toy_hierarchy.J == 1
    assert toy_hierarchy.delta == pytest.approx(1.0)
    assert toy_hierarchy.window == pytest.approx((0.0, 2.0))
    assert toy_hierarchy.times.size == 12
    assert all(level.hermitian_defect < 1e-8 for level in toy_hierarchy.levels)
    assert all(level.algebra_pass for level in toy_hierarchy.levels)


def test_first_counter_term_matches_brute_force(toy_hierarchy):
    t = 0.37
    B, blocks = counter_term(toy_hierarchy, 0, t)
    L = toy_hierarchy.L.eval
    assert np.allclose(B.entries, brute_force_counter(L, L, t), atol=1e-7)
    assert np.allclose(1j * sum(blocks), B.entries, atol=1e-12)
    norms = toy_hierarchy.evaluator().counter(0, t).block_norms
    assert norms == pytest.approx([np.linalg.norm(block, 2) for block in blocks])


def test_second_counter_term_matches_brute_force(toy_hierarchy):
    t = 0.8
    L = toy_hierarchy.L.eval

    def first_level(r):
        return L(r) + brute_force_counter(L, L, r)

    B, _ = counter_term(toy_hierarchy, 1, t)
    assert np.allclose(B.entries, brute_force_counter(L, first_level, t), atol=1e-6)


def test_counter_terms_shrink_with_depth(toy_hierarchy):
    sup = [np.abs(level.counter_terms).max() for level in toy_hierarchy.levels]
    assert sup[1] < sup[0]
    assert block_monotonicity(toy_hierarchy)["flags"].keys() == {"1", "2"}


def test_interpolated_counter_term_between_nodes(toy_hierarchy):
    t = 0.55
    exact = toy_hierarchy.evaluator().counter(1, t).total
    assert np.allclose(toy_hierarchy.level(1).counter_term_at(t), exact, atol=1e-8)
    with pytest.raises(DomainError):
        toy_hierarchy.level(1).counter_term_at(2.5)


@pytest.mark.parametrize("m", [0, 1, 2])
def test_homological_equation_holds(toy_hierarchy, m):
    assert homological_residual(toy_hierarchy, m, 0.6) < 1e-10


def test_projectors_are_stationary_under_adiabatic_generator(toy_hierarchy):
    assert stationarity_residual(toy_hierarchy, 0, 0.9) < 1e-6


def test_projector_derivatives_match_finite_differences(toy_hierarchy):
    t = 1.1
    ev = toy_hierarchy.evaluator()
    L = toy_hierarchy.L.eval
    assert np.allclose(projector_time_derivative(toy_hierarchy, 0, t), fd(lambda r: split_projectors(L(r)), t),
                       atol=1e-7)
    expected = fd(lambda r: split_projectors(ev.generator(1, r)), t)
    assert np.allclose(projector_time_derivative(toy_hierarchy, 1, t), expected, atol=1e-6)
    with pytest.raises(DomainError):
        projector_time_derivative(toy_hierarchy, 0, t, order=0)


def test_proof_chain_identities(toy_hierarchy):
    chain = proof_chain_operators(toy_hierarchy, 0, 1, 0.4)
    assert chain.residuals["B_identity"] <= 1e-8
    assert chain.residuals["D_with_K_m"] <= 1e-10
    assert "D_with_K_m1" in chain.residuals
    assert chain.closure in ("K_m", "K_m1")
    assert np.allclose(chain.D - chain.K, chain.L @ chain.L, atol=1e-12)


def test_proof_chain_index_checks(toy_hierarchy):
    with pytest.raises(DomainError):
        proof_chain_operators(toy_hierarchy, 2, 1, 0.4)
    with pytest.raises(DomainError):
        proof_chain_operators(toy_hierarchy, 0, 3, 0.4)


def test_proof_chain_decay_table(toy_hierarchy):
    table = proof_chain_decay(toy_hierarchy, 0, 0.4)
    assert list(table.columns) == ["j", "lower_gap", "L_norm", "K_norm", "D_norm"]
    assert table["lower_gap"].tolist() == [7.0, 7.0]
    assert (table["K_norm"] <= table["L_norm"] + 1e-12).all()


def test_duhamel_identity(toy_hierarchy):
    report = duhamel_compare(toy_hierarchy, StateVector.basis(4, 0), PropagatorConfig(dt=0.01, t_span=(0.0, 1.0)))
    assert report["residual"] < 1e-3
    assert report["within_bound"]
    assert report["tail_bound_holds"]
    assert list(report["tail_bound"]["j"]) == [1, 2]
    with pytest.raises(DomainError):
        duhamel_compare(toy_hierarchy, StateVector.basis(4, 0), PropagatorConfig(), quadrature="gauss")


def test_adiabatic_flow_intertwines_projectors(toy_hierarchy):
    cfg = PropagatorConfig(dt=0.01, t_span=(0.0, 1.0))
    _, report = adiabatic_propagate(toy_hierarchy, StateVector.basis(4, 1), cfg, ks=(0.0, 1.0))
    assert report["intertwining_defect"] < 1e-4
    assert report["conservation_drift"] < 1e-10
    assert report["norm_band"][0.0] == pytest.approx(1.0)
    order = intertwining_order(toy_hierarchy, StateVector.basis(4, 1), PropagatorConfig(dt=0.04, t_span=(0.0, 1.0)))
    assert order["order"] == pytest.approx(2.0, abs=0.4)
    assert len(order["pair_orders"]) == 2
    assert order["fitted_from"] in order["dts"]
    with pytest.raises(DomainError):
        intertwining_order(toy_hierarchy, StateVector.basis(4, 1), PropagatorConfig(dt=0.04, t_span=(0.0, 1.0)),
                           refinements=1)


def test_norm_equivalence_at_power_zero(toy_hierarchy):
    result = norm_equivalence(toy_hierarchy, 1, [0.0, 0.5], [0.0, 1.0], n_vectors=50, seed=3)
    zero = result.table[result.table["p"] == 0.0]
    ratios = zero[["c1_sobolev", "c2_sobolev", "c1_lambda", "c2_lambda"]].to_numpy()
    assert np.allclose(ratios, 1.0)
    assert 0 < result.c1 <= 1.0 <= result.c2
    assert result.c0 >= 1.0
    with pytest.raises(DomainError):
        norm_equivalence(toy_hierarchy, 1, [-1.0], [0.0])


def test_lambda_operator_weights(toy_hierarchy):
    op = lambda_operator(toy_hierarchy, 0, 0.2)
    assert op.weights.tolist() == [1.0, 4.0]
    assert np.allclose(op.matrix(0.0), np.eye(4))
    psi = np.array([1.0, 0.0, 0.0, 0.0])
    assert np.vdot(psi, op.apply(psi)).real >= 1.0 - 1e-12


def test_block_norm_table_shape(toy_hierarchy):
    table = block_norm_table(toy_hierarchy)
    assert list(table.columns) == ["m", "j", "lower_gap", "block_norm"]
    assert len(table) == 3 * 2


def test_summary_is_json_ready(toy_hierarchy):
    payload = json.loads(json.dumps(toy_hierarchy.summary()))
    assert payload["M"] == 2
    assert len(payload["levels"]) == 3
    assert payload["decay_fits"] == [None, None, None]


def test_cluster_projectors_and_escape(toy_decomposition):
    projectors = cluster_projectors(np.diag([1.0, 2.0, 10.0, 11.0]), toy_decomposition)
    assert np.allclose(projectors[0], np.diag([1.0, 1.0, 0.0, 0.0]))
    with pytest.raises(ClusterEscapeError, match=ESCAPE_MESSAGE):
        cluster_projectors(np.diag([1.0, 2.0, 5.0, 11.0]), toy_decomposition)
    with pytest.raises(ClusterEscapeError, match="rank changed"):
        cluster_projectors(np.diag([1.0, 2.0, 2.4, 11.0]), toy_decomposition)


def test_build_hierarchy_argument_checks(toy_model, toy_decomposition, toy_coupling_sampler):
    with pytest.raises(DomainError):
        build_hierarchy(toy_model, toy_coupling_sampler, -1, decomposition=toy_decomposition, window=(0.0, 1.0))
    with pytest.raises(DomainError):
        build_hierarchy(toy_model, toy_coupling_sampler, 1, decomposition=toy_decomposition)
    with pytest.raises(DomainError):
        build_hierarchy(toy_model, toy_coupling_sampler, 1, sample_times=[0.5, 0.5], decomposition=toy_decomposition)
    with pytest.raises(DomainError):
        build_hierarchy(toy_model, OperatorSampler.constant(np.zeros((3, 3))), 1, decomposition=toy_decomposition,
                        window=(0.0, 1.0))
    shallow = OperatorSampler(toy_coupling_sampler.eval, 4, max_order=1)
    with pytest.raises(DerivativeUnavailableError):
        build_hierarchy(toy_model, shallow, 1, decomposition=toy_decomposition, window=(0.0, 1.0))


def test_chebyshev_nodes():
    assert chebyshev_nodes(0.0, 2.0, 3) == pytest.approx([0.0, 1.0, 2.0])
    nodes = chebyshev_nodes(-1.0, 1.0, 9)
    assert np.all(np.diff(nodes) > 0)
    with pytest.raises(DomainError):
        chebyshev_nodes(0.0, 1.0, 1)


@pytest.fixture(scope="module")
def driven_torus_64():
    return build_torus_model((DriveTerm(1, Envelope("harmonic", 0.3, 1.0)),), cutoff=64)


@pytest.fixture(scope="module")
def torus_hierarchy(driven_torus_64):
    return build_hierarchy(driven_torus_64.model, driven_torus_64.perturbation, 2, window=(0.0, 1.0), n_nodes=12)


@pytest.mark.slow
def test_torus_projector_algebra(torus_hierarchy):
    assert torus_hierarchy.L.dim == 129
    for level in torus_hierarchy.levels:
        assert level.algebra_pass, level.algebra


@pytest.mark.slow
def test_torus_intertwining_order_is_two(driven_torus_64, torus_hierarchy):
    psi = initial_state(driven_torus_64, "band_limited")
    order = intertwining_order(torus_hierarchy, psi, PropagatorConfig(dt=0.04, t_span=(0.0, 1.0)))
    assert order["dts"] == pytest.approx([0.04, 0.02, 0.01])
    assert len(order["pair_orders"]) == 2
    assert 1.7 <= order["order"] <= 2.3


@pytest.mark.slow
def test_torus_norm_equivalence_is_stable(torus_hierarchy):
    result = norm_equivalence(torus_hierarchy, 2, [0.0, 0.5, 1.0], [0.0, 0.5, 1.0], n_vectors=200, seed=1)
    assert result.stable, result.stability
    assert 0 < result.c1 <= result.c2


@pytest.fixture(scope="module")
def wide_torus_hierarchy():
    torus = build_torus_model((DriveTerm(1, Envelope("harmonic", 0.3, 1.0)),), cutoff=256)
    return build_hierarchy(torus.model, torus.perturbation, 2, J=1, window=(0.0, 1.0), n_nodes=6,
                           keep_spectra=False)


@pytest.mark.slow
@pytest.mark.parametrize("m", [0, 1, 2])
def test_torus_block_norms_decay_with_the_gaps(wide_torus_hierarchy, m):
    fit = block_decay_fit(wide_torus_hierarchy, m, (3, 8))
    assert fit["pass"], fit
