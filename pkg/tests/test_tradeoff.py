import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from cqgrav.core import CQState, HybridOperator, LindbladBasis, PhaseSpaceGrid
from cqgrav.errors import MissingDecoherenceRate, NotHermitian, ShapeMismatch, SupportViolation
from cqgrav.generator import GeneratorSpec, MomentSet
from cqgrav.kernels import KernelSpec, SpatialGrid, discretize, saturating_pair
from cqgrav.tradeoff import (
    check_coupling_tradeoff,
    check_kernel_tradeoff,
    expected_kernel_moment,
    generalized_inverse,
    observational_tradeoff,
    saturating_D2,
    spatially_averaged_bound,
)

from random_instances import block_matrix, coupling_instance, qubit_generator, random_psd

PAULI = LindbladBasis.pauli()


# --- generalized inverse -----------------------------------------------------

def test_generalized_inverse_examples():
    assert np.allclose(generalized_inverse(np.diag([2.0, 0.0])), np.diag([0.5, 0.0]))
    assert np.allclose(generalized_inverse(np.eye(3) * 4), np.eye(3) / 4)
    assert np.allclose(generalized_inverse(np.zeros((2, 2))), 0)
    # eigenvalues below rank_tol * max are dropped
    assert np.allclose(generalized_inverse(np.diag([1.0, 1e-14])), np.diag([1.0, 0.0]))
    with pytest.raises(NotHermitian):
        generalized_inverse(np.array([[1.0, 1.0], [0.0, 1.0]]))


@settings(max_examples=50, deadline=None)
@given(seed=st.integers(0, 2**32 - 1), p=st.integers(1, 6))
def test_generalized_inverse_penrose_identities(seed, p):
    rng = np.random.default_rng(seed)
    M = random_psd(rng, p, int(rng.integers(1, p + 1)))
    X = generalized_inverse(M)
    s = np.abs(M).max()
    assert np.allclose(M @ X @ M, M, atol=1e-8 * s)
    assert np.allclose(X @ M @ X, X, atol=1e-8 * np.abs(X).max())
    assert np.allclose(M @ X, (M @ X).conj().T, atol=1e-8)


# --- coupling form -----------------------------------------------------------

def test_scalar_instances():
    assert check_coupling_tradeoff([[1.0]], [[1.0]], [[1.0]]).satisfied
    verdict = check_coupling_tradeoff([[1.0]], [[1.0]], [[0.4]])
    assert not verdict.satisfied
    assert verdict.schur_defect == pytest.approx(0.2)


def test_zero_backreaction_always_satisfied():
    rng = np.random.default_rng(0)
    D0 = random_psd(rng, 3)
    assert check_coupling_tradeoff(D0, np.zeros((8, 3)), np.zeros((8, 8))).satisfied
    assert np.allclose(saturating_D2(D0, np.zeros((8, 3))), 0)


def test_scalar_saturation_value():
    gamma = 2.5
    assert saturating_D2([[gamma]], [[1.0]])[0, 0] == pytest.approx(1 / (2 * gamma))


def test_saturating_boundary_from_both_sides():
    rng = np.random.default_rng(11)
    D0 = random_psd(rng, 3)
    D1 = rng.standard_normal((8, 3))
    D2 = saturating_D2(D0, D1)
    eps = 1e-6 * np.abs(D2).max()
    assert check_coupling_tradeoff(D0, D1, D2 + eps * np.eye(8)).satisfied
    assert not check_coupling_tradeoff(D0, D1, D2 - eps * np.eye(8)).satisfied
    at = check_coupling_tradeoff(D0, D1, D2)
    assert at.satisfied
    assert abs(at.min_eigenvalue) <= 1e-10 * at.scale


@settings(max_examples=200, deadline=None)
@given(seed=st.integers(0, 2**32 - 1))
def test_schur_route_agrees_with_block_eigenvalues(seed):
    rng = np.random.default_rng(seed)
    D0, D1, D2, _ = coupling_instance(rng)
    verdict = check_coupling_tradeoff(D0, D1, D2)
    block = block_matrix(D0, D1, D2)
    oracle = np.linalg.eigvalsh(block)[0] >= -1e-10 * np.abs(block).max()
    assert verdict.satisfied == oracle


@settings(max_examples=100, deadline=None)
@given(seed=st.integers(0, 2**32 - 1))
def test_saturating_diffusion_sits_on_the_boundary(seed):
    rng = np.random.default_rng(seed)
    p, n = int(rng.integers(1, 5)), int(rng.integers(1, 5))
    D0 = random_psd(rng, p, int(rng.integers(1, p + 1)))
    D1 = rng.standard_normal(((p + 1) * n, p)) @ D0
    verdict = check_coupling_tradeoff(D0, D1, saturating_D2(D0, D1))
    assert verdict.satisfied
    assert abs(verdict.min_eigenvalue) <= 1e-10 * verdict.scale


@settings(max_examples=100, deadline=None)
@given(seed=st.integers(0, 2**32 - 1), big=st.floats(0.0, 1e3))
def test_vanishing_decoherence_rejects_backreaction(seed, big):
    rng = np.random.default_rng(seed)
    p, n = int(rng.integers(1, 5)), int(rng.integers(1, 5))
    D1 = rng.standard_normal(((p + 1) * n, p))
    verdict = check_coupling_tradeoff(np.zeros((p, p)), D1, big * np.eye((p + 1) * n))
    assert not verdict.satisfied
    assert verdict.support_defect > 0


def test_support_violation_in_saturating_diffusion():
    with pytest.raises(SupportViolation):
        saturating_D2(np.diag([1.0, 0.0]), np.array([[0.0, 1.0]]))


def test_shape_mismatch():
    with pytest.raises(ShapeMismatch):
        check_coupling_tradeoff(np.eye(2), np.ones((3, 3)), np.eye(3))


def test_verdict_serializes():
    import json

    verdict = check_coupling_tradeoff([[1.0]], [[1.0]], [[0.4]])
    data = json.loads(json.dumps(verdict.to_dict()))
    assert data["satisfied"] is False and data["schur_defect"] == pytest.approx(0.2)


# --- observational form ------------------------------------------------------

def random_qubit_state(rng, cells=3):
    grid = PhaseSpaceGrid.regular(["z"], [(0.0, 1.0)], [cells])
    blocks = []
    for _ in range(cells):
        a = rng.standard_normal((2, 2)) + 1j * rng.standard_normal((2, 2))
        blocks.append(a @ a.conj().T)
    blocks = np.array(blocks)
    blocks /= np.trace(blocks.sum(0)).real * grid.cell_volume
    return CQState(grid, blocks)


@settings(max_examples=40, deadline=None)
@given(seed=st.integers(0, 2**32 - 1))
def test_saturated_generator_passes_observational_checks(seed):
    rng = np.random.default_rng(seed)
    D0 = random_psd(rng, 3)
    v = rng.standard_normal(3) + 1j * rng.standard_normal(3)
    verdict = observational_tradeoff(random_qubit_state(rng), qubit_generator(D0, v))
    assert verdict.satisfied
    assert verdict.details["total_drift_asserted"]
    assert verdict.details["total_drift_satisfied"]


def test_zero_backreaction_observational():
    rng = np.random.default_rng(3)
    gen = GeneratorSpec(PAULI, MomentSet(random_psd(rng, 3), np.zeros((1, 4, 4)), np.zeros((1, 1, 4, 4))))
    assert observational_tradeoff(random_qubit_state(rng), gen).satisfied


def test_hand_built_violation_is_flagged():
    # single Lindblad channel sigma_z with D1 along the same direction,
    # probed by a state where <sigma_z> is large
    D0 = np.diag([0.0, 0.0, 1.0]).astype(complex)
    v = np.array([0.0, 0.0, 1.0])
    state = CQState(PhaseSpaceGrid.single_cell(), np.diag([0.95, 0.05]).astype(complex)[None])
    assert observational_tradeoff(state, qubit_generator(D0, v)).satisfied
    verdict = observational_tradeoff(state, qubit_generator(D0, v, D2_scale=0.1))
    assert not verdict.satisfied
    assert verdict.schur_defect > 0


def test_mixed_source_total_drift_reported_not_asserted():
    rng = np.random.default_rng(5)
    D0 = random_psd(rng, 3)
    v = rng.standard_normal(3)
    verdict = observational_tradeoff(random_qubit_state(rng), qubit_generator(D0, v, source="mixed"))
    assert not verdict.details["total_drift_asserted"]
    assert "total_drift_min_eigenvalue" in verdict.details


def test_hamiltonian_form_checked_when_supplied():
    D0 = np.diag([0.0, 0.0, 1.0]).astype(complex)
    state = CQState(PhaseSpaceGrid.single_cell(), np.diag([0.9, 0.1]).astype(complex)[None])
    gen = qubit_generator(D0, np.array([0.0, 0.0, 1.0]))
    sz = np.diag([1.0, -1.0])
    small = observational_tradeoff(state, gen, [HybridOperator.constant(state.grid, 0.1 * sz)])
    large = observational_tradeoff(state, gen, [HybridOperator.constant(state.grid, 100 * sz)])
    assert small.details["hamiltonian_form_satisfied"]
    assert not large.details["hamiltonian_form_satisfied"] and not large.satisfied


# --- kernel form -------------------------------------------------------------

def test_kernel_check_zero_drift():
    grid = SpatialGrid.cube(5, 2.0)
    D0 = discretize(KernelSpec("DiosiPenrose", 1.0), grid)
    D2 = discretize(KernelSpec("Dirac", 0.3), grid)
    assert check_kernel_tradeoff(D0, 0.0, D2).satisfied


def test_dp_grid_pair_satisfied():
    grid = SpatialGrid.cube(8, 4.0)
    D0, D2 = saturating_pair(KernelSpec("DiosiPenrose", 1.0), grid)
    verdict = check_kernel_tradeoff(D0, -0.5, D2)
    assert verdict.satisfied
    assert abs(verdict.min_eigenvalue) <= 1e-10 * verdict.scale
    weaker = check_kernel_tradeoff(D0, -0.5, D2.scaled(0.9), eigen_method="skip")
    assert not weaker.satisfied


def test_dp_grid_pair_defect_under_refinement():
    defects = []
    for n in (6, 8, 10):
        D0, D2 = saturating_pair(KernelSpec("DiosiPenrose", 1.0), SpatialGrid.cube(n, 4.0))
        verdict = check_kernel_tradeoff(D0, -0.5, D2, eigen_method="skip")
        assert verdict.satisfied
        defects.append(verdict.details["relative_schur_defect"])
    # roundoff-level defects: non-increasing up to double-precision noise
    assert all(b <= a + 1e-12 for a, b in zip(defects, defects[1:]))


def gaussian_sweep(n, orders, extent=3.0, r0=1.0):
    grid = SpatialGrid.cube(n, extent)
    width = r0 / grid.spacing[0]
    out = {}
    for N in orders:
        D0, D2 = saturating_pair(KernelSpec("Gaussian", 1.0, r0=r0), grid, order_N=N)
        out[N] = check_kernel_tradeoff(D0, -0.5, D2, eigen_method="skip",
                                       test_vector_width=(width, 2 * width))
    return out


def test_gaussian_pair_defect_decreases_with_order():
    sweep = gaussian_sweep(9, (2, 4, 8))
    defects = [sweep[N].details["relative_schur_defect"] for N in (2, 4, 8)]
    assert defects[0] >= defects[1] >= defects[2]
    margins = [sweep[N].details["smeared_min_relative_margin"] for N in (2, 4, 8)]
    assert margins[0] <= margins[1] <= margins[2]
    # smooth test vectors see the order-8 pair on the admissible side
    assert margins[2] > 0


def test_gaussian_pair_order8_satisfied_on_coarse_grid():
    # Expected to fail: the sampled Gaussian has grid modes with eigenvalues
    # near 1e-12 of its largest, and the truncated series cannot match their
    # inverse.
    assert gaussian_sweep(9, (8,))[8].satisfied


def test_gaussian_pair_defect_under_refinement():
    # Expected to fail at order 8: the relative defect grows from 9^3 to 12^3.
    coarse = gaussian_sweep(9, (8,))[8].details["relative_schur_defect"]
    fine = gaussian_sweep(12, (8,))[8].details["relative_schur_defect"]
    assert fine <= coarse


# --- spatially averaged bounds -----------------------------------------------

def test_total_mass_bound():
    grid = SpatialGrid.cube(4, 1e-8)
    m = np.zeros(grid.n_sites)
    assert spatially_averaged_bound(m, grid, 10.0) == 0.0
    m[5] = 1e-24 / grid.cell_volume
    assert spatially_averaged_bound(m, grid, 10.0) == pytest.approx(6.25e-51, rel=1e-12)
    with pytest.raises(MissingDecoherenceRate):
        spatially_averaged_bound(m, grid, 0.0)


def test_potential_bound_scales_inverse_square():
    grid = SpatialGrid.cube(5, 5.0)
    m = np.zeros(grid.n_sites)
    center = grid.n_sites // 2
    m[center] = 2.0 / grid.cell_volume
    origin = grid.points()[center]
    lam, G = 3.0, 1.0
    values = []
    for r in (1.3, 2.6, 5.2):
        q = origin + np.array([r, 0.0, 0.0])
        b = spatially_averaged_bound(m, grid, lam, "newtonian_potential", q, G=G)
        # direct: Phi = -G M / r
        assert b == pytest.approx((G * 2.0 / r) ** 2 / (16 * G**2 * lam), rel=1e-12)
        values.append(b)
    assert values[0] / values[1] == pytest.approx(4.0) and values[1] / values[2] == pytest.approx(4.0)


def test_expected_kernel_moment_two_sites():
    grid = SpatialGrid.line(2, 1.0)
    D0 = discretize(KernelSpec("DiosiPenrose", 0.5), grid)
    ops = np.zeros((2, 2, 2))
    ops[0, 0, 0] = ops[1, 1, 1] = 1.0
    plus = np.full((2, 2), 0.5)
    K = D0.dense()
    # orthogonal projectors: Tr(m_a rho m_b) vanishes for a != b
    assert expected_kernel_moment(D0, ops, plus) == pytest.approx(0.5 * np.trace(K))
    assert expected_kernel_moment(D0, ops, np.diag([1.0, 0.0])) == pytest.approx(K[0, 0])
