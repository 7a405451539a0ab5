import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from cqgrav.core import (
    CQState,
    HybridOperator,
    LindbladBasis,
    PhaseSpaceGrid,
    Tolerances,
    apply_cp_map,
    classical_marginal,
    expectation,
    quantum_marginal,
    transition_from_kraus,
    validate_state,
)
from cqgrav.errors import DimensionMismatch, NotCompletelyPositive, NotTracePreserving

SZ = np.diag([1.0, -1.0]).astype(complex)


def line_grid(cells, lo=0.0, hi=1.0):
    return PhaseSpaceGrid.regular(["q"], [(lo, hi)], [cells])


def random_density(rng, d, rank=None):
    rank = rank or d
    a = rng.standard_normal((d, rank)) + 1j * rng.standard_normal((d, rank))
    rho = a @ a.conj().T
    return rho / np.trace(rho).real


def random_cp_transition(rng, grid, basis, n_kraus=2):
    """Kraus operators for every jump z_j -> z_k, normalized column by column."""
    K, d, vol = grid.n_cells, basis.dim, grid.cell_volume
    kraus = rng.standard_normal((K, K, n_kraus, d, d)) + 1j * rng.standard_normal((K, K, n_kraus, d, d))
    for j in range(K):
        total = vol * np.einsum("krba,krbc->ac", kraus[:, j].conj(), kraus[:, j])
        w, V = np.linalg.eigh(total)
        kraus[:, j] = kraus[:, j] @ (V @ np.diag(w**-0.5) @ V.conj().T)
    return transition_from_kraus(kraus, basis)


# --- validation and marginals ------------------------------------------------

def test_maximally_mixed_single_cell_passes():
    state = CQState(PhaseSpaceGrid.single_cell(), np.eye(2)[None] / 2)
    assert validate_state(state).passed


def test_negative_eigenvalue_fails():
    state = CQState(PhaseSpaceGrid.single_cell(), np.diag([1.1, -0.1])[None])
    report = validate_state(state)
    assert not report.passed
    assert report.min_eigenvalues[0] == pytest.approx(-0.1)
    assert any("eigenvalue" in r for r in report.reasons)


def test_two_cell_qubit_marginals():
    grid = line_grid(2)
    vol = grid.cell_volume
    blocks = np.stack([np.diag([0.3, 0.2]), np.diag([0.25, 0.25])]) / vol
    state = CQState(grid, blocks)
    assert validate_state(state).passed
    assert np.allclose(vol * classical_marginal(state), [0.5, 0.5])
    assert np.allclose(quantum_marginal(state), np.diag([0.55, 0.45]))


def test_non_hermitian_and_unnormalized_blocks_reported():
    block = np.array([[0.5, 0.1], [0.0, 0.5]])
    report = validate_state(CQState(PhaseSpaceGrid.single_cell(), 2 * block[None]))
    assert not report.passed
    assert len(report.reasons) == 2


def test_block_dimension_mismatch():
    with pytest.raises(DimensionMismatch):
        CQState(line_grid(3), np.zeros((2, 2, 2)))
    with pytest.raises(DimensionMismatch):
        CQState(line_grid(2), np.zeros((2, 2, 3)))


def test_point_mass_and_uniform_marginals():
    grid = line_grid(4)
    vol = grid.cell_volume
    rho_q = np.diag([0.7, 0.3])
    blocks = np.zeros((4, 2, 2), complex)
    blocks[2] = rho_q / vol
    assert np.allclose(classical_marginal(CQState(grid, blocks)) * vol, [0, 0, 1, 0])
    uniform = CQState.product(grid, np.full(4, 1 / (4 * vol)), rho_q)
    assert np.allclose(classical_marginal(uniform), 1 / (4 * vol))
    assert np.allclose(quantum_marginal(uniform), rho_q)


def test_single_cell_quantum_marginal_scales_by_volume():
    grid = PhaseSpaceGrid.single_cell(volume=2.0)
    block = np.diag([0.3, 0.2])
    assert np.allclose(quantum_marginal(CQState(grid, block[None])), 2.0 * block)


def test_expectation_examples():
    grid = line_grid(5, -1.0, 1.5)
    rng = np.random.default_rng(3)
    p = rng.uniform(0.1, 1.0, 5)
    p /= p.sum() * grid.cell_volume
    rho_q = random_density(rng, 2)
    state = CQState.product(grid, p, rho_q)
    assert expectation(state, HybridOperator.constant(grid, np.eye(2))) == pytest.approx(1.0)
    z = grid.coordinates("q")
    mean = grid.cell_volume * np.sum(z * p)
    assert expectation(state, HybridOperator.classical(grid, z, 2)) == pytest.approx(mean)
    assert expectation(state, HybridOperator.constant(grid, SZ)) == pytest.approx(np.trace(SZ @ rho_q))


def test_expectation_grid_mismatch():
    state = CQState.product(line_grid(2), [1.0, 1.0], np.eye(2) / 2)
    with pytest.raises(DimensionMismatch):
        expectation(state, HybridOperator.constant(line_grid(3), np.eye(2)))


@settings(max_examples=40, deadline=None)
@given(seed=st.integers(0, 2**32 - 1), a=st.floats(-3, 3), b=st.floats(-3, 3))
def test_expectation_is_linear(seed, a, b):
    rng = np.random.default_rng(seed)
    grid = line_grid(3)
    s1 = CQState.product(grid, [1.0, 1.0, 1.0], random_density(rng, 2))
    s2 = CQState.product(grid, [0.5, 1.0, 1.5], random_density(rng, 2))
    o1 = HybridOperator(grid, rng.standard_normal((3, 2, 2)))
    o2 = HybridOperator(grid, rng.standard_normal((3, 2, 2)))
    mix = CQState(grid, a * s1.blocks + b * s2.blocks)
    assert expectation(mix, o1) == pytest.approx(a * expectation(s1, o1) + b * expectation(s2, o1), abs=1e-9)
    combo = HybridOperator(grid, a * o1.blocks + b * o2.blocks)
    assert expectation(s1, combo) == pytest.approx(a * expectation(s1, o1) + b * expectation(s1, o2), abs=1e-9)


def test_hermitian_observable_gives_real_expectation():
    rng = np.random.default_rng(0)
    grid = line_grid(3)
    h = rng.standard_normal((3, 2, 2)) + 1j * rng.standard_normal((3, 2, 2))
    h = h + h.conj().transpose(0, 2, 1)
    state = CQState.product(grid, [1.0, 1.0, 1.0], random_density(rng, 2))
    assert abs(expectation(state, HybridOperator(grid, h)).imag) < 1e-12


# --- bases ---------------------------------------------------------------------

def test_gell_mann_basis_is_complete_and_orthogonal():
    for d in (2, 3, 4):
        basis = LindbladBasis.gell_mann(d)
        assert basis.p == d * d - 1 and basis.is_complete
        op = np.arange(d * d).reshape(d, d) + 1j
        coeffs = basis.coefficients(op)
        assert np.allclose(np.einsum("m,mij->ij", coeffs, basis.full()), op)


def test_basis_rejects_traceful_and_non_orthogonal_ops():
    with pytest.raises(ValueError):
        LindbladBasis(np.eye(2)[None])
    sx = np.array([[0, 1], [1, 0]])
    with pytest.raises(ValueError):
        LindbladBasis(np.stack([sx, sx + SZ]))


# --- CP maps -------------------------------------------------------------------

def test_identity_map():
    grid = line_grid(3)
    basis = LindbladBasis.pauli()
    vol = grid.cell_volume
    lam = np.zeros((3, 3, 4, 4), complex)
    lam[:, :, 0, 0] = np.eye(3) / vol
    rng = np.random.default_rng(1)
    state = CQState.product(grid, [0.2, 0.3, 0.5] / np.float64(vol), random_density(rng, 2))
    out = apply_cp_map(state, lam, basis)
    assert np.allclose(out.blocks, state.blocks)


def test_classical_stochastic_matrix_mixes_blocks():
    grid = line_grid(3)
    basis = LindbladBasis.pauli()
    vol = grid.cell_volume
    P = np.array([[0.8, 0.1, 0.0], [0.2, 0.8, 0.3], [0.0, 0.1, 0.7]])  # columns sum to 1
    lam = np.zeros((3, 3, 4, 4), complex)
    lam[:, :, 0, 0] = P / vol
    rng = np.random.default_rng(2)
    blocks = np.stack([random_density(rng, 2) * w for w in (0.2, 0.5, 0.3)]) / vol
    state = CQState(grid, blocks)
    out = apply_cp_map(state, lam, basis)
    assert np.allclose(out.blocks, np.einsum("kj,jab->kab", P, blocks))
    equal = CQState.product(grid, np.full(3, 1 / (3 * vol)), random_density(rng, 2))
    assert np.allclose(quantum_marginal(apply_cp_map(equal, lam, basis)), quantum_marginal(equal))


def test_depolarizing_channel_single_cell():
    basis = LindbladBasis.pauli()
    grid = PhaseSpaceGrid.single_cell()
    q = 0.3
    lam = np.diag([1 - 3 * q / 4, q / 4, q / 4, q / 4]).astype(complex)[None, None]
    rng = np.random.default_rng(4)
    rho = random_density(rng, 2)
    out = apply_cp_map(CQState(grid, rho[None]), lam, basis)
    expected = (1 - q) * rho + q * np.eye(2) / 2
    assert np.allclose(out.blocks[0], expected)
    assert validate_state(out).passed


def test_cp_map_errors():
    grid = PhaseSpaceGrid.single_cell()
    basis = LindbladBasis.pauli()
    state = CQState(grid, np.eye(2)[None] / 2)
    bad = np.diag([1.0, -0.5, 0.25, 0.25]).astype(complex)[None, None]
    with pytest.raises(NotCompletelyPositive):
        apply_cp_map(state, bad, basis)
    leaky = np.diag([0.5, 0.0, 0.0, 0.0]).astype(complex)[None, None]
    with pytest.raises(NotTracePreserving):
        apply_cp_map(state, leaky, basis)
    with pytest.raises(DimensionMismatch):
        apply_cp_map(state, np.zeros((2, 2, 4, 4)), basis)


@settings(max_examples=30, deadline=None)
@given(seed=st.integers(0, 2**32 - 1), d=st.sampled_from([2, 3]), cells=st.integers(1, 3))
def test_random_cp_maps_preserve_validity(seed, d, cells):
    rng = np.random.default_rng(seed)
    grid = line_grid(cells)
    basis = LindbladBasis.gell_mann(d)
    lam = random_cp_transition(rng, grid, basis)
    weights = rng.uniform(0.1, 1.0, cells)
    weights /= weights.sum() * grid.cell_volume
    state = CQState(grid, np.stack([w * random_density(rng, d) for w in weights]))
    out = apply_cp_map(state, lam, basis)
    report = validate_state(out, Tolerances(norm=1e-8))
    assert report.passed, report.reasons
    p = classical_marginal(out)
    assert np.all(p >= -1e-12)
    rho = quantum_marginal(out)
    assert np.trace(rho).real == pytest.approx(1.0)
    assert np.linalg.eigvalsh(rho).min() > -1e-10


def test_state_json_roundtrip():
    rng = np.random.default_rng(5)
    grid = PhaseSpaceGrid.regular(["q", "p"], [(0, 1), (-1, 1)], [2, 3])
    state = CQState(grid, rng.standard_normal((6, 2, 2)) + 1j * rng.standard_normal((6, 2, 2)))
    back = CQState.from_json(state.to_json())
    assert back.grid == grid
    assert np.array_equal(back.blocks, state.blocks)


def test_states_are_immutable():
    state = CQState(PhaseSpaceGrid.single_cell(), np.eye(2)[None] / 2)
    with pytest.raises(ValueError):
        state.blocks[0, 0, 0] = 1.0
