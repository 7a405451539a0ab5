import math

import numpy as np
import pytest

from cqgrav.constants import Constants
from cqgrav.errors import GridMismatch, InvalidPair
from cqgrav.kernels import KernelSpec, SpatialGrid, discretize, laplacian_matrix, saturating_pair
from cqgrav.newtonian import (
    FieldState,
    NoiseConfig,
    config_hash,
    constraint_residuals,
    master_equation_marginal,
    poisson_residual,
    poisson_solve,
    run_ensemble,
    run_manifest,
    sample_noise,
    simulate_trajectory,
    sourced_potential,
    step_unraveling,
)
from cqgrav.observables import decoherence_rate, uniform_sphere_density

UNIT = Constants(G=1.0, c=0.1)


def zero_kernel(grid):
    return discretize(KernelSpec("Dirac", 0.0), grid)


def qubit_setup(ensemble_size=1, seed=1, dt=0.01, coupling=0.5, constants=UNIT):
    grid = SpatialGrid.line(2, 1.0)
    D0, D2 = saturating_pair(KernelSpec("DiosiPenrose", coupling), grid)
    state = FieldState.two_branch(grid, [1.0, 0.0], [0.0, 1.0])
    cfg = NoiseConfig(seed=seed, dt=dt, D2_kernel=D2, D0_kernel=D0, ensemble_size=ensemble_size,
                      constants=constants)
    return state, cfg


# --- Poisson -----------------------------------------------------------------

def test_point_mass_potential():
    grid = SpatialGrid.cube(15, 15.0)
    m = np.zeros(grid.n_sites)
    c = grid.n_sites // 2
    m[c] = 3.0 / grid.cell_volume
    phi = poisson_solve(m, grid, G=2.0)
    r = np.linalg.norm(grid.points() - grid.points()[c], axis=1)
    far = r >= 3.0
    assert np.allclose(phi[far], -2.0 * 3.0 / r[far], rtol=0.05)


def test_uniform_sphere_potential_at_32_cubed():
    grid = SpatialGrid.cube(32, 4.0)
    M, R = 2.0, 1.0
    m = uniform_sphere_density(grid, M, R, (0.0, 0.0, 0.0))
    phi = poisson_solve(m, grid, G=1.0)
    r = np.linalg.norm(grid.points(), axis=1)
    exact = np.where(r < R, -M * (3 * R**2 - r**2) / (2 * R**3), -M / np.maximum(r, 1e-12))
    assert np.allclose(phi, exact, rtol=0.02)
    # the discrete Laplacian recovers the source up to discretization error
    inside = r < 0.7 * R
    lap = laplacian_matrix(grid) @ phi
    assert np.mean(lap[inside]) == pytest.approx(4 * math.pi * np.mean(m[inside]), rel=0.05)
    assert poisson_residual(phi, m, grid, G=1.0) < 4 * math.pi * m.max()


def test_poisson_rejects_mismatched_fields():
    grid = SpatialGrid.cube(3, 1.0)
    with pytest.raises(GridMismatch):
        poisson_solve(np.zeros(5), grid)
    with pytest.raises(ValueError):
        poisson_solve(np.full(27, np.nan), grid)


def test_sourced_potential_special_cases():
    grid = SpatialGrid.cube(5, 2.0)
    rng = np.random.default_rng(0)
    m = rng.uniform(0, 1, grid.n_sites)
    assert np.allclose(sourced_potential(m, np.zeros_like(m), grid, G=1.0), poisson_solve(m, grid, G=1.0))
    assert np.allclose(sourced_potential(m, m, grid, G=1.0), 0.0)


def test_sourced_potential_variance_with_dirac_noise():
    grid = SpatialGrid.cube(5, 2.0)
    vol = grid.cell_volume
    D2, T = 0.3, 2.0
    # J fluctuates with covariance 2 D2 delta / T
    sd = math.sqrt(2 * D2 / (T * vol))
    rng = np.random.default_rng(1)
    J = rng.standard_normal((4000, grid.n_sites)) * sd
    phi = np.stack([sourced_potential(np.zeros(grid.n_sites), j, grid, G=1.0) for j in J[:, :]])
    K = discretize(KernelSpec("DiosiPenrose", 1.0), grid).dense()
    predicted = vol**2 * (K**2).sum(axis=1) * sd**2
    assert np.allclose(phi.var(axis=0), predicted, rtol=0.1)


# --- constraints -------------------------------------------------------------

def test_constraints_vanish_on_consistent_fields():
    grid = SpatialGrid.cube(6, 3.0)
    phi = np.sin(grid.points()[:, 0])
    m = laplacian_matrix(grid) @ phi / (4 * math.pi * UNIT.G)
    # the mass operator is a multiple of the identity: <m> = m for any state
    state = FieldState(grid, phi, np.full(grid.n_sites, 0.0), np.eye(2) / 2,
                       m[:, None, None] * np.eye(2)[None])
    res = constraint_residuals(state, UNIT)
    assert res.hamiltonian_norm < 1e-12 and res.momentum_norm == 0.0


def test_momentum_constraint_detects_gradient():
    grid = SpatialGrid.cube(6, 3.0)
    pi = 2.0 * grid.points()[:, 2]
    state = FieldState(grid, np.zeros(grid.n_sites), pi, np.eye(1), np.zeros((grid.n_sites, 1, 1)))
    res = constraint_residuals(state, UNIT)
    assert res.momentum_norm == pytest.approx(3 * UNIT.c / (4 * math.pi * UNIT.G) * 2.0)


# --- stepping ----------------------------------------------------------------

def test_noise_free_step_is_deterministic_newtonian_update():
    grid = SpatialGrid.cube(4, 2.0)
    rng = np.random.default_rng(2)
    phi, pi = rng.standard_normal(grid.n_sites), rng.standard_normal(grid.n_sites)
    state = FieldState.two_branch(grid, np.ones(grid.n_sites), 2 * np.ones(grid.n_sites), phi=phi, pi_phi=pi)
    cfg = NoiseConfig(seed=0, dt=0.01, D2_kernel=zero_kernel(grid), D0_kernel=zero_kernel(grid),
                      constants=UNIT, validate_pair=False)
    new = step_unraveling(state, cfg)
    G, c = UNIT.G, UNIT.c
    assert np.allclose(new.phi, phi - 4 * math.pi * G * c**2 / 3 * pi * 0.01)
    expected_pi = pi + (laplacian_matrix(grid) @ phi / (4 * math.pi * G) - 1.5) * 0.01
    assert np.allclose(new.pi_phi, expected_pi)
    assert np.allclose(new.rho_q, state.rho_q)
    assert new.time == pytest.approx(0.01)


def test_invalid_pair_rejected():
    state, cfg = qubit_setup()
    weak = NoiseConfig(seed=0, dt=0.01, D2_kernel=cfg.D2_kernel.scaled(0.5), D0_kernel=cfg.D0_kernel)
    with pytest.raises(InvalidPair):
        step_unraveling(state, weak)
    with pytest.raises(InvalidPair):
        run_ensemble(state, weak, 0.1)


def test_noise_covariance():
    grid = SpatialGrid.cube(2, 1.0)
    rng = np.random.default_rng(3)
    dxi = sample_noise(rng, grid, 0.01, size=200_000)
    cov = np.cov(dxi.T)
    assert np.allclose(cov, 0.01 / grid.cell_volume * np.eye(8), atol=3e-3 * 0.01 / grid.cell_volume * 8)


def test_single_member_ensemble_matches_trajectory():
    state, cfg = qubit_setup(ensemble_size=1, seed=9)
    traj = simulate_trajectory(state, cfg, 0.2, record_every=5)
    summary = run_ensemble(state, cfg, 0.2, record_every=5)
    assert np.allclose(summary.times, traj.times)
    for k, snap in enumerate(traj.snapshots):
        assert np.allclose(summary.pi_mean[k], snap.pi_phi)
        assert np.allclose(summary.rho_mean[k], snap.rho_q)


def test_ensembles_are_reproducible_and_worker_independent():
    state, cfg = qubit_setup(ensemble_size=600, seed=4)
    one = run_ensemble(state, cfg, 0.1, record_every=5, workers=1).csv_text()
    two = run_ensemble(state, cfg, 0.1, record_every=5, workers=2).csv_text()
    assert one == two
    other = run_ensemble(state, NoiseConfig(**{**cfg.__dict__, "seed": 5}), 0.1, record_every=5).csv_text()
    assert other != one


def test_momentum_variance_grows_at_twice_the_diffusion():
    grid = SpatialGrid.line(2, 1.0)
    _, D2 = saturating_pair(KernelSpec("DiosiPenrose", 0.5), grid)
    state = FieldState.two_branch(grid, [0.0, 0.0], [0.0, 0.0])
    cfg = NoiseConfig(seed=2, dt=0.01, D2_kernel=D2, D0_kernel=discretize(KernelSpec("DiosiPenrose", 0.5), grid),
                      ensemble_size=4000, constants=Constants(G=1.0, c=1e-4))
    summary = run_ensemble(state, cfg, 0.5, record_every=10)
    slope = np.polyfit(summary.times, summary.pi_var[:, 0], 1)[0]
    assert slope == pytest.approx(2 * D2.dense()[0, 0], rel=0.1)


def test_coherence_decays_at_decoherence_rate():
    state, cfg = qubit_setup(ensemble_size=500, seed=3)
    summary = run_ensemble(state, cfg, 1.0, record_every=10)
    coherence = np.array([summary.ensemble_coherence(k) for k in range(len(summary.times))])
    rate = -np.polyfit(summary.times, np.log(coherence), 1)[0]
    m_L, m_R = state.mass_op[:, 0, 0].real, state.mass_op[:, 1, 1].real
    assert rate == pytest.approx(decoherence_rate(cfg.D0_kernel, m_L, m_R), rel=0.15)
    ref = master_equation_marginal(state, cfg, summary.times)
    assert np.allclose(np.abs(ref[:, 0, 1]), coherence, atol=0.03)


def test_momentum_residual_grows_with_accumulated_noise():
    state, cfg = qubit_setup(ensemble_size=200, seed=6)
    summary = run_ensemble(state, cfg, 1.0, record_every=25)
    ham = summary.residual_mean[:, 0]
    assert ham[-1] > ham[1] > 0


def test_manifest_records_config_hash():
    state, cfg = qubit_setup(ensemble_size=3)
    summary = run_ensemble(state, cfg, 0.02)
    config = {"dt": 0.01, "seed": 1}
    manifest = run_manifest(config, cfg, summary)
    assert manifest["config_sha256"] == config_hash({"seed": 1, "dt": 0.01})
    assert manifest["n_trajectories"] == 3
