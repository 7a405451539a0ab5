"""Stochastic unraveling of Newtonian-limit CQ dynamics.

Fields live on a :class:`~cqgrav.kernels.SpatialGrid`; the matter system is
a finite-dimensional density matrix with one mass-density operator per site.
Per time step::

    dPhi = -(4 pi G c^2 / 3) pi dt
    dpi  = (lap Phi / (4 pi G) - <m>) dt + sum_b vol sigma[a, b] dxi_b
    rho  -> decoherence by D0 plus an innovation driven by the same dxi

with ``dxi_a ~ N(0, dt / vol)`` and ``vol sigma sigma^T = 2 D2``.

The quantum update is written in Kraus form so that every step maps a
density matrix to a density matrix; see :func:`prepare`.
"""

from __future__ import annotations

import csv
import hashlib
import io
import json
import math
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field, replace
from typing import Optional, Sequence

import numpy as np

from .constants import CODATA, Constants
from .core import DEFAULT_TOLERANCES, Tolerances
from .errors import GridMismatch, InvalidPair, StepTooLarge
from .kernels import DiscretizedKernel, KernelSpec, SpatialGrid, discretize, laplacian_matrix

CHUNK_SIZE = 256


# --- static potentials -------------------------------------------------------

def _as_field(values, grid: SpatialGrid, name: str) -> np.ndarray:
    arr = np.asarray(values, dtype=float)
    if arr.shape == grid.shape:
        arr = arr.ravel()
    if arr.shape[0] != grid.n_sites:
        raise GridMismatch(f"{name} has {arr.shape[0]} sites, grid has {grid.n_sites}")
    return arr


def _green(grid: SpatialGrid) -> DiscretizedKernel:
    return discretize(KernelSpec("DiosiPenrose", 1.0), grid)


def poisson_solve(mass_density, grid: SpatialGrid, G: float = CODATA.G) -> np.ndarray:
    """Free-space potential ``-G sum_b vol m_b / |x_a - x_b|``.

    The self term uses the equivalent-sphere value ``3 / (2 r_cell)``.
    Accepts a single field ``(S,)`` or a stack ``(S, k)``.
    """
    m = np.asarray(mass_density, dtype=float)
    if m.ndim == 1 or m.shape == grid.shape:
        m = _as_field(m, grid, "mass density")
    elif m.shape[0] != grid.n_sites:
        raise GridMismatch("mass density stack does not match the grid")
    if not np.all(np.isfinite(m)):
        raise ValueError("mass density must be finite")
    return -G * _green(grid).integrate(m)


def interior_mask(grid: SpatialGrid, layers: int = 1) -> np.ndarray:
    """Sites at least ``layers`` cells from every wall (singleton axes ignored)."""
    masks = []
    for n in grid.shape:
        idx = np.arange(n)
        masks.append(np.ones(n, bool) if n <= 2 * layers else (idx >= layers) & (idx < n - layers))
    return np.logical_and.outer(np.logical_and.outer(masks[0], masks[1]), masks[2]).ravel()


def poisson_residual(phi, mass_density, grid: SpatialGrid, G: float = CODATA.G,
                     layers: int = 1) -> float:
    """RMS of ``lap Phi - 4 pi G m`` over interior sites."""
    phi = _as_field(phi, grid, "phi")
    m = _as_field(mass_density, grid, "mass density")
    resid = laplacian_matrix(grid) @ phi - 4.0 * math.pi * G * m
    return float(np.sqrt(np.mean(resid[interior_mask(grid, layers)] ** 2)))


def sourced_potential(mass, J_sample, grid: SpatialGrid, G: float = CODATA.G) -> np.ndarray:
    """Potential sourced by the mass minus a noise sample, ``poisson_solve(m - J)``."""
    m = _as_field(mass, grid, "mass")
    J = _as_field(J_sample, grid, "J")
    return poisson_solve(m - J, grid, G)


# --- state and configuration -------------------------------------------------

@dataclass(frozen=True, eq=False)
class FieldState:
    """Potential, its conjugate momentum and the matter state.

    ``mass_op[a]`` is the mass-density operator at site ``a`` (kg/m^3).
    """

    grid: SpatialGrid
    phi: np.ndarray
    pi_phi: np.ndarray
    rho_q: np.ndarray
    mass_op: np.ndarray
    time: float = 0.0
    tolerances: Tolerances = DEFAULT_TOLERANCES

    def __post_init__(self):
        S = self.grid.n_sites
        phi = _as_field(self.phi, self.grid, "phi")
        pi = _as_field(self.pi_phi, self.grid, "pi_phi")
        rho = np.asarray(self.rho_q, dtype=complex)
        mass = np.asarray(self.mass_op, dtype=complex)
        d = rho.shape[0]
        if rho.shape != (d, d) or mass.shape != (S, d, d):
            raise GridMismatch(f"expected rho (d, d) and mass_op ({S}, d, d), got {rho.shape}, {mass.shape}")
        if not (np.all(np.isfinite(phi)) and np.all(np.isfinite(pi)) and np.all(np.isfinite(rho))):
            raise ValueError("fields and state must be finite")
        tol = self.tolerances
        if abs(np.trace(rho) - 1.0) > tol.norm:
            raise ValueError("rho_q must have unit trace")
        herm = 0.5 * (rho + rho.conj().T)
        if np.linalg.eigvalsh(herm)[0] < -tol.psd_floor(rho):
            raise ValueError("rho_q must be positive semi-definite")
        for name, arr in (("phi", phi), ("pi_phi", pi), ("rho_q", rho), ("mass_op", mass)):
            arr = arr.copy()
            arr.setflags(write=False)
            object.__setattr__(self, name, arr)

    @property
    def hilbert_dim(self) -> int:
        return self.rho_q.shape[0]

    def expected_mass(self) -> np.ndarray:
        return np.einsum("sij,ji->s", self.mass_op, self.rho_q).real

    def with_(self, **changes) -> "FieldState":
        return replace(self, **changes)

    @classmethod
    def two_branch(cls, grid: SpatialGrid, m_L, m_R, amplitudes=(1 / math.sqrt(2), 1 / math.sqrt(2)),
                   phi=None, pi_phi=None) -> "FieldState":
        """Qubit in ``a|L> + b|R>`` with ``m = m_L |L><L| + m_R |R><R|``."""
        m_L = _as_field(m_L, grid, "m_L")
        m_R = _as_field(m_R, grid, "m_R")
        a = np.asarray(amplitudes, dtype=complex)
        a = a / np.linalg.norm(a)
        mass = np.zeros((grid.n_sites, 2, 2), complex)
        mass[:, 0, 0] = m_L
        mass[:, 1, 1] = m_R
        zero = np.zeros(grid.n_sites)
        return cls(grid, zero if phi is None else phi, zero if pi_phi is None else pi_phi,
                   np.outer(a, a.conj()), mass)


@dataclass(frozen=True, eq=False)
class NoiseConfig:
    """Time step, kernels and ensemble settings for the unraveling.

    Parameters
    ----------
    quasi_static : bool
        Replace the ``dPhi`` update by ``sourced_potential(<m>, J)`` with
        ``J`` the momentum noise divided by ``dt`` (the large-``c`` regime).
    validate_pair : bool
        Run the kernel trade-off check before stepping.
    """

    seed: int
    dt: float
    D2_kernel: DiscretizedKernel
    D0_kernel: DiscretizedKernel
    ensemble_size: int = 1
    hamiltonian: Optional[np.ndarray] = None
    constants: Constants = CODATA
    quasi_static: bool = False
    validate_pair: bool = True
    tolerances: Tolerances = DEFAULT_TOLERANCES

    def __post_init__(self):
        if not self.dt > 0:
            raise ValueError("dt must be positive")
        if int(self.ensemble_size) < 1:
            raise ValueError("ensemble_size must be at least 1")
        if self.D0_kernel.grid != self.D2_kernel.grid:
            raise GridMismatch("D0 and D2 kernels live on different grids")

    @property
    def grid(self) -> SpatialGrid:
        return self.D0_kernel.grid

    def to_dict(self) -> dict:
        return {"seed": int(self.seed), "dt": self.dt, "ensemble_size": int(self.ensemble_size),
                "quasi_static": self.quasi_static, "grid": self.grid.to_dict(),
                "D0_family": self.D0_kernel.family, "D2_family": self.D2_kernel.family,
                "constants": self.constants.as_dict()}


def trajectory_seed(seed: int, index: int) -> np.random.SeedSequence:
    """Independent seed sequence for trajectory ``index``."""
    return np.random.SeedSequence(int(seed), spawn_key=(int(index),))


def sample_noise(rng: np.random.Generator, grid: SpatialGrid, dt: float, size=None) -> np.ndarray:
    """Site noise with ``E[dxi_a dxi_b] = dt delta_ab / vol``."""
    shape = (grid.n_sites,) if size is None else (size, grid.n_sites)
    return rng.standard_normal(shape) * math.sqrt(dt / grid.cell_volume)


# --- precomputed operators ---------------------------------------------------

@dataclass(frozen=True, eq=False)
class UnravelingOperators:
    """Step-independent matrices of the unraveling.

    ``sigma`` is the symmetric root of ``2 D2 / vol``, ``gain`` is
    ``pinv(2 D2)`` (covariance of the innovation per unit time), ``base`` is
    ``I - i H dt - 1/2 sum_ab Gamma_ab m_b m_a dt`` with
    ``Gamma = vol^2 D0``, and ``kraus`` holds the operators of the residual
    jump term ``sum_ab (Gamma - gain/4)_ab m_a rho m_b``.
    """

    sigma: np.ndarray
    gain: np.ndarray
    base: np.ndarray
    kraus: np.ndarray
    mass_op: np.ndarray
    lap: object
    residual_min_eigenvalue: float


def _sym_sqrt(M: np.ndarray) -> np.ndarray:
    w, V = np.linalg.eigh(0.5 * (M + M.T))
    return (V * np.sqrt(np.clip(w, 0.0, None))) @ V.T


def _nontrivial_sites(mass_op: np.ndarray, tol: float) -> np.ndarray:
    d = mass_op.shape[-1]
    traceless = mass_op - np.einsum("sii->s", mass_op)[:, None, None] * np.eye(d) / d
    return np.max(np.abs(traceless), axis=(1, 2)) > tol


def prepare(state: FieldState, cfg: NoiseConfig) -> UnravelingOperators:
    """Build the step operators and check that the kernel pair is admissible.

    Raises
    ------
    InvalidPair
        If the kernel trade-off fails on the sites where the mass operator
        is not a multiple of the identity, or if the residual jump term is
        not completely positive.
    """
    from .tradeoff import check_kernel_tradeoff, generalized_inverse

    grid = cfg.grid
    if state.grid != grid:
        raise GridMismatch("state and kernels live on different grids")
    vol = grid.cell_volume
    dt = cfg.dt
    d = state.hilbert_dim
    mass = state.mass_op
    scale_m = float(np.max(np.abs(mass), initial=0.0))

    if cfg.validate_pair:
        active = _nontrivial_sites(mass, 1e-12 * max(scale_m, 1e-300))
        verdict = check_kernel_tradeoff(cfg.D0_kernel, np.where(active, -0.5, 0.0), cfg.D2_kernel,
                                        tolerances=cfg.tolerances, n_test_vectors=0,
                                        eigen_method="skip")
        if not verdict.satisfied:
            raise InvalidPair(f"kernel pair violates the trade-off (Schur defect "
                              f"{verdict.schur_defect:.3e}, support {verdict.support_defect:.3e})")

    D0 = cfg.D0_kernel.dense()
    D2 = cfg.D2_kernel.dense()
    gamma = vol**2 * D0
    sigma = _sym_sqrt(2.0 * D2 / vol)
    gain = generalized_inverse(2.0 * D2) if np.any(D2) else np.zeros_like(D2)

    H = np.zeros((d, d), complex) if cfg.hamiltonian is None else np.asarray(cfg.hamiltonian, complex)
    loss = np.einsum("ab,bij,ajk->ik", gamma, mass, mass)
    base = np.eye(d) - 1j * H * dt - 0.5 * loss * dt

    # Choi-type matrix of rho -> sum_ab R_ab m_a rho m_b
    R = gamma - 0.25 * gain
    vecs = mass.reshape(len(mass), -1)
    choi = np.einsum("ab,ai,bj->ij", R, vecs, vecs.conj())
    choi = 0.5 * (choi + choi.conj().T)
    w, V = np.linalg.eigh(choi)
    scale = max(float(np.max(np.abs(gamma), initial=0.0)), 0.25 * float(np.max(np.abs(gain), initial=0.0)),
                np.finfo(float).tiny) * max(scale_m, 1e-300) ** 2
    floor = cfg.tolerances.psd * scale * d
    w_min = float(w[0]) if w.size else 0.0
    if w_min < -floor:
        raise InvalidPair(f"residual jump term is not completely positive (eigenvalue {w_min:.3e})")
    keep = w > floor
    kraus = (np.sqrt(w[keep])[:, None] * V[:, keep].T).reshape(-1, d, d)
    return UnravelingOperators(sigma=sigma, gain=gain, base=base, kraus=kraus, mass_op=mass,
                               lap=laplacian_matrix(grid), residual_min_eigenvalue=w_min)


def _step_batch(phi, pi, rho, dxi, ops: UnravelingOperators, cfg: NoiseConfig):
    """Advance a batch of trajectories; arrays carry a leading batch axis."""
    grid = cfg.grid
    vol, dt = grid.cell_volume, cfg.dt
    G, c = cfg.constants.G, cfg.constants.c
    mass = ops.mass_op

    m_exp = np.einsum("sij,bji->bs", mass, rho).real
    noise = vol * dxi @ ops.sigma.T
    dY = (noise + dt * m_exp) @ ops.gain.T
    M = ops.base[None] + 0.5 * np.einsum("bs,sij->bij", dY, mass)
    new = M @ rho @ M.conj().transpose(0, 2, 1)
    if len(ops.kraus):
        new = new + dt * np.einsum("kij,bjl,kml->bim", ops.kraus, rho, ops.kraus.conj())
    new = new / np.einsum("bii->b", new).real[:, None, None]
    new = 0.5 * (new + new.conj().transpose(0, 2, 1))
    worst = float(np.linalg.eigvalsh(new)[:, 0].min())
    if worst < -cfg.tolerances.psd:
        raise StepTooLarge(f"quantum state eigenvalue {worst:.3e} after normalization")

    lap_phi = (ops.lap @ phi.T).T
    pi_new = pi + (lap_phi / (4.0 * math.pi * G) - m_exp) * dt + noise
    if cfg.quasi_static:
        phi_new = poisson_solve((m_exp - noise / dt).T, grid, G).T
    else:
        phi_new = phi - (4.0 * math.pi * G * c**2 / 3.0) * pi * dt
    return phi_new, pi_new, new


def step_unraveling(state: FieldState, cfg: NoiseConfig, rng: Optional[np.random.Generator] = None,
                    dxi: Optional[np.ndarray] = None,
                    prepared: Optional[UnravelingOperators] = None) -> FieldState:
    """One step of the coupled field and quantum-state SDEs.

    Noise comes from ``dxi`` when given, else from ``rng``, else from a
    generator seeded by ``cfg.seed`` and the step index.
    """
    ops = prepare(state, cfg) if prepared is None else prepared
    if dxi is None:
        if rng is None:
            step = int(round(state.time / cfg.dt))
            rng = np.random.default_rng(np.random.SeedSequence(int(cfg.seed), spawn_key=(0, step)))
        dxi = sample_noise(rng, cfg.grid, cfg.dt)
    phi, pi, rho = _step_batch(state.phi[None], state.pi_phi[None], state.rho_q[None],
                               np.asarray(dxi, float)[None], ops, cfg)
    return state.with_(phi=phi[0], pi_phi=pi[0], rho_q=rho[0], time=state.time + cfg.dt)


# --- constraints -------------------------------------------------------------

@dataclass
class ConstraintResiduals:
    hamiltonian: np.ndarray
    momentum: np.ndarray
    hamiltonian_norm: float
    momentum_norm: float


def _gradient(field: np.ndarray, grid: SpatialGrid) -> np.ndarray:
    f = field.reshape(grid.shape)
    out = np.zeros(grid.shape + (3,))
    for axis in range(3):
        if grid.shape[axis] > 1:
            out[..., axis] = np.gradient(f, grid.spacing[axis], axis=axis)
    return out.reshape(-1, 3)


def constraint_residuals(state: FieldState, constants: Constants = CODATA,
                         layers: int = 1) -> ConstraintResiduals:
    """Hamiltonian and momentum constraint residuals per site.

    Hamiltonian: ``-(2 pi G / 3) pi + lap Phi / (4 pi G) - <m>``.
    Momentum: ``-(3 c / (4 pi G)) grad pi``.  Norms are RMS values over
    interior sites.
    """
    G, c = constants.G, constants.c
    grid = state.grid
    lap_phi = laplacian_matrix(grid) @ state.phi
    ham = -(2.0 * math.pi * G / 3.0) * state.pi_phi + lap_phi / (4.0 * math.pi * G) - state.expected_mass()
    mom = -(3.0 * c / (4.0 * math.pi * G)) * _gradient(state.pi_phi, grid)
    mask = interior_mask(grid, layers)
    return ConstraintResiduals(ham, mom, float(np.sqrt(np.mean(ham[mask] ** 2))),
                               float(np.sqrt(np.mean(np.sum(mom[mask] ** 2, axis=1)))))


def _residual_norms_batch(phi, pi, m_exp, grid, lap, mask, constants) -> np.ndarray:
    G, c = constants.G, constants.c
    ham = -(2.0 * math.pi * G / 3.0) * pi + (lap @ phi.T).T / (4.0 * math.pi * G) - m_exp
    out = np.empty((len(phi), 2))
    out[:, 0] = np.sqrt(np.mean(ham[:, mask] ** 2, axis=1))
    for b in range(len(phi)):
        mom = -(3.0 * c / (4.0 * math.pi * G)) * _gradient(pi[b], grid)
        out[b, 1] = np.sqrt(np.mean(np.sum(mom[mask] ** 2, axis=1)))
    return out


# --- trajectories and ensembles ----------------------------------------------

@dataclass
class Snapshot:
    time: float
    phi: np.ndarray
    pi_phi: np.ndarray
    rho_q: np.ndarray
    hamiltonian_residual: float
    momentum_residual: float

    @property
    def coherence(self) -> float:
        return float(abs(self.rho_q[0, 1])) if self.rho_q.shape[0] > 1 else 0.0


@dataclass
class Trajectory:
    times: list
    snapshots: list

    def __post_init__(self):
        if any(b <= a for a, b in zip(self.times, self.times[1:])):
            raise ValueError("trajectory times must be strictly increasing")


def _snapshot(state: FieldState, constants: Constants) -> Snapshot:
    res = constraint_residuals(state, constants)
    return Snapshot(state.time, state.phi.copy(), state.pi_phi.copy(), state.rho_q.copy(),
                    res.hamiltonian_norm, res.momentum_norm)


def _n_steps(t_final: float, dt: float) -> int:
    n = int(round(t_final / dt))
    if n < 1 or abs(n * dt - t_final) > 1e-9 * max(t_final, dt):
        raise ValueError("t_final must be a positive multiple of dt")
    return n


def simulate_trajectory(initial: FieldState, cfg: NoiseConfig, t_final: float, index: int = 0,
                        record_every: int = 1) -> Trajectory:
    """Single trajectory using the same noise stream as ensemble member ``index``."""
    ops = prepare(initial, cfg)
    rng = np.random.default_rng(trajectory_seed(cfg.seed, index))
    n = _n_steps(t_final, cfg.dt)
    state = initial
    snaps = [_snapshot(state, cfg.constants)]
    for k in range(1, n + 1):
        state = step_unraveling(state, cfg, dxi=sample_noise(rng, cfg.grid, cfg.dt), prepared=ops)
        if k % record_every == 0 or k == n:
            snaps.append(_snapshot(state, cfg.constants))
    return Trajectory([s.time for s in snaps], snaps)


@dataclass
class EnsembleSummary:
    """Means and variances over trajectories at each recorded time."""

    times: np.ndarray
    n_trajectories: int
    phi_mean: np.ndarray
    phi_var: np.ndarray
    pi_mean: np.ndarray
    pi_var: np.ndarray
    rho_mean: np.ndarray
    rho_var: np.ndarray
    coherence_mean: np.ndarray
    coherence_var: np.ndarray
    residual_mean: np.ndarray
    seeds: list = field(default_factory=list)

    def stderr(self, var: np.ndarray) -> np.ndarray:
        return np.sqrt(var / self.n_trajectories)

    def ensemble_coherence(self, k: int) -> float:
        """``|E[rho_01]|``, the coherence of the averaged quantum marginal."""
        return float(abs(self.rho_mean[k, 0, 1])) if self.rho_mean.shape[1] > 1 else 0.0

    def csv_text(self) -> str:
        buf = io.StringIO()
        writer = csv.writer(buf, lineterminator="\r\n")
        writer.writerow(["time", "phi_mean", "phi_var", "pi_mean", "pi_var", "coherence_mean",
                         "coherence_var", "ensemble_coherence", "hamiltonian_residual",
                         "momentum_residual"])
        for k, t in enumerate(self.times):
            writer.writerow([repr(float(t)), repr(float(self.phi_mean[k].mean())),
                             repr(float(self.phi_var[k].mean())), repr(float(self.pi_mean[k].mean())),
                             repr(float(self.pi_var[k].mean())), repr(float(self.coherence_mean[k])),
                             repr(float(self.coherence_var[k])), repr(self.ensemble_coherence(k)),
                             repr(float(self.residual_mean[k, 0])),
                             repr(float(self.residual_mean[k, 1]))])
        return buf.getvalue()


def _run_chunk(initial: FieldState, cfg: NoiseConfig, ops: UnravelingOperators, indices: range,
               n_steps: int, record: np.ndarray) -> dict:
    grid = cfg.grid
    B = len(indices)
    rngs = [np.random.default_rng(trajectory_seed(cfg.seed, i)) for i in indices]
    phi = np.repeat(initial.phi[None], B, axis=0)
    pi = np.repeat(initial.pi_phi[None], B, axis=0)
    rho = np.repeat(initial.rho_q[None], B, axis=0)
    mask = interior_mask(grid)
    T, S, d = len(record), grid.n_sites, initial.hilbert_dim
    acc = {k: np.zeros(s) for k, s in (("phi", (T, S)), ("phi2", (T, S)), ("pi", (T, S)), ("pi2", (T, S)),
                                       ("coh", T), ("coh2", T), ("res", (T, 2)))}
    acc["rho"] = np.zeros((T, d, d), complex)
    acc["rho2"] = np.zeros((T, d, d))

    def accumulate(slot):
        m_exp = np.einsum("sij,bji->bs", ops.mass_op, rho).real
        coh = np.abs(rho[:, 0, 1]) if d > 1 else np.zeros(B)
        acc["phi"][slot] += phi.sum(0)
        acc["phi2"][slot] += (phi**2).sum(0)
        acc["pi"][slot] += pi.sum(0)
        acc["pi2"][slot] += (pi**2).sum(0)
        acc["coh"][slot] += coh.sum()
        acc["coh2"][slot] += (coh**2).sum()
        acc["rho"][slot] += rho.sum(0)
        acc["rho2"][slot] += (np.abs(rho) ** 2).sum(0)
        acc["res"][slot] += _residual_norms_batch(phi, pi, m_exp, grid, ops.lap, mask, cfg.constants).sum(0)

    slot = 0
    if record[0] == 0:
        accumulate(0)
        slot = 1
    for k in range(1, n_steps + 1):
        dxi = np.stack([sample_noise(r, grid, cfg.dt) for r in rngs])
        phi, pi, rho = _step_batch(phi, pi, rho, dxi, ops, cfg)
        if slot < T and record[slot] == k:
            accumulate(slot)
            slot += 1
    return acc


def run_ensemble(initial: FieldState, cfg: NoiseConfig, t_final: float, record_every: int = 1,
                 workers: Optional[int] = None) -> EnsembleSummary:
    """Run ``cfg.ensemble_size`` trajectories and summarize them.

    Trajectory ``i`` draws its noise from ``SeedSequence(cfg.seed,
    spawn_key=(i,))``.  Trajectories are processed in fixed chunks whose
    partial sums are merged in index order, so results do not depend on
    ``workers``.
    """
    ops = prepare(initial, cfg)
    n_steps = _n_steps(t_final, cfg.dt)
    record = np.unique(np.r_[np.arange(0, n_steps + 1, record_every), n_steps])
    N = int(cfg.ensemble_size)
    chunks = [range(s, min(s + CHUNK_SIZE, N)) for s in range(0, N, CHUNK_SIZE)]
    workers = max(1, int(workers or 1))
    if workers == 1 or len(chunks) == 1:
        parts = [_run_chunk(initial, cfg, ops, ch, n_steps, record) for ch in chunks]
    else:
        with ThreadPoolExecutor(max_workers=workers) as pool:
            parts = list(pool.map(lambda ch: _run_chunk(initial, cfg, ops, ch, n_steps, record), chunks))
    total = {k: sum(p[k] for p in parts) for k in parts[0]}

    def mean_var(s, s2):
        mean = s / N
        var = np.clip(s2 / N - np.abs(mean) ** 2, 0.0, None) * (N / (N - 1) if N > 1 else 0.0)
        return mean, var

    phi_mean, phi_var = mean_var(total["phi"], total["phi2"])
    pi_mean, pi_var = mean_var(total["pi"], total["pi2"])
    rho_mean, rho_var = mean_var(total["rho"], total["rho2"])
    coh_mean, coh_var = mean_var(total["coh"], total["coh2"])
    seeds = [list(trajectory_seed(cfg.seed, i).spawn_key) for i in range(min(N, 8))]
    return EnsembleSummary(times=record * cfg.dt, n_trajectories=N, phi_mean=phi_mean, phi_var=phi_var,
                           pi_mean=pi_mean, pi_var=pi_var, rho_mean=rho_mean, rho_var=rho_var,
                           coherence_mean=coh_mean, coherence_var=coh_var,
                           residual_mean=total["res"] / N, seeds=seeds)


def master_equation_marginal(initial: FieldState, cfg: NoiseConfig, times: Sequence[float]) -> np.ndarray:
    """Deterministic quantum marginal under ``-i[H, rho]`` plus the D0 Lindbladian.

    Evaluated with the matrix exponential of the Lindbladian superoperator.
    """
    from scipy.linalg import expm

    vol = cfg.grid.cell_volume
    gamma = vol**2 * cfg.D0_kernel.dense()
    mass = initial.mass_op
    d = initial.hilbert_dim
    eye = np.eye(d)
    H = np.zeros((d, d), complex) if cfg.hamiltonian is None else np.asarray(cfg.hamiltonian, complex)
    sup = -1j * (np.kron(H, eye) - np.kron(eye, H.T))
    S = len(mass)
    for a in range(S):
        for b in range(S):
            g = gamma[a, b]
            if g == 0:
                continue
            mm = mass[b] @ mass[a]
            sup = sup + g * (np.kron(mass[a], mass[b].T) - 0.5 * np.kron(mm, eye) - 0.5 * np.kron(eye, mm.T))
    rho0 = initial.rho_q.ravel()
    return np.stack([(expm(t * sup) @ rho0).reshape(d, d) for t in times])


# --- output ------------------------------------------------------------------

def config_hash(config: dict) -> str:
    """SHA-256 of the canonical JSON form of ``config``."""
    text = json.dumps(config, sort_keys=True, separators=(",", ":"), default=str)
    return hashlib.sha256(text.encode("utf-8")).hexdigest()


def run_manifest(config: dict, cfg: NoiseConfig, summary: EnsembleSummary) -> dict:
    return {
        "format": "cqgrav-run-manifest",
        "version": 1,
        "config": config,
        "config_sha256": config_hash(config),
        "noise": cfg.to_dict(),
        "constants": cfg.constants.as_dict(),
        "trajectory_seed_rule": "SeedSequence(seed, spawn_key=(index,))",
        "n_trajectories": summary.n_trajectories,
        "n_records": int(len(summary.times)),
    }
