"""Moment data for CQ master equations and explicit time stepping.

The master equation is truncated at second order in the Kramers-Moyal
expansion::

    d rho/dt = -i[H, rho] + D0^{ab} (L_a rho L_b^+ - 1/2 {L_b^+ L_a, rho})
               - sum_i  d_i      (D1^{mn}_i  L_m rho L_n^+)
               + sum_ij d_i d_j  (D2^{mn}_ij L_m rho L_n^+)

where ``L_m`` runs over ``{I, L_1..L_p}`` so that the ``mn = 00`` entries
are the purely classical drift and diffusion.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Callable, Optional, Union

import numpy as np
from scipy.linalg import expm

from .core import (
    DEFAULT_TOLERANCES,
    CQState,
    LindbladBasis,
    PhaseSpaceGrid,
    Tolerances,
    sandwich_stack,
)
from .errors import DimensionMismatch, InvalidCoupling, StepTooLarge


def _min_eig_hermitian(matrix: np.ndarray) -> float:
    if matrix.size == 0:
        return 0.0
    return float(np.linalg.eigvalsh(0.5 * (matrix + matrix.conj().T))[0])


@dataclass(frozen=True, eq=False)
class MomentSet:
    """Couplings of one cell.

    Attributes
    ----------
    D0 : (p, p) complex
        Lindbladian couplings ``D0^{ab}``.
    D1 : (n, p+1, p+1) complex
        Drift couplings ``D1^{mn}_i``; ``D1[i, 0, 0]`` is the classical drift.
    D2 : (n, n, p+1, p+1) complex
        Diffusion couplings ``D2^{mn}_{ij}``.
    H : (d, d) complex or None
        Hamiltonian; ``None`` means zero.
    """

    D0: np.ndarray
    D1: np.ndarray
    D2: np.ndarray
    H: Optional[np.ndarray] = None
    tolerances: Tolerances = DEFAULT_TOLERANCES

    def __post_init__(self):
        D0 = np.atleast_2d(np.asarray(self.D0, dtype=complex))
        p = D0.shape[0]
        if D0.shape != (p, p):
            raise DimensionMismatch(f"D0 must be square, got {D0.shape}")
        D1 = np.asarray(self.D1, dtype=complex)
        if D1.ndim != 3 or D1.shape[1:] != (p + 1, p + 1):
            raise DimensionMismatch(f"D1 must have shape (n, {p + 1}, {p + 1}), got {D1.shape}")
        n = D1.shape[0]
        D2 = np.asarray(self.D2, dtype=complex)
        if D2.shape != (n, n, p + 1, p + 1):
            raise DimensionMismatch(f"D2 must have shape {(n, n, p + 1, p + 1)}, got {D2.shape}")
        if not (np.all(np.isfinite(D0)) and np.all(np.isfinite(D1)) and np.all(np.isfinite(D2))):
            raise InvalidCoupling("couplings must be finite")

        tol = self.tolerances
        if np.max(np.abs(D0 - D0.conj().T), initial=0.0) > tol.herm * max(1.0, np.abs(D0).max(initial=0)):
            raise InvalidCoupling("D0 must be Hermitian")
        if _min_eig_hermitian(D0) < -tol.psd_floor(D0):
            raise InvalidCoupling("D0 must be positive semi-definite")
        herm1 = np.abs(D1 - D1.conj().transpose(0, 2, 1)).max(initial=0.0)
        if herm1 > tol.herm * max(1.0, np.abs(D1).max(initial=0)):
            raise InvalidCoupling("each D1_i must be Hermitian in its operator indices")
        d2m = _d2_matrix(D2)
        if np.abs(d2m - d2m.conj().T).max(initial=0.0) > tol.herm * max(1.0, np.abs(d2m).max(initial=0)):
            raise InvalidCoupling("D2 must be Hermitian as a (p+1)n square matrix")
        if _min_eig_hermitian(d2m) < -tol.psd_floor(d2m):
            raise InvalidCoupling("D2 must be positive semi-definite")

        object.__setattr__(self, "D0", D0)
        object.__setattr__(self, "D1", D1)
        object.__setattr__(self, "D2", D2)
        if self.H is not None:
            object.__setattr__(self, "H", np.asarray(self.H, dtype=complex))

    @property
    def p(self) -> int:
        return self.D0.shape[0]

    @property
    def n(self) -> int:
        return self.D1.shape[0]

    def d2_matrix(self) -> np.ndarray:
        """D2 as a ((p+1)n)^2 matrix with row index ``mu * n + i``."""
        return _d2_matrix(self.D2)

    def d1_backreaction(self) -> np.ndarray:
        """Back-reaction slice ``D1^{mu alpha}_i`` as a ((p+1)n, p) matrix."""
        return _d1_backreaction(self.D1)

    @classmethod
    def zeros(cls, p: int, n: int, H: Optional[np.ndarray] = None) -> "MomentSet":
        return cls(np.zeros((p, p)), np.zeros((n, p + 1, p + 1)),
                   np.zeros((n, n, p + 1, p + 1)), H)


def _d2_matrix(D2: np.ndarray) -> np.ndarray:
    n, q = D2.shape[0], D2.shape[2]
    return D2.transpose(2, 0, 3, 1).reshape(q * n, q * n)


def _d1_backreaction(D1: np.ndarray) -> np.ndarray:
    n, q = D1.shape[0], D1.shape[1]
    return D1[:, :, 1:].transpose(1, 0, 2).reshape(q * n, q - 1)


MomentsLike = Union[MomentSet, Callable[[np.ndarray], MomentSet]]


@dataclass(frozen=True, eq=False)
class GeneratorSpec:
    """Lindblad basis plus (possibly cell-dependent) moments.

    ``moments`` is either a single :class:`MomentSet` or a callable mapping a
    cell-centre coordinate vector to one.  ``backreaction_source`` declares
    whether back-reaction comes only from ``D1^{0 mu}`` entries ("0mu"), only
    from ``D1^{ab}`` entries ("alphabeta"), or both ("mixed").
    """

    basis: LindbladBasis
    moments: MomentsLike
    truncation_order: int = 2
    backreaction_source: Optional[str] = None

    def __post_init__(self):
        if self.truncation_order not in (1, 2):
            raise ValueError("truncation_order must be 1 or 2")
        if self.backreaction_source not in (None, "0mu", "alphabeta", "mixed"):
            raise ValueError("backreaction_source must be '0mu', 'alphabeta' or 'mixed'")

    def at_cells(self, grid: PhaseSpaceGrid) -> dict:
        """Stack per-cell couplings into arrays with a leading cell axis."""
        if isinstance(self.moments, MomentSet):
            sets = [self.moments]
        else:
            sets = [self.moments(z) for z in grid.points()]
        for ms in sets:
            if ms.p != self.basis.p:
                raise DimensionMismatch("moment set and basis disagree on p")
            if ms.n != grid.ndim:
                raise DimensionMismatch("moment set and grid disagree on classical dimension")
        d = self.basis.dim
        stack = {
            "D0": np.stack([m.D0 for m in sets]),
            "D1": np.stack([m.D1 for m in sets]),
            "D2": np.stack([m.D2 for m in sets]),
            "H": np.stack([m.H if m.H is not None else np.zeros((d, d), complex) for m in sets]),
        }
        if len(sets) == 1:
            stack = {k: np.broadcast_to(v, (grid.n_cells,) + v.shape[1:]) for k, v in stack.items()}
        stack["constant"] = len(sets) == 1
        return stack


def hamiltonian_from_couplings(W: np.ndarray, basis: LindbladBasis) -> np.ndarray:
    """``H = (i/2) sum_a (W^{a0} L_a - W^{0a} L_a^+)`` from a full (p+1)^2 coupling matrix."""
    W = np.asarray(W, dtype=complex)
    ops = basis.ops
    return 0.5j * (np.einsum("a,aij->ij", W[1:, 0], ops)
                   - np.einsum("a,aji->ij", W[0, 1:], ops.conj()))


def lindblad_moments(jump_ops: np.ndarray, rates: np.ndarray, basis: LindbladBasis,
                     hamiltonian: Optional[np.ndarray] = None, n: int = 1) -> MomentSet:
    """Moments of ``sum_rs rates[r,s] (J_r rho J_s^+ - 1/2 {J_s^+ J_r, rho})``.

    The jump operators are expanded in the full basis; the identity
    components become a Hamiltonian correction and the traceless part gives
    ``D0``.  The basis must span the jump operators.
    """
    jump_ops = np.asarray(jump_ops, dtype=complex)
    rates = np.asarray(rates, dtype=complex)
    coeffs = np.stack([basis.coefficients(J) for J in jump_ops])
    recon = np.einsum("rm,mij->rij", coeffs, basis.full())
    if np.max(np.abs(recon - jump_ops)) > 1e-10 * max(1.0, np.abs(jump_ops).max()):
        raise DimensionMismatch("jump operators are not in the span of the basis")
    W = np.einsum("rs,rm,sn->mn", rates, coeffs, coeffs.conj())
    H = hamiltonian_from_couplings(W, basis)
    if hamiltonian is not None:
        H = H + np.asarray(hamiltonian, dtype=complex)
    p = basis.p
    return MomentSet(W[1:, 1:], np.zeros((n, p + 1, p + 1)), np.zeros((n, n, p + 1, p + 1)), H)


# --- finite-difference stencils with zero-flux (reflecting) walls ----------

def _first_derivative(field: np.ndarray, axis: int, h: float) -> np.ndarray:
    n = field.shape[axis]
    out = np.zeros_like(field)
    if n < 2:
        return out
    lo = [slice(None)] * field.ndim
    hi = [slice(None)] * field.ndim
    lo[axis], hi[axis] = slice(0, n - 1), slice(1, n)
    faces = 0.5 * (field[tuple(lo)] + field[tuple(hi)])
    out[tuple(lo)] += faces
    out[tuple(hi)] -= faces
    return out / h


def _second_derivative(field: np.ndarray, axis: int, h: float) -> np.ndarray:
    n = field.shape[axis]
    out = np.zeros_like(field)
    if n < 2:
        return out
    lo = [slice(None)] * field.ndim
    hi = [slice(None)] * field.ndim
    lo[axis], hi[axis] = slice(0, n - 1), slice(1, n)
    flux = (field[tuple(hi)] - field[tuple(lo)]) / h
    out[tuple(lo)] += flux
    out[tuple(hi)] -= flux
    return out / h


def _quantum_rhs(blocks, sandwiches, cells, basis):
    D0, H = cells["D0"], cells["H"]
    ops = basis.ops
    out = -1j * (np.einsum("kij,kjl->kil", H, blocks) - np.einsum("kij,kjl->kil", blocks, H))
    if D0.shape[1]:
        jumps = np.einsum("kab,kabij->kij", D0, sandwiches[:, 1:, 1:], optimize=True)
        # sum_ab D0^{ab} L_b^+ L_a
        loss = np.einsum("kab,bji,ajl->kil", D0, ops.conj(), ops, optimize=True)
        out = out + jumps - 0.5 * (np.einsum("kij,kjl->kil", loss, blocks)
                                   + np.einsum("kij,kjl->kil", blocks, loss))
    return out


def _classical_rhs(sandwiches, cells, grid, order):
    shape = grid.shape
    widths = grid.widths
    n = grid.ndim
    d = sandwiches.shape[-1]
    flux = np.einsum("kimn,kmnab->kiab", cells["D1"], sandwiches, optimize=True)
    out = np.zeros((grid.n_cells, d, d), dtype=complex)
    for i in range(n):
        f = flux[:, i].reshape(shape + (d, d))
        out -= _first_derivative(f, i, widths[i]).reshape(-1, d, d)
    if order >= 2:
        diff = np.einsum("kijmn,kmnab->kijab", cells["D2"], sandwiches, optimize=True)
        for i in range(n):
            for j in range(n):
                g = diff[:, i, j].reshape(shape + (d, d))
                if i == j:
                    term = _second_derivative(g, i, widths[i])
                else:
                    term = _first_derivative(_first_derivative(g, j, widths[j]), i, widths[i])
                out += term.reshape(-1, d, d)
    return out


def master_rhs(state: CQState, gen: GeneratorSpec, part: str = "all") -> np.ndarray:
    """Time derivative of the blocks; ``part`` is "all", "quantum" or "classical"."""
    if gen.basis.dim != state.hilbert_dim:
        raise DimensionMismatch("generator and state Hilbert dimensions differ")
    cells = gen.at_cells(state.grid)
    sandwiches = sandwich_stack(gen.basis.full(), state.blocks)
    out = np.zeros_like(state.blocks)
    if part in ("all", "quantum"):
        out = out + _quantum_rhs(state.blocks, sandwiches, cells, gen.basis)
    if part in ("all", "classical"):
        out = out + _classical_rhs(sandwiches, cells, state.grid, gen.truncation_order)
    return out


def lindblad_superoperator(H: np.ndarray, D0: np.ndarray, basis: LindbladBasis) -> np.ndarray:
    """Row-major vectorized Lindbladian acting on ``rho.ravel()``."""
    d = basis.dim
    eye = np.eye(d)
    ops = basis.ops
    sup = -1j * (np.kron(H, eye) - np.kron(eye, H.T))
    for a in range(basis.p):
        for b in range(basis.p):
            if D0[a, b] == 0:
                continue
            La, Lb = ops[a], ops[b]
            LbLa = Lb.conj().T @ La
            sup = sup + D0[a, b] * (np.kron(La, Lb.conj())
                                    - 0.5 * np.kron(LbLa, eye) - 0.5 * np.kron(eye, LbLa.T))
    return sup


def _guard(blocks: np.ndarray, tolerances: Tolerances) -> None:
    herm = 0.5 * (blocks + blocks.conj().transpose(0, 2, 1))
    floor = tolerances.psd_floor(blocks)
    worst = float(np.linalg.eigvalsh(herm)[:, 0].min())
    if worst < -floor:
        raise StepTooLarge(f"explicit step produced eigenvalue {worst:.3e} below -{floor:.1e}")


def step_master(state: CQState, gen: GeneratorSpec, dt: float,
                tolerances: Tolerances = DEFAULT_TOLERANCES, split: bool = False) -> CQState:
    """Advance ``state`` by one explicit step of length ``dt``.

    Parameters
    ----------
    split : bool
        Use Strang splitting: half Euler steps of the classical and
        back-reaction terms around an exact per-cell exponential of the
        Lindbladian.

    Raises
    ------
    StepTooLarge
        If any block acquires an eigenvalue below ``-tau_psd``.
    """
    if dt <= 0:
        raise ValueError("dt must be positive")
    if not split:
        new = state.blocks + dt * master_rhs(state, gen)
    else:
        half = state.blocks + 0.5 * dt * master_rhs(state, gen, "classical")
        cells = gen.at_cells(state.grid)
        d = gen.basis.dim
        if cells["constant"]:
            prop = expm(dt * lindblad_superoperator(cells["H"][0], cells["D0"][0], gen.basis))
            mid = np.einsum("xy,ky->kx", prop, half.reshape(len(half), -1)).reshape(half.shape)
        else:
            mid = np.empty_like(half)
            for k in range(len(half)):
                prop = expm(dt * lindblad_superoperator(cells["H"][k], cells["D0"][k], gen.basis))
                mid[k] = (prop @ half[k].ravel()).reshape(d, d)
        mid_state = state.with_blocks(mid)
        new = mid + 0.5 * dt * master_rhs(mid_state, gen, "classical")
    new = 0.5 * (new + new.conj().transpose(0, 2, 1))
    _guard(new, tolerances)
    return state.with_blocks(new)


def evolve(state: CQState, gen: GeneratorSpec, dt: float, steps: int, **kwargs) -> list[CQState]:
    """Return ``[state, step(state), ...]`` with ``steps + 1`` entries."""
    out = [state]
    for _ in range(steps):
        out.append(step_master(out[-1], gen, dt, **kwargs))
    return out


# --- moment observables ------------------------------------------------------

def _traced_sandwiches(state: CQState, gen: GeneratorSpec) -> np.ndarray:
    """``Tr(L_mu rho_k L_nu^+)`` as a (K, p+1, p+1) array."""
    full = gen.basis.full()
    # Tr(L_mu rho L_nu^+) = sum_ab (L_nu^+ L_mu)_{ba} rho_{ab}
    prod = np.einsum("nca,mcb->mnab", full.conj(), full)
    return np.einsum("mnab,kba->kmn", prod, state.blocks)


def drift_expectation(state: CQState, gen: GeneratorSpec) -> np.ndarray:
    """Rate of change of the mean classical coordinates."""
    if gen.basis.dim != state.hilbert_dim:
        raise DimensionMismatch("generator and state Hilbert dimensions differ")
    cells = gen.at_cells(state.grid)
    tr = _traced_sandwiches(state, gen)
    return state.grid.cell_volume * np.einsum("kimn,kmn->i", cells["D1"], tr).real


def variance_rate(state: CQState, gen: GeneratorSpec, i1, i2) -> float:
    """Rate of change of the covariance of coordinates ``i1`` and ``i2``."""
    if gen.basis.dim != state.hilbert_dim:
        raise DimensionMismatch("generator and state Hilbert dimensions differ")
    grid = state.grid
    a, b = grid.axis_index(i1), grid.axis_index(i2)
    cells = gen.at_cells(grid)
    tr = _traced_sandwiches(state, gen)
    vol = grid.cell_volume
    p_k = np.einsum("kii->k", state.blocks).real
    drift = np.einsum("kimn,kmn->ki", cells["D1"], tr).real
    za, zb = grid.coordinates(a), grid.coordinates(b)
    mean_a, mean_b = vol * np.sum(za * p_k), vol * np.sum(zb * p_k)
    rate = 0.0
    if gen.truncation_order >= 2:
        diff = np.einsum("kmn,kmn->k", cells["D2"][:, a, b] + cells["D2"][:, b, a], tr).real
        rate += vol * diff.sum()
    rate += vol * np.sum(zb * drift[:, a]) - mean_b * vol * drift[:, a].sum()
    rate += vol * np.sum(za * drift[:, b]) - mean_a * vol * drift[:, b].sum()
    return float(rate)


def oscillator_decoherence_rate(n: int, m: int, D_up: float, D_down: float) -> float:
    """Approximate initial decay rate of the ``|n><m|`` coherence under pumping and damping."""
    if n < 0 or m < 0:
        raise ValueError("occupation numbers must be non-negative")
    if D_up < 0 or D_down < 0:
        raise InvalidCoupling("couplings must be non-negative")
    return (D_up + D_down) * (n + m) / 2.0


def thermalization_temperature(omega: float, D_up: float, D_down: float) -> float:
    """Temperature (in units of ``omega``) reached under pumping ``D_up`` and damping ``D_down``."""
    if D_up <= 0 or D_down <= D_up:
        raise InvalidCoupling("need 0 < D_up < D_down for a finite positive temperature")
    return omega / math.log(D_down / D_up)
