"""Classical-quantum states on finite phase-space grids.

A CQ state assigns to every grid cell ``z_k`` a Hermitian positive
semi-definite block ``rho(z_k)``.  Blocks are stored as densities, so the
cell volume is the quadrature weight and the state is normalized when
``sum_k vol * Tr rho(z_k) == 1``.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

from .errors import DimensionMismatch, NotCompletelyPositive, NotTracePreserving


@dataclass(frozen=True)
class Tolerances:
    """Numerical tolerances.

    ``psd`` is relative: a matrix passes the PSD test when its smallest
    eigenvalue is at least ``-psd * max|M|``.  The others are absolute.
    """

    psd: float = 1e-10
    herm: float = 1e-12
    norm: float = 1e-9
    orth: float = 1e-10

    def psd_floor(self, matrix: np.ndarray) -> float:
        scale = float(np.max(np.abs(matrix))) if np.size(matrix) else 0.0
        return self.psd * max(scale, np.finfo(float).tiny)


DEFAULT_TOLERANCES = Tolerances()


def _frozen(array, dtype=None) -> np.ndarray:
    out = np.array(array, dtype=dtype, copy=True)
    out.setflags(write=False)
    return out


@dataclass(frozen=True)
class Axis:
    """One phase-space axis split into ``cells`` equal cells on ``[lo, hi]``."""

    name: str
    lo: float
    hi: float
    cells: int

    def __post_init__(self):
        if self.cells < 1:
            raise ValueError(f"axis {self.name!r} needs at least one cell")
        if not self.hi > self.lo:
            raise ValueError(f"axis {self.name!r} needs hi > lo")

    @property
    def width(self) -> float:
        return (self.hi - self.lo) / self.cells

    def centers(self) -> np.ndarray:
        return self.lo + (np.arange(self.cells) + 0.5) * self.width


@dataclass(frozen=True)
class PhaseSpaceGrid:
    axes: tuple[Axis, ...]

    def __post_init__(self):
        object.__setattr__(self, "axes", tuple(self.axes))
        if not self.axes:
            raise ValueError("a phase-space grid needs at least one axis")

    @classmethod
    def regular(cls, names: Sequence[str], bounds: Sequence[tuple[float, float]],
                cells: Sequence[int]) -> "PhaseSpaceGrid":
        return cls(tuple(Axis(n, float(lo), float(hi), int(c))
                         for n, (lo, hi), c in zip(names, bounds, cells)))

    @classmethod
    def single_cell(cls, volume: float = 1.0) -> "PhaseSpaceGrid":
        return cls((Axis("z", 0.0, float(volume), 1),))

    @property
    def shape(self) -> tuple[int, ...]:
        return tuple(a.cells for a in self.axes)

    @property
    def ndim(self) -> int:
        return len(self.axes)

    @property
    def n_cells(self) -> int:
        return int(np.prod(self.shape))

    @property
    def widths(self) -> np.ndarray:
        return np.array([a.width for a in self.axes])

    @property
    def cell_volume(self) -> float:
        return float(np.prod(self.widths))

    def axis_index(self, axis: int | str) -> int:
        if isinstance(axis, str):
            for i, a in enumerate(self.axes):
                if a.name == axis:
                    return i
            raise KeyError(axis)
        return int(axis)

    def coordinates(self, axis: int | str) -> np.ndarray:
        """Cell-centre coordinate along ``axis`` for every cell (row-major order)."""
        i = self.axis_index(axis)
        mesh = np.meshgrid(*[a.centers() for a in self.axes], indexing="ij")
        return mesh[i].ravel()

    def points(self) -> np.ndarray:
        """(n_cells, ndim) array of cell centres."""
        return np.stack([self.coordinates(i) for i in range(self.ndim)], axis=1)

    def to_dict(self) -> dict:
        return {"axes": [{"name": a.name, "min": a.lo, "max": a.hi, "cells": a.cells}
                         for a in self.axes]}

    @classmethod
    def from_dict(cls, data: dict) -> "PhaseSpaceGrid":
        return cls(tuple(Axis(a["name"], float(a["min"]), float(a["max"]), int(a["cells"]))
                         for a in data["axes"]))


def _check_square_stack(blocks: np.ndarray, n_cells: int, what: str) -> None:
    if blocks.ndim != 3 or blocks.shape[1] != blocks.shape[2]:
        raise DimensionMismatch(f"{what} must have shape (cells, d, d), got {blocks.shape}")
    if blocks.shape[0] != n_cells:
        raise DimensionMismatch(
            f"{what} has {blocks.shape[0]} cells but the grid has {n_cells}")


@dataclass(frozen=True, eq=False)
class CQState:
    """Per-cell density blocks on a phase-space grid (immutable)."""

    grid: PhaseSpaceGrid
    blocks: np.ndarray

    def __post_init__(self):
        blocks = np.asarray(self.blocks, dtype=complex)
        _check_square_stack(blocks, self.grid.n_cells, "state blocks")
        object.__setattr__(self, "blocks", _frozen(blocks))

    @property
    def hilbert_dim(self) -> int:
        return self.blocks.shape[1]

    @classmethod
    def product(cls, grid: PhaseSpaceGrid, density: Sequence[float],
                rho_q: np.ndarray) -> "CQState":
        """State ``p(z) rho_q``; ``density`` is the per-cell probability density."""
        density = np.asarray(density, dtype=float).reshape(grid.n_cells)
        rho_q = np.asarray(rho_q, dtype=complex)
        return cls(grid, density[:, None, None] * rho_q[None, :, :])

    def with_blocks(self, blocks: np.ndarray) -> "CQState":
        return CQState(self.grid, blocks)

    def to_dict(self) -> dict:
        flat = np.stack([self.blocks.real, self.blocks.imag], axis=-1).ravel()
        return {
            "format": "cqgrav-state",
            "version": 1,
            "grid": self.grid.to_dict(),
            "hilbert_dim": self.hilbert_dim,
            "blocks": flat.tolist(),
        }

    @classmethod
    def from_dict(cls, data: dict) -> "CQState":
        grid = PhaseSpaceGrid.from_dict(data["grid"])
        d = int(data["hilbert_dim"])
        flat = np.asarray(data["blocks"], dtype=float)
        if flat.size != grid.n_cells * d * d * 2:
            raise DimensionMismatch("serialized block array has the wrong length")
        pairs = flat.reshape(grid.n_cells, d, d, 2)
        return cls(grid, pairs[..., 0] + 1j * pairs[..., 1])

    def to_json(self) -> str:
        return json.dumps(self.to_dict())

    @classmethod
    def from_json(cls, text: str) -> "CQState":
        return cls.from_dict(json.loads(text))


@dataclass(frozen=True, eq=False)
class HybridOperator:
    """An operator-valued function of the classical cell, ``O(z_k)``."""

    grid: PhaseSpaceGrid
    blocks: np.ndarray

    def __post_init__(self):
        blocks = np.asarray(self.blocks, dtype=complex)
        _check_square_stack(blocks, self.grid.n_cells, "operator blocks")
        object.__setattr__(self, "blocks", _frozen(blocks))

    @classmethod
    def constant(cls, grid: PhaseSpaceGrid, op: np.ndarray) -> "HybridOperator":
        op = np.asarray(op, dtype=complex)
        return cls(grid, np.broadcast_to(op, (grid.n_cells,) + op.shape))

    @classmethod
    def classical(cls, grid: PhaseSpaceGrid, values: Sequence[float], dim: int) -> "HybridOperator":
        """``f(z) * I`` for a classical function given per cell."""
        values = np.asarray(values, dtype=complex).reshape(grid.n_cells)
        return cls(grid, values[:, None, None] * np.eye(dim)[None])


@dataclass(frozen=True, eq=False)
class LindbladBasis:
    """Traceless, Hilbert-Schmidt orthogonal operators ``L_1..L_p``.

    The full basis used in CQ maps is ``L_mu = {I, L_1, ..., L_p}``.
    """

    ops: np.ndarray
    includes_identity: bool = True
    tolerances: Tolerances = field(default=DEFAULT_TOLERANCES, repr=False)

    def __post_init__(self):
        ops = np.asarray(self.ops, dtype=complex)
        if ops.ndim == 2:
            ops = ops[None]
        if ops.ndim != 3 or ops.shape[1] != ops.shape[2]:
            raise DimensionMismatch(f"basis operators must be square, got {ops.shape}")
        tol = self.tolerances
        traces = np.einsum("aii->a", ops)
        if np.any(np.abs(traces) > tol.herm * max(1.0, float(np.max(np.abs(ops))))):
            raise ValueError("Lindblad operators must be traceless")
        gram = np.einsum("aij,bij->ab", ops.conj(), ops)
        off = gram - np.diag(np.diag(gram))
        if np.any(np.abs(off) > tol.orth * max(1.0, float(np.max(np.abs(np.diag(gram)))))):
            raise ValueError("Lindblad operators must be Hilbert-Schmidt orthogonal")
        object.__setattr__(self, "ops", _frozen(ops))

    @property
    def p(self) -> int:
        return self.ops.shape[0]

    @property
    def dim(self) -> int:
        return self.ops.shape[1]

    def full(self) -> np.ndarray:
        """(p+1, d, d) stack with the identity first."""
        return np.concatenate([np.eye(self.dim, dtype=complex)[None], self.ops], axis=0)

    @property
    def is_complete(self) -> bool:
        return self.p == self.dim**2 - 1

    def coefficients(self, op: np.ndarray) -> np.ndarray:
        """Expansion coefficients ``c_mu`` with ``op = sum_mu c_mu L_mu``.

        Exact only when the basis is complete; otherwise this is the
        Hilbert-Schmidt projection onto the span.
        """
        full = self.full()
        norms = np.einsum("aij,aij->a", full.conj(), full).real
        return np.einsum("aij,ij->a", full.conj(), np.asarray(op, dtype=complex)) / norms

    @classmethod
    def pauli(cls) -> "LindbladBasis":
        sx = np.array([[0, 1], [1, 0]], dtype=complex)
        sy = np.array([[0, -1j], [1j, 0]], dtype=complex)
        sz = np.array([[1, 0], [0, -1]], dtype=complex)
        return cls(np.stack([sx, sy, sz]))

    @classmethod
    def gell_mann(cls, d: int) -> "LindbladBasis":
        """Generalized Gell-Mann matrices: a complete traceless orthogonal basis."""
        mats = []
        for j in range(d):
            for k in range(j + 1, d):
                sym = np.zeros((d, d), dtype=complex)
                sym[j, k] = sym[k, j] = 1
                anti = np.zeros((d, d), dtype=complex)
                anti[j, k], anti[k, j] = -1j, 1j
                mats += [sym, anti]
        for l in range(1, d):
            diag = np.zeros(d)
            diag[:l] = 1
            diag[l] = -l
            mats.append(np.diag(diag * np.sqrt(2.0 / (l * (l + 1)))).astype(complex))
        return cls(np.stack(mats))


@dataclass
class ValidationReport:
    passed: bool
    min_eigenvalues: np.ndarray
    hermiticity_defects: np.ndarray
    normalization_defect: float
    reasons: list[str]


def validate_state(state: CQState, tolerances: Tolerances = DEFAULT_TOLERANCES) -> ValidationReport:
    blocks = state.blocks
    if state.grid.n_cells == 0:
        raise DimensionMismatch("empty grid")
    herm = np.max(np.abs(blocks - blocks.conj().transpose(0, 2, 1)), axis=(1, 2))
    hermitian_part = 0.5 * (blocks + blocks.conj().transpose(0, 2, 1))
    mins = np.linalg.eigvalsh(hermitian_part)[:, 0]
    norm_defect = abs(state.grid.cell_volume * float(np.einsum("kii->", blocks).real) - 1.0)

    reasons = []
    if np.any(herm > tolerances.herm):
        reasons.append(f"hermiticity defect {herm.max():.3e} exceeds {tolerances.herm:.1e}")
    floors = np.array([tolerances.psd_floor(b) for b in blocks])
    if np.any(mins < -floors):
        k = int(np.argmin(mins + floors))
        reasons.append(f"cell {k} has eigenvalue {mins[k]:.3e} below -tau_psd")
    if norm_defect > tolerances.norm:
        reasons.append(f"normalization defect {norm_defect:.3e} exceeds {tolerances.norm:.1e}")
    return ValidationReport(not reasons, mins, herm, norm_defect, reasons)


def classical_marginal(state: CQState) -> np.ndarray:
    """Probability density ``p_k = Tr rho(z_k)`` per cell."""
    return np.einsum("kii->k", state.blocks).real


def quantum_marginal(state: CQState) -> np.ndarray:
    return state.grid.cell_volume * state.blocks.sum(axis=0)


def expectation(state: CQState, obs: HybridOperator) -> complex:
    if obs.grid.shape != state.grid.shape:
        raise DimensionMismatch("observable and state live on different grids")
    if obs.blocks.shape != state.blocks.shape:
        raise DimensionMismatch("observable and state block dimensions differ")
    return complex(state.grid.cell_volume * np.einsum("kij,kji->", obs.blocks, state.blocks))


def sandwich_stack(full_basis: np.ndarray, blocks: np.ndarray) -> np.ndarray:
    """All products ``L_mu rho_k L_nu^dagger`` as a (K, p+1, p+1, d, d) array."""
    left = np.einsum("mab,kbc->kmac", full_basis, blocks, optimize=True)
    return np.einsum("kmac,ndc->kmnad", left, full_basis.conj(), optimize=True)


def apply_cp_map(state: CQState, transition: np.ndarray, basis: LindbladBasis,
                 tolerances: Tolerances = DEFAULT_TOLERANCES) -> CQState:
    """Apply ``rho'(z_k) = sum_j vol Lambda^{mu nu}(k|j) L_mu rho(z_j) L_nu^dagger``.

    Parameters
    ----------
    state : CQState
    transition : ndarray, shape (K, K, p+1, p+1)
        ``transition[k, j]`` is the coupling matrix for the jump ``z_j -> z_k``.
    basis : LindbladBasis
        Supplies ``L_mu = {I, L_alpha}``.

    Raises
    ------
    NotCompletelyPositive
        If any coupling block is not Hermitian PSD.
    NotTracePreserving
        If ``sum_k vol Lambda^{mu nu}(k|j) L_nu^dagger L_mu != I`` for some ``j``.
    """
    lam = np.asarray(transition, dtype=complex)
    n_cells, q = state.grid.n_cells, basis.p + 1
    if lam.shape != (n_cells, n_cells, q, q):
        raise DimensionMismatch(f"transition must have shape {(n_cells, n_cells, q, q)}")
    if basis.dim != state.hilbert_dim:
        raise DimensionMismatch("basis and state Hilbert dimensions differ")

    flat = lam.reshape(-1, q, q)
    herm = np.max(np.abs(flat - flat.conj().transpose(0, 2, 1)))
    scale = max(float(np.max(np.abs(flat))), np.finfo(float).tiny)
    if herm > tolerances.herm * max(1.0, scale):
        raise NotCompletelyPositive("coupling blocks are not Hermitian")
    mins = np.linalg.eigvalsh(0.5 * (flat + flat.conj().transpose(0, 2, 1)))[:, 0]
    if np.any(mins < -tolerances.psd * scale):
        raise NotCompletelyPositive(f"coupling block eigenvalue {mins.min():.3e} is negative")

    vol = state.grid.cell_volume
    full = basis.full()
    products = np.einsum("nba,mbc->mnac", full.conj(), full)  # L_nu^dagger L_mu
    completeness = vol * np.einsum("kjmn,mnac->jac", lam, products)
    defect = np.max(np.abs(completeness - np.eye(basis.dim)[None]))
    if defect > tolerances.norm:
        raise NotTracePreserving(f"normalization defect {defect:.3e}")

    sandwiches = sandwich_stack(full, state.blocks)
    return state.with_blocks(vol * np.einsum("kjmn,jmnab->kab", lam, sandwiches, optimize=True))


def transition_from_kraus(kraus: np.ndarray, basis: LindbladBasis) -> np.ndarray:
    """Coupling matrices ``Lambda^{mu nu}(k|j) = sum_r c_{r mu} conj(c_{r nu})``.

    ``kraus[k, j, r]`` is the r-th Kraus operator (already including any
    ``1/vol`` density factor) for the jump ``z_j -> z_k``.  The basis must be
    complete so that each operator has an exact expansion.
    """
    if not basis.is_complete:
        raise DimensionMismatch("a complete Lindblad basis is required to expand Kraus operators")
    kraus = np.asarray(kraus, dtype=complex)
    full = basis.full()
    norms = np.einsum("aij,aij->a", full.conj(), full).real
    coeffs = np.einsum("mab,kjrab->kjrm", full.conj(), kraus) / norms
    return np.einsum("kjrm,kjrn->kjmn", coeffs, coeffs.conj())
