"""Spatial two-point kernels on 3D grids.

Kernels are sampled at cell centres.  The distribution ``delta(x, y)``
becomes ``1/cell_volume`` on the diagonal, so an integral operator acts as
``(K f)(x_a) = sum_b vol * K[a, b] * f[b]``.

Translation-invariant kernels are stored by their values on the
``(2n-1)^3`` displacement lattice and applied with FFT convolution, which
keeps 32^3 and 48^3 grids cheap.  Stencil kernels are stored sparse.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Optional, Sequence

import numpy as np
import scipy.sparse as sp
from scipy.signal import fftconvolve
from scipy.special import eval_hermite

from .constants import CODATA
from .errors import ResolutionTooCoarse, TruncationOverflow, UnsupportedFamily

FAMILIES = (
    "Dirac",
    "Gaussian",
    "DiosiPenrose",
    "LaplaceBeltramiWeakField",
    "LaplacianOfDelta",
    "DiscreteJumpLocal",
)

# Dense materialization is refused above this many sites.
DENSE_SITE_LIMIT = 12_000


@dataclass(frozen=True)
class SpatialGrid:
    """Cell-centred rectangular grid.

    Parameters
    ----------
    shape : sites per axis
    extent : side lengths in metres
    center : position of the grid centre

    Axes with a single site are allowed; they carry no derivative stencil.
    """

    shape: tuple[int, int, int]
    extent: tuple[float, float, float]
    center: tuple[float, float, float] = (0.0, 0.0, 0.0)

    def __post_init__(self):
        shape = tuple(int(s) for s in self.shape)
        extent = tuple(float(e) for e in self.extent)
        center = tuple(float(c) for c in self.center)
        if len(shape) != 3 or len(extent) != 3 or len(center) != 3:
            raise ValueError("grids are three-dimensional")
        if any(s < 1 for s in shape) or int(np.prod(shape)) < 2:
            raise ValueError("need at least one site per axis and two sites in total")
        if any(not e > 0 for e in extent):
            raise ValueError("extents must be positive")
        object.__setattr__(self, "shape", shape)
        object.__setattr__(self, "extent", extent)
        object.__setattr__(self, "center", center)

    @classmethod
    def cube(cls, n: int, extent: float, center: Sequence[float] = (0.0, 0.0, 0.0)) -> "SpatialGrid":
        return cls((n, n, n), (extent, extent, extent), tuple(center))

    @classmethod
    def line(cls, n: int, spacing: float) -> "SpatialGrid":
        """``n`` sites along x with cubic cells of side ``spacing``."""
        return cls((n, 1, 1), (n * spacing, spacing, spacing))

    @property
    def spacing(self) -> np.ndarray:
        return np.array(self.extent) / np.array(self.shape)

    @property
    def cell_volume(self) -> float:
        return float(np.prod(self.spacing))

    @property
    def n_sites(self) -> int:
        return int(np.prod(self.shape))

    @property
    def cell_radius(self) -> float:
        """Radius of the sphere with the cell's volume."""
        return (3.0 * self.cell_volume / (4.0 * math.pi)) ** (1.0 / 3.0)

    def axis_coordinates(self, axis: int) -> np.ndarray:
        n, h = self.shape[axis], self.spacing[axis]
        return self.center[axis] + (np.arange(n) - (n - 1) / 2.0) * h

    def points(self) -> np.ndarray:
        mesh = np.meshgrid(*[self.axis_coordinates(i) for i in range(3)], indexing="ij")
        return np.stack([m.ravel() for m in mesh], axis=1)

    def offsets(self) -> np.ndarray:
        """Displacement vectors on the (2n-1)^3 lattice, shape (2nx-1, 2ny-1, 2nz-1, 3)."""
        axes = [np.arange(-(n - 1), n) * h for n, h in zip(self.shape, self.spacing)]
        return np.stack(np.meshgrid(*axes, indexing="ij"), axis=-1)

    def to_dict(self) -> dict:
        return {"shape": list(self.shape), "extent": list(self.extent), "center": list(self.center)}

    @classmethod
    def from_dict(cls, data: dict) -> "SpatialGrid":
        return cls(tuple(data["shape"]), tuple(data["extent"]), tuple(data.get("center", (0, 0, 0))))


def laplacian_matrix(grid: SpatialGrid) -> sp.csr_matrix:
    """7-point Laplacian with reflecting (zero normal derivative) walls."""
    mats = []
    for axis in range(3):
        n, h = grid.shape[axis], grid.spacing[axis]
        if n == 1:
            mats.append(sp.csr_matrix((1, 1)))
            continue
        main = -2.0 * np.ones(n)
        main[0] = main[-1] = -1.0
        off = np.ones(n - 1)
        mats.append(sp.diags([off, main, off], [-1, 0, 1]) / h**2)
    eye = [sp.identity(n, format="csr") for n in grid.shape]
    lap = (sp.kron(sp.kron(mats[0], eye[1]), eye[2])
           + sp.kron(sp.kron(eye[0], mats[1]), eye[2])
           + sp.kron(sp.kron(eye[0], eye[1]), mats[2]))
    return sp.csr_matrix(lap)


@dataclass(frozen=True, eq=False)
class DiscretizedKernel:
    """Symmetric site-by-site kernel ``K(x_a, x_b)``.

    Exactly one of ``offsets`` (translation invariant), ``sparse`` or
    ``matrix`` holds the data.
    """

    grid: SpatialGrid
    family: str
    units: str = ""
    role: Optional[str] = None
    offsets: Optional[np.ndarray] = None
    sparse: Optional[sp.spmatrix] = None
    matrix: Optional[np.ndarray] = None
    meta: dict = field(default_factory=dict)

    def __post_init__(self):
        if sum(x is not None for x in (self.offsets, self.sparse, self.matrix)) != 1:
            raise ValueError("exactly one storage form must be supplied")

    @property
    def values(self) -> np.ndarray:
        return self.dense()

    def matvec(self, f: np.ndarray) -> np.ndarray:
        """``sum_b K[a, b] f[b]`` (no volume factor)."""
        f = np.asarray(f, dtype=float)
        if self.matrix is not None:
            return self.matrix @ f
        if self.sparse is not None:
            return self.sparse @ f
        shape = self.grid.shape
        if f.ndim == 1:
            return fftconvolve(self.offsets, f.reshape(shape), mode="valid").ravel()
        cols = [fftconvolve(self.offsets, f[:, j].reshape(shape), mode="valid").ravel()
                for j in range(f.shape[1])]
        return np.stack(cols, axis=1)

    def integrate(self, f: np.ndarray) -> np.ndarray:
        """``int dy K(x, y) f(y)`` by grid quadrature."""
        return self.grid.cell_volume * self.matvec(f)

    def quadratic(self, f: np.ndarray, g: Optional[np.ndarray] = None) -> float:
        """``int int f(x) K(x, y) g(y)`` by grid quadrature."""
        g = f if g is None else g
        return float(self.grid.cell_volume**2 * np.dot(np.asarray(f, float), self.matvec(g)))

    def diagonal(self) -> np.ndarray:
        if self.matrix is not None:
            return np.diag(self.matrix).copy()
        if self.sparse is not None:
            return self.sparse.diagonal()
        center = tuple(n - 1 for n in self.grid.shape)
        return np.full(self.grid.n_sites, self.offsets[center])

    def dense(self) -> np.ndarray:
        if self.matrix is not None:
            return self.matrix
        S = self.grid.n_sites
        if S > DENSE_SITE_LIMIT:
            raise MemoryError(f"refusing to densify a kernel with {S} sites")
        if self.sparse is not None:
            return self.sparse.toarray()
        idx = np.stack(np.unravel_index(np.arange(S), self.grid.shape), axis=1).astype(np.int32)
        shift = np.array(self.grid.shape, dtype=np.int32) - 1
        out = np.empty((S, S))
        for start in range(0, S, 512):
            rows = idx[start:start + 512]
            d = rows[:, None, :] - idx[None, :, :] + shift
            out[start:start + 512] = self.offsets[d[..., 0], d[..., 1], d[..., 2]]
        return out

    def scaled(self, factor: float, units: Optional[str] = None) -> "DiscretizedKernel":
        kwargs = dict(grid=self.grid, family=self.family, units=self.units if units is None else units,
                      role=self.role, meta=dict(self.meta))
        if self.offsets is not None:
            return DiscretizedKernel(offsets=self.offsets * factor, **kwargs)
        if self.sparse is not None:
            return DiscretizedKernel(sparse=self.sparse * factor, **kwargs)
        return DiscretizedKernel(matrix=self.matrix * factor, **kwargs)


@dataclass(frozen=True, eq=False)
class KernelSpec:
    """Kernel family plus its parameters.

    ``coupling`` multiplies the family's shape function: ``D0`` for the
    Diosi-Penrose kernel, the Gaussian prefactor ``lambda r0^3 / m0^2``,
    ``D`` for the Laplace-Beltrami kernel, the ``l_P^3 D2 / m_P``
    combination for the discrete local kernel, and so on.
    """

    family: str
    coupling: float = 1.0
    units: str = ""
    r0: Optional[float] = None
    background_potential: Optional[np.ndarray] = None
    mass_density: Optional[np.ndarray] = None
    laplacian_on_potential: bool = False
    role: Optional[str] = None

    def __post_init__(self):
        if self.family not in FAMILIES:
            raise UnsupportedFamily(f"unknown kernel family {self.family!r}")
        if self.coupling < 0:
            raise ValueError("coupling must be non-negative")
        if self.family == "Gaussian" and not (self.r0 is not None and self.r0 > 0):
            raise ValueError("the Gaussian family needs r0 > 0")


def gaussian_coupling(decoherence_scale: float, r0: float, m0: float) -> float:
    """Prefactor ``lambda r0^3 / m0^2`` of the Gaussian Lindbladian kernel."""
    return decoherence_scale * r0**3 / m0**2


def normalized_gaussian(r2: np.ndarray, r0: float) -> np.ndarray:
    """``(pi r0^2)^{-3/2} exp(-|x - y|^2 / r0^2)`` as a function of squared distance."""
    return (math.pi * r0**2) ** -1.5 * np.exp(-r2 / r0**2)


def _check_gaussian_resolution(grid: SpatialGrid, r0: float) -> None:
    for n, h in zip(grid.shape, grid.spacing):
        if n > 1 and r0 / h < 3.0 - 1e-12:
            raise ResolutionTooCoarse(f"r0 = {r0:g} spans only {r0 / h:.2f} cells (need >= 3)")


def _dp_offsets(grid: SpatialGrid) -> np.ndarray:
    disp = grid.offsets()
    r = np.linalg.norm(disp, axis=-1)
    center = tuple(n - 1 for n in grid.shape)
    r[center] = 1.0
    out = 1.0 / r
    out[center] = 1.5 / grid.cell_radius
    return out


def _sqrt_scaling(grid: SpatialGrid, potential: Optional[np.ndarray]) -> np.ndarray:
    if potential is None:
        return np.ones(grid.n_sites)
    s = 1.0 + np.broadcast_to(np.asarray(potential, float).ravel(), (grid.n_sites,))
    if np.any(s <= 0):
        raise ValueError("weak-field factor 1 + Phi must stay positive")
    return np.sqrt(s)


def discretize(spec: KernelSpec, grid: SpatialGrid) -> DiscretizedKernel:
    """Sample a kernel family on ``grid``."""
    vol = grid.cell_volume
    fam = spec.family
    common = dict(grid=grid, family=fam, units=spec.units, role=spec.role)
    if fam == "Dirac":
        return DiscretizedKernel(sparse=sp.identity(grid.n_sites, format="csr") * (spec.coupling / vol),
                                 **common)
    if fam == "Gaussian":
        _check_gaussian_resolution(grid, spec.r0)
        r2 = np.sum(grid.offsets() ** 2, axis=-1)
        return DiscretizedKernel(offsets=spec.coupling * normalized_gaussian(r2, spec.r0),
                                 meta={"r0": spec.r0}, **common)
    if fam == "DiosiPenrose":
        return DiscretizedKernel(offsets=spec.coupling * _dp_offsets(grid), **common)
    if fam == "LaplacianOfDelta":
        return DiscretizedKernel(sparse=-spec.coupling * laplacian_matrix(grid) / vol, **common)
    if fam == "LaplaceBeltramiWeakField":
        lap = laplacian_matrix(grid)
        if spec.laplacian_on_potential:
            s = sp.diags(_sqrt_scaling(grid, spec.background_potential) ** 2)
            op = 0.5 * (lap @ s + s @ lap)
        else:
            root = sp.diags(_sqrt_scaling(grid, spec.background_potential))
            op = root @ lap @ root
        return DiscretizedKernel(sparse=sp.csr_matrix(-spec.coupling / 8.0 * op / vol),
                                 meta={"laplacian_on_potential": spec.laplacian_on_potential}, **common)
    if fam == "DiscreteJumpLocal":
        if spec.mass_density is None:
            raise ValueError("the discrete local kernel needs a mass density field")
        m = np.broadcast_to(np.asarray(spec.mass_density, float).ravel(), (grid.n_sites,))
        return DiscretizedKernel(sparse=sp.diags(spec.coupling * m / vol).tocsr(), **common)
    raise UnsupportedFamily(fam)


# --- analytic inverses -------------------------------------------------------

def hermite_coefficient(n: int) -> float:
    """Weight of ``H_2n(dx / r0) g(dx)`` in the per-axis inverse series."""
    return (-1) ** n / (2.0**n * math.factorial(n))


def deconvolution_coefficient(n: int, r0: float) -> float:
    """Weight of the ``2n``-th derivative of the normalized Gaussian in its inverse series."""
    return (-1) ** n * r0 ** (2 * n) / (2.0**n * math.factorial(n))


MAX_HERMITE_ORDER = 150


def invert_gaussian(r0: float, order_N: int, grid: SpatialGrid, coupling: float = 1.0) -> DiscretizedKernel:
    """Truncated inverse of ``coupling * g_N`` as ``F_N(x - y) g_N(x - y) / coupling``.

    ``F_N`` is a product over axes of ``sum_{n<=N} c_n H_2n(dx_i / r0)``.
    In Fourier space the round trip with ``g_N`` is the truncated
    exponential series ``exp(-y) sum_{n<=N} y^n / n!`` with
    ``y = r0^2 k^2 / 2``, so the error falls monotonically with ``N``.
    """
    if order_N < 0:
        raise ValueError("order_N must be non-negative")
    if order_N > MAX_HERMITE_ORDER:
        raise TruncationOverflow(f"order {order_N} exceeds the supported maximum {MAX_HERMITE_ORDER}")
    _check_gaussian_resolution(grid, r0)
    disp = grid.offsets()
    series = np.ones(disp.shape[:-1])
    with np.errstate(over="raise", invalid="raise"):
        try:
            for axis in range(3):
                u = disp[..., axis] / r0
                factor = sum(hermite_coefficient(n) * eval_hermite(2 * n, u) for n in range(order_N + 1))
                series = series * factor
            values = series * normalized_gaussian(np.sum(disp**2, axis=-1), r0) / coupling
        except FloatingPointError as exc:
            raise TruncationOverflow("Hermite series overflowed; lower order_N or the grid extent") from exc
    if not np.all(np.isfinite(values)):
        raise TruncationOverflow("Hermite series produced non-finite values")
    return DiscretizedKernel(grid=grid, family="GaussianInverse", offsets=values,
                             units="inverse of the Gaussian kernel", meta={"r0": r0, "order": order_N})


def invert_dp(grid: SpatialGrid, coupling: float = 1.0) -> DiscretizedKernel:
    """Inverse of ``coupling / |x - y|`` as ``-(1/(4 pi coupling)) Laplacian delta``.

    The sign follows from ``-Laplacian (1 / 4 pi r) = delta``.  Units are
    the delta's ``m^-3`` times ``m^-2`` from the Laplacian.
    """
    lap = laplacian_matrix(grid)
    return DiscretizedKernel(grid=grid, family="DiosiPenroseInverse",
                             sparse=sp.csr_matrix(-lap / (4.0 * math.pi * coupling * grid.cell_volume)),
                             units="m^-2 * delta[m^-3]")


def roundtrip_defect(forward: DiscretizedKernel, inverse: DiscretizedKernel, f: np.ndarray,
                     interior: int = 0) -> float:
    """Relative L2 error of ``inverse * (forward * f)`` against ``f``.

    ``interior`` drops that many boundary layers from the comparison.
    """
    f = np.asarray(f, dtype=float)
    back = inverse.integrate(forward.integrate(f))
    shape = forward.grid.shape
    err = (back - f).reshape(shape)
    ref = f.reshape(shape)
    if interior:
        sl = tuple(slice(interior, n - interior) if n > 2 * interior else slice(None) for n in shape)
        err, ref = err[sl], ref[sl]
    return float(np.linalg.norm(err) / np.linalg.norm(ref))


# --- saturating pairs --------------------------------------------------------

SATURATING_FAMILIES = ("Gaussian", "DiosiPenrose", "LaplaceBeltramiWeakField")


def _zero_kernel(grid: SpatialGrid, role: str) -> DiscretizedKernel:
    return DiscretizedKernel(grid=grid, family="Zero", role=role,
                             sparse=sp.csr_matrix((grid.n_sites, grid.n_sites)))


def saturating_pair(spec: KernelSpec, grid: SpatialGrid, drift: float = -0.5,
                    method: str = "auto", order_N: int = 8,
                    rank_tol: float = 1e-12) -> tuple[DiscretizedKernel, DiscretizedKernel]:
    """Decoherence and diffusion kernels that saturate the trade-off for local drift ``drift``.

    Saturation means ``2 D2 = drift^2 D0^{-1}`` as integral operators, i.e.
    ``D2 = drift^2 pinv(D0) / (2 vol^2)`` on the grid.

    Parameters
    ----------
    spec : KernelSpec
        Gaussian or DiosiPenrose (``spec`` describes D0), or
        LaplaceBeltramiWeakField (``spec`` describes D2 and the D0 partner
        is built).
    method : {"auto", "grid", "continuum"}
        ``grid`` inverts the sampled kernel exactly.  ``continuum`` uses the
        closed forms: the Hermite series for Gaussians and the Laplacian of
        delta for the Diosi-Penrose and Laplace-Beltrami kernels.  ``auto``
        is ``continuum`` for Gaussians and ``grid`` otherwise.
    """
    from .tradeoff import generalized_inverse

    fam = spec.family
    if fam not in SATURATING_FAMILIES:
        raise UnsupportedFamily(f"no saturating partner is constructed for {fam!r}")
    if method == "auto":
        method = "continuum" if fam == "Gaussian" else "grid"
    if method not in ("grid", "continuum"):
        raise ValueError(f"unknown method {method!r}")
    vol = grid.cell_volume
    factor = 0.5 * drift**2

    if fam == "LaplaceBeltramiWeakField":
        dp_coupling = 1.0 / (4.0 * math.pi * spec.coupling) if spec.coupling > 0 else 0.0
        if method == "continuum":
            D0 = discretize(KernelSpec("DiosiPenrose", dp_coupling, role="D0"), grid)
            D2 = discretize(KernelSpec(fam, spec.coupling * (8.0 * factor), role="D2",
                                       background_potential=spec.background_potential,
                                       laplacian_on_potential=spec.laplacian_on_potential), grid)
            return D0, D2
        root = _sqrt_scaling(grid, spec.background_potential)
        K0 = discretize(KernelSpec("DiosiPenrose", dp_coupling), grid).dense()
        D0 = DiscretizedKernel(grid=grid, family="LaplaceBeltramiPartner", role="D0",
                               matrix=K0 / np.outer(root, root))
        if drift == 0:
            return D0, _zero_kernel(grid, "D2")
        D2m = factor * np.outer(root, root) * generalized_inverse(K0, rank_tol) / vol**2
        return D0, DiscretizedKernel(grid=grid, family=fam, role="D2", matrix=0.5 * (D2m + D2m.T))

    D0 = discretize(KernelSpec(fam, spec.coupling, spec.units, r0=spec.r0, role="D0"), grid)
    if drift == 0:
        return D0, _zero_kernel(grid, "D2")
    if method == "grid":
        inv = generalized_inverse(D0.dense(), rank_tol)
        D2m = factor * inv / vol**2
        return D0, DiscretizedKernel(grid=grid, family=fam + "Partner", role="D2",
                                     matrix=0.5 * (D2m + D2m.T))
    if fam == "Gaussian":
        inv = invert_gaussian(spec.r0, order_N, grid, spec.coupling)
    else:
        inv = invert_dp(grid, spec.coupling)
    # the analytic inverses already include the 1/vol of delta; D2 = factor * D0^{-1}
    D2 = inv.scaled(factor)
    return D0, DiscretizedKernel(grid=grid, family=fam + "Partner", role="D2",
                                 offsets=D2.offsets, sparse=D2.sparse, matrix=D2.matrix,
                                 meta=dict(D2.meta))


# --- text dump ---------------------------------------------------------------

def dump_kernel(kernel: DiscretizedKernel) -> str:
    """Header lines, then the upper triangle of the matrix in row-major order."""
    K = kernel.dense()
    iu = np.triu_indices(K.shape[0])
    g = kernel.grid
    lines = [
        "# cqgrav kernel v1",
        f"family: {kernel.family}",
        f"role: {kernel.role or ''}",
        f"units: {kernel.units}",
        "grid: " + " ".join(map(repr, list(g.shape) + list(g.extent) + list(g.center))),
        f"packed: {len(iu[0])}",
    ]
    lines += [repr(float(v)) for v in K[iu]]
    return "\n".join(lines) + "\n"


def load_kernel(text: str) -> DiscretizedKernel:
    lines = text.splitlines()
    if not lines or not lines[0].startswith("# cqgrav kernel"):
        raise ValueError("not a cqgrav kernel dump")
    header = {}
    i = 1
    while i < len(lines) and ":" in lines[i]:
        key, _, val = lines[i].partition(":")
        header[key.strip()] = val.strip()
        i += 1
        if key.strip() == "packed":
            break
    nums = [float(x) for x in header["grid"].split()]
    grid = SpatialGrid(tuple(int(x) for x in nums[:3]), tuple(nums[3:6]), tuple(nums[6:9]))
    count = int(header["packed"])
    vals = np.array([float(x) for x in lines[i:i + count]])
    S = grid.n_sites
    K = np.zeros((S, S))
    iu = np.triu_indices(S)
    if len(vals) != len(iu[0]):
        raise ValueError("packed value count does not match the grid")
    K[iu] = vals
    K = K + np.triu(K, 1).T
    return DiscretizedKernel(grid=grid, family=header["family"], units=header.get("units", ""),
                             role=header.get("role") or None, matrix=K)


def planck_units(constants=CODATA) -> tuple[float, float]:
    return constants.planck_length, constants.planck_mass
