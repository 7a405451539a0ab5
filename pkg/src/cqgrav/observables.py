"""Decoherence rates, force noise, two-sided bounds and energy production.

Grid quadratures use the kernel conventions of :mod:`cqgrav.kernels`;
closed-form estimates follow the self-dominance approximation in which
each atom is a uniform sphere of radius ``r_N`` and the ``i = j`` terms of
the double sum over atoms dominate.
"""

from __future__ import annotations

import csv
import io
import json
import math
from dataclasses import asdict, dataclass, field
from typing import Optional, Sequence

import numpy as np
from scipy.signal import fftconvolve

from .constants import CODATA, Constants
from .errors import DivergentIntegral, GridMismatch, MissingDecoherenceRate, UnsupportedFamily
from .kernels import DiscretizedKernel, SpatialGrid


# --- mass distributions ------------------------------------------------------

def uniform_sphere_density(grid: SpatialGrid, mass: float, radius: float,
                           center: Sequence[float] = (0.0, 0.0, 0.0), subsamples: int = 4) -> np.ndarray:
    """Cell-averaged density of a uniform sphere.

    Each cell is split into ``subsamples^3`` sub-cells so that boundary
    cells receive their covered fraction of the mass.  The result is
    rescaled so the grid quadrature returns ``mass`` exactly.
    """
    h = grid.spacing
    offs = [((np.arange(subsamples) + 0.5) / subsamples - 0.5) * h[i] for i in range(3)]
    sub = np.stack(np.meshgrid(*offs, indexing="ij"), axis=-1).reshape(-1, 3)
    pts = grid.points() - np.asarray(center, float)
    frac = np.zeros(grid.n_sites)
    r2 = radius**2
    for block in range(0, len(sub), 16):
        q = pts[:, None, :] + sub[None, block:block + 16, :]
        frac += np.sum(np.sum(q**2, axis=-1) <= r2, axis=1)
    frac /= len(sub)
    total = frac.sum() * grid.cell_volume
    if total == 0:
        raise ValueError("sphere does not cover any grid sample point")
    return frac * mass / total


@dataclass(frozen=True)
class MassDistribution:
    """Point mass, uniform sphere, grid field or composite of atoms.

    Attributes
    ----------
    kind : {"point", "uniform_sphere", "grid_field", "composite"}
    total_mass : kg
    radius : sphere radius (m) for ``uniform_sphere``
    n_atoms, atom_mass, nuclear_radius : composite description
    """

    kind: str
    total_mass: float
    position: tuple = (0.0, 0.0, 0.0)
    radius: Optional[float] = None
    density: Optional[np.ndarray] = None
    grid: Optional[SpatialGrid] = None
    n_atoms: Optional[float] = None
    atom_mass: Optional[float] = None
    nuclear_radius: Optional[float] = None
    composite_rtol: float = 0.01

    def __post_init__(self):
        if self.kind not in ("point", "uniform_sphere", "grid_field", "composite"):
            raise ValueError(f"unknown mass distribution kind {self.kind!r}")
        if not self.total_mass > 0:
            raise ValueError("total mass must be positive")
        if self.kind == "uniform_sphere" and not (self.radius and self.radius > 0):
            raise ValueError("uniform sphere needs a positive radius")
        if self.kind == "grid_field" and (self.density is None or self.grid is None):
            raise ValueError("grid_field needs a density and a grid")
        if self.kind == "composite":
            if not all(v and v > 0 for v in (self.n_atoms, self.atom_mass, self.nuclear_radius)):
                raise ValueError("composite needs positive n_atoms, atom_mass and nuclear_radius")
            implied = self.n_atoms * self.atom_mass
            if abs(implied - self.total_mass) > self.composite_rtol * self.total_mass:
                raise ValueError(f"N * m_N = {implied:g} kg disagrees with total mass {self.total_mass:g} kg")

    @classmethod
    def composite(cls, n_atoms: float, atom_mass: float, nuclear_radius: float) -> "MassDistribution":
        return cls("composite", n_atoms * atom_mass, n_atoms=n_atoms, atom_mass=atom_mass,
                   nuclear_radius=nuclear_radius)

    @property
    def nuclear_density(self) -> float:
        """``m_N / (4 pi r_N^3 / 3)``."""
        return self.atom_mass / (4.0 * math.pi * self.nuclear_radius**3 / 3.0)

    def density_on(self, grid: SpatialGrid, subsamples: int = 4) -> np.ndarray:
        if self.kind == "grid_field":
            if grid != self.grid:
                raise GridMismatch("mass field lives on a different grid")
            return np.asarray(self.density, float).ravel()
        if self.kind == "uniform_sphere":
            return uniform_sphere_density(grid, self.total_mass, self.radius, self.position, subsamples)
        if self.kind == "point":
            idx = int(np.argmin(np.sum((grid.points() - np.asarray(self.position)) ** 2, axis=1)))
            out = np.zeros(grid.n_sites)
            out[idx] = self.total_mass / grid.cell_volume
            return out
        raise ValueError("composite bodies have no grid representation; use composite_force_variance")


def _field(values, grid: SpatialGrid, name: str) -> np.ndarray:
    arr = np.asarray(values, dtype=float).ravel()
    if arr.size != grid.n_sites:
        raise GridMismatch(f"{name} does not match the kernel grid")
    return arr


# --- decoherence rates -------------------------------------------------------

def decoherence_rate(kernel_D0: DiscretizedKernel, m_L, m_R) -> float:
    """Decay rate of the ``|L><R|`` coherence, ``1/2 int int D0 dm dm`` with ``dm = m_L - m_R``.

    This is the rate of the Lindbladian ``int int D0 (m rho m - 1/2 {m m, rho})``
    acting on two mass-density eigenstates.
    """
    grid = kernel_D0.grid
    a, b = _field(m_L, grid, "m_L"), _field(m_R, grid, "m_R")
    if np.any(a < 0) or np.any(b < 0):
        raise ValueError("mass densities must be non-negative")
    return 0.5 * kernel_D0.quadratic(a - b)


def self_energy_rate(kernel_D0: DiscretizedKernel, m) -> float:
    """``int int D0(x, y) m(x) m(y)``; for the DP kernel and a uniform sphere this is ``6 D0 M^2 / 5 R``."""
    return kernel_D0.quadratic(_field(m, kernel_D0.grid, "m"))


def separated_decoherence_rate(kernel_D0: DiscretizedKernel, m_L, m_R) -> float:
    """Branch self-term form ``1/2 (int int D0 m_L m_L + int int D0 m_R m_R)``.

    Equals :func:`decoherence_rate` when the branches do not overlap
    through the kernel.
    """
    return 0.5 * (self_energy_rate(kernel_D0, m_L) + self_energy_rate(kernel_D0, m_R))


def sphere_self_energy_rate(coupling: float, mass: float, radius: float) -> float:
    """Closed form ``6 D0 M^2 / (5 R)`` for the DP kernel and a uniform sphere."""
    return 6.0 * coupling * mass**2 / (5.0 * radius)


# --- force variance ----------------------------------------------------------

@dataclass
class ForceVariance:
    sigma_F2: float
    sigma_a2: float
    total_mass: float
    method: str


def _force_kernel_offsets(grid: SpatialGrid) -> np.ndarray:
    """``r / |r|^3`` on the displacement lattice, zero at the origin."""
    disp = grid.offsets()
    r = np.linalg.norm(disp, axis=-1)
    with np.errstate(divide="ignore", invalid="ignore"):
        out = disp / r[..., None] ** 3
    out[r == 0] = 0.0
    return out


def gravitational_lever(mass_density, grid: SpatialGrid) -> np.ndarray:
    """``g(x') = int dx m(x) (x - x') / |x - x'|^3`` at every site, shape (S, 3)."""
    m = _field(mass_density, grid, "mass density").reshape(grid.shape)
    kern = _force_kernel_offsets(grid)
    # (x - x') with x the source: convolution of m with -r/|r|^3 evaluated at x'
    cols = [-grid.cell_volume * fftconvolve(kern[..., c], m, mode="valid").ravel() for c in range(3)]
    return np.stack(cols, axis=1)


def _cutoff_mask(grid: SpatialGrid, center: np.ndarray, V_b: float) -> np.ndarray:
    radius = (3.0 * V_b / (4.0 * math.pi)) ** (1.0 / 3.0)
    return np.linalg.norm(grid.points() - center, axis=1) <= radius


def force_variance(body, D2_kernel: DiscretizedKernel, T: float, V_b: Optional[float] = None,
                   constants: Constants = CODATA) -> ForceVariance:
    """Variance of the time-averaged total force by grid quadrature.

    ``sigma_F^2 = (2 G^2 / T) sum_ab vol^2 g_a . D2_ab g_b`` with ``g`` from
    :func:`gravitational_lever`.

    Parameters
    ----------
    body : MassDistribution or density array on the kernel grid
    V_b : float, optional
        Volume of the region in which a Dirac-kernel diffusion acts; the
        kernel is restricted to the ball of that volume around the body's
        centre of mass.  Required for the Dirac family.
    """
    if not T > 0:
        raise ValueError("averaging time must be positive")
    grid = D2_kernel.grid
    m = body.density_on(grid) if isinstance(body, MassDistribution) else _field(body, grid, "body")
    M = float(m.sum() * grid.cell_volume)
    g = gravitational_lever(m, grid)
    if D2_kernel.family == "Dirac":
        if V_b is None:
            raise DivergentIntegral("a Dirac diffusion kernel over all space gives a divergent force "
                                    "variance; supply a finite V_b")
        center = (grid.points() * m[:, None]).sum(0) * grid.cell_volume / M
        g = g * _cutoff_mask(grid, center, V_b)[:, None]
    quad = sum(D2_kernel.quadratic(g[:, c]) for c in range(3))
    sigma_F2 = 2.0 * constants.G**2 / T * quad
    return ForceVariance(sigma_F2, sigma_F2 / M**2, M, "grid quadrature")


def monte_carlo_force_variance(body, D2_kernel: DiscretizedKernel, T: float, n_samples: int = 10_000,
                               seed: int = 0, constants: Constants = CODATA) -> ForceVariance:
    """Sample time-averaged noise ``J`` with covariance ``2 D2 / T`` and sum forces directly.

    The force for each sample is the pairwise sum
    ``G sum_{x, x'} vol^2 m(x) (x - x') / |x - x'|^3 J(x')`` evaluated with
    explicit displacement vectors, independently of the convolution used by
    :func:`force_variance`.
    """
    grid = D2_kernel.grid
    m = body.density_on(grid) if isinstance(body, MassDistribution) else _field(body, grid, "body")
    vol = grid.cell_volume
    M = float(m.sum() * vol)
    pts = grid.points()
    src = np.flatnonzero(m)
    cov = 2.0 * D2_kernel.dense() / T
    w, V = np.linalg.eigh(0.5 * (cov + cov.T))
    root = V * np.sqrt(np.clip(w, 0.0, None))
    rng = np.random.default_rng(seed)
    J = rng.standard_normal((n_samples, grid.n_sites)) @ root.T
    force = np.zeros((n_samples, 3))
    for a in src:
        disp = pts[a] - pts
        r = np.linalg.norm(disp, axis=1)
        r[a] = np.inf
        lever = vol**2 * m[a] * disp / r[:, None] ** 3
        force += constants.G * J @ lever
    centred = force - force.mean(axis=0)
    sigma_F2 = float(np.sum(centred**2) / (n_samples - 1))
    return ForceVariance(sigma_F2, sigma_F2 / M**2, M, f"monte carlo ({n_samples} samples)")


SQUEEZE_FAMILIES = ("ContinuousDirac", "DiscreteLocal", "DP-LaplaceBeltrami")
_FAMILY_ALIASES = {"DP": "DP-LaplaceBeltrami", "DiosiPenrose": "DP-LaplaceBeltrami",
                   "Dirac": "ContinuousDirac"}


def _family(name: str) -> str:
    name = _FAMILY_ALIASES.get(name, name)
    if name not in SQUEEZE_FAMILIES:
        raise UnsupportedFamily(f"no bound is defined for family {name!r}")
    return name


def composite_force_variance(n_atoms: float, atom_mass: float, nuclear_radius: float, T: float,
                             family: str, coupling: float, V_b: Optional[float] = None,
                             constants: Constants = CODATA) -> ForceVariance:
    """Self-dominance estimate of the force noise on a composite of ``n_atoms`` nuclei.

    ``coupling`` is ``D2`` (ContinuousDirac, kg^2 s m^-3), ``l_P^3 D2 / m_P``
    (DiscreteLocal, kg s) or ``l_P^2 D2`` (DP-LaplaceBeltrami,
    kg^2 s m^-1).  The nuclear density is taken as ``m_N / r_N^3`` as in the
    order-of-magnitude estimates, which makes these the exact inverses of
    the upper bounds in :func:`squeeze`.
    """
    family = _family(family)
    G = constants.G
    rho = atom_mass / nuclear_radius**3
    N = n_atoms
    if family == "ContinuousDirac":
        if V_b is None:
            raise DivergentIntegral("the Dirac family needs a finite V_b")
        sigma_F2 = coupling * N * G**2 * rho**2 * nuclear_radius**2 * V_b / T
    elif family == "DiscreteLocal":
        sigma_F2 = N * G**2 * rho**2 * nuclear_radius**2 * coupling * atom_mass / T
    else:
        sigma_F2 = coupling * G**2 * atom_mass**2 * N / (T * nuclear_radius**3)
    M = N * atom_mass
    return ForceVariance(sigma_F2, sigma_F2 / M**2, M, "self-dominance estimate")


# --- squeeze -----------------------------------------------------------------

@dataclass(frozen=True)
class SqueezeScenario:
    """Torsion-balance and interferometry inputs (SI units)."""

    sigma_a: float
    T: float
    N: float
    r_N: float
    V_b: float
    M_lambda: float
    V_lambda: float
    R_lambda: float
    lam: float
    family: str = "ContinuousDirac"
    m_N: Optional[float] = None

    def __post_init__(self):
        for name in ("sigma_a", "T", "N", "r_N", "V_b", "M_lambda", "V_lambda", "R_lambda"):
            if not getattr(self, name) > 0:
                raise ValueError(f"{name} must be strictly positive")
        if self.lam is None or not self.lam > 0:
            raise MissingDecoherenceRate("a positive decoherence rate is required")
        if self.m_N is not None and not self.m_N > 0:
            raise ValueError("m_N must be strictly positive")

    def with_family(self, family: str) -> "SqueezeScenario":
        return SqueezeScenario(**{**asdict(self), "family": family})


@dataclass
class BoundReport:
    upper: float
    lower: float
    units: str
    squeezed_out: bool
    family: str
    quantity: str
    provenance: dict = field(default_factory=dict)

    def __post_init__(self):
        if self.squeezed_out != (self.lower > self.upper):
            raise ValueError("squeezed_out must equal lower > upper")

    def to_dict(self) -> dict:
        return asdict(self)

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=2, sort_keys=True)

    def table(self) -> str:
        rows = [("family", self.family), ("quantity", self.quantity),
                ("upper bound", f"{self.upper:.3e} {self.units}"),
                ("lower bound", f"{self.lower:.3e} {self.units}"),
                ("squeezed out", "yes" if self.squeezed_out else "no")]
        rows += [(f"input {k}", f"{v:.3e}" if isinstance(v, float) else str(v))
                 for k, v in self.provenance.items()]
        width = max(len(k) for k, _ in rows)
        return "\n".join(f"{k.ljust(width)}  {v}" for k, v in rows)


def squeeze(scenario: SqueezeScenario, constants: Constants = CODATA) -> BoundReport:
    """Upper bound from acceleration noise and lower bound from coherence times."""
    s = scenario
    family = _family(s.family)
    G2 = constants.G**2
    if family == "ContinuousDirac":
        upper = s.sigma_a**2 * s.N * s.r_N**4 * s.T / (s.V_b * G2)
        lower = s.M_lambda**2 / (s.V_lambda * s.lam)
        units, quantity = "kg^2 s m^-3", "D2"
    elif family == "DiscreteLocal":
        if s.m_N is None:
            raise ValueError("the DiscreteLocal family needs the atom mass m_N")
        upper = s.sigma_a**2 * s.N * s.r_N**4 * s.T / (s.m_N * G2)
        lower = s.M_lambda / s.lam
        units, quantity = "kg s", "l_P^3 D2 / m_P"
    else:
        upper = s.sigma_a**2 * s.N * s.r_N**3 * s.T / G2
        lower = s.M_lambda**2 / (s.R_lambda * s.lam)
        units, quantity = "kg^2 s m^-1", "l_P^2 D2"
    provenance = {k: v for k, v in asdict(s).items() if v is not None}
    provenance["G"] = constants.G
    return BoundReport(upper, lower, units, bool(lower > upper), family, quantity, provenance)


def predicted_acceleration_variance(scenario: SqueezeScenario, coupling: float,
                                    constants: Constants = CODATA) -> float:
    """Acceleration variance the torsion balance would see for ``coupling``."""
    s = scenario
    family = _family(s.family)
    m_N = s.m_N if s.m_N is not None else 1.0
    return composite_force_variance(s.N, m_N, s.r_N, s.T, family, coupling, s.V_b, constants).sigma_a2


def sweep_lower_bound(scenario: SqueezeScenario, lambdas: Sequence[float]) -> str:
    """CSV of the required coupling against decoherence rate."""
    buf = io.StringIO()
    writer = csv.writer(buf, lineterminator="\r\n")
    writer.writerow(["lambda_per_s", "required_coupling", "upper_bound", "squeezed_out"])
    for lam in lambdas:
        rep = squeeze(SqueezeScenario(**{**asdict(scenario), "lam": float(lam)}))
        writer.writerow([repr(float(lam)), repr(rep.lower), repr(rep.upper), str(rep.squeezed_out).lower()])
    return buf.getvalue()


def decimal_exponent(x: float) -> int:
    if not x > 0:
        raise ValueError("only positive values have a decimal exponent")
    return int(math.floor(math.log10(x)))


def orders_apart(a: float, b: float) -> int:
    """Difference of decimal exponents, ``|floor(log10 a) - floor(log10 b)|``."""
    return abs(decimal_exponent(a) - decimal_exponent(b))


def within_orders(value: float, reference: float, orders: int) -> bool:
    return orders_apart(value, reference) <= orders


# --- energy production -------------------------------------------------------

@dataclass
class EnergyReport:
    rate: float
    rate_density: float
    accumulated_density: Optional[float]
    inputs: dict = field(default_factory=dict)

    def to_dict(self) -> dict:
        return asdict(self)


def energy_production(mass_density, lam: float, volume: float, spread_volume: Optional[float] = None,
                      age: Optional[float] = None, constants: Constants = CODATA) -> EnergyReport:
    """Lower bound on stochastic gravitational kinetic-energy production.

    ``dE/dt >= int c^2 G pi <m>^2 / (12 lambda)``.

    Parameters
    ----------
    mass_density : float or array
        Expected mass density (kg/m^3).  A scalar is taken as uniform over
        ``volume``; an array holds per-cell values with ``volume`` the cell
        volume.
    spread_volume : float, optional
        Volume over which the production is spread when quoting a rate
        density; defaults to the integration volume.
    age : float, optional
        Accumulation time (s) for the energy density.
    """
    if lam is None or not lam > 0:
        raise MissingDecoherenceRate("a positive decoherence rate is required")
    if not volume > 0:
        raise ValueError("volume must be positive")
    m = np.asarray(mass_density, dtype=float)
    integral = float(np.sum(m**2) * volume)
    total_volume = volume * max(m.size, 1)
    rate = constants.c**2 * constants.G * math.pi * integral / (12.0 * lam)
    spread = total_volume if spread_volume is None else spread_volume
    density = rate / spread
    accumulated = density * age if age is not None else None
    inputs = {"lambda": lam, "volume": volume, "spread_volume": spread, "age": age,
              "mass_density_max": float(m.max()) if m.size else 0.0}
    return EnergyReport(rate, density, accumulated, inputs)
