"""Hybrid classical-quantum dynamics and classical-gravity bound calculators."""

from .constants import CODATA, Constants
from .core import (
    Axis,
    CQState,
    HybridOperator,
    LindbladBasis,
    PhaseSpaceGrid,
    Tolerances,
    apply_cp_map,
    classical_marginal,
    expectation,
    quantum_marginal,
    validate_state,
)
from .generator import GeneratorSpec, MomentSet, evolve, step_master
from .kernels import DiscretizedKernel, KernelSpec, SpatialGrid, discretize, saturating_pair
from .newtonian import FieldState, NoiseConfig, run_ensemble
from .observables import SqueezeScenario, decoherence_rate, energy_production, force_variance, squeeze
from .tradeoff import (
    TradeoffVerdict,
    check_coupling_tradeoff,
    check_kernel_tradeoff,
    observational_tradeoff,
    saturating_D2,
)

__version__ = "0.1.0"

__all__ = [
    "CODATA", "Constants",
    "Axis", "CQState", "HybridOperator", "LindbladBasis", "PhaseSpaceGrid", "Tolerances",
    "apply_cp_map", "classical_marginal", "expectation", "quantum_marginal", "validate_state",
    "GeneratorSpec", "MomentSet", "evolve", "step_master",
    "DiscretizedKernel", "KernelSpec", "SpatialGrid", "discretize", "saturating_pair",
    "FieldState", "NoiseConfig", "run_ensemble",
    "SqueezeScenario", "decoherence_rate", "energy_production", "force_variance", "squeeze",
    "TradeoffVerdict", "check_coupling_tradeoff", "check_kernel_tradeoff", "observational_tradeoff",
    "saturating_D2",
]
