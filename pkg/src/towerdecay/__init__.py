"""Decay of correlations for Young towers with non-Hoelder Jacobians."""
from .tails import TailModel, parse_tail
from .tower import TowerSpec, validate_tower, spectral_decomposition, load_spec
from .transfer import JacobianModel, build_operator, invariant_density
from .rates import compute_rates

__all__ = [
    "TailModel", "parse_tail", "TowerSpec", "validate_tower", "spectral_decomposition",
    "load_spec", "JacobianModel", "build_operator", "invariant_density", "compute_rates",
]
__version__ = "0.1.0"
