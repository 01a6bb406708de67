"""Optimization on a quantized lattice with a coarse-to-fine resolution schedule."""

__version__ = "0.1.0"

from .core import OptimizerConfig, RunRecord, run
from .errors import (
    ConfigError,
    DimensionError,
    InsufficientDataError,
    NonFiniteError,
    QLearnError,
    ScheduleOverflowError,
    ScheduleViolationError,
)
from .objectives import make_objective
from .quantizer import LatticeVector, quantize_integer_grid, quantize_scalar, quantize_vector
from .schedule import ScheduleConfig

__all__ = [
    "__version__",
    "OptimizerConfig",
    "RunRecord",
    "run",
    "ScheduleConfig",
    "LatticeVector",
    "quantize_scalar",
    "quantize_vector",
    "quantize_integer_grid",
    "make_objective",
    "QLearnError",
    "NonFiniteError",
    "InsufficientDataError",
    "ScheduleOverflowError",
    "ScheduleViolationError",
    "ConfigError",
    "DimensionError",
]
