"""Numerical toolkit for one-dimensional quadratic BSDEs with unbounded terminal data."""

__version__ = "0.1.0"

from .errors import (ConfigError, DomainError, IntegrabilityError, PreconditionError, QbsdeError,
                     RangeError, StabilityError)
from .function_model import DeterministicProcessSpec, FunctionSpec, evaluate, from_dict
from .scenario import GeneratorSpec, TerminalSpec
from .transforms import build_u, build_v, build_w

__all__ = [
    "ConfigError", "DomainError", "IntegrabilityError", "PreconditionError", "QbsdeError",
    "RangeError", "StabilityError", "DeterministicProcessSpec", "FunctionSpec", "evaluate",
    "from_dict", "GeneratorSpec", "TerminalSpec", "build_u", "build_v", "build_w",
]
