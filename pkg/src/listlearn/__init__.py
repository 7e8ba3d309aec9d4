"""Online learning to rank from list-level feedback.

Policy-gradient (Plackett-Luce) and regression-over-position-weights
learners, an epsilon-greedy interaction loop, and nDCG / position-based
click feedback simulators on synthetic data.
"""

from listlearn.errors import (
    ConfigurationError,
    ContractViolation,
    GenerationError,
    ListLearnError,
    ShapeError,
    UpdateRejected,
    ValidationError,
)

__version__ = "0.1.0"

__all__ = [
    "ConfigurationError",
    "ContractViolation",
    "GenerationError",
    "ListLearnError",
    "ShapeError",
    "UpdateRejected",
    "ValidationError",
]
