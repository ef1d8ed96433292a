"""
Exception hierarchy shared by every planner module.
"""

from typing import Optional


class PlannerError(Exception):
    """Base class for all errors raised by offroad_planner."""


class DomainError(PlannerError, ValueError):
    """A value is outside the domain an operation accepts."""


class IntegrationError(PlannerError, ArithmeticError):
    """Numerical integration produced a non-finite value."""

    def __init__(self, message: str, stage: int):
        super().__init__(f"{message} (RK4 stage {stage})")
        self.stage = stage


class EstimationError(PlannerError):
    """Moving horizon estimation failed; callers keep their previous estimate."""


class OptimizerError(DomainError):
    """Optimizer precondition violated."""


class InferenceError(PlannerError, ArithmeticError):
    """Non-finite activation during a model forward pass."""

    def __init__(self, layer: str, member: Optional[int] = None):
        where = f"layer '{layer}'" if member is None else f"member {member}, layer '{layer}'"
        super().__init__(f"Non-finite activation in {where}")
        self.layer = layer
        self.member = member


class GraphError(PlannerError):
    """Misuse of the gradient tape (detached node, foreign node)."""


class TrainingError(PlannerError):
    """Training diverged."""

    def __init__(self, batch_index: int, epoch: int):
        super().__init__(f"Non-finite loss at epoch {epoch}, batch {batch_index}")
        self.batch_index = batch_index
        self.epoch = epoch


class ObservationError(PlannerError):
    """The vehicle left the terrain grid."""


class GenerationError(PlannerError):
    """World or dataset generation could not satisfy its request."""


class GeometryError(DomainError):
    """Degenerate geometry, e.g. a bearing query with position equal to goal."""


class ConfigError(PlannerError):
    """Malformed configuration; key_path names the offending entry."""

    def __init__(self, message: str, key_path: str = ""):
        prefix = f"{key_path}: " if key_path else ""
        super().__init__(f"{prefix}{message}")
        self.key_path = key_path
