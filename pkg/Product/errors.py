"""Exception hierarchy shared by the laboratory modules."""

from typing import Any, Dict, Optional


class ICFError(Exception):
    """Base class for every error raised by the laboratory"""


class DimensionError(ICFError, ValueError):
    """Tensor shapes do not agree for an operation"""


class DomainError(ICFError, ValueError):
    """Input outside the mathematical domain of an operation"""


class ConfigurationError(ICFError, ValueError):
    """Invalid or inconsistent configuration"""


class InvalidActionError(ICFError, ValueError):
    """Action index or name not part of the environment's action set"""


class UnknownPresetError(ICFError, KeyError):
    """Unknown environment preset or experiment template"""

    def __str__(self) -> str:
        return str(self.args[0]) if self.args else ""


class StateSpaceTooLargeError(ICFError):
    """Exhaustive enumeration requested over too many states"""


class DegenerateClusterError(ICFError, ValueError):
    """Clustering input has too few groups to compare"""


class PlanningError(ICFError, ValueError):
    """Planner input cannot be satisfied (e.g. goal on a blocked cell)"""


class CheckpointError(ICFError):
    """Base class for checkpoint codec failures"""


class CorruptCheckpointError(CheckpointError):
    """Checkpoint bytes are truncated or malformed"""


class CheckpointVersionError(CheckpointError):
    """Checkpoint written by an unsupported format version"""


class NumericalAbort(ICFError, FloatingPointError):
    """A loss became NaN/Inf; carries the offending step record"""

    def __init__(self, message: str, record: Optional[Dict[str, Any]] = None):
        super().__init__(message)
        self.record = record or {}
