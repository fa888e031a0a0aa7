"""
Error taxonomy shared by every pipeline stage
"""
from enum import Enum
from typing import Optional


class RoboStreamError(Exception):
    """Base class for pipeline errors"""


class DimensionMismatch(RoboStreamError):
    """Raster inputs disagree on shape"""


class EmptyRegion(RoboStreamError):
    """A mask or point cloud holds no usable samples"""


class StaleStep(RoboStreamError):
    """Incoming tokens do not belong to the next graph step"""


class UnknownObject(RoboStreamError):
    """An object id is not known to the graph or world"""

    def __init__(self, object_id: str):
        super().__init__(f"Unknown object: {object_id}")
        self.object_id = object_id


class AmbiguousAssociation(RoboStreamError):
    """Two tokens tie exactly for one node; resolved by lowest id and recorded"""


class UnresolvedTarget(RoboStreamError):
    """A directive target cannot be turned into a metric pose"""


class UnsatisfiableGoal(RoboStreamError):
    """The goal's support relations cannot be ordered"""


class ReplanBudgetExhausted(RoboStreamError):
    """Every directive proposed within the replan budget failed verification"""

    def __init__(self, message: str, attempts: int = 0, graph: Optional[object] = None):
        super().__init__(message)
        self.attempts = attempts
        # Graph carrying the precondition_violation events appended while replanning
        self.graph = graph


class NoCandidateLeft(RoboStreamError):
    """The backend has no directive left that was not rejected earlier in the step"""


class PlannerError(RoboStreamError):
    """Base class for remote planner failures"""


class TransportError(PlannerError):
    """The planner endpoint could not be reached or answered with an error status"""


class PlannerTimeout(PlannerError):
    """The planner endpoint did not answer in time"""


class MalformedKind(str, Enum):
    """Documented classes of malformed planner replies"""
    NO_JSON = "no_json"
    INVALID_JSON = "invalid_json"
    MULTIPLE_OBJECTS = "multiple_objects"
    UNKNOWN_VERB = "unknown_verb"
    SCHEMA_VIOLATION = "schema_violation"


class MalformedDirective(PlannerError):
    """The planner reply does not hold exactly one valid directive"""

    def __init__(self, kind: MalformedKind, message: str):
        super().__init__(f"[{kind.value}] {message}")
        self.kind = kind


class ReplayDivergence(RoboStreamError):
    """Replay produced a different graph than the recorded one"""

    def __init__(self, step: int, message: str):
        super().__init__(f"Replay diverged at step {step}: {message}")
        self.step = step


class ConfigError(RoboStreamError):
    """Invalid run configuration"""


class TaskFormatError(ConfigError):
    """A task file does not follow the task/1 format"""

    def __init__(self, message: str, path: Optional[str] = None):
        super().__init__(f"{path}: {message}" if path else message)
        self.path = path
