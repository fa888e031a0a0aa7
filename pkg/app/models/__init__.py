"""Data models and schemas"""
from app.models.geometry import (
    Vec3,
    AxisStats,
    ShapeVector,
    Pose6DoF,
    Mask,
    DepthGrid,
    CameraModel,
    PointCloud,
    TOP_DOWN_QUATERNION,
)
from app.models.tokens import PatchFeatureGrid, SelectedPatch, VisualEvidence, StfToken, TokenSummary
from app.models.graph import (
    Visibility,
    RelationTag,
    SceneNode,
    SceneEdge,
    EventKind,
    CauseKind,
    EventCause,
    CausalEvent,
    MemoryLog,
    Cstg,
)
from app.models.planning import (
    GoalKind,
    GoalSceneEntry,
    GoalSpec,
    Verb,
    ActionDirective,
    Violation,
    VerificationReport,
    Gripper,
    Pose6DoFAction,
    AnnotatedObservation,
    PromptContext,
    StepDecision,
)
from app.models.world import ObjectKind, ActionOutcome, SimObject, WorldState, Observation, TaskSpec
from app.models.records import RunConfig, AblationFlags, EpisodeRecord, StepRecord, SuiteReport

__all__ = [
    "Vec3",
    "AxisStats",
    "ShapeVector",
    "Pose6DoF",
    "Mask",
    "DepthGrid",
    "CameraModel",
    "PointCloud",
    "TOP_DOWN_QUATERNION",
    "PatchFeatureGrid",
    "SelectedPatch",
    "VisualEvidence",
    "StfToken",
    "TokenSummary",
    "Visibility",
    "RelationTag",
    "SceneNode",
    "SceneEdge",
    "EventKind",
    "CauseKind",
    "EventCause",
    "CausalEvent",
    "MemoryLog",
    "Cstg",
    "GoalKind",
    "GoalSceneEntry",
    "GoalSpec",
    "Verb",
    "ActionDirective",
    "Violation",
    "VerificationReport",
    "Gripper",
    "Pose6DoFAction",
    "AnnotatedObservation",
    "PromptContext",
    "StepDecision",
    "ObjectKind",
    "ActionOutcome",
    "SimObject",
    "WorldState",
    "Observation",
    "TaskSpec",
    "RunConfig",
    "AblationFlags",
    "EpisodeRecord",
    "StepRecord",
    "SuiteReport",
]
