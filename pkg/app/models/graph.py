"""
Causal Spatio-Temporal Graph schemas (nodes, edges, events, memory log)
"""
from __future__ import annotations

from enum import Enum
from typing import Dict, Iterable, List, Optional, Tuple

from pydantic import BaseModel, ConfigDict, Field, model_validator

from app.core.exceptions import UnknownObject
from app.models.geometry import Vec3
from app.models.tokens import StfToken


class Visibility(str, Enum):
    VISIBLE = "visible"
    OCCLUDED = "occluded"
    REMOVED = "removed"


class RelationTag(str, Enum):
    ABOVE = "above"
    BELOW = "below"
    LEFT_OF = "left_of"
    RIGHT_OF = "right_of"
    IN_FRONT = "in_front"
    BEHIND = "behind"
    SUPPORTING = "supporting"
    SUPPORTED_BY = "supported_by"
    NEAR = "near"


INVERSE_TAG: Dict[RelationTag, RelationTag] = {
    RelationTag.ABOVE: RelationTag.BELOW,
    RelationTag.BELOW: RelationTag.ABOVE,
    RelationTag.LEFT_OF: RelationTag.RIGHT_OF,
    RelationTag.RIGHT_OF: RelationTag.LEFT_OF,
    RelationTag.IN_FRONT: RelationTag.BEHIND,
    RelationTag.BEHIND: RelationTag.IN_FRONT,
    RelationTag.SUPPORTING: RelationTag.SUPPORTED_BY,
    RelationTag.SUPPORTED_BY: RelationTag.SUPPORTING,
    RelationTag.NEAR: RelationTag.NEAR,
}


def sorted_tags(tags: Iterable[RelationTag]) -> Tuple[RelationTag, ...]:
    return tuple(sorted(set(tags), key=lambda t: t.value))


class SceneNode(BaseModel):
    """Persistent object with a sliding window of its most recent tokens"""
    model_config = ConfigDict(frozen=True)

    object_id: str
    descriptor: str
    window: Tuple[StfToken, ...] = ()
    last_known: StfToken
    visibility: Visibility = Visibility.VISIBLE
    occluder_id: Optional[str] = None

    @model_validator(mode="after")
    def _check(self) -> "SceneNode":
        stamps = [tok.timestamp for tok in self.window]
        if any(b <= a for a, b in zip(stamps, stamps[1:])):
            raise ValueError(f"window of {self.object_id} is not strictly increasing")
        if self.occluder_id is not None and self.visibility != Visibility.OCCLUDED:
            raise ValueError("occluder_id is only valid while occluded")
        return self

    @property
    def is_visible(self) -> bool:
        return self.visibility == Visibility.VISIBLE


class SceneEdge(BaseModel):
    """Pairwise relation stored once, with offset from from_id to to_id"""
    model_config = ConfigDict(frozen=True)

    from_id: str
    to_id: str
    distance: float = Field(..., ge=0.0)
    offset: Vec3
    relation_tags: Tuple[RelationTag, ...] = ()

    def reversed(self) -> "SceneEdge":
        return SceneEdge(
            from_id=self.to_id,
            to_id=self.from_id,
            distance=self.distance,
            offset=Vec3(x=-self.offset.x, y=-self.offset.y, z=-self.offset.z),
            relation_tags=sorted_tags(INVERSE_TAG[t] for t in self.relation_tags),
        )


class EventKind(str, Enum):
    PLANNED_DISPLACEMENT = "planned_displacement"
    UNINTENDED_COLLISION = "unintended_collision"
    OCCLUSION_START = "occlusion_start"
    OCCLUSION_END = "occlusion_end"
    ACTION_EXECUTED = "action_executed"
    SUBTASK_COMPLETED = "subtask_completed"
    PRECONDITION_VIOLATION = "precondition_violation"


class CauseKind(str, Enum):
    AGENT_ACTION = "agent_action"
    EXTERNAL = "external"
    UNKNOWN = "unknown"


class EventCause(BaseModel):
    model_config = ConfigDict(frozen=True)

    kind: CauseKind
    action_ref: Optional[str] = None


class CausalEvent(BaseModel):
    """Timestamped, located, causally attributed state transition"""
    model_config = ConfigDict(frozen=True)

    event_id: str
    timestamp: int = Field(..., ge=0)
    kind: EventKind
    subject_id: str
    location: Vec3
    cause: EventCause
    detail: str = ""
    origin: Optional[Vec3] = None
    related_id: Optional[str] = None


def format_event_id(index: int) -> str:
    return f"ev-{index:06d}"


class MemoryLog(BaseModel):
    """Append-only causal memory H_t^K"""
    model_config = ConfigDict(frozen=True)

    events: Tuple[CausalEvent, ...] = ()
    horizon: int = Field(3, ge=1)

    @model_validator(mode="after")
    def _ordered(self) -> "MemoryLog":
        keys = [(e.timestamp, e.event_id) for e in self.events]
        if keys != sorted(keys):
            raise ValueError("memory log must be ordered by (timestamp, event_id)")
        return self

    def next_event_id(self, offset: int = 0) -> str:
        return format_event_id(len(self.events) + offset)

    def recent(self, count: int) -> Tuple[CausalEvent, ...]:
        return self.events[-count:] if count > 0 else ()

    def appended(self, new_events: Iterable[CausalEvent]) -> "MemoryLog":
        return MemoryLog(events=self.events + tuple(new_events), horizon=self.horizon)

    def of_kind(self, kind: EventKind, subject_id: Optional[str] = None) -> List[CausalEvent]:
        return [
            e for e in self.events
            if e.kind == kind and (subject_id is None or e.subject_id == subject_id)
        ]


class Cstg(BaseModel):
    """Spatial graph G_t plus causal memory log H_t^K"""
    model_config = ConfigDict(frozen=True)

    nodes: Dict[str, SceneNode] = Field(default_factory=dict)
    edges: Tuple[SceneEdge, ...] = ()
    log: MemoryLog = Field(default_factory=MemoryLog)
    current_step: int = -1
    memory_enabled: bool = True

    @classmethod
    def empty(cls, window_k: int = 3, memory_enabled: bool = True) -> "Cstg":
        return cls(log=MemoryLog(horizon=window_k), memory_enabled=memory_enabled)

    @property
    def window_k(self) -> int:
        return self.log.horizon

    def node(self, object_id: str) -> SceneNode:
        try:
            return self.nodes[object_id]
        except KeyError:
            raise UnknownObject(object_id) from None

    def visible_nodes(self) -> List[SceneNode]:
        return [n for _, n in sorted(self.nodes.items()) if n.is_visible]

    def nodes_by_descriptor(self, descriptor: str) -> List[SceneNode]:
        return [n for _, n in sorted(self.nodes.items()) if n.descriptor == descriptor]
