"""
Planning schemas: goals, directives, verification reports, metric actions
"""
from __future__ import annotations

import re
from dataclasses import dataclass, field
from enum import Enum
from typing import List, Optional, Tuple, Union

import numpy as np
from pydantic import BaseModel, ConfigDict, Field, model_validator

from app.models.geometry import Pose6DoF, Vec3

DIRECTIVE_FORMAT = "directive/1"

TABLE = "table"


class GoalKind(str, Enum):
    GOAL_IMAGE = "goal_image"
    INSTRUCTION = "instruction"


class GoalSceneEntry(BaseModel):
    """Structured stand-in for one object in a goal image"""
    model_config = ConfigDict(frozen=True)

    descriptor: str
    target: Vec3
    support: Tuple[str, ...] = (TABLE,)


class GoalSpec(BaseModel):
    model_config = ConfigDict(frozen=True)

    kind: GoalKind
    instruction: Optional[str] = None
    goal_scene: Optional[Tuple[GoalSceneEntry, ...]] = None

    @model_validator(mode="after")
    def _one_of(self) -> "GoalSpec":
        if self.kind == GoalKind.INSTRUCTION and (not self.instruction or self.goal_scene is not None):
            raise ValueError("instruction goals carry an instruction and no goal_scene")
        if self.kind == GoalKind.GOAL_IMAGE and (self.goal_scene is None or self.instruction is not None):
            raise ValueError("goal_image goals carry a goal_scene and no instruction")
        return self


class InstructionKind(str, Enum):
    HIDE = "hide"
    COVER = "cover"
    UNSTACK = "unstack"


class InstructionProgram(BaseModel):
    """Compiled form of a text-guided goal"""
    model_config = ConfigDict(frozen=True)

    kind: InstructionKind
    subject: Optional[str] = None
    cover: Optional[str] = None


_INSTRUCTION_PATTERNS = (
    (InstructionKind.HIDE, re.compile(r"^hide the (?P<subject>.+?) under the (?P<cover>.+?),? then restore\b.*$")),
    (InstructionKind.COVER, re.compile(r"^cover the (?P<subject>.+?) with the (?P<cover>.+?),? then restore\b.*$")),
    (InstructionKind.UNSTACK, re.compile(r"^unstack the tower,? then restack it$")),
)


def parse_instruction(text: str) -> Optional[InstructionProgram]:
    """
    Compile an instruction of the small task grammar

    Args:
        text: Natural-language instruction

    Returns:
        InstructionProgram, or None when the sentence is outside the grammar
    """
    normalized = " ".join(text.lower().split()).rstrip(".!")
    for kind, pattern in _INSTRUCTION_PATTERNS:
        match = pattern.match(normalized)
        if match:
            groups = match.groupdict()
            return InstructionProgram(kind=kind, subject=groups.get("subject"), cover=groups.get("cover"))
    return None


class Verb(str, Enum):
    PICK = "pick"
    PLACE_ON = "place_on"
    PLACE_AT = "place_at"
    COVER_WITH = "cover_with"
    UNCOVER = "uncover"
    DONE = "done"


PLACING_VERBS = frozenset({Verb.PLACE_ON, Verb.PLACE_AT, Verb.COVER_WITH, Verb.UNCOVER})


class ActionDirective(BaseModel):
    """Semantic action proposal emitted by a planning backend"""
    model_config = ConfigDict(frozen=True, extra="forbid")

    verb: Verb
    subject_id: Optional[str] = None
    target: Union[Vec3, str, None] = None
    declared_preconditions: Tuple[str, ...] = ()
    subgoal_note: str = ""
    subgoal: Optional[str] = None

    @model_validator(mode="after")
    def _arity(self) -> "ActionDirective":
        if self.verb == Verb.DONE:
            return self
        if not self.subject_id:
            raise ValueError(f"{self.verb.value} requires a subject_id")
        if self.verb == Verb.PICK and self.target is not None:
            raise ValueError("pick takes no target")
        if self.verb in (Verb.PLACE_ON, Verb.COVER_WITH) and not isinstance(self.target, str):
            raise ValueError(f"{self.verb.value} targets an object id")
        if self.verb == Verb.PLACE_AT and not isinstance(self.target, Vec3):
            raise ValueError("place_at targets a position")
        if self.verb == Verb.UNCOVER and isinstance(self.target, str):
            raise ValueError("uncover targets a position or nothing")
        return self

    def key(self) -> str:
        """Stable identity used to track rejected proposals"""
        if isinstance(self.target, Vec3):
            target = "({:.4f},{:.4f},{:.4f})".format(*self.target.as_tuple())
        else:
            target = self.target or ""
        return f"{self.verb.value}({self.subject_id or ''},{target})"


_PREDICATE_RE = re.compile(r"^\s*([a-z_]+)\(([^()]*)\)\s*$")


def parse_predicate(text: str) -> Tuple[str, Tuple[str, ...]]:
    """'stable_on(a, b)' -> ('stable_on', ('a', 'b'))"""
    match = _PREDICATE_RE.match(text)
    if not match:
        raise ValueError(f"Malformed predicate: {text!r}")
    args = tuple(a.strip() for a in match.group(2).split(",") if a.strip())
    return match.group(1), args


class Violation(BaseModel):
    model_config = ConfigDict(frozen=True)

    predicate: str
    explanation: str


class VerificationReport(BaseModel):
    model_config = ConfigDict(frozen=True)

    passed: bool
    violated: Tuple[Violation, ...] = ()
    checked_against_step: int

    @model_validator(mode="after")
    def _consistent(self) -> "VerificationReport":
        if self.passed != (len(self.violated) == 0):
            raise ValueError("passed must equal 'no violations'")
        return self

    def feedback_text(self) -> str:
        return "\n".join(f"- {v.predicate}: {v.explanation}" for v in self.violated)


class Gripper(str, Enum):
    CLOSE = "close"
    OPEN = "open"
    NONE = "none"


class Pose6DoFAction(BaseModel):
    """Metric action a_t: grasp pose, optional release pose, gripper command"""
    model_config = ConfigDict(frozen=True)

    grasp: Pose6DoF
    release: Optional[Pose6DoF] = None
    gripper: Gripper = Gripper.CLOSE


@dataclass(frozen=True, eq=False)
class AnnotatedObservation:
    """Rendered image with one identity label per visible node"""
    rgb: np.ndarray
    labels: Tuple[Tuple[str, Tuple[int, int]], ...] = ()


@dataclass(frozen=True, eq=False)
class PromptContext:
    """Context-augmented prompt P_t"""
    system_preamble: str
    spatial_context_text: str
    recent_events_text: str
    goal_text: str
    annotated_observation: AnnotatedObservation
    goal: GoalSpec
    feedback: Tuple[str, ...] = field(default_factory=tuple)

    def render_text(self) -> str:
        sections = [
            self.spatial_context_text,
            "## recent events\n" + self.recent_events_text,
            "## goal\n" + self.goal_text,
        ]
        if self.feedback:
            sections.append("## verification feedback\n" + "\n".join(self.feedback))
        return "\n\n".join(sections) + "\n"

    def with_feedback(self, text: str) -> "PromptContext":
        return PromptContext(
            system_preamble=self.system_preamble,
            spatial_context_text=self.spatial_context_text,
            recent_events_text=self.recent_events_text,
            goal_text=self.goal_text,
            annotated_observation=self.annotated_observation,
            goal=self.goal,
            feedback=self.feedback + (text,),
        )


class StepDecision(BaseModel):
    """Outcome of one planning step: the accepted directive, its report and action"""
    model_config = ConfigDict(frozen=True)

    directive: ActionDirective
    report: VerificationReport
    action: Optional[Pose6DoFAction] = None
    replans: int = 0
    rejected: List[str] = Field(default_factory=list)
