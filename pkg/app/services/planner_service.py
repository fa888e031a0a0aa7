"""
Planner service
Prompt assembly, precondition verification, action instantiation and the replanning loop
"""
import json
import logging
from pathlib import Path
from typing import List, Optional, Sequence, Tuple, Union

import httpx
import numpy as np
from pydantic import ValidationError

from app.core.config import Settings, get_settings
from app.core.exceptions import ConfigError, NoCandidateLeft, ReplanBudgetExhausted, UnknownObject, UnresolvedTarget
from app.models.geometry import TOP_DOWN_QUATERNION, Pose6DoF, Vec3
from app.models.graph import CausalEvent, CauseKind, Cstg, EventCause, EventKind, RelationTag, Visibility
from app.models.planning import (
    DIRECTIVE_FORMAT,
    TABLE,
    ActionDirective,
    AnnotatedObservation,
    GoalKind,
    GoalSpec,
    Gripper,
    Pose6DoFAction,
    PromptContext,
    StepDecision,
    VerificationReport,
    Verb,
    Violation,
    parse_predicate,
)
from app.models.records import BackendKind
from app.models.tokens import StfToken
from app.models.world import Observation
from app.services.geometry import footprint_overlap, inside_box
from app.services.oracle_policy import oracle_directive
from app.services.remote_planner import remote_directive
from app.services.scene_graph import append_events, format_events, spatial_context
from app.services.stf_encoder import format_number

logger = logging.getLogger(__name__)

SYSTEM_PREAMBLE = f"""You are the task planner of a tabletop robot arm with a top-down parallel gripper.
You receive a text rendering of a causal spatio-temporal scene graph (objects as STF tokens,
pairwise relations, recent causal events), a front-view image with object id labels, and a goal.

Answer with exactly one JSON object and nothing else, following schema {DIRECTIVE_FORMAT}:
{{
  "format": "{DIRECTIVE_FORMAT}",
  "verb": "pick" | "place_on" | "place_at" | "cover_with" | "uncover" | "done",
  "subject_id": "<object id from the scene graph>",
  "target": "<object id>" | {{"x": <m>, "y": <m>, "z": <m>}} | null,
  "declared_preconditions": ["clear_top(<id>)", "exists(<id>)", ...],
  "subgoal_note": "<short free text>",
  "subgoal": null
}}

Verbs:
- pick(subject): lift the subject straight up; no target.
- place_on(subject, target object): put the subject on top of the target object.
- place_at(subject, position): put the subject with its centre at the given position.
- cover_with(subject, target object): put the subject (a cup) over the target object.
- uncover(subject, position or null): lift a covering cup away.
- done: the goal holds; no subject.

Predicates you may declare: exists(x), visible(x), visible_or_located(x), reachable(x),
clear_top(x), stable_on(x, y), stable_at(x). Objects can be hidden; use the causal events and
last known poses to reason about them. If verification feedback is given, propose a different action."""

PREDICATE_NAMES = frozenset({
    "exists", "visible", "visible_or_located", "reachable", "clear_top", "stable_on", "stable_at",
})
TARGET_ARG = "target"
UNCOVER_SHIFT = 0.10


def goal_text(goal: GoalSpec) -> str:
    """Deterministic rendering of the goal"""
    if goal.kind == GoalKind.INSTRUCTION:
        return f"instruction: {goal.instruction}"
    lines = ["goal scene:"]
    for entry in goal.goal_scene or ():
        pos = " ".join(format_number(v, 4) for v in entry.target.as_tuple())
        support = ", ".join(entry.support) if entry.support else TABLE
        lines.append(f"- {entry.descriptor} at ({pos}) on {support}")
    return "\n".join(lines)


def assemble_prompt(g: Cstg, obs: Observation, goal: GoalSpec, cfg: Optional[Settings] = None) -> PromptContext:
    """
    Build the context-augmented prompt of the current step

    Args:
        g: Graph finalised for the current step
        obs: Observation of the current step
        goal: Episode goal
        cfg: Settings override

    Returns:
        PromptContext with one image label per visible node
    """
    cfg = cfg or get_settings()
    labels: List[Tuple[str, Tuple[int, int]]] = []
    for node in g.visible_nodes():
        mask = obs.masks.get(node.last_known.provenance)
        if mask is None or mask.popcount() == 0:
            continue
        labels.append((node.object_id, mask.centroid_pixel()))
    return PromptContext(
        system_preamble=SYSTEM_PREAMBLE,
        spatial_context_text=spatial_context(g, include_events=False, cfg=cfg),
        recent_events_text=format_events(g.log.recent(cfg.CONTEXT_EVENT_LINES), cfg.STF_SERIAL_PRECISION),
        goal_text=goal_text(goal),
        annotated_observation=AnnotatedObservation(rgb=obs.rgb, labels=tuple(labels)),
        goal=goal,
    )


def required_predicates(d: ActionDirective) -> List[str]:
    """Predicates every directive of this verb must satisfy, whatever the backend declared"""
    s, t = d.subject_id, d.target
    if d.verb == Verb.PICK:
        return [f"exists({s})", f"visible({s})", f"reachable({s})", f"clear_top({s})"]
    if d.verb == Verb.PLACE_ON:
        return [
            f"exists({s})", f"exists({t})", f"visible({s})", f"clear_top({s})",
            f"clear_top({t})", f"reachable({t})", f"stable_on({s}, {t})",
        ]
    if d.verb == Verb.PLACE_AT:
        return [f"exists({s})", f"visible({s})", f"clear_top({s})", f"reachable({TARGET_ARG})", f"stable_at({s})"]
    if d.verb == Verb.COVER_WITH:
        return [f"exists({s})", f"exists({t})", f"visible({s})", f"clear_top({s})",
                f"clear_top({t})", f"visible_or_located({t})"]
    if d.verb == Verb.UNCOVER:
        predicates = [f"exists({s})", f"visible({s})", f"clear_top({s})", f"reachable({s})"]
        if isinstance(t, Vec3):
            predicates.append(f"reachable({TARGET_ARG})")
        return predicates
    return []


class _Verifier:
    """Evaluates relation predicates against one graph state"""

    def __init__(self, g: Cstg, d: ActionDirective, cfg: Settings):
        self.g = g
        self.d = d
        self.cfg = cfg

    def _token(self, object_id: str) -> StfToken:
        return self.g.node(object_id).last_known

    def _live(self, object_id: str) -> bool:
        node = self.g.nodes.get(object_id)
        return node is not None and node.visibility != Visibility.REMOVED

    def _supported(self, object_id: str) -> List[str]:
        """Nodes resting on object_id according to the edge tags"""
        above = []
        for edge in self.g.edges:
            if edge.from_id == object_id and RelationTag.SUPPORTING in edge.relation_tags:
                above.append(edge.to_id)
            elif edge.to_id == object_id and RelationTag.SUPPORTED_BY in edge.relation_tags:
                above.append(edge.from_id)
        return sorted(above)

    def _target_point(self) -> Vec3:
        if not isinstance(self.d.target, Vec3):
            raise UnresolvedTarget(f"{self.d.key()} has no target position")
        return self.d.target

    def _footprint_at(self, token: StfToken, x: float, y: float) -> Tuple[float, float, float, float]:
        shape = token.shape
        hx = (shape.x.max - shape.x.min) / 2.0
        hy = (shape.y.max - shape.y.min) / 2.0
        return (x - hx, x + hx, y - hy, y + hy)

    def check(self, name: str, args: Tuple[str, ...]) -> Optional[str]:
        """Explanation of the violation, or None when the predicate holds"""
        if name not in PREDICATE_NAMES:
            return f"unknown predicate {name!r}"
        expected = 2 if name == "stable_on" else 1
        if len(args) != expected:
            return f"{name} takes {expected} argument(s), got {len(args)}"
        if name == "exists":
            return None if self._live(args[0]) else f"{args[0]} is not in the scene graph"
        if name == "reachable" and args[0] == TARGET_ARG:
            point = self._target_point()
            if inside_box(point.as_tuple(), self.cfg.WORKSPACE_MIN, self.cfg.WORKSPACE_MAX):
                return None
            return f"target position {point.as_tuple()} is outside the workspace"
        for arg in args:
            if not self._live(arg):
                return f"{arg} is not in the scene graph"
        return getattr(self, f"_{name}")(*args)

    def _visible(self, x: str) -> Optional[str]:
        node = self.g.node(x)
        if node.is_visible:
            return None
        if node.occluder_id:
            return f"{x} is occluded by {node.occluder_id}, uncover first"
        return f"{x} is not visible"

    def _visible_or_located(self, x: str) -> Optional[str]:
        # Any live node has a last_known token
        return None

    def _reachable(self, x: str) -> Optional[str]:
        c = self._token(x).centroid
        if inside_box(c.as_tuple(), self.cfg.WORKSPACE_MIN, self.cfg.WORKSPACE_MAX):
            return None
        return f"{x} is outside the workspace"

    def _clear_top(self, x: str) -> Optional[str]:
        above = self._supported(x)
        return f"{', '.join(above)} rests on {x}" if above else None

    def _stable_on(self, s: str, t: str) -> Optional[str]:
        target = self._token(t)
        rect = self._footprint_at(self._token(s), target.centroid.x, target.centroid.y)
        fraction = footprint_overlap(rect, target.shape.footprint(), self.cfg.RELATION_EPS)
        if fraction >= self.cfg.STABILITY_FRACTION:
            return None
        return f"only {format_number(fraction, 2)} of {s} would rest on {t}"

    def _stable_at(self, s: str) -> Optional[str]:
        token = self._token(s)
        point = self._target_point()
        base = point.z - token.shape.half_height()
        if base <= self.cfg.SUPPORT_GAP_MAX:
            return None
        rect = self._footprint_at(token, point.x, point.y)
        fraction = 0.0
        for node_id, node in sorted(self.g.nodes.items()):
            if node_id == s or node.visibility == Visibility.REMOVED:
                continue
            shape = node.last_known.shape
            if abs(base - shape.z.max) <= self.cfg.SUPPORT_GAP_MAX:
                fraction += footprint_overlap(rect, shape.footprint(), self.cfg.RELATION_EPS)
        if fraction >= self.cfg.STABILITY_FRACTION:
            return None
        return f"only {format_number(min(fraction, 1.0), 2)} of {s} would be supported at the target"


def verify_preconditions(g: Cstg, d: ActionDirective, cfg: Optional[Settings] = None) -> VerificationReport:
    """
    Check the directive's required and declared predicates against the graph

    Args:
        g: Graph of the current step
        d: Proposed directive
        cfg: Settings override

    Returns:
        VerificationReport

    Raises:
        UnknownObject: the subject is not a node of the graph
    """
    cfg = cfg or get_settings()
    if d.verb != Verb.DONE:
        g.node(d.subject_id)
    verifier = _Verifier(g, d, cfg)
    predicates = required_predicates(d)
    predicates += [p for p in d.declared_preconditions if p not in predicates]
    violated: List[Violation] = []
    for text in predicates:
        try:
            name, args = parse_predicate(text)
        except ValueError as e:
            violated.append(Violation(predicate=text, explanation=str(e)))
            continue
        try:
            explanation = verifier.check(name, args)
        except UnresolvedTarget as e:
            explanation = str(e)
        if explanation is not None:
            violated.append(Violation(predicate=text, explanation=explanation))
    return VerificationReport(passed=not violated, violated=tuple(violated), checked_against_step=g.current_step)


def instantiate_action(d: ActionDirective, g: Cstg, cfg: Optional[Settings] = None) -> Pose6DoFAction:
    """
    Resolve a verified directive into a metric grasp/release action

    Args:
        d: Verified directive
        g: Graph the directive was verified against
        cfg: Settings override (approach offset)

    Returns:
        Pose6DoFAction with top-down poses

    Raises:
        UnknownObject: subject or target object unknown
        UnresolvedTarget: the verb has no metric meaning (done) or lacks its target
    """
    cfg = cfg or get_settings()
    if d.verb == Verb.DONE:
        raise UnresolvedTarget("done has no metric action")
    subject = g.node(d.subject_id).last_known
    c = subject.centroid
    grasp = Pose6DoF(
        position=Vec3(x=c.x, y=c.y, z=subject.shape.z.max + cfg.APPROACH_OFFSET),
        orientation=TOP_DOWN_QUATERNION,
    )
    if d.verb == Verb.PICK:
        return Pose6DoFAction(grasp=grasp, release=None, gripper=Gripper.CLOSE)

    half = subject.shape.half_height()
    if d.verb == Verb.PLACE_ON:
        target = g.node(d.target).last_known
        release = Vec3(x=target.centroid.x, y=target.centroid.y, z=target.shape.z.max + half)
    elif d.verb == Verb.PLACE_AT:
        release = d.target
    elif d.verb == Verb.COVER_WITH:
        covered = g.node(d.target).last_known
        release = Vec3(x=covered.centroid.x, y=covered.centroid.y, z=covered.shape.z.min + half)
    elif d.verb == Verb.UNCOVER:
        if isinstance(d.target, Vec3):
            release = d.target
        else:
            shift = -UNCOVER_SHIFT if c.x >= 0.0 else UNCOVER_SHIFT
            release = Vec3(x=c.x + shift, y=c.y, z=half)
    else:
        raise UnresolvedTarget(f"cannot instantiate {d.key()}")
    if not np.all(np.isfinite(release.as_array())):
        raise UnresolvedTarget(f"non-finite release position for {d.key()}")
    return Pose6DoFAction(
        grasp=grasp,
        release=Pose6DoF(position=release, orientation=TOP_DOWN_QUATERNION),
        gripper=Gripper.OPEN,
    )


def violation_event(g: Cstg, d: ActionDirective, report: VerificationReport) -> CausalEvent:
    node = g.nodes.get(d.subject_id or "")
    location = node.last_known.centroid if node else Vec3(x=0.0, y=0.0, z=0.0)
    return CausalEvent(
        event_id=g.log.next_event_id(),
        timestamp=max(g.current_step, 0),
        kind=EventKind.PRECONDITION_VIOLATION,
        subject_id=d.subject_id or "-",
        location=location,
        cause=EventCause(kind=CauseKind.AGENT_ACTION, action_ref=d.key()),
        detail=", ".join(v.predicate for v in report.violated),
    )


class PlannerBackend:
    """Source of directives for the step loop"""

    name = "backend"

    async def propose(
        self,
        prompt: PromptContext,
        graph: Cstg,
        goal: GoalSpec,
        rejected: Sequence[str],
    ) -> ActionDirective:
        raise NotImplementedError


class OracleBackend(PlannerBackend):
    name = BackendKind.ORACLE.value

    def __init__(self, cfg: Optional[Settings] = None):
        self.cfg = cfg or get_settings()

    async def propose(self, prompt, graph, goal, rejected):
        return oracle_directive(graph, goal, rejected, self.cfg)


class ScriptedBackend(PlannerBackend):
    """Replays a fixed directive list, then answers done"""

    name = BackendKind.SCRIPTED.value

    def __init__(self, directives: Sequence[ActionDirective]):
        self._queue = list(directives)

    @classmethod
    def from_file(cls, path: Union[str, Path]) -> "ScriptedBackend":
        try:
            data = json.loads(Path(path).read_text(encoding="utf-8"))
        except (OSError, json.JSONDecodeError) as e:
            raise ConfigError(f"cannot read script file {path}: {e}") from e
        if not isinstance(data, list):
            raise ConfigError(f"script file {path} must hold a JSON list of directives")
        try:
            directives = [
                ActionDirective.model_validate({k: v for k, v in item.items() if k != "format"})
                for item in data
            ]
        except (AttributeError, ValidationError) as e:
            raise ConfigError(f"invalid directive in script file {path}: {e}") from e
        return cls(directives)

    @property
    def remaining(self) -> int:
        return len(self._queue)

    async def propose(self, prompt, graph, goal, rejected):
        if not self._queue:
            return ActionDirective(verb=Verb.DONE, subgoal_note="script exhausted")
        return self._queue.pop(0)


class RemoteBackend(PlannerBackend):
    name = BackendKind.REMOTE.value

    def __init__(self, cfg: Optional[Settings] = None, client: Optional[httpx.AsyncClient] = None):
        self.cfg = cfg or get_settings()
        self.client = client

    async def propose(self, prompt, graph, goal, rejected):
        return await remote_directive(prompt, self.cfg, self.client)


def build_backend(
    kind: BackendKind,
    script_file: Optional[str] = None,
    cfg: Optional[Settings] = None,
    client: Optional[httpx.AsyncClient] = None,
) -> PlannerBackend:
    """
    Construct a fresh backend for one episode

    Raises:
        ConfigError: scripted backend without a readable script file
    """
    if kind == BackendKind.ORACLE:
        return OracleBackend(cfg)
    if kind == BackendKind.REMOTE:
        return RemoteBackend(cfg, client)
    if not script_file:
        raise ConfigError("the scripted backend needs a script file")
    return ScriptedBackend.from_file(script_file)


async def step_loop(
    g: Cstg,
    obs: Observation,
    goal: GoalSpec,
    backend: PlannerBackend,
    prompt: Optional[PromptContext] = None,
    cfg: Optional[Settings] = None,
) -> Tuple[StepDecision, Cstg]:
    """
    Propose, verify and instantiate one action, replanning on violations

    Args:
        g: Graph of the current step
        obs: Observation of the current step
        goal: Episode goal
        backend: Directive source
        prompt: Pre-assembled prompt (assembled here when omitted)
        cfg: Settings override (MAX_REPLANS)

    Returns:
        (decision, graph with any precondition_violation events appended)

    Raises:
        ReplanBudgetExhausted: MAX_REPLANS replans all failed verification, or the backend ran out of candidates
        PlannerError: the remote backend failed
    """
    cfg = cfg or get_settings()
    prompt = prompt or assemble_prompt(g, obs, goal, cfg)
    rejected: List[str] = []
    replans = 0
    while True:
        try:
            directive = await backend.propose(prompt, g, goal, tuple(rejected))
        except NoCandidateLeft as e:
            raise ReplanBudgetExhausted(
                f"no directive left after {len(rejected)} rejection(s) at step {g.current_step}: {e}",
                attempts=len(rejected),
                graph=g,
            ) from e
        if directive.verb == Verb.DONE:
            report = VerificationReport(passed=True, checked_against_step=g.current_step)
            return StepDecision(directive=directive, report=report, replans=replans, rejected=rejected), g

        try:
            report = verify_preconditions(g, directive, cfg)
        except UnknownObject as e:
            report = VerificationReport(
                passed=False,
                violated=(Violation(predicate=f"exists({e.object_id})", explanation=str(e)),),
                checked_against_step=g.current_step,
            )
        if report.passed:
            action = instantiate_action(directive, g, cfg)
            decision = StepDecision(
                directive=directive, report=report, action=action, replans=replans, rejected=rejected,
            )
            return decision, g

        g = append_events(g, [violation_event(g, directive, report)])
        rejected.append(directive.key())
        logger.warning(f"Step {g.current_step}: {directive.key()} rejected ({report.feedback_text()!r})")
        if replans >= cfg.MAX_REPLANS:
            raise ReplanBudgetExhausted(
                f"{replans + 1} directives failed verification at step {g.current_step}",
                attempts=replans + 1,
                graph=g,
            )
        replans += 1
        prompt = prompt.with_feedback(f"{directive.key()} was rejected:\n{report.feedback_text()}")
