"""
Rule-based oracle policy
Deterministic stand-in for the semantic planner: goal-scene programs ordered by support,
and instruction programs (hide / cover / unstack, each followed by a restore)
"""
import logging
from dataclasses import dataclass
from typing import Dict, List, Optional, Sequence, Tuple

import numpy as np

from app.core.config import Settings, get_settings
from app.core.exceptions import NoCandidateLeft, UnsatisfiableGoal
from app.models.geometry import AxisStats, ShapeVector, Vec3
from app.models.graph import Cstg, EventKind, Visibility
from app.models.planning import (
    TABLE,
    ActionDirective,
    GoalKind,
    GoalSceneEntry,
    GoalSpec,
    InstructionKind,
    InstructionProgram,
    Verb,
    parse_instruction,
)
from app.models.tokens import StfToken
from app.services.geometry import interval_overlap
from app.services.scene_graph import completed_subgoals, held_object, rests_on

logger = logging.getLogger(__name__)

PARKING_SLOTS_X: Tuple[float, ...] = (0.27, -0.27, 0.20, -0.20, 0.13, -0.13, 0.06, -0.06)
PARKING_SWEEP_X: Tuple[float, ...] = tuple(
    sorted((round(float(x), 2) for x in np.arange(-0.28, 0.2801, 0.01)), key=lambda x: (-abs(x), -x))
)
PARKING_CLEARANCE = 0.01
REGION_SLACK = 0.005

SUBGOAL_UNSTACKED = "unstacked"
SUBGOAL_RESTORED = "restored"


def hidden_subgoal(object_id: str) -> str:
    return f"hidden({object_id})"


@dataclass(frozen=True)
class Body:
    """Oracle view of one non-removed node"""
    object_id: str
    descriptor: str
    token: StfToken
    visibility: Visibility
    occluder_id: Optional[str] = None

    @property
    def centroid(self) -> np.ndarray:
        return self.token.centroid.as_array()

    @property
    def lo(self) -> np.ndarray:
        return self.token.shape.box_min()

    @property
    def hi(self) -> np.ndarray:
        return self.token.shape.box_max()

    @property
    def half_height(self) -> float:
        return self.token.shape.half_height()

    @property
    def half_width(self) -> float:
        return (self.hi[0] - self.lo[0]) / 2.0

    @property
    def is_visible(self) -> bool:
        return self.visibility == Visibility.VISIBLE


@dataclass(frozen=True)
class Move:
    """One pick-and-place step of a program"""
    subject_id: str
    verb: Verb
    target: object = None
    subgoal: Optional[str] = None
    note: str = ""


def _shifted(token: StfToken, dz: float) -> StfToken:
    def axis(a: AxisStats) -> AxisStats:
        return AxisStats(mu=a.mu + dz, sigma=a.sigma, min=a.min + dz, max=a.max + dz)

    shape = token.shape
    return token.model_copy(update={
        "centroid": Vec3(x=token.centroid.x, y=token.centroid.y, z=token.centroid.z + dz),
        "shape": ShapeVector(x=shape.x, y=shape.y, z=axis(shape.z)),
    })


def causal_origins(g: Cstg) -> Dict[str, Vec3]:
    """Earliest recorded pre-displacement centroid of every node the log has seen move"""
    origins: Dict[str, Vec3] = {}
    for event in g.log.events:
        if event.kind in (EventKind.PLANNED_DISPLACEMENT, EventKind.UNINTENDED_COLLISION):
            if event.origin is not None and event.subject_id not in origins:
                origins[event.subject_id] = event.origin
    return origins


def on_table(token: StfToken, cfg: Settings) -> bool:
    return token.shape.z.min <= cfg.SUPPORT_GAP_MAX


def evaluate_subgoal(g: Cstg, subgoal: str, cfg: Optional[Settings] = None) -> bool:
    """
    Task-level predicate behind subtask_completed events

    Args:
        g: Candidate graph of the current step
        subgoal: hidden(<id>), unstacked or restored

    Returns:
        Whether the subgoal holds
    """
    cfg = cfg or get_settings()
    if subgoal.startswith("hidden(") and subgoal.endswith(")"):
        node = g.nodes.get(subgoal[len("hidden("):-1])
        return node is not None and not node.is_visible
    live = [n for _, n in sorted(g.nodes.items()) if n.visibility != Visibility.REMOVED]
    if subgoal == SUBGOAL_UNSTACKED:
        return bool(live) and all(on_table(n.last_known, cfg) for n in live)
    if subgoal == SUBGOAL_RESTORED:
        origins = causal_origins(g)
        return all(
            float(np.linalg.norm(n.last_known.centroid.as_array() - origins[n.object_id].as_array()))
            <= cfg.POSITION_TOLERANCE
            for n in live if n.object_id in origins
        )
    return False


class OraclePolicy:
    """Recomputes the remaining program from the current graph at every step"""

    def __init__(self, cfg: Optional[Settings] = None):
        self.cfg = cfg or get_settings()

    # ------------------------------------------------------------------ views

    def _single_frame_held(self, bodies: Dict[str, Body]) -> Optional[str]:
        """Lifted body resting on nothing; the only cue left to a graph without a log"""
        for body in bodies.values():
            if not body.is_visible or on_table(body.token, self.cfg):
                continue
            if any(rests_on(body.token, other.token, self.cfg) for other in bodies.values() if other is not body):
                continue
            return body.object_id
        return None

    def _views(self, g: Cstg) -> Tuple[Dict[str, Body], Optional[str]]:
        """Non-removed bodies, with a held body put back at its pre-pick pose"""
        bodies = {
            node_id: Body(node_id, node.descriptor, node.last_known, node.visibility, node.occluder_id)
            for node_id, node in sorted(g.nodes.items())
            if node.visibility != Visibility.REMOVED
        }
        held = held_object(g) if g.memory_enabled else self._single_frame_held(bodies)
        if held is not None:
            body = bodies[held]
            bodies[held] = Body(
                held, body.descriptor, _shifted(body.token, -self.cfg.LIFT_HEIGHT), body.visibility, None,
            )
        return bodies, held

    def _supported_by(self, bodies: Dict[str, Body], object_id: str) -> List[str]:
        below = bodies[object_id]
        return sorted(
            oid for oid, b in bodies.items()
            if oid != object_id and b.is_visible and rests_on(b.token, below.token, self.cfg)
        )

    def _topmost_above(self, bodies: Dict[str, Body], object_id: str) -> Optional[str]:
        """Highest body in the pile resting on object_id"""
        above = self._supported_by(bodies, object_id)
        if not above:
            return None
        current = max(above, key=lambda oid: (bodies[oid].centroid[2], oid))
        while True:
            nxt = self._supported_by(bodies, current)
            if not nxt:
                return current
            current = max(nxt, key=lambda oid: (bodies[oid].centroid[2], oid))

    def _by_descriptor(self, bodies: Dict[str, Body], descriptor: str) -> Optional[Body]:
        for body in bodies.values():
            if body.descriptor == descriptor:
                return body
        return None

    # ---------------------------------------------------------------- parking

    def _occupied(
        self,
        bodies: Dict[str, Body],
        subject_id: str,
        reserved: Sequence[Tuple[float, float]],
    ) -> List[Tuple[float, float]]:
        spans = [(b.lo[0], b.hi[0]) for oid, b in bodies.items() if oid != subject_id]
        return spans + list(reserved)

    def _parking_x(
        self,
        bodies: Dict[str, Body],
        subject_id: str,
        reserved: Sequence[Tuple[float, float]],
    ) -> float:
        half = bodies[subject_id].half_width + PARKING_CLEARANCE
        spans = self._occupied(bodies, subject_id, reserved)
        for x in PARKING_SLOTS_X + PARKING_SWEEP_X:
            if all(interval_overlap(x - half, x + half, lo, hi) <= 0.0 for lo, hi in spans):
                return x
        raise UnsatisfiableGoal(f"no free parking place for {subject_id}")

    def _park(self, bodies: Dict[str, Body], subject_id: str, reserved, subgoal: Optional[str] = None) -> Move:
        x = self._parking_x(bodies, subject_id, reserved)
        body = bodies[subject_id]
        target = Vec3(x=x, y=0.0, z=body.half_height)
        return Move(subject_id, Verb.PLACE_AT, target, subgoal, note="park")

    def _uncover(self, bodies: Dict[str, Body], cover_id: str, reserved) -> Move:
        """Lift a covering body off to a free parking place"""
        parked = self._park(bodies, cover_id, reserved)
        return Move(cover_id, Verb.UNCOVER, parked.target, note="uncover")

    def _at_parking(self, body: Body) -> bool:
        return on_table(body.token, self.cfg) and any(
            abs(body.centroid[0] - x) <= self.cfg.POSITION_TOLERANCE for x in PARKING_SLOTS_X + PARKING_SWEEP_X
        ) and abs(body.centroid[1]) <= self.cfg.POSITION_TOLERANCE

    # ------------------------------------------------------------- goal scene

    def _order_entries(self, entries: Sequence[GoalSceneEntry]) -> List[GoalSceneEntry]:
        """Kahn topological order, supporters first; ties by (target z, descriptor)"""
        by_descriptor = {e.descriptor: e for e in entries}
        deps = {
            e.descriptor: {s for s in e.support if s != TABLE and s in by_descriptor}
            for e in entries
        }
        ordered: List[GoalSceneEntry] = []
        done: set = set()
        while len(ordered) < len(entries):
            ready = [
                by_descriptor[d] for d in deps
                if d not in done and deps[d] <= done
            ]
            if not ready:
                cycle = sorted(d for d in deps if d not in done)
                raise UnsatisfiableGoal(f"goal support relations form a cycle among {', '.join(cycle)}")
            ready.sort(key=lambda e: (e.target.z, e.descriptor))
            ordered.append(ready[0])
            done.add(ready[0].descriptor)
        return ordered

    def _satisfied(self, body: Body, target: Vec3) -> bool:
        return float(np.linalg.norm(body.centroid - target.as_array())) <= self.cfg.POSITION_TOLERANCE

    def _region_blockers(
        self,
        bodies: Dict[str, Body],
        subject: Body,
        target: Vec3,
        ignore: set,
    ) -> List[str]:
        half_w, half_h = subject.half_width, subject.half_height
        x_lo, x_hi = target.x - half_w, target.x + half_w
        z_lo, z_hi = target.z - half_h, target.z + half_h
        blockers = []
        for oid, b in bodies.items():
            if oid == subject.object_id or oid in ignore:
                continue
            x_overlap = interval_overlap(x_lo, x_hi, b.lo[0], b.hi[0]) > 0.0
            z_overlap = b.hi[2] > z_lo + REGION_SLACK and b.lo[2] < z_hi - REGION_SLACK
            if x_overlap and z_overlap:
                blockers.append(oid)
        return blockers

    def _goal_verb(self, bodies: Dict[str, Body], entry: GoalSceneEntry, subject_id: str) -> Move:
        if tuple(entry.support) == (TABLE,):
            return Move(subject_id, Verb.PLACE_AT, entry.target)
        if len(entry.support) == 1:
            sup = self._by_descriptor(bodies, entry.support[0])
            if sup is not None:
                dxy = np.linalg.norm(sup.centroid[:2] - entry.target.as_array()[:2])
                if dxy <= self.cfg.POSITION_TOLERANCE:
                    return Move(subject_id, Verb.PLACE_ON, sup.object_id)
        return Move(subject_id, Verb.PLACE_AT, entry.target)

    def _entry_ready(self, bodies: Dict[str, Body], entry: GoalSceneEntry, entries: Dict[str, GoalSceneEntry]) -> bool:
        """Supporters of the entry already sit at their own targets"""
        for sup in entry.support:
            if sup == TABLE or sup not in entries:
                continue
            body = self._by_descriptor(bodies, sup)
            if body is None or not self._satisfied(body, entries[sup].target):
                return False
        return True

    def _relocate(
        self,
        bodies: Dict[str, Body],
        blocker_id: str,
        entries: Dict[str, GoalSceneEntry],
        reserved,
    ) -> Move:
        """Send a blocker to its own goal when that spot is free, else park it"""
        top = self._topmost_above(bodies, blocker_id) or blocker_id
        entry = entries.get(bodies[top].descriptor)
        if entry is not None and self._entry_ready(bodies, entry, entries):
            support = set(d for d in entry.support if d != TABLE)
            ignore = {oid for oid, b in bodies.items() if b.descriptor in support}
            if not self._region_blockers(bodies, bodies[top], entry.target, ignore):
                return self._goal_verb(bodies, entry, top)
        return self._park(bodies, top, reserved)

    def goal_scene_moves(self, bodies: Dict[str, Body], goal: GoalSpec) -> List[Move]:
        entries = list(goal.goal_scene or ())
        ordered = self._order_entries(entries)
        by_descriptor = {e.descriptor: e for e in entries}
        if any(self._by_descriptor(bodies, e.descriptor) is None for e in entries):
            logger.info("Oracle: a goal object is not in the graph, nothing left to do")
            return []
        reserved = [
            (e.target.x - self._by_descriptor(bodies, e.descriptor).half_width,
             e.target.x + self._by_descriptor(bodies, e.descriptor).half_width)
            for e in entries
        ]
        for entry in ordered:
            subject = self._by_descriptor(bodies, entry.descriptor)
            if self._satisfied(subject, entry.target):
                continue
            if subject.occluder_id is not None and subject.occluder_id in bodies:
                return [self._uncover(bodies, subject.occluder_id, reserved)]
            above = self._topmost_above(bodies, subject.object_id)
            if above is not None:
                return [self._relocate(bodies, above, by_descriptor, reserved)]
            support = set(d for d in entry.support if d != TABLE)
            ignore = {oid for oid, b in bodies.items() if b.descriptor in support}
            blockers = self._region_blockers(bodies, subject, entry.target, ignore)
            if blockers:
                return [self._relocate(bodies, blockers[0], by_descriptor, reserved)]
            return [self._goal_verb(bodies, entry, subject.object_id)]
        return []

    # ---------------------------------------------------------- instructions

    def restore_moves(self, g: Cstg, bodies: Dict[str, Body]) -> List[Move]:
        """Return every displaced node to its logged origin, lowest first"""
        origins = {oid: o for oid, o in causal_origins(g).items() if oid in bodies}
        if not origins:
            return []
        reserved = [
            (o.x - bodies[oid].half_width, o.x + bodies[oid].half_width) for oid, o in origins.items()
        ]
        for oid, body in bodies.items():
            cover = body.occluder_id if not body.is_visible else None
            cover = cover or self._enclosing(bodies, body)
            if cover is not None and cover in bodies:
                return [Move(cover, Verb.UNCOVER, origins.get(cover), SUBGOAL_RESTORED, note="uncover")]
        pending = sorted(
            (oid for oid, o in origins.items()
             if float(np.linalg.norm(bodies[oid].centroid - o.as_array())) > self.cfg.POSITION_TOLERANCE),
            key=lambda oid: (origins[oid].z, oid),
        )
        for oid in pending:
            above = self._topmost_above(bodies, oid)
            if above is not None:
                return [self._park(bodies, above, reserved)]
            return [Move(oid, Verb.PLACE_AT, origins[oid], SUBGOAL_RESTORED, note="restore")]
        return []

    def _enclosing(self, bodies: Dict[str, Body], inner: Body) -> Optional[str]:
        """Visible body whose box holds the whole box of inner in x and z (depth is flat in a front view)"""
        eps = self.cfg.RELATION_EPS
        for oid, b in bodies.items():
            if oid == inner.object_id or not b.is_visible:
                continue
            if all(b.lo[axis] - eps <= inner.lo[axis] and inner.hi[axis] <= b.hi[axis] + eps for axis in (0, 2)):
                return oid
        return None

    def hide_or_cover_moves(self, g: Cstg, bodies: Dict[str, Body], program: InstructionProgram) -> List[Move]:
        subject = self._by_descriptor(bodies, program.subject or "")
        cover = self._by_descriptor(bodies, program.cover or "")
        if subject is None or cover is None:
            logger.info("Oracle: instruction objects are not in the graph")
            return []
        if hidden_subgoal(subject.object_id) in completed_subgoals(g) or (
            not subject.is_visible and subject.occluder_id == cover.object_id
        ):
            return self.restore_moves(g, bodies)

        origins = causal_origins(g)
        reserved = [(o.x - bodies[oid].half_width, o.x + bodies[oid].half_width)
                    for oid, o in origins.items() if oid in bodies]
        if subject.occluder_id is not None and subject.occluder_id in bodies:
            return [self._uncover(bodies, subject.occluder_id, reserved)]
        above = self._topmost_above(bodies, subject.object_id)
        if above is not None:
            return [self._park(bodies, above, reserved)]
        if program.kind == InstructionKind.HIDE and not self._at_parking(subject):
            return [self._park(bodies, subject.object_id, reserved)]
        above_cover = self._topmost_above(bodies, cover.object_id)
        if above_cover is not None:
            return [self._park(bodies, above_cover, reserved)]
        return [Move(cover.object_id, Verb.COVER_WITH, subject.object_id, hidden_subgoal(subject.object_id))]

    def unstack_moves(self, g: Cstg, bodies: Dict[str, Body]) -> List[Move]:
        if SUBGOAL_UNSTACKED in completed_subgoals(g):
            return self.restore_moves(g, bodies)
        stacked = [
            b for b in bodies.values()
            if not on_table(b.token, self.cfg) and not self._supported_by(bodies, b.object_id)
        ]
        if not stacked:
            return self.restore_moves(g, bodies)
        top = max(stacked, key=lambda b: (b.centroid[2], b.object_id))
        origins = causal_origins(g)
        reserved = [(o.x - bodies[oid].half_width, o.x + bodies[oid].half_width)
                    for oid, o in origins.items() if oid in bodies]
        # The tower itself stays reserved for the restack
        reserved += [(b.lo[0], b.hi[0]) for b in stacked]
        return [self._park(bodies, top.object_id, reserved, SUBGOAL_UNSTACKED)]

    # -------------------------------------------------------------- directive

    def moves(self, g: Cstg, goal: GoalSpec, bodies: Dict[str, Body]) -> List[Move]:
        if goal.kind == GoalKind.GOAL_IMAGE:
            return self.goal_scene_moves(bodies, goal)
        program = parse_instruction(goal.instruction or "")
        if program is None:
            raise UnsatisfiableGoal(f"instruction outside the task grammar: {goal.instruction!r}")
        if program.kind == InstructionKind.UNSTACK:
            return self.unstack_moves(g, bodies)
        return self.hide_or_cover_moves(g, bodies, program)

    def _directive(self, move: Move) -> ActionDirective:
        return ActionDirective(
            verb=move.verb,
            subject_id=move.subject_id,
            target=move.target,
            subgoal=move.subgoal,
            subgoal_note=move.note,
        )

    def candidates(self, g: Cstg, goal: GoalSpec) -> List[ActionDirective]:
        """
        Ordered candidate directives for the current step

        Args:
            g: Current graph
            goal: Episode goal

        Returns:
            [primary directive], or [done] when nothing is left
        """
        bodies, held = self._views(g)
        pending = self.moves(g, goal, bodies)
        if held is not None:
            if pending and pending[0].subject_id == held:
                primary = self._directive(pending[0])
            else:
                pre_pick = Vec3.from_array(bodies[held].centroid)
                primary = ActionDirective(
                    verb=Verb.PLACE_AT, subject_id=held, target=pre_pick, subgoal_note="put back",
                )
            return [primary]
        if not pending:
            return [ActionDirective(verb=Verb.DONE, subgoal_note="goal reached")]
        return [ActionDirective(verb=Verb.PICK, subject_id=pending[0].subject_id, subgoal_note=pending[0].note)]


def oracle_candidates(g: Cstg, goal: GoalSpec, cfg: Optional[Settings] = None) -> List[ActionDirective]:
    return OraclePolicy(cfg).candidates(g, goal)


def oracle_directive(
    g: Cstg,
    goal: GoalSpec,
    rejected: Sequence[str] = (),
    cfg: Optional[Settings] = None,
) -> ActionDirective:
    """
    First oracle candidate not rejected earlier in this step

    Raises:
        NoCandidateLeft: every candidate failed verification in this step
    """
    for directive in oracle_candidates(g, goal, cfg):
        if directive.key() not in rejected:
            return directive
    raise NoCandidateLeft(f"every oracle candidate was rejected: {', '.join(rejected)}")
