"""
Causal spatio-temporal scene graph service
Identity association, graph update, event detection, queries and snapshots
"""
import json
import logging
import re
from dataclasses import dataclass, field
from typing import Any, Callable, Dict, Iterable, List, Optional, Sequence, Tuple

import numpy as np
from scipy.optimize import linear_sum_assignment

from app.core.config import Settings, get_settings
from app.core.exceptions import StaleStep
from app.models.geometry import ShapeVector, Vec3
from app.models.graph import (
    CausalEvent,
    CauseKind,
    Cstg,
    EventCause,
    EventKind,
    MemoryLog,
    RelationTag,
    SceneEdge,
    SceneNode,
    Visibility,
    sorted_tags,
)
from app.models.planning import ActionDirective, Verb
from app.models.tokens import StfToken
from app.services.geometry import euclidean, inside_box, offset
from app.services.stf_encoder import format_number, serialize_token
from app.utils.hashing import canonical_json, sha256_hex

logger = logging.getLogger(__name__)

GRAPH_FORMAT = "cstg/1"

# Cost of a gated-out pairing; far above any admissible distance
_GATED = 1e6

SubgoalCheck = Callable[[Cstg, str], bool]


@dataclass(frozen=True)
class Association:
    """Token object_id -> node id, the node ids created, and recorded exact ties"""
    assignment: Dict[str, str] = field(default_factory=dict)
    new_objects: Tuple[str, ...] = ()
    ambiguous: Tuple[str, ...] = ()


def descriptor_slug(descriptor: str) -> str:
    return re.sub(r"[^a-z0-9]+", "-", descriptor.lower()).strip("-") or "object"


def _fresh_id(slug: str, taken: Iterable[str], prefix: str = "") -> str:
    used = set(taken)
    n = 0
    while f"{prefix}{slug}-{n}" in used:
        n += 1
    return f"{prefix}{slug}-{n}"


def _token_order(token: StfToken):
    return (token.centroid.as_tuple(), token.object_id)


def associate_identities(
    prev: Cstg,
    incoming: Sequence[StfToken],
    predicted: Optional[Dict[str, Vec3]] = None,
    cfg: Optional[Settings] = None,
) -> Association:
    """
    Match incoming tokens to existing nodes of the same descriptor

    Per descriptor, the assignment minimises total centroid distance among
    pairings within ASSOC_GATE. A node's distance to a token is taken from its
    last known centroid, or from its predicted position when one is given and
    closer (the release point of the object the agent just moved).

    Args:
        prev: Graph of the previous step
        incoming: Tokens of the current step
        predicted: Optional node id -> expected position
        cfg: Settings override

    Returns:
        Association
    """
    cfg = cfg or get_settings()
    predicted = predicted or {}
    assignment: Dict[str, str] = {}
    created: List[str] = []
    ambiguous: List[str] = []

    groups: Dict[str, List[StfToken]] = {}
    for token in incoming:
        groups.setdefault(token.descriptor, []).append(token)

    for descriptor in sorted(groups):
        tokens = sorted(groups[descriptor], key=_token_order)
        nodes = prev.nodes_by_descriptor(descriptor)
        matched_rows: Dict[int, int] = {}
        if nodes:
            cost = np.zeros((len(tokens), len(nodes)))
            for i, token in enumerate(tokens):
                for j, node in enumerate(nodes):
                    d = euclidean(token.centroid, node.last_known.centroid)
                    if node.object_id in predicted:
                        d = min(d, euclidean(token.centroid, predicted[node.object_id]))
                    cost[i, j] = d
            gated = np.where(cost > cfg.ASSOC_GATE, _GATED, cost)
            rows, cols = linear_sum_assignment(gated)
            matched_rows = {int(i): int(j) for i, j in zip(rows, cols) if cost[i, j] <= cfg.ASSOC_GATE}

            for i, j in sorted(matched_rows.items(), key=lambda kv: kv[1]):
                tied = [
                    k for k in range(len(tokens))
                    if k != i and k not in matched_rows and cost[k, j] == cost[i, j]
                ]
                if not tied:
                    continue
                winner = min([i] + tied, key=lambda k: tokens[k].object_id)
                note = f"{nodes[j].object_id}: " + ",".join(sorted(tokens[k].object_id for k in [i] + tied))
                ambiguous.append(note)
                logger.warning(f"Ambiguous association resolved by lowest id -> {note}")
                if winner != i:
                    del matched_rows[i]
                    matched_rows[winner] = j

        for i, token in enumerate(tokens):
            if i in matched_rows:
                assignment[token.object_id] = nodes[matched_rows[i]].object_id
            else:
                node_id = _fresh_id(descriptor_slug(descriptor), list(prev.nodes) + created)
                created.append(node_id)
                assignment[token.object_id] = node_id

    return Association(assignment=assignment, new_objects=tuple(created), ambiguous=tuple(ambiguous))


def _axis_pairs(a: ShapeVector, b: ShapeVector):
    return ((a.x, b.x), (a.y, b.y))


def rests_on(upper: StfToken, lower: StfToken, cfg: Optional[Settings] = None) -> bool:
    """
    Whether upper sits on lower's top face

    The vertical gap must lie in [0, SUPPORT_GAP_MAX]; horizontally the centroids
    may differ by up to the larger half extent plus RELATION_EPS on every axis
    where either object has a measurable extent.
    """
    cfg = cfg or get_settings()
    gap = upper.shape.z.min - lower.shape.z.max
    if gap < -1e-9 or gap > cfg.SUPPORT_GAP_MAX:
        return False
    centre_delta = (abs(upper.centroid.x - lower.centroid.x), abs(upper.centroid.y - lower.centroid.y))
    for (up, low), delta in zip(_axis_pairs(upper.shape, lower.shape), centre_delta):
        up_len, low_len = up.max - up.min, low.max - low.min
        if up_len < cfg.RELATION_EPS and low_len < cfg.RELATION_EPS:
            continue
        if delta > max(up_len, low_len) / 2.0 + cfg.RELATION_EPS:
            return False
    return True


def relation_tags(a: StfToken, b: StfToken, cfg: Optional[Settings] = None) -> Tuple[RelationTag, ...]:
    """Discrete relations of a with respect to b"""
    cfg = cfg or get_settings()
    eps = cfg.RELATION_EPS
    d = offset(a.centroid, b.centroid)
    tags = []
    if d.z < -eps:
        tags.append(RelationTag.ABOVE)
    elif d.z > eps:
        tags.append(RelationTag.BELOW)
    if d.x < -eps:
        tags.append(RelationTag.RIGHT_OF)
    elif d.x > eps:
        tags.append(RelationTag.LEFT_OF)
    if d.y < -eps:
        tags.append(RelationTag.BEHIND)
    elif d.y > eps:
        tags.append(RelationTag.IN_FRONT)
    if euclidean(a.centroid, b.centroid) < cfg.NEAR_DISTANCE:
        tags.append(RelationTag.NEAR)
    if rests_on(a, b, cfg):
        tags.append(RelationTag.SUPPORTED_BY)
    if rests_on(b, a, cfg):
        tags.append(RelationTag.SUPPORTING)
    return sorted_tags(tags)


def build_edge(a: SceneNode, b: SceneNode, cfg: Optional[Settings] = None) -> SceneEdge:
    ca, cb = a.last_known.centroid, b.last_known.centroid
    return SceneEdge(
        from_id=a.object_id,
        to_id=b.object_id,
        distance=euclidean(ca, cb),
        offset=offset(ca, cb),
        relation_tags=relation_tags(a.last_known, b.last_known, cfg),
    )


def build_edges(nodes: Dict[str, SceneNode], cfg: Optional[Settings] = None) -> Tuple[SceneEdge, ...]:
    """One edge per unordered pair of non-removed nodes, from the lower id"""
    live = [n for _, n in sorted(nodes.items()) if n.visibility != Visibility.REMOVED]
    return tuple(
        build_edge(live[i], live[j], cfg)
        for i in range(len(live))
        for j in range(i + 1, len(live))
    )


def _infer_occluder(token: StfToken, visible: List[SceneNode], expansion: float) -> Optional[str]:
    """Visible node whose expanded box contains the last known centroid, nearest first"""
    c = token.centroid.as_array()
    hits = []
    for node in visible:
        shape = node.last_known.shape
        if inside_box(c, shape.box_min() - expansion, shape.box_max() + expansion):
            hits.append((euclidean(token.centroid, node.last_known.centroid), node.object_id))
    return min(hits)[1] if hits else None


def _workspace_contains(point: Vec3, cfg: Settings) -> bool:
    return inside_box(point.as_tuple(), cfg.WORKSPACE_MIN, cfg.WORKSPACE_MAX)


def _action_cause(executed_action: Optional[ActionDirective]) -> EventCause:
    if executed_action is None:
        return EventCause(kind=CauseKind.EXTERNAL)
    return EventCause(kind=CauseKind.AGENT_ACTION, action_ref=executed_action.key())


def detect_events(
    prev: Cstg,
    next_nodes: Dict[str, SceneNode],
    executed_action: Optional[ActionDirective] = None,
    *,
    step: Optional[int] = None,
    edges: Tuple[SceneEdge, ...] = (),
    subgoal_check: Optional[SubgoalCheck] = None,
    cfg: Optional[Settings] = None,
) -> List[CausalEvent]:
    """
    Compare the previous and next node states and emit causal events

    Args:
        prev: Graph of the previous step
        next_nodes: Node states of the current step
        executed_action: Directive executed between the two observations
        step: Current step (prev.current_step + 1 when omitted)
        edges: Edges of the current step, used for subgoal checks
        subgoal_check: Predicate deciding whether a named subgoal holds
        cfg: Settings override

    Returns:
        Events in emission order, with consecutive ids following the log
    """
    cfg = cfg or get_settings()
    t = prev.current_step + 1 if step is None else step
    drafts: List[Dict[str, Any]] = []

    for node_id in sorted(next_nodes):
        node = next_nodes[node_id]
        old = prev.nodes.get(node_id)
        if old is None:
            continue
        here = node.last_known.centroid
        if node.is_visible:
            if not old.is_visible:
                drafts.append(dict(
                    kind=EventKind.OCCLUSION_END, subject_id=node_id, location=here,
                    cause=_action_cause(executed_action), detail="re-observed",
                ))
            moved = euclidean(old.last_known.centroid, here)
            if moved > cfg.EVENT_MOVE_EPS:
                planned = executed_action is not None and executed_action.subject_id == node_id
                drafts.append(dict(
                    kind=EventKind.PLANNED_DISPLACEMENT if planned else EventKind.UNINTENDED_COLLISION,
                    subject_id=node_id,
                    location=here,
                    cause=_action_cause(executed_action),
                    detail=f"moved {format_number(moved, 4)} m",
                    origin=old.last_known.centroid,
                ))
        elif old.is_visible:
            if node.visibility == Visibility.REMOVED:
                drafts.append(dict(
                    kind=EventKind.OCCLUSION_START, subject_id=node_id, location=here,
                    cause=EventCause(kind=CauseKind.UNKNOWN), detail="left the workspace",
                ))
            elif node.occluder_id is not None:
                drafts.append(dict(
                    kind=EventKind.OCCLUSION_START, subject_id=node_id, location=here,
                    cause=_action_cause(executed_action), detail=f"occluded by {node.occluder_id}",
                    related_id=node.occluder_id,
                ))
            else:
                drafts.append(dict(
                    kind=EventKind.OCCLUSION_START, subject_id=node_id, location=here,
                    cause=EventCause(kind=CauseKind.UNKNOWN), detail="lost from view",
                ))

    subject_node = next_nodes.get(executed_action.subject_id or "") if executed_action is not None else None
    if subject_node is None and executed_action is not None:
        logger.warning(f"Step {t}: {executed_action.key()} has no subject node, action event skipped")
    if subject_node is not None:
        subject = subject_node.object_id
        location = subject_node.last_known.centroid
        drafts.append(dict(
            kind=EventKind.ACTION_EXECUTED, subject_id=subject, location=location,
            cause=_action_cause(executed_action), detail=executed_action.key(),
        ))
        subgoal = executed_action.subgoal
        if subgoal and subgoal_check is not None and subgoal not in completed_subgoals(prev):
            candidate = Cstg(nodes=next_nodes, edges=edges, log=prev.log, current_step=t)
            if subgoal_check(candidate, subgoal):
                drafts.append(dict(
                    kind=EventKind.SUBTASK_COMPLETED, subject_id=subject, location=location,
                    cause=_action_cause(executed_action), detail=subgoal,
                ))

    return [
        CausalEvent(event_id=prev.log.next_event_id(i), timestamp=t, **draft)
        for i, draft in enumerate(drafts)
    ]


def completed_subgoals(g: Cstg) -> List[str]:
    return [e.detail for e in g.log.of_kind(EventKind.SUBTASK_COMPLETED)]


def held_object(g: Cstg) -> Optional[str]:
    """Node picked by the last executed directive, still in the gripper until a placing directive runs"""
    executed = g.log.of_kind(EventKind.ACTION_EXECUTED)
    if not executed or not executed[-1].detail.startswith(f"{Verb.PICK.value}("):
        return None
    node = g.nodes.get(executed[-1].subject_id)
    if node is None or node.visibility == Visibility.REMOVED:
        return None
    return node.object_id


def update_graph(
    prev: Cstg,
    incoming: Sequence[StfToken],
    executed_action: Optional[ActionDirective] = None,
    *,
    release_position: Optional[Vec3] = None,
    subgoal_check: Optional[SubgoalCheck] = None,
    cfg: Optional[Settings] = None,
) -> Cstg:
    """
    Merge the tokens of the next step into the graph

    Args:
        prev: Graph of the previous step
        incoming: Tokens stamped prev.current_step + 1
        executed_action: Directive executed since the previous observation
        release_position: Where that directive released its subject
        subgoal_check: Predicate for the directive's named subgoal
        cfg: Settings override

    Returns:
        New graph at step prev.current_step + 1
    """
    cfg = cfg or get_settings()
    t = prev.current_step + 1
    for token in incoming:
        if token.timestamp != t:
            raise StaleStep(f"token {token.object_id} stamped {token.timestamp}, graph expects {t}")

    predicted: Dict[str, Vec3] = {}
    if executed_action is not None and release_position is not None and executed_action.subject_id:
        predicted[executed_action.subject_id] = release_position
    association = associate_identities(prev, incoming, predicted, cfg)
    matched = {association.assignment[tok.object_id]: tok.relabeled(association.assignment[tok.object_id])
               for tok in incoming}
    horizon = t - prev.window_k

    nodes: Dict[str, SceneNode] = {}
    for node_id, token in matched.items():
        old = prev.nodes.get(node_id)
        kept = tuple(tok for tok in old.window if tok.timestamp > horizon) if old else ()
        nodes[node_id] = SceneNode(
            object_id=node_id,
            descriptor=token.descriptor,
            window=kept + (token,),
            last_known=token,
        )

    visible = [nodes[k] for k in sorted(nodes)]
    for node_id, old in sorted(prev.nodes.items()):
        if node_id in nodes:
            continue
        window = tuple(tok for tok in old.window if tok.timestamp > horizon)
        if not _workspace_contains(old.last_known.centroid, cfg):
            nodes[node_id] = old.model_copy(update={
                "window": window, "visibility": Visibility.REMOVED, "occluder_id": None,
            })
            continue
        occluder = _infer_occluder(old.last_known, visible, cfg.OCCLUDER_EXPANSION)
        nodes[node_id] = old.model_copy(update={
            "window": window, "visibility": Visibility.OCCLUDED, "occluder_id": occluder,
        })

    nodes = dict(sorted(nodes.items()))
    edges = build_edges(nodes, cfg)
    events = detect_events(
        prev, nodes, executed_action, step=t, edges=edges, subgoal_check=subgoal_check, cfg=cfg,
    )
    logger.debug(f"Graph step {t}: {len(nodes)} nodes, {len(edges)} edges, {len(events)} events")
    return Cstg(
        nodes=nodes,
        edges=edges,
        log=prev.log.appended(events),
        current_step=t,
        memory_enabled=prev.memory_enabled,
    )


def rebuild_stateless(tokens: Sequence[StfToken], step: int, cfg: Optional[Settings] = None) -> Cstg:
    """
    Graph of a single observation with no log and fresh step-prefixed ids

    Args:
        tokens: Tokens stamped step
        step: Current step
        cfg: Settings override

    Returns:
        Cstg with memory disabled
    """
    cfg = cfg or get_settings()
    nodes: Dict[str, SceneNode] = {}
    for token in sorted(tokens, key=lambda tok: (tok.descriptor, tok.centroid.as_tuple(), tok.object_id)):
        if token.timestamp != step:
            raise StaleStep(f"token {token.object_id} stamped {token.timestamp}, expected {step}")
        node_id = _fresh_id(descriptor_slug(token.descriptor), nodes, prefix=f"t{step}-")
        relabeled = token.relabeled(node_id)
        nodes[node_id] = SceneNode(
            object_id=node_id, descriptor=token.descriptor, window=(relabeled,), last_known=relabeled,
        )
    nodes = dict(sorted(nodes.items()))
    return Cstg(
        nodes=nodes,
        edges=build_edges(nodes, cfg),
        log=MemoryLog(horizon=cfg.CSTG_WINDOW_K),
        current_step=step,
        memory_enabled=False,
    )


def append_events(g: Cstg, events: Sequence[CausalEvent]) -> Cstg:
    """New graph with events appended to the log; a memoryless graph keeps no log"""
    if not g.memory_enabled or not events:
        return g
    return g.model_copy(update={"log": g.log.appended(events)})


def last_known_pose(g: Cstg, object_id: str) -> Tuple[Vec3, ShapeVector, int]:
    token = g.node(object_id).last_known
    return token.centroid, token.shape, token.timestamp


def relation_query(g: Cstg, from_id: str, to_id: str, cfg: Optional[Settings] = None) -> SceneEdge:
    """Edge oriented from from_id to to_id"""
    a, b = g.node(from_id), g.node(to_id)
    for edge in g.edges:
        if edge.from_id == from_id and edge.to_id == to_id:
            return edge
        if edge.from_id == to_id and edge.to_id == from_id:
            return edge.reversed()
    # Removed nodes have no stored edge
    return build_edge(a, b, cfg)


def format_event_line(event: CausalEvent, precision: int = 4) -> str:
    loc = " ".join(format_number(v, precision) for v in event.location.as_tuple())
    cause = event.cause.kind.value
    if event.cause.action_ref:
        cause += f"({event.cause.action_ref})"
    line = f"[{event.event_id}] t={event.timestamp} {event.kind.value} {event.subject_id} at ({loc}) cause={cause}"
    if event.related_id:
        line += f" related={event.related_id}"
    if event.origin is not None:
        line += " from=(" + " ".join(format_number(v, precision) for v in event.origin.as_tuple()) + ")"
    if event.detail:
        line += f" | {event.detail}"
    return line


def format_events(events: Iterable[CausalEvent], precision: int = 4) -> str:
    lines = [format_event_line(e, precision) for e in events]
    return "\n".join(lines) if lines else "none"


def spatial_context(g: Cstg, include_events: bool = True, cfg: Optional[Settings] = None) -> str:
    """
    Deterministic text rendering of nodes, relations and recent events

    Args:
        g: Graph to render
        include_events: Append the last CONTEXT_EVENT_LINES log events
        cfg: Settings override

    Returns:
        Text block
    """
    cfg = cfg or get_settings()
    precision = cfg.STF_SERIAL_PRECISION
    lines = [f"# {GRAPH_FORMAT} step={g.current_step}"]
    if not g.nodes:
        lines.append("no objects")
        return "\n".join(lines)

    lines.append("## objects")
    for node_id, node in sorted(g.nodes.items()):
        lines.append(serialize_token(node.last_known, precision))
        state = f"state: {node.visibility.value}"
        if node.occluder_id:
            state += f" by {node.occluder_id}"
        if not node.is_visible:
            state += f" last_seen={node.last_known.timestamp}"
        lines.append(state)

    lines.append("## relations")
    if not g.edges:
        lines.append("none")
    for edge in g.edges:
        off = " ".join(format_number(v, precision) for v in edge.offset.as_tuple())
        tags = ",".join(t.value for t in edge.relation_tags) or "-"
        lines.append(
            f"{edge.from_id} -> {edge.to_id}: distance={format_number(edge.distance, precision)} "
            f"offset=({off}) tags={tags}"
        )

    if include_events:
        lines.append("## events")
        lines.append(format_events(g.log.recent(cfg.CONTEXT_EVENT_LINES), precision))
    return "\n".join(lines)


def snapshot(g: Cstg) -> Dict[str, Any]:
    """Versioned "cstg/1" document of the full graph state"""
    return {
        "format": GRAPH_FORMAT,
        "current_step": g.current_step,
        "memory_enabled": g.memory_enabled,
        "window_k": g.window_k,
        "nodes": [node.model_dump(mode="json") for _, node in sorted(g.nodes.items())],
        "edges": [edge.model_dump(mode="json") for edge in g.edges],
        "events": [event.model_dump(mode="json") for event in g.log.events],
    }


def export_graph_json(g: Cstg) -> str:
    return json.dumps(snapshot(g), indent=2, sort_keys=True)


def graph_digest(g: Cstg) -> str:
    return sha256_hex(canonical_json(snapshot(g)))


def size_stats(g: Cstg) -> Dict[str, int]:
    return {
        "nodes": len(g.nodes),
        "window_tokens": sum(len(n.window) for n in g.nodes.values()),
        "edges": len(g.edges),
        "events": len(g.log.events),
    }
