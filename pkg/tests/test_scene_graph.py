"""
Causal scene graph: identity association, events, occlusion memory, snapshots
"""
import itertools
import json

import numpy as np
import pytest

from app.core.exceptions import StaleStep, UnknownObject
from app.models.geometry import Vec3
from app.models.graph import Cstg, EventKind, RelationTag, Visibility
from app.models.planning import ActionDirective, Verb
from app.models.world import ActionOutcome
from app.services.oracle_policy import evaluate_subgoal, hidden_subgoal
from app.services.scene_graph import (
    GRAPH_FORMAT,
    append_events,
    associate_identities,
    completed_subgoals,
    export_graph_json,
    graph_digest,
    held_object,
    last_known_pose,
    rebuild_stateless,
    relation_query,
    relation_tags,
    size_stats,
    spatial_context,
    update_graph,
)
from app.services.simulator import apply_action, instantiate

from conftest import CUP_HALF, graph_of, library_task, make_token, observe, top_grasp


def red(x=0.0, z=0.025, t=0):
    return make_token("det-0", "red cube", (x, 0.0, z), t=t)


def blue(x=0.0, z=0.025, t=0):
    return make_token("det-1", "blue cube", (x, 0.0, z), t=t)


def cup(x=0.08, t=0):
    return make_token("det-2", "blue cup", (x, 0.0, 0.035), half=CUP_HALF, t=t)


class TestUpdate:

    def test_first_step_creates_slugged_nodes(self):
        g = graph_of([red(), blue(x=0.1)])
        assert sorted(g.nodes) == ["blue-cube-0", "red-cube-0"]
        assert g.current_step == 0
        assert g.log.events == ()

    def test_stale_token_is_rejected(self):
        g = graph_of([red()])
        with pytest.raises(StaleStep):
            update_graph(g, [red(t=5)])

    def test_small_motion_keeps_identity_without_events(self):
        g = graph_of([red(), blue(x=0.1)], [red(x=0.005), blue(x=0.1)])
        assert sorted(g.nodes) == ["blue-cube-0", "red-cube-0"]
        assert g.log.events == ()

    def test_agent_move_is_planned_displacement(self):
        g = graph_of([red()])
        pick = ActionDirective(verb=Verb.PICK, subject_id="red-cube-0")
        g = update_graph(g, [red(z=0.075, t=1)], pick)
        kinds = [e.kind for e in g.log.events]
        assert kinds == [EventKind.PLANNED_DISPLACEMENT, EventKind.ACTION_EXECUTED]
        moved = g.log.events[0]
        assert moved.origin.z == pytest.approx(0.025)
        assert moved.cause.action_ref == pick.key()

    def test_unexplained_move_is_collision(self):
        g = graph_of([red(), blue(x=0.1)])
        pick = ActionDirective(verb=Verb.PICK, subject_id="red-cube-0")
        g = update_graph(g, [red(t=1), blue(x=0.15, t=1)], pick)
        collision = g.log.of_kind(EventKind.UNINTENDED_COLLISION)
        assert [e.subject_id for e in collision] == ["blue-cube-0"]

    def test_release_position_keeps_identity_past_the_gate(self):
        g = graph_of([red(x=-0.2), make_token("det-1", "red cube", (0.25, 0.0, 0.025))])
        place = ActionDirective(
            verb=Verb.PLACE_AT, subject_id="red-cube-0",
            target={"x": 0.0, "y": 0.0, "z": 0.025},
        )
        moved = [red(x=0.0, t=1), make_token("det-1", "red cube", (0.25, 0.0, 0.025), t=1)]
        g = update_graph(g, moved, place, release_position=place.target)
        assert g.node("red-cube-0").last_known.centroid.x == pytest.approx(0.0)
        assert g.node("red-cube-1").last_known.centroid.x == pytest.approx(0.25)

    def test_action_without_a_subject_node_logs_no_action_event(self):
        g = graph_of([red()])
        ghost = ActionDirective(verb=Verb.PICK, subject_id="ghost-0")
        g = update_graph(g, [red(t=1)], ghost)
        assert g.log.of_kind(EventKind.ACTION_EXECUTED) == []
        assert all(e.subject_id in g.nodes for e in g.log.events)

    def test_held_object_follows_the_last_pick(self):
        g = graph_of([red(), blue(x=0.1)])
        assert held_object(g) is None
        pick = ActionDirective(verb=Verb.PICK, subject_id="red-cube-0")
        g = update_graph(g, [red(z=0.075, t=1), blue(x=0.1, t=1)], pick)
        assert held_object(g) == "red-cube-0"
        place = ActionDirective(verb=Verb.PLACE_ON, subject_id="red-cube-0", target="blue-cube-0")
        g = update_graph(
            g, [red(x=0.1, z=0.075, t=2), blue(x=0.1, t=2)], place,
            release_position=Vec3(x=0.1, y=0.0, z=0.075),
        )
        assert held_object(g) is None

    def test_window_keeps_the_last_k_tokens(self):
        g = graph_of(*[[red()] for _ in range(6)], window_k=3)
        assert [tok.timestamp for tok in g.node("red-cube-0").window] == [3, 4, 5]


class TestOcclusion:

    def test_cover_occludes_and_completes_subgoal(self):
        g = graph_of([red(), cup()])
        cover = ActionDirective(
            verb=Verb.COVER_WITH, subject_id="blue-cup-0", target="red-cube-0",
            subgoal=hidden_subgoal("red-cube-0"),
        )
        g = update_graph(
            g, [cup(x=0.0, t=1)], cover,
            subgoal_check=lambda graph, subgoal: evaluate_subgoal(graph, subgoal),
        )
        node = g.node("red-cube-0")
        assert node.visibility == Visibility.OCCLUDED
        assert node.occluder_id == "blue-cup-0"
        start = g.log.of_kind(EventKind.OCCLUSION_START, "red-cube-0")
        assert start and start[0].related_id == "blue-cup-0"
        assert completed_subgoals(g) == ["hidden(red-cube-0)"]

    def test_last_known_pose_persists_while_occluded(self):
        steps = [[red(x=0.1), cup(x=0.1)]] + [[cup(x=0.1)] for _ in range(10)]
        g = graph_of(*steps)
        centroid, _, seen = last_known_pose(g, "red-cube-0")
        assert centroid.x == pytest.approx(0.1)
        assert seen == 0
        assert g.node("red-cube-0").window == ()
        assert g.node("red-cube-0").visibility == Visibility.OCCLUDED

    def test_reappearance_ends_occlusion_with_same_identity(self):
        g = graph_of([red(x=0.1), cup(x=0.1)], [cup(x=0.1)], [red(x=0.1), cup(x=0.15)])
        assert g.node("red-cube-0").is_visible
        assert len(g.log.of_kind(EventKind.OCCLUSION_END, "red-cube-0")) == 1
        assert "red-cube-1" not in g.nodes

    def test_blackout_frame_starts_one_occlusion_per_node(self):
        g = graph_of([red(), blue(x=0.1), cup(x=-0.1)], [])
        starts = g.log.of_kind(EventKind.OCCLUSION_START)
        assert sorted(e.subject_id for e in starts) == ["blue-cube-0", "blue-cup-0", "red-cube-0"]
        assert len(g.log.events) == 3
        assert all(node.visibility == Visibility.OCCLUDED for node in g.nodes.values())

    def test_covered_cube_keeps_its_simulated_pose(self, cfg):
        world = instantiate(library_task("cover-top"), 0, cfg)
        red_center = world.obj("red_cube").center.copy()
        g = observe(world, Cstg.empty(cfg.CSTG_WINDOW_K), cfg)

        world, outcome = apply_action(world, top_grasp(world.obj("blue_cup")), "blue_cup", cfg)
        assert outcome == ActionOutcome.OK
        g = observe(world, g, cfg, executed=ActionDirective(verb=Verb.PICK, subject_id="blue-cup-0"))

        cover = ActionDirective(verb=Verb.COVER_WITH, subject_id="blue-cup-0", target="red-cube-0")
        world, outcome = apply_action(world, top_grasp(world.obj("blue_cup"), tuple(red_center)), "blue_cup", cfg)
        assert world.contained == {"blue_cup": "red_cube"}
        g = observe(world, g, cfg, executed=cover, release=Vec3.from_array(red_center))
        for _ in range(10):
            g = observe(world, g, cfg)

        node = g.node("red-cube-0")
        assert node.visibility == Visibility.OCCLUDED
        assert node.occluder_id == "blue-cup-0"
        centroid, _, seen = last_known_pose(g, "red-cube-0")
        assert seen == 1
        assert g.current_step == 12
        assert np.linalg.norm(centroid.as_array() - red_center) <= 0.005

    def test_object_outside_workspace_is_removed(self):
        g = graph_of([red(x=0.5)], [])
        node = g.node("red-cube-0")
        assert node.visibility == Visibility.REMOVED
        assert node.occluder_id is None
        assert g.edges == ()

    def test_unknown_node_raises(self):
        with pytest.raises(UnknownObject):
            graph_of([red()]).node("green-cube-0")


class TestAssociation:

    def test_exact_tie_goes_to_lowest_token_id(self):
        g = graph_of([red()])
        incoming = [
            make_token("det-0", "red cube", (0.05, 0.0, 0.025), t=1),
            make_token("det-1", "red cube", (-0.05, 0.0, 0.025), t=1),
        ]
        association = associate_identities(g, incoming)
        assert association.assignment["det-0"] == "red-cube-0"
        assert association.assignment["det-1"] == "red-cube-1"
        assert association.new_objects == ("red-cube-1",)
        assert association.ambiguous

    def test_descriptors_never_cross(self):
        g = graph_of([red()])
        association = associate_identities(g, [blue(t=1)])
        assert association.assignment == {"det-1": "blue-cube-0"}

    def test_matches_exhaustive_minimum_cost(self):
        rng = np.random.default_rng(3)
        for _ in range(100):
            n = int(rng.integers(1, 7))
            before = rng.uniform(-0.025, 0.025, size=(n, 2))
            after = rng.uniform(-0.025, 0.025, size=(n, 2))
            g = graph_of([make_token(f"det-{i}", "red cube", (x, y, 0.025)) for i, (x, y) in enumerate(before)])
            tokens = [make_token(f"det-{i}", "red cube", (x, y, 0.025), t=1) for i, (x, y) in enumerate(after)]
            association = associate_identities(g, tokens)
            assert not association.new_objects

            nodes = {node_id: node.last_known.centroid.as_array() for node_id, node in g.nodes.items()}
            ids = sorted(nodes)

            def cost(pairs):
                return sum(float(np.linalg.norm(tok.centroid.as_array() - nodes[nid])) for tok, nid in pairs)

            chosen = cost((tok, association.assignment[tok.object_id]) for tok in tokens)
            best = min(cost(zip(tokens, (ids[p] for p in perm))) for perm in itertools.permutations(range(n)))
            assert chosen == pytest.approx(best, abs=1e-12)


class TestRelations:

    def test_stacked_cube_tags(self):
        g = graph_of([red(z=0.075), blue()])
        tags = relation_tags(g.node("red-cube-0").last_known, g.node("blue-cube-0").last_known)
        assert RelationTag.ABOVE in tags
        assert RelationTag.SUPPORTED_BY in tags
        assert RelationTag.NEAR in tags

    def test_query_is_oriented(self):
        g = graph_of([red(z=0.075), blue()])
        edge = relation_query(g, "red-cube-0", "blue-cube-0")
        assert edge.from_id == "red-cube-0"
        assert edge.offset.z == pytest.approx(-0.05)
        assert RelationTag.SUPPORTED_BY in edge.relation_tags
        reverse = relation_query(g, "blue-cube-0", "red-cube-0")
        assert RelationTag.SUPPORTING in reverse.relation_tags
        assert reverse.distance == pytest.approx(edge.distance)

    def test_one_edge_per_pair(self):
        g = graph_of([red(), blue(x=0.1), cup(x=0.2)])
        assert len(g.edges) == 3
        assert all(e.from_id < e.to_id for e in g.edges)


class TestSnapshots:

    def test_export_is_versioned_json(self):
        g = graph_of([red(), cup()], [cup(x=0.0)])
        data = json.loads(export_graph_json(g))
        assert data["format"] == GRAPH_FORMAT
        assert [n["object_id"] for n in data["nodes"]] == ["blue-cup-0", "red-cube-0"]
        assert data["current_step"] == 1

    def test_digest_and_context_are_deterministic(self):
        steps = ([red(), cup()], [cup(x=0.0)])
        first, second = graph_of(*steps), graph_of(*steps)
        assert graph_digest(first) == graph_digest(second)
        assert spatial_context(first) == spatial_context(second)
        assert "state: occluded by blue-cup-0" in spatial_context(first)

    def test_size_stats(self):
        g = graph_of([red(), blue(x=0.1)])
        assert size_stats(g) == {"nodes": 2, "window_tokens": 2, "edges": 1, "events": 0}


class TestStateless:

    def test_ids_are_step_prefixed_and_log_is_empty(self, cfg):
        tokens = [red(t=3), blue(x=0.1, t=3)]
        g = rebuild_stateless(tokens, 3, cfg)
        assert sorted(g.nodes) == ["t3-blue-cube-0", "t3-red-cube-0"]
        assert not g.memory_enabled
        assert g.log.events == ()

    def test_events_are_not_kept_without_memory(self, cfg):
        g = rebuild_stateless([red(t=0)], 0, cfg)
        full = graph_of([red()], [red(x=0.1)])
        assert append_events(g, full.log.events) is g

    def test_empty_graph(self):
        g = Cstg.empty()
        assert g.current_step == -1
        assert spatial_context(g).endswith("no objects")
