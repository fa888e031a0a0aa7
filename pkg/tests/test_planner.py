"""
Planner: precondition verification, action instantiation, replanning loop, oracle policy
"""
import json

import pytest

from app.core.exceptions import (
    ConfigError,
    NoCandidateLeft,
    ReplanBudgetExhausted,
    UnknownObject,
    UnresolvedTarget,
    UnsatisfiableGoal,
)
from app.models.geometry import TOP_DOWN_QUATERNION, Vec3
from app.models.graph import Cstg, EventKind
from app.models.planning import ActionDirective, GoalKind, GoalSceneEntry, GoalSpec, Gripper, Verb
from app.services.oracle_policy import evaluate_subgoal, oracle_candidates, oracle_directive
from app.services.planner_service import (
    OracleBackend,
    ScriptedBackend,
    assemble_prompt,
    goal_text,
    instantiate_action,
    required_predicates,
    step_loop,
    verify_preconditions,
)
from app.services.scene_graph import completed_subgoals, held_object
from app.services.simulator import apply_action, instantiate, render

from conftest import CUP_HALF, graph_of, library_task, make_token, observe, settings_with, top_grasp


def _tower():
    """red cube resting on blue cube, blue cup parked to the right"""
    return graph_of([
        make_token("det-0", "red cube", (0.0, 0.0, 0.075)),
        make_token("det-1", "blue cube", (0.0, 0.0, 0.025)),
        make_token("det-2", "blue cup", (0.08, 0.0, 0.035), half=CUP_HALF),
    ])


def _row():
    return graph_of([
        make_token("det-0", "red cube", (0.1, 0.0, 0.025)),
        make_token("det-1", "blue cube", (0.0, 0.0, 0.025)),
        make_token("det-2", "blue cup", (0.08 + 0.1, 0.0, 0.035), half=CUP_HALF),
    ])


def _violated(report):
    return {v.predicate: v.explanation for v in report.violated}


@pytest.fixture
def stack3(cfg):
    task = library_task("stack-3")
    world = instantiate(task, 0, cfg)
    g = observe(world, Cstg.empty(cfg.CSTG_WINDOW_K), cfg)
    return task, render(world, cfg), g


# ── Verification ─────────────────────────────────────────────────────────

class TestVerify:

    def test_pick_of_clear_cube_passes(self, cfg):
        report = verify_preconditions(_tower(), ActionDirective(verb=Verb.PICK, subject_id="red-cube-0"), cfg)
        assert report.passed
        assert report.checked_against_step == 0

    def test_pick_under_another_cube_fails_clear_top(self, cfg):
        report = verify_preconditions(_tower(), ActionDirective(verb=Verb.PICK, subject_id="blue-cube-0"), cfg)
        assert not report.passed
        assert _violated(report) == {"clear_top(blue-cube-0)": "red-cube-0 rests on blue-cube-0"}

    def test_place_on_centred_target_is_stable(self, cfg):
        d = ActionDirective(verb=Verb.PLACE_ON, subject_id="red-cube-0", target="blue-cube-0")
        assert verify_preconditions(_row(), d, cfg).passed

    def test_place_at_outside_workspace(self, cfg):
        d = ActionDirective(verb=Verb.PLACE_AT, subject_id="red-cube-0", target=Vec3(x=0.5, y=0.0, z=0.025))
        violated = _violated(verify_preconditions(_row(), d, cfg))
        assert list(violated) == ["reachable(target)"]
        assert "outside the workspace" in violated["reachable(target)"]

    def test_place_at_in_mid_air_is_unstable(self, cfg):
        d = ActionDirective(verb=Verb.PLACE_AT, subject_id="red-cube-0", target=Vec3(x=-0.2, y=0.0, z=0.2))
        assert "stable_at(red-cube-0)" in _violated(verify_preconditions(_row(), d, cfg))

    def test_declared_predicates_are_checked_too(self, cfg):
        d = ActionDirective(
            verb=Verb.PICK, subject_id="red-cube-0",
            declared_preconditions=("levitating(red-cube-0)", "clear_top red-cube-0", "stable_on(red-cube-0)"),
        )
        violated = _violated(verify_preconditions(_row(), d, cfg))
        assert violated["levitating(red-cube-0)"] == "unknown predicate 'levitating'"
        assert violated["clear_top red-cube-0"].startswith("Malformed predicate")
        assert "takes 2 argument(s)" in violated["stable_on(red-cube-0)"]

    def test_required_predicates_are_not_duplicated(self, cfg):
        d = ActionDirective(verb=Verb.PICK, subject_id="red-cube-0", declared_preconditions=("exists(red-cube-0)",))
        assert required_predicates(d).count("exists(red-cube-0)") == 1
        assert verify_preconditions(_row(), d, cfg).passed

    def test_unknown_subject_raises(self, cfg):
        with pytest.raises(UnknownObject):
            verify_preconditions(_row(), ActionDirective(verb=Verb.PICK, subject_id="green-cube-0"), cfg)

    def test_occluded_subject_must_be_uncovered_first(self, cfg):
        g = graph_of(
            [make_token("det-0", "red cube", (0.0, 0.0, 0.025)),
             make_token("det-2", "blue cup", (0.08, 0.0, 0.035), half=CUP_HALF)],
            [make_token("det-2", "blue cup", (0.0, 0.0, 0.035), half=CUP_HALF)],
        )
        report = verify_preconditions(g, ActionDirective(verb=Verb.PICK, subject_id="red-cube-0"), cfg)
        assert "uncover first" in _violated(report)["visible(red-cube-0)"]


# ── Instantiation ────────────────────────────────────────────────────────

class TestInstantiate:

    def test_pick_grasps_above_the_top(self, cfg):
        action = instantiate_action(ActionDirective(verb=Verb.PICK, subject_id="red-cube-0"), _row(), cfg)
        assert action.grasp.position.as_tuple() == pytest.approx((0.1, 0.0, 0.05 + cfg.APPROACH_OFFSET))
        assert action.grasp.orientation == TOP_DOWN_QUATERNION
        assert action.release is None
        assert action.gripper == Gripper.CLOSE

    def test_place_on_releases_on_the_target_top(self, cfg):
        d = ActionDirective(verb=Verb.PLACE_ON, subject_id="red-cube-0", target="blue-cube-0")
        action = instantiate_action(d, _row(), cfg)
        assert action.release.position.as_tuple() == pytest.approx((0.0, 0.0, 0.075))
        assert action.gripper == Gripper.OPEN

    def test_place_at_releases_at_the_target(self, cfg):
        target = Vec3(x=-0.2, y=0.01, z=0.025)
        d = ActionDirective(verb=Verb.PLACE_AT, subject_id="red-cube-0", target=target)
        assert instantiate_action(d, _row(), cfg).release.position == target

    def test_cover_with_lowers_the_cup_to_the_covered_base(self, cfg):
        d = ActionDirective(verb=Verb.COVER_WITH, subject_id="blue-cup-0", target="red-cube-0")
        action = instantiate_action(d, _row(), cfg)
        assert action.release.position.as_tuple() == pytest.approx((0.1, 0.0, 0.035))

    def test_uncover_without_target_shifts_towards_the_centre(self, cfg):
        d = ActionDirective(verb=Verb.UNCOVER, subject_id="blue-cup-0")
        action = instantiate_action(d, _row(), cfg)
        assert action.release.position.as_tuple() == pytest.approx((0.08, 0.0, 0.035))

    def test_done_has_no_metric_action(self, cfg):
        with pytest.raises(UnresolvedTarget):
            instantiate_action(ActionDirective(verb=Verb.DONE), _row(), cfg)


# ── Step loop ────────────────────────────────────────────────────────────

class TestStepLoop:

    async def test_rejected_directive_is_replanned(self, cfg, stack3):
        task, obs, g = stack3
        backend = ScriptedBackend([
            ActionDirective(verb=Verb.PICK, subject_id="purple-cube-0"),
            ActionDirective(verb=Verb.PICK, subject_id="red-cube-0"),
        ])
        decision, g2 = await step_loop(g, obs, task.goal, backend, cfg=cfg)
        assert decision.directive.subject_id == "red-cube-0"
        assert decision.replans == 1
        assert decision.rejected == ["pick(purple-cube-0,)"]
        assert decision.action is not None
        violations = g2.log.of_kind(EventKind.PRECONDITION_VIOLATION)
        assert [e.detail for e in violations] == ["exists(purple-cube-0)"]

    async def test_budget_exhaustion_reports_attempts(self, cfg, stack3):
        task, obs, g = stack3
        backend = ScriptedBackend([ActionDirective(verb=Verb.PICK, subject_id="purple-cube-0")] * 5)
        with pytest.raises(ReplanBudgetExhausted) as info:
            await step_loop(g, obs, task.goal, backend, cfg=cfg)
        assert info.value.attempts == cfg.MAX_REPLANS + 1
        assert len(info.value.graph.log.of_kind(EventKind.PRECONDITION_VIOLATION)) == cfg.MAX_REPLANS + 1
        assert backend.remaining == 1

    async def test_exhausted_script_answers_done(self, cfg, stack3):
        task, obs, g = stack3
        decision, g2 = await step_loop(g, obs, task.goal, ScriptedBackend([]), cfg=cfg)
        assert decision.directive.verb == Verb.DONE
        assert decision.action is None
        assert decision.report.passed
        assert g2 is g

    async def test_oracle_out_of_candidates_exhausts_the_budget(self, stack3):
        cfg = settings_with(STABILITY_FRACTION=1.5)
        task, _, g = stack3
        world = instantiate(task, 0, cfg)
        world, _ = apply_action(world, top_grasp(world.obj("green_cube")), "green_cube", cfg)
        g = observe(world, g, cfg, executed=ActionDirective(verb=Verb.PICK, subject_id="green-cube-0"))
        with pytest.raises(ReplanBudgetExhausted) as info:
            await step_loop(g, render(world, cfg), task.goal, OracleBackend(cfg), cfg=cfg)
        assert info.value.attempts == 1
        assert "no directive left" in str(info.value)
        violations = info.value.graph.log.of_kind(EventKind.PRECONDITION_VIOLATION)
        assert [e.subject_id for e in violations] == ["green-cube-0"]


# ── Prompt assembly ──────────────────────────────────────────────────────

class TestPrompt:

    def test_labels_sit_at_mask_centroids(self, cfg, stack3):
        task, obs, g = stack3
        prompt = assemble_prompt(g, obs, task.goal, cfg)
        labels = dict(prompt.annotated_observation.labels)
        assert set(labels) == {n.object_id for n in g.visible_nodes()}
        for object_id, pixel in labels.items():
            assert pixel == obs.masks[g.node(object_id).last_known.provenance].centroid_pixel()

    def test_instruction_is_carried_verbatim(self, cfg):
        task = library_task("hide-restore")
        world = instantiate(task, 0, cfg)
        g = observe(world, Cstg.empty(cfg.CSTG_WINDOW_K), cfg)
        prompt = assemble_prompt(g, render(world, cfg), task.goal, cfg)
        assert task.goal.instruction in prompt.goal_text
        assert task.goal.instruction in prompt.render_text()

    def test_rendering_is_deterministic(self, cfg, stack3):
        task, obs, g = stack3
        first = assemble_prompt(g, obs, task.goal, cfg)
        second = assemble_prompt(g, obs, task.goal, cfg)
        assert first.render_text() == second.render_text()
        assert first.annotated_observation.labels == second.annotated_observation.labels



# ── Scripted backend files ───────────────────────────────────────────────

class TestScriptFile:

    def test_format_key_is_accepted(self, tmp_path):
        path = tmp_path / "script.json"
        path.write_text(json.dumps([
            {"format": "directive/1", "verb": "pick", "subject_id": "red-cube-0"},
            {"verb": "place_at", "subject_id": "red-cube-0", "target": {"x": 0.0, "y": 0.0, "z": 0.025}},
        ]), encoding="utf-8")
        backend = ScriptedBackend.from_file(path)
        assert backend.remaining == 2

    @pytest.mark.parametrize("content", [
        "not json",
        '{"verb": "pick"}',
        '[{"verb": "fly", "subject_id": "red-cube-0"}]',
        '[{"verb": "pick", "subject_id": "red-cube-0", "target": "blue-cube-0"}]',
    ])
    def test_bad_script_is_a_config_error(self, tmp_path, content):
        path = tmp_path / "script.json"
        path.write_text(content, encoding="utf-8")
        with pytest.raises(ConfigError):
            ScriptedBackend.from_file(path)


# ── Oracle ───────────────────────────────────────────────────────────────

class TestOracle:

    def test_stack_starts_with_the_middle_cube(self, cfg, stack3):
        task, _, g = stack3
        candidates = oracle_candidates(g, task.goal, cfg)
        assert [c.key() for c in candidates] == ["pick(green-cube-0,)"]

    def test_rejected_candidate_leaves_nothing_to_propose(self, cfg, stack3):
        task, _, g = stack3
        with pytest.raises(NoCandidateLeft):
            oracle_directive(g, task.goal, ["pick(green-cube-0,)"], cfg)

    def test_lifted_cup_is_carried_back_instead_of_picked_again(self, cfg):
        task = library_task("cover-top")
        world = instantiate(task, 0, cfg)
        cup_home = world.obj("blue_cup").center.copy()
        red_center = world.obj("red_cube").center.copy()

        def check(graph, subgoal):
            return evaluate_subgoal(graph, subgoal, cfg)

        g = observe(world, Cstg.empty(cfg.CSTG_WINDOW_K), cfg)
        pick = oracle_directive(g, task.goal, (), cfg)
        assert pick.key() == "pick(blue-cup-0,)"
        world, _ = apply_action(world, top_grasp(world.obj("blue_cup")), "blue_cup", cfg)
        g = observe(world, g, cfg, executed=pick, subgoal_check=check)

        cover = oracle_directive(g, task.goal, (), cfg)
        assert (cover.verb, cover.subject_id, cover.target) == (Verb.COVER_WITH, "blue-cup-0", "red-cube-0")
        world, _ = apply_action(world, top_grasp(world.obj("blue_cup"), tuple(red_center)), "blue_cup", cfg)
        g = observe(world, g, cfg, executed=cover, release=Vec3.from_array(red_center), subgoal_check=check)
        assert completed_subgoals(g) == ["hidden(red-cube-0)"]

        lift = oracle_directive(g, task.goal, (), cfg)
        assert lift.key() == "pick(blue-cup-0,)"
        world, _ = apply_action(world, top_grasp(world.obj("blue_cup")), "blue_cup", cfg)
        g = observe(world, g, cfg, executed=lift, subgoal_check=check)
        assert held_object(g) == "blue-cup-0"

        candidates = oracle_candidates(g, task.goal, cfg)
        assert len(candidates) == 1
        uncover = candidates[0]
        assert (uncover.verb, uncover.subject_id) == (Verb.UNCOVER, "blue-cup-0")
        assert uncover.target.x == pytest.approx(cup_home[0], abs=0.005)
        assert uncover.target.z == pytest.approx(cup_home[2], abs=0.005)

    def test_cyclic_goal_is_unsatisfiable(self, cfg, stack3):
        _, _, g = stack3
        goal = GoalSpec(kind=GoalKind.GOAL_IMAGE, goal_scene=(
            GoalSceneEntry(descriptor="red cube", target=Vec3(x=0.0, y=0.0, z=0.075), support=("green cube",)),
            GoalSceneEntry(descriptor="green cube", target=Vec3(x=0.0, y=0.0, z=0.125), support=("red cube",)),
        ))
        with pytest.raises(UnsatisfiableGoal):
            oracle_candidates(g, goal, cfg)

    def test_instruction_outside_grammar_is_unsatisfiable(self, cfg, stack3):
        _, _, g = stack3
        with pytest.raises(UnsatisfiableGoal):
            oracle_candidates(g, GoalSpec(kind=GoalKind.INSTRUCTION, instruction="juggle the cubes"), cfg)

    def test_goal_text_lists_targets(self, cfg, stack3):
        task, _, _ = stack3
        text = goal_text(task.goal)
        assert text.splitlines()[0] == "goal scene:"
        assert "- green cube at (-0.2000 0.0000 0.0750) on blue cube" in text
