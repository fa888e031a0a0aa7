"""
Episode runner
Closes the perceive -> tokens -> graph -> plan -> verify -> instantiate -> apply loop,
records every step, runs suites and replays records
"""
import asyncio
import logging
import time
from pathlib import Path
from typing import Any, Dict, Iterator, List, Optional, Sequence, Tuple

import httpx

from app.core.config import Settings, get_settings
from app.core.exceptions import (
    ConfigError,
    DimensionMismatch,
    EmptyRegion,
    ReplanBudgetExhausted,
    ReplayDivergence,
    RoboStreamError,
    StaleStep,
    UnknownObject,
)
from app.models.graph import CausalEvent, Cstg
from app.models.planning import ActionDirective, Verb
from app.models.records import (
    EpisodeRecord,
    EpisodeSummary,
    FailureBucket,
    RunConfig,
    StepRecord,
    SuiteReport,
    config_hash,
    settings_snapshot,
)
from app.models.tokens import StfToken
from app.models.world import ActionOutcome, Observation, TaskSpec, WorldState
from app.services.oracle_policy import evaluate_subgoal
from app.services.planner_service import assemble_prompt, build_backend, step_loop
from app.services.report_service import build_report, write_report
from app.services.scene_graph import append_events, graph_digest, rebuild_stateless, update_graph
from app.services.simulator import apply_action, evaluate_task, instantiate, render
from app.services.stf_encoder import build_token, patch_feature_grid
from app.services.task_library import load_task, resolve_task_path
from app.utils.hashing import canonical_json, digest_arrays, read_jsonl, sha256_hex, write_jsonl

logger = logging.getLogger(__name__)

OUTCOME_BUCKETS: Dict[ActionOutcome, FailureBucket] = {
    ActionOutcome.GRASP_MISS: FailureBucket.GRASP,
    ActionOutcome.TOPPLED: FailureBucket.PLACEMENT,
    ActionOutcome.HAND_FULL: FailureBucket.MOTION,
    ActionOutcome.UNREACHABLE: FailureBucket.MOTION,
}


def failure_bucket(error: BaseException) -> FailureBucket:
    """Taxonomy bucket of an error that ended an episode"""
    if isinstance(error, (DimensionMismatch, EmptyRegion, StaleStep)):
        return FailureBucket.PARSING
    if isinstance(error, UnknownObject):
        return FailureBucket.MOTION
    return FailureBucket.PLANNING


class SafetyGateViolation(AssertionError):
    """An action was about to be executed from a failed verification report"""


def perceive(
    w: WorldState,
    t: int,
    cfg: Optional[Settings] = None,
    degrade_geometry: bool = False,
) -> Tuple[Observation, List[StfToken]]:
    """
    Render the world and encode one token per observed instance mask

    Args:
        w: World state
        t: Step index stamped on the tokens
        cfg: Settings override
        degrade_geometry: Build tokens with the 2D-box geometry of the "w/o STF" arm

    Returns:
        (observation, tokens with temporary det-<i> ids and the mask key as provenance)
    """
    cfg = cfg or get_settings()
    obs = render(w, cfg)
    return obs, encode_tokens(obs, t, cfg, degrade_geometry)


def encode_tokens(
    obs: Observation,
    t: int,
    cfg: Optional[Settings] = None,
    degrade_geometry: bool = False,
) -> List[StfToken]:
    """Tokens of every non-empty mask of the frame, in mask-key order"""
    cfg = cfg or get_settings()
    grid = patch_feature_grid(obs.rgb, cfg.STF_GRID_N)
    tokens = []
    for i, key in enumerate(sorted(obs.masks)):
        try:
            tokens.append(build_token(
                f"det-{i}", obs.descriptors[key], obs.masks[key], obs.depth, obs.cam, grid, t, cfg,
                degrade_geometry=degrade_geometry, provenance=key,
            ))
        except EmptyRegion:
            continue
    return tokens


def prompt_digest(system_preamble: str, text: str) -> str:
    return sha256_hex(system_preamble + "\n" + text)


class EpisodeRunner:
    """Runs one episode of a task under a run configuration"""

    def __init__(
        self,
        config: RunConfig,
        cfg: Optional[Settings] = None,
        client: Optional[httpx.AsyncClient] = None,
    ):
        self.config = config.check()
        self.cfg = config.effective_settings(cfg or get_settings())
        self.client = client
        self.snapshot = settings_snapshot(self.cfg)
        self.config_hash = config_hash(config, self.snapshot)

    def _subgoal_check(self, g: Cstg, subgoal: str) -> bool:
        return evaluate_subgoal(g, subgoal, self.cfg)

    def _advance_graph(
        self,
        g: Cstg,
        tokens: Sequence[StfToken],
        t: int,
        executed: Optional[ActionDirective],
        release,
    ) -> Cstg:
        if self.config.ablation.disable_cstg_memory:
            return rebuild_stateless(tokens, t, self.cfg)
        return update_graph(
            g, tokens, executed, release_position=release, subgoal_check=self._subgoal_check, cfg=self.cfg,
        )

    async def run(self, task: TaskSpec, seed: int) -> EpisodeRecord:
        """
        Run the closed loop until done, horizon or failure

        Args:
            task: Task description
            seed: Episode seed

        Returns:
            EpisodeRecord (always, failures included)
        """
        cfg = self.cfg
        ablation = self.config.ablation
        backend = build_backend(self.config.backend, self.config.script_file, cfg, self.client)
        world = instantiate(task, seed, cfg)
        initial = world
        g = Cstg.empty(cfg.CSTG_WINDOW_K, memory_enabled=not ablation.disable_cstg_memory)
        executed: Optional[ActionDirective] = None
        release = None
        steps: List[StepRecord] = []
        summary: Optional[EpisodeSummary] = None
        logger.info(f"▶️ Episode {task.name} seed={seed} arm={ablation.arm} backend={self.config.backend.value}")

        for t in range(task.horizon):
            data: Dict[str, Any] = {"step": t}
            timings: Dict[str, float] = {}
            try:
                started = time.perf_counter()
                obs = render(world, cfg)
                timings["render"] = time.perf_counter() - started
                data["observation_digest"] = digest_arrays(obs.rgb, obs.depth.depth)

                started = time.perf_counter()
                tokens = encode_tokens(obs, t, cfg, degrade_geometry=ablation.disable_stf_geometry)
                timings["tokens"] = time.perf_counter() - started
                data["tokens"] = tuple(tokens)
                if not tokens:
                    raise EmptyRegion(f"no object was detected at step {t}")

                started = time.perf_counter()
                before = len(g.log.events)
                g = self._advance_graph(g, tokens, t, executed, release)
                timings["graph"] = time.perf_counter() - started
                data["graph_events"] = g.log.events[before:]
                data["graph_digest"] = graph_digest(g)

                started = time.perf_counter()
                prompt = assemble_prompt(g, obs, task.goal, cfg)
                timings["prompt"] = time.perf_counter() - started
                data["prompt_hash"] = prompt_digest(prompt.system_preamble, prompt.render_text())

                started = time.perf_counter()
                logged = len(g.log.events)
                try:
                    decision, g = await step_loop(g, obs, task.goal, backend, prompt, cfg)
                except ReplanBudgetExhausted as e:
                    if isinstance(e.graph, Cstg):
                        data["violations"] = e.graph.log.events[logged:]
                        data["final_graph_digest"] = graph_digest(e.graph)
                    raise
                finally:
                    timings["plan"] = time.perf_counter() - started
                data["violations"] = g.log.events[logged:]
                data["final_graph_digest"] = graph_digest(g)
                data["directive"] = decision.directive
                data["report"] = decision.report
                data["replans"] = decision.replans

                if decision.directive.verb == Verb.DONE:
                    success, reason = evaluate_task(world, task, cfg, initial)
                    summary = EpisodeSummary(
                        success=success,
                        steps=t + 1,
                        failure_bucket=None if success else FailureBucket.PLANNING,
                        failure_cause=None if success else f"done before the goal held: {reason}",
                    )
                    steps.append(StepRecord(**data, timings=timings))
                    break

                if not decision.report.passed or decision.action is None:
                    raise SafetyGateViolation(f"step {t}: action without a passing verification report")
                data["action"] = decision.action
                subject_sim_id = g.node(decision.directive.subject_id).last_known.provenance
                data["subject_sim_id"] = subject_sim_id

                started = time.perf_counter()
                world, outcome = apply_action(world, decision.action, subject_sim_id, cfg)
                timings["apply"] = time.perf_counter() - started
                data["outcome"] = outcome.value
                steps.append(StepRecord(**data, timings=timings))
                logger.info(f"[STEP {t}] {decision.directive.key()} -> {outcome.value}")

                if outcome != ActionOutcome.OK:
                    summary = EpisodeSummary(
                        success=False,
                        steps=t + 1,
                        failure_bucket=OUTCOME_BUCKETS[outcome],
                        failure_cause=f"{decision.directive.key()} ended with {outcome.value}",
                    )
                    break
                executed = decision.directive
                release = decision.action.release.position if decision.action.release else None

            except SafetyGateViolation:
                raise
            except RoboStreamError as e:
                bucket = failure_bucket(e)
                logger.warning(f"Episode {task.name} seed={seed} failed at step {t} ({bucket.value}): {e}")
                steps.append(StepRecord(**data, timings=timings))
                summary = EpisodeSummary(
                    success=False, steps=t + 1, failure_bucket=bucket, failure_cause=f"{type(e).__name__}: {e}",
                )
                break

        if summary is None:
            summary = EpisodeSummary(
                success=False,
                steps=len(steps),
                failure_bucket=FailureBucket.PLANNING,
                failure_cause=f"horizon of {task.horizon} steps reached",
            )
        record = EpisodeRecord(
            task=task.name,
            seed=seed,
            config=self.config,
            settings=self.snapshot,
            config_hash=self.config_hash,
            steps=tuple(steps),
            summary=summary,
        )
        status = "✅" if summary.success else "❌"
        logger.info(f"{status} Episode {task.name} seed={seed} arm={ablation.arm}: {summary.steps} steps")
        return record


async def run_episode(
    config: RunConfig,
    task: TaskSpec,
    seed: int,
    cfg: Optional[Settings] = None,
    client: Optional[httpx.AsyncClient] = None,
) -> EpisodeRecord:
    return await EpisodeRunner(config, cfg, client).run(task, seed)


def record_path(out_dir: Path, record: EpisodeRecord) -> Path:
    return Path(out_dir) / record.task / record.arm / f"seed-{record.seed}.jsonl"


def write_record(record: EpisodeRecord, out_dir: Path) -> Path:
    return write_jsonl(record_path(out_dir, record), record.to_lines())


def load_record(path: Path) -> EpisodeRecord:
    try:
        return EpisodeRecord.from_rows(read_jsonl(path))
    except (OSError, ValueError) as e:
        raise ConfigError(f"cannot read episode record {path}: {e}") from e


def load_records(out_dir: Path) -> List[EpisodeRecord]:
    """Every episode record below out_dir, in path order"""
    return [load_record(p) for p in sorted(Path(out_dir).glob("*/*/seed-*.jsonl"))]


async def run_suite(
    config: RunConfig,
    cfg: Optional[Settings] = None,
    client: Optional[httpx.AsyncClient] = None,
) -> Tuple[List[EpisodeRecord], SuiteReport]:
    """
    Run every (task, seed) pair of the configuration on a bounded worker pool

    Args:
        config: Tasks, seeds, backend and ablation
        cfg: Settings override
        client: HTTP client shared by remote backends

    Returns:
        (records in (task, seed) order, suite report)
    """
    base = config.effective_settings(cfg or get_settings())
    tasks = [load_task(resolve_task_path(name, base), base) for name in config.task_files]
    if not tasks:
        raise ConfigError("no task given")
    out_dir = Path(base.OUTPUT_DIR)
    semaphore = asyncio.Semaphore(max(1, base.SUITE_WORKERS))

    async def one(task: TaskSpec, seed: int) -> EpisodeRecord:
        async with semaphore:
            record = await run_episode(config, task, seed, cfg, client)
            write_record(record, out_dir)
            return record

    logger.info(f"🚀 Running {len(tasks)} task(s) x {len(config.seeds)} seed(s), arm={config.ablation.arm}")
    records = list(await asyncio.gather(*(one(task, seed) for task in tasks for seed in config.seeds)))
    report = build_report(records)
    write_report(report, out_dir)
    logger.info(f"📊 Suite finished: {sum(r.summary.success for r in records)}/{len(records)} episodes succeeded")
    return records, report


def check_safety_gate(record: EpisodeRecord) -> None:
    """Every recorded action comes from a passing verification report"""
    for step in record.steps:
        if step.action is not None and (step.report is None or not step.report.passed):
            raise SafetyGateViolation(f"step {step.step} executed an action from a failed report")


def _events_json(events: Sequence[CausalEvent]) -> str:
    return canonical_json([e.model_dump(mode="json") for e in events])


def replayed_graphs(record: EpisodeRecord) -> Iterator[Tuple[int, Cstg]]:
    """
    Re-run the graph updates over the recorded token stream

    Args:
        record: Episode record to verify

    Yields:
        (step, graph after that step's verification events)

    Raises:
        ReplayDivergence: at the first step whose events or digests differ
    """
    cfg = Settings(**record.settings)
    ablation = record.config.ablation
    g = Cstg.empty(cfg.CSTG_WINDOW_K, memory_enabled=not ablation.disable_cstg_memory)
    executed: Optional[ActionDirective] = None
    release = None

    def subgoal_check(graph: Cstg, subgoal: str) -> bool:
        return evaluate_subgoal(graph, subgoal, cfg)

    for step in record.steps:
        if step.graph_digest is None:
            break
        try:
            before = len(g.log.events)
            if ablation.disable_cstg_memory:
                g = rebuild_stateless(step.tokens, step.step, cfg)
            else:
                g = update_graph(
                    g, step.tokens, executed, release_position=release, subgoal_check=subgoal_check, cfg=cfg,
                )
        except RoboStreamError as e:
            raise ReplayDivergence(step.step, f"graph update failed: {e}") from e
        if _events_json(g.log.events[before:]) != _events_json(step.graph_events):
            raise ReplayDivergence(step.step, "event list differs")
        if graph_digest(g) != step.graph_digest:
            raise ReplayDivergence(step.step, "graph snapshot differs")
        g = append_events(g, step.violations)
        if step.final_graph_digest is not None and graph_digest(g) != step.final_graph_digest:
            raise ReplayDivergence(step.step, "graph after verification differs")
        yield step.step, g
        if step.action is not None and step.outcome == ActionOutcome.OK.value:
            executed = step.directive
            release = step.action.release.position if step.action.release else None
        else:
            executed, release = None, None


def replay_record(record: EpisodeRecord) -> bool:
    """True when the record passes the safety gate and replays identically; raises ReplayDivergence otherwise"""
    check_safety_gate(record)
    replayed = sum(1 for _ in replayed_graphs(record))
    logger.info(f"🔁 Replay of {record.task} seed={record.seed} arm={record.arm} matched {replayed} steps")
    return True


def graph_at(record: EpisodeRecord, step: Optional[int] = None) -> Cstg:
    """Replayed graph at a recorded step (the last one when omitted)"""
    last: Optional[Cstg] = None
    for index, g in replayed_graphs(record):
        last = g
        if step is not None and index == step:
            return g
    if last is None or step is not None:
        raise ConfigError(f"record of {record.task} seed={record.seed} has no graph for step {step}")
    return last
