"""
Run configuration, episode records and suite report schemas
"""
from __future__ import annotations

import json
from enum import Enum
from typing import Any, Dict, Iterable, List, Optional, Tuple

from pydantic import BaseModel, ConfigDict, Field, field_validator

from app.core.config import Settings
from app.core.exceptions import ConfigError
from app.models.graph import CausalEvent
from app.models.planning import ActionDirective, Pose6DoFAction, VerificationReport
from app.models.tokens import StfToken
from app.utils.hashing import canonical_json, sha256_hex

EPISODE_FORMAT = "episode/1"


class BackendKind(str, Enum):
    ORACLE = "oracle"
    REMOTE = "remote"
    SCRIPTED = "scripted"


class AblationFlags(BaseModel):
    model_config = ConfigDict(frozen=True)

    disable_stf_geometry: bool = False
    disable_cstg_memory: bool = False

    @property
    def arm(self) -> str:
        """Short label of the ablation arm"""
        parts = []
        if self.disable_stf_geometry:
            parts.append("stf")
        if self.disable_cstg_memory:
            parts.append("cstg")
        return "full" if not parts else "no-" + "+".join(parts)


class RunConfig(BaseModel):
    """One harness invocation: tasks, backend, seeds, ablation and overrides"""
    model_config = ConfigDict(frozen=True)

    task_files: Tuple[str, ...] = ()
    backend: BackendKind = BackendKind.ORACLE
    script_file: Optional[str] = None
    seeds: Tuple[int, ...] = (0,)
    ablation: AblationFlags = Field(default_factory=AblationFlags)
    window_k: Optional[int] = Field(None, ge=1)
    iou_threshold: Optional[float] = Field(None, ge=0.0, le=1.0)
    output_dir: Optional[str] = None

    @field_validator("seeds")
    @classmethod
    def _at_least_one(cls, value: Tuple[int, ...]) -> Tuple[int, ...]:
        if not value:
            raise ValueError("at least one seed is required")
        return value

    def check(self) -> "RunConfig":
        if self.backend == BackendKind.SCRIPTED and not self.script_file:
            raise ConfigError("scripted backend needs a script file")
        return self

    def effective_settings(self, base: Settings) -> Settings:
        """Apply the per-run overrides on top of the environment settings"""
        update: Dict[str, Any] = {}
        if self.window_k is not None:
            update["CSTG_WINDOW_K"] = self.window_k
        if self.iou_threshold is not None:
            update["STF_IOU_THRESHOLD"] = self.iou_threshold
        if self.output_dir is not None:
            update["OUTPUT_DIR"] = self.output_dir
        return base.model_copy(update=update) if update else base


def settings_snapshot(settings: Settings) -> Dict[str, Any]:
    """Settings that influence an episode; secrets are left out"""
    data = settings.model_dump(mode="json")
    data.pop("PLANNER_API_KEY", None)
    return data


def config_hash(config: RunConfig, snapshot: Dict[str, Any]) -> str:
    return sha256_hex(canonical_json({"config": config.model_dump(mode="json"), "settings": snapshot}))


class FailureBucket(str, Enum):
    PARSING = "parsing"
    PLACEMENT = "placement"
    GRASP = "grasp"
    MOTION = "motion"
    PLANNING = "planning"


class StepRecord(BaseModel):
    """Everything needed to audit and replay one loop iteration"""
    model_config = ConfigDict(frozen=True)

    step: int
    observation_digest: Optional[str] = None
    tokens: Tuple[StfToken, ...] = ()
    graph_events: Tuple[CausalEvent, ...] = ()
    graph_digest: Optional[str] = None
    prompt_hash: Optional[str] = None
    violations: Tuple[CausalEvent, ...] = ()
    final_graph_digest: Optional[str] = None
    directive: Optional[ActionDirective] = None
    report: Optional[VerificationReport] = None
    action: Optional[Pose6DoFAction] = None
    subject_sim_id: Optional[str] = None
    outcome: Optional[str] = None
    replans: int = 0
    timings: Dict[str, float] = Field(default_factory=dict)


class EpisodeSummary(BaseModel):
    model_config = ConfigDict(frozen=True)

    success: bool
    steps: int
    failure_bucket: Optional[FailureBucket] = None
    failure_cause: Optional[str] = None


class EpisodeRecord(BaseModel):
    """Header, contiguous step records and final summary of one episode"""
    model_config = ConfigDict(frozen=True)

    format: str = EPISODE_FORMAT
    task: str
    seed: int
    config: RunConfig
    settings: Dict[str, Any]
    config_hash: str
    steps: Tuple[StepRecord, ...] = ()
    summary: EpisodeSummary

    @field_validator("steps")
    @classmethod
    def _contiguous(cls, value: Tuple[StepRecord, ...]) -> Tuple[StepRecord, ...]:
        if [s.step for s in value] != list(range(len(value))):
            raise ValueError("step records must be contiguous from 0")
        return value

    @property
    def arm(self) -> str:
        return self.config.ablation.arm

    def to_lines(self) -> List[str]:
        """JSON-lines rendering: header, one line per step, summary"""
        header = {
            "type": "header",
            "format": self.format,
            "task": self.task,
            "seed": self.seed,
            "config": self.config.model_dump(mode="json"),
            "settings": self.settings,
            "config_hash": self.config_hash,
        }
        lines = [json.dumps(header, sort_keys=True)]
        for step in self.steps:
            lines.append(json.dumps({"type": "step", **step.model_dump(mode="json")}, sort_keys=True))
        lines.append(json.dumps({"type": "summary", **self.summary.model_dump(mode="json")}, sort_keys=True))
        return lines

    @classmethod
    def from_rows(cls, rows: Iterable[Dict[str, Any]]) -> "EpisodeRecord":
        header: Optional[Dict[str, Any]] = None
        steps: List[Dict[str, Any]] = []
        summary: Optional[Dict[str, Any]] = None
        for row in rows:
            kind = row.get("type")
            body = {k: v for k, v in row.items() if k != "type"}
            if kind == "header":
                header = body
            elif kind == "step":
                steps.append(body)
            elif kind == "summary":
                summary = body
        if header is None or summary is None:
            raise ValueError("episode record needs a header and a summary line")
        if header.get("format") != EPISODE_FORMAT:
            raise ValueError(f"unsupported record format {header.get('format')!r}")
        return cls.model_validate({**header, "steps": steps, "summary": summary})

    def without_timings(self) -> "EpisodeRecord":
        steps = tuple(s.model_copy(update={"timings": {}}) for s in self.steps)
        return self.model_copy(update={"steps": steps})


class TaskRate(BaseModel):
    model_config = ConfigDict(frozen=True)

    task: str
    arm: str
    successes: int
    episodes: int
    rate: float = Field(..., ge=0.0, le=1.0)
    failures: Dict[str, int] = Field(default_factory=dict)


class StageLatency(BaseModel):
    model_config = ConfigDict(frozen=True)

    stage: str
    step: int
    mean_s: float
    max_s: float
    samples: int


class SuiteReport(BaseModel):
    """Aggregates derived purely from episode records"""
    model_config = ConfigDict(frozen=True)

    rates: Tuple[TaskRate, ...] = ()
    latency: Tuple[StageLatency, ...] = ()
    ablation_table: Dict[str, Dict[str, float]] = Field(default_factory=dict)
    failure_buckets: Dict[str, int] = Field(default_factory=dict)
