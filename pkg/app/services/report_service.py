"""
Suite report service
Success rates, per-step stage latency and ablation comparison, derived from episode records only
"""
import json
import logging
from collections import defaultdict
from pathlib import Path
from typing import Dict, Iterable, List, Tuple

import numpy as np

from app.models.records import EpisodeRecord, StageLatency, SuiteReport, TaskRate

logger = logging.getLogger(__name__)

STAGES = ("render", "tokens", "graph", "prompt", "plan", "apply")
REPORT_FILE = "report.json"
TABLE_FILE = "report.txt"


def build_report(records: Iterable[EpisodeRecord]) -> SuiteReport:
    """
    Aggregate episode records into a suite report

    Args:
        records: Episode records of any tasks and arms

    Returns:
        SuiteReport; recomputing it from the same records yields an equal report
    """
    outcomes: Dict[Tuple[str, str], List[EpisodeRecord]] = defaultdict(list)
    samples: Dict[Tuple[str, int], List[float]] = defaultdict(list)
    buckets: Dict[str, int] = defaultdict(int)

    for record in records:
        outcomes[(record.task, record.arm)].append(record)
        if record.summary.failure_bucket is not None:
            buckets[record.summary.failure_bucket.value] += 1
        for step in record.steps:
            for stage, seconds in step.timings.items():
                samples[(stage, step.step)].append(seconds)

    rates = []
    table: Dict[str, Dict[str, float]] = defaultdict(dict)
    for (task, arm), group in sorted(outcomes.items()):
        successes = sum(1 for r in group if r.summary.success)
        failures: Dict[str, int] = defaultdict(int)
        for r in group:
            if r.summary.failure_bucket is not None:
                failures[r.summary.failure_bucket.value] += 1
        rate = successes / len(group)
        rates.append(TaskRate(
            task=task, arm=arm, successes=successes, episodes=len(group), rate=rate,
            failures=dict(sorted(failures.items())),
        ))
        table[task][arm] = rate

    order = {stage: i for i, stage in enumerate(STAGES)}
    latency = [
        StageLatency(
            stage=stage,
            step=step,
            mean_s=float(np.mean(values)),
            max_s=float(np.max(values)),
            samples=len(values),
        )
        for (stage, step), values in sorted(samples.items(), key=lambda kv: (order.get(kv[0][0], len(order)), kv[0]))
    ]
    return SuiteReport(
        rates=tuple(rates),
        latency=tuple(latency),
        ablation_table={task: dict(sorted(arms.items())) for task, arms in sorted(table.items())},
        failure_buckets=dict(sorted(buckets.items())),
    )


def render_table(report: SuiteReport) -> str:
    """Plain-text success table, one row per (task, arm)"""
    lines = [f"{'task':<22} {'arm':<12} {'success':>9} {'rate':>7}  failures"]
    for rate in report.rates:
        failures = ", ".join(f"{k}={v}" for k, v in rate.failures.items()) or "-"
        lines.append(
            f"{rate.task:<22} {rate.arm:<12} {f'{rate.successes}/{rate.episodes}':>9} "
            f"{rate.rate * 100:>6.1f}%  {failures}"
        )
    return "\n".join(lines)


def write_report(report: SuiteReport, out_dir: Path) -> Path:
    """Write report.json and the text table next to the episode records"""
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    path = out / REPORT_FILE
    path.write_text(json.dumps(report.model_dump(mode="json"), indent=2, sort_keys=True), encoding="utf-8")
    (out / TABLE_FILE).write_text(render_table(report) + "\n", encoding="utf-8")
    logger.info(f"📝 Report written to {path}")
    return path
