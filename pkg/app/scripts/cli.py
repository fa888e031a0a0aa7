"""
Command line for the episode harness
Usage: python -m app.scripts.cli {run,report,replay,export-graph} ...
"""
import argparse
import asyncio
import logging
import sys
from pathlib import Path
from typing import List, Optional, Sequence

from pydantic import ValidationError

from app.core.config import get_settings
from app.core.exceptions import ConfigError, ReplayDivergence
from app.models.records import AblationFlags, BackendKind, RunConfig
from app.services.episode_runner import (
    SafetyGateViolation,
    graph_at,
    load_record,
    load_records,
    replay_record,
    run_suite,
)
from app.services.report_service import build_report, render_table, write_report
from app.services.scene_graph import export_graph_json
from app.services.task_library import list_tasks

logging.basicConfig(
    level=logging.INFO,
    format='%(asctime)s - %(name)s - %(levelname)s - %(message)s'
)
logger = logging.getLogger(__name__)

EXIT_OK = 0
EXIT_TASK_FAILED = 1
EXIT_CONFIG_ERROR = 2

LONG_HORIZON_SUITE = (
    "bridge", "cover-top", "cover-bottom", "containers",
    "containers-hard", "stack-3", "stack-5", "unstack-then-stack",
)


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="robostream", description="RoboStream desk episode harness")
    sub = parser.add_subparsers(dest="command", required=True)

    run = sub.add_parser("run", help="run episodes and write JSON-lines records")
    run.add_argument("--task", action="append", default=[],
                     help="task name or task file; 'all' for the library, 'suite' for the long-horizon set")
    run.add_argument("--backend", choices=[b.value for b in BackendKind], default=BackendKind.ORACLE.value)
    run.add_argument("--script", help="directive script for the scripted backend")
    run.add_argument("--seed", type=int, action="append", default=[], help="seed (repeatable)")
    run.add_argument("--seeds", type=int, help="run seeds 0..N-1")
    run.add_argument("--ablate", action="append", choices=["stf", "cstg"], default=[])
    run.add_argument("--k", type=int, help="sliding window size")
    run.add_argument("--iou-threshold", type=float, help="patch selection threshold")
    run.add_argument("--out", help="output directory")

    report = sub.add_parser("report", help="aggregate records into report.json and a table")
    report.add_argument("--out", help="directory holding the records")

    replay = sub.add_parser("replay", help="replay records and check graph determinism")
    replay.add_argument("paths", nargs="+", help="record files or directories")

    export = sub.add_parser("export-graph", help="export the replayed cstg/1 graph of a record")
    export.add_argument("record", help="episode record file")
    export.add_argument("--step", type=int, help="step to export (last when omitted)")
    export.add_argument("--output", help="destination file (stdout when omitted)")
    return parser


def _task_names(requested: Sequence[str]) -> List[str]:
    names: List[str] = []
    for name in requested or ["suite"]:
        if name == "all":
            names.extend(list_tasks())
        elif name == "suite":
            names.extend(LONG_HORIZON_SUITE)
        else:
            names.append(name)
    return list(dict.fromkeys(names))


def _run_config(args: argparse.Namespace) -> RunConfig:
    seeds = list(args.seed)
    if args.seeds is not None:
        seeds.extend(range(args.seeds))
    return RunConfig(
        task_files=tuple(_task_names(args.task)),
        backend=BackendKind(args.backend),
        script_file=args.script,
        seeds=tuple(dict.fromkeys(seeds)) or (0,),
        ablation=AblationFlags(
            disable_stf_geometry="stf" in args.ablate,
            disable_cstg_memory="cstg" in args.ablate,
        ),
        window_k=args.k,
        iou_threshold=args.iou_threshold,
        output_dir=args.out,
    ).check()


def cmd_run(args: argparse.Namespace) -> int:
    config = _run_config(args)
    records, report = asyncio.run(run_suite(config, get_settings()))
    print(render_table(report))
    return EXIT_OK if all(r.summary.success for r in records) else EXIT_TASK_FAILED


def cmd_report(args: argparse.Namespace) -> int:
    out_dir = Path(args.out or get_settings().OUTPUT_DIR)
    records = load_records(out_dir)
    if not records:
        raise ConfigError(f"no episode records under {out_dir}")
    report = build_report(records)
    write_report(report, out_dir)
    print(render_table(report))
    return EXIT_OK


def _record_files(paths: Sequence[str]) -> List[Path]:
    files: List[Path] = []
    for raw in paths:
        path = Path(raw)
        if path.is_dir():
            files.extend(sorted(path.glob("**/seed-*.jsonl")))
        elif path.exists():
            files.append(path)
        else:
            raise ConfigError(f"{path} does not exist")
    return files


def cmd_replay(args: argparse.Namespace) -> int:
    files = _record_files(args.paths)
    failed = 0
    for path in files:
        try:
            replay_record(load_record(path))
            logger.info(f"✅ {path}")
        except (ReplayDivergence, SafetyGateViolation) as e:
            failed += 1
            logger.error(f"❌ {path}: {e}")
    logger.info(f"📊 Replayed {len(files)} record(s), {failed} diverged")
    return EXIT_OK if failed == 0 else EXIT_TASK_FAILED


def cmd_export_graph(args: argparse.Namespace) -> int:
    try:
        g = graph_at(load_record(Path(args.record)), args.step)
    except ReplayDivergence as e:
        logger.error(f"❌ {e}")
        return EXIT_TASK_FAILED
    text = export_graph_json(g)
    if args.output:
        Path(args.output).write_text(text + "\n", encoding="utf-8")
        logger.info(f"📝 Graph of step {g.current_step} written to {args.output}")
    else:
        print(text)
    return EXIT_OK


COMMANDS = {
    "run": cmd_run,
    "report": cmd_report,
    "replay": cmd_replay,
    "export-graph": cmd_export_graph,
}


def main(argv: Optional[Sequence[str]] = None) -> int:
    args = build_parser().parse_args(argv)
    try:
        return COMMANDS[args.command](args)
    except (ConfigError, ValidationError) as e:
        logger.error(f"⚠️  Configuration error: {e}")
        return EXIT_CONFIG_ERROR


if __name__ == "__main__":
    sys.exit(main())
