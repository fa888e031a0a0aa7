"""
Command line exit codes and outputs
"""
import json

from app.scripts.cli import EXIT_CONFIG_ERROR, EXIT_OK, EXIT_TASK_FAILED, _task_names, main


def test_run_report_replay_export(tmp_path, capsys):
    out = str(tmp_path)
    assert main(["run", "--task", "stack-3", "--seed", "0", "--out", out]) == EXIT_OK
    assert "stack-3" in capsys.readouterr().out
    record = tmp_path / "stack-3" / "full" / "seed-0.jsonl"
    assert record.exists()

    assert main(["report", "--out", out]) == EXIT_OK
    assert main(["replay", out]) == EXIT_OK

    graph_file = tmp_path / "graph.json"
    assert main(["export-graph", str(record), "--step", "0", "--output", str(graph_file)]) == EXIT_OK
    graph = json.loads(graph_file.read_text(encoding="utf-8"))
    assert graph["current_step"] == 0


def test_failed_episode_exits_with_one(tmp_path):
    script = tmp_path / "script.json"
    script.write_text("[]", encoding="utf-8")
    code = main([
        "run", "--task", "stack-3", "--backend", "scripted", "--script", str(script), "--out", str(tmp_path),
    ])
    assert code == EXIT_TASK_FAILED


def test_configuration_errors_exit_with_two(tmp_path):
    assert main(["run", "--task", "stack-3", "--backend", "scripted"]) == EXIT_CONFIG_ERROR
    assert main(["run", "--task", "juggling", "--out", str(tmp_path)]) == EXIT_CONFIG_ERROR
    assert main(["report", "--out", str(tmp_path / "empty")]) == EXIT_CONFIG_ERROR
    assert main(["replay", str(tmp_path / "missing.jsonl")]) == EXIT_CONFIG_ERROR


def test_task_aliases():
    assert "hide-restore" not in _task_names(["suite"])
    assert len(_task_names(["all", "stack-3"])) == 11
