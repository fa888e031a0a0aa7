"""Pipeline services"""
from app.services.episode_runner import EpisodeRunner, run_episode, run_suite, replay_record
from app.services.oracle_policy import OraclePolicy
from app.services.planner_service import OracleBackend, RemoteBackend, ScriptedBackend, step_loop

__all__ = [
    "EpisodeRunner",
    "run_episode",
    "run_suite",
    "replay_record",
    "OraclePolicy",
    "OracleBackend",
    "RemoteBackend",
    "ScriptedBackend",
    "step_loop",
]
