"""
Task library
Loads and validates "task/1" JSON task files, bundled or from TASKS_DIR
"""
import json
import logging
from pathlib import Path
from typing import Dict, List, Optional, Union

from pydantic import ValidationError

from app.core.config import Settings, get_settings
from app.core.exceptions import TaskFormatError
from app.models.world import TaskSpec
from app.services.simulator import instantiate

logger = logging.getLogger(__name__)

BUNDLED_TASKS_DIR = Path(__file__).resolve().parent.parent / "data" / "tasks"


def tasks_dir(cfg: Optional[Settings] = None) -> Path:
    cfg = cfg or get_settings()
    return Path(cfg.TASKS_DIR) if cfg.TASKS_DIR else BUNDLED_TASKS_DIR


def load_task(path: Union[str, Path], cfg: Optional[Settings] = None) -> TaskSpec:
    """
    Parse and validate one task file

    Args:
        path: Path to a "task/1" JSON document
        cfg: Settings override (jitter bound used by the seed-0 sanity check)

    Returns:
        TaskSpec

    Raises:
        TaskFormatError: unreadable file, schema violation or invalid initial scene
    """
    path = Path(path)
    try:
        data = json.loads(path.read_text(encoding="utf-8"))
    except (OSError, json.JSONDecodeError) as e:
        raise TaskFormatError(f"cannot read task file: {e}", str(path)) from e
    try:
        task = TaskSpec.model_validate(data)
    except ValidationError as e:
        raise TaskFormatError(f"invalid task: {e.errors()[0]['msg']}", str(path)) from e
    ids = task.object_ids()
    if len(set(ids)) != len(ids):
        raise TaskFormatError("object ids are not unique", str(path))
    try:
        instantiate(task, 0, cfg)
    except ValueError as e:
        raise TaskFormatError(f"initial scene is invalid: {e}", str(path)) from e
    logger.debug(f"Loaded task {task.name} from {path}")
    return task


def resolve_task_path(name_or_path: str, cfg: Optional[Settings] = None) -> Path:
    """A task name from the library, or a path to a task file"""
    candidate = Path(name_or_path)
    if candidate.suffix == ".json" or candidate.exists():
        return candidate
    return tasks_dir(cfg) / f"{name_or_path}.json"


def list_tasks(cfg: Optional[Settings] = None) -> List[str]:
    return sorted(p.stem for p in tasks_dir(cfg).glob("*.json"))


def load_library(cfg: Optional[Settings] = None) -> Dict[str, TaskSpec]:
    """All tasks of the library keyed by name"""
    library = {}
    for name in list_tasks(cfg):
        task = load_task(tasks_dir(cfg) / f"{name}.json", cfg)
        library[task.name] = task
    logger.info(f"📚 Loaded {len(library)} tasks from {tasks_dir(cfg)}")
    return library
