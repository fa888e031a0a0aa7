"""
Episode API endpoints
"""
from collections import Counter
import logging

from fastapi import APIRouter, HTTPException, status

from app.core.config import get_settings
from app.core.exceptions import ConfigError, RoboStreamError
from app.models.records import RunConfig
from app.models.schemas import EpisodeRunRequest, EpisodeRunResponse, TaskInfo, TaskListResponse
from app.services.episode_runner import run_episode
from app.services.task_library import load_library, load_task, resolve_task_path

logger = logging.getLogger(__name__)

router = APIRouter()


@router.post("/episodes/run", response_model=EpisodeRunResponse)
async def run_one_episode(request: EpisodeRunRequest) -> EpisodeRunResponse:
    """
    Run one episode of a library task

    Args:
        request: EpisodeRunRequest with task, seed, backend and ablation

    Returns:
        EpisodeRunResponse with summary and executed directives
    """
    try:
        logger.info(f"Running episode {request.task} seed={request.seed} via API")
        settings = get_settings()
        config = RunConfig(
            task_files=(request.task,),
            backend=request.backend,
            seeds=(request.seed,),
            ablation=request.ablation,
            window_k=request.window_k,
            iou_threshold=request.iou_threshold,
        ).check()
        task = load_task(resolve_task_path(request.task, settings), settings)
        record = await run_episode(config, task, request.seed, settings)
        return EpisodeRunResponse(
            task=record.task,
            seed=record.seed,
            arm=record.arm,
            config_hash=record.config_hash,
            summary=record.summary,
            directives=[s.directive.key() for s in record.steps if s.directive is not None and s.action is not None],
            replans=sum(s.replans for s in record.steps),
        )

    except ConfigError as e:
        logger.warning(f"Rejected episode request: {e}")
        raise HTTPException(
            status_code=status.HTTP_400_BAD_REQUEST,
            detail={
                "error": "Invalid episode configuration",
                "message": str(e)
            }
        )
    except RoboStreamError as e:
        logger.error(f"Error in /episodes/run endpoint: {e}", exc_info=True)
        raise HTTPException(
            status_code=status.HTTP_500_INTERNAL_SERVER_ERROR,
            detail={
                "error": "Error running episode",
                "message": str(e)
            }
        )


@router.get("/tasks", response_model=TaskListResponse)
async def list_library_tasks() -> TaskListResponse:
    """List the tasks of the library"""
    try:
        library = load_library(get_settings())
        tasks = [
            TaskInfo(
                name=task.name,
                category=task.category.value,
                goal_kind=task.goal.kind.value,
                objects=len(task.objects),
                horizon=task.horizon,
                description=task.description,
            )
            for _, task in sorted(library.items())
        ]
        return TaskListResponse(
            tasks=tasks,
            total=len(tasks),
            categories=dict(sorted(Counter(t.category for t in tasks).items())),
        )

    except ConfigError as e:
        logger.error(f"Error in /tasks endpoint: {e}", exc_info=True)
        raise HTTPException(
            status_code=status.HTTP_500_INTERNAL_SERVER_ERROR,
            detail={
                "error": "Error loading task library",
                "message": str(e)
            }
        )
