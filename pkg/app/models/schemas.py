"""
Pydantic models for request/response validation
"""
from pydantic import BaseModel, Field
from typing import Optional, List, Dict, Any

from app.models.records import AblationFlags, BackendKind, EpisodeSummary


class ChatMessage(BaseModel):
    """One message of a chat-completions request"""
    role: str = Field(..., description="system, user or assistant")
    content: Any = Field(..., description="Text or a list of content parts")


class ChatCompletionRequest(BaseModel):
    """Subset of the OpenAI chat-completions request the planner sends"""
    model: str = Field(..., description="Model name")
    messages: List[ChatMessage] = Field(..., min_length=1, description="Conversation")
    temperature: Optional[float] = Field(None, description="Sampling temperature")

    class Config:
        json_schema_extra = {
            "example": {
                "model": "qwen3-vl-8b-instruct",
                "temperature": 0,
                "messages": [
                    {"role": "system", "content": "You are the task planner..."},
                    {"role": "user", "content": [{"type": "text", "text": "# cstg/1 step=0 ..."}]},
                ],
            }
        }


class StubRepliesRequest(BaseModel):
    """Replies the stub planner returns, in order, before falling back to done"""
    replies: List[str] = Field(..., description="Raw assistant message contents")
    reset: bool = Field(True, description="Drop queued replies and recorded requests first")

    class Config:
        json_schema_extra = {
            "example": {
                "replies": ['{"format": "directive/1", "verb": "pick", "subject_id": "red-cube-0"}'],
                "reset": True,
            }
        }


class StubStatus(BaseModel):
    """State of the stub planner"""
    queued: int = Field(..., description="Replies still queued")
    requests: int = Field(..., description="Requests received since the last reset")


class EpisodeRunRequest(BaseModel):
    """Request model for running one episode"""
    task: str = Field(..., min_length=1, description="Task name from the library or path to a task file")
    seed: int = Field(0, ge=0, description="Episode seed")
    backend: BackendKind = Field(BackendKind.ORACLE, description="Planning backend")
    ablation: AblationFlags = Field(default_factory=AblationFlags, description="Ablation switches")
    window_k: Optional[int] = Field(None, ge=1, description="Sliding window override")
    iou_threshold: Optional[float] = Field(None, ge=0.0, le=1.0, description="Patch selection override")

    class Config:
        json_schema_extra = {
            "example": {
                "task": "stack-3",
                "seed": 0,
                "backend": "oracle",
                "ablation": {"disable_stf_geometry": False, "disable_cstg_memory": False},
            }
        }


class EpisodeRunResponse(BaseModel):
    """Response model for one episode"""
    task: str = Field(..., description="Task name")
    seed: int = Field(..., description="Episode seed")
    arm: str = Field(..., description="Ablation arm label")
    config_hash: str = Field(..., description="Hash of run config and settings")
    summary: EpisodeSummary = Field(..., description="Success and failure cause")
    directives: List[str] = Field(default_factory=list, description="Executed directives in order")
    replans: int = Field(0, description="Total replans over the episode")


class TaskInfo(BaseModel):
    """Task library entry"""
    name: str
    category: str
    goal_kind: str
    objects: int
    horizon: int
    description: str = ""


class TaskListResponse(BaseModel):
    tasks: List[TaskInfo] = Field(default_factory=list)
    total: int = Field(..., description="Number of tasks")
    categories: Dict[str, int] = Field(default_factory=dict, description="Tasks by category")
