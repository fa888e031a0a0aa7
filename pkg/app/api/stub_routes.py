"""
Stub planner endpoints
OpenAI-compatible chat-completions route serving queued replies, used for protocol tests and offline runs
"""
from collections import deque
from datetime import datetime
from typing import Deque, List
import json
import logging

from fastapi import APIRouter, HTTPException, status

from app.models.planning import DIRECTIVE_FORMAT
from app.models.schemas import ChatCompletionRequest, StubRepliesRequest, StubStatus

logger = logging.getLogger(__name__)

router = APIRouter()
control_router = APIRouter()

DONE_REPLY = json.dumps({"format": DIRECTIVE_FORMAT, "verb": "done", "subgoal_note": "stub queue empty"})


class StubPlannerState:
    """Queued assistant replies and the requests received so far"""

    def __init__(self):
        self.replies: Deque[str] = deque()
        self.requests: List[ChatCompletionRequest] = []

    def reset(self) -> None:
        self.replies.clear()
        self.requests.clear()

    def enqueue(self, replies: List[str]) -> None:
        self.replies.extend(replies)

    def next_reply(self) -> str:
        return self.replies.popleft() if self.replies else DONE_REPLY

    def status(self) -> StubStatus:
        return StubStatus(queued=len(self.replies), requests=len(self.requests))


# Global instance
_stub_state: StubPlannerState = None


def get_stub_state() -> StubPlannerState:
    """Get or create stub planner state instance"""
    global _stub_state
    if _stub_state is None:
        _stub_state = StubPlannerState()
    return _stub_state


@router.post("/chat/completions")
async def chat_completions(request: ChatCompletionRequest) -> dict:
    """
    Answer a chat-completions request with the next queued reply

    Args:
        request: ChatCompletionRequest from the remote planner client

    Returns:
        Chat-completion body with one assistant choice
    """
    try:
        state = get_stub_state()
        state.requests.append(request)
        reply = state.next_reply()
        logger.info(f"Stub planner answered request #{len(state.requests)} ({len(state.replies)} queued)")
        return {
            "id": f"stub-{len(state.requests)}",
            "object": "chat.completion",
            "created": int(datetime.utcnow().timestamp()),
            "model": request.model,
            "choices": [{
                "index": 0,
                "message": {"role": "assistant", "content": reply},
                "finish_reason": "stop",
            }],
        }

    except Exception as e:
        logger.error(f"Error in /chat/completions endpoint: {e}", exc_info=True)
        raise HTTPException(
            status_code=status.HTTP_500_INTERNAL_SERVER_ERROR,
            detail={
                "error": "Error answering chat completion",
                "message": str(e)
            }
        )


@control_router.post("/replies", response_model=StubStatus)
async def set_replies(request: StubRepliesRequest) -> StubStatus:
    """Queue replies for the stub planner"""
    state = get_stub_state()
    if request.reset:
        state.reset()
    state.enqueue(request.replies)
    logger.info(f"Stub planner queued {len(request.replies)} replies")
    return state.status()


@control_router.get("/status", response_model=StubStatus)
async def stub_status() -> StubStatus:
    return get_stub_state().status()
