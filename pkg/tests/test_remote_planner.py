"""
Remote planner client: reply parsing, request building, round trips against the stub endpoint
"""
import base64
import io

import httpx
import numpy as np
import pytest
from PIL import Image

from app.api.stub_routes import get_stub_state
from app.core.app import app
from app.core.exceptions import MalformedDirective, MalformedKind, TransportError
from app.models.geometry import Vec3
from app.models.planning import AnnotatedObservation, GoalKind, GoalSpec, PromptContext, Verb
from app.services.planner_service import SYSTEM_PREAMBLE
from app.services.remote_planner import build_request, encode_png, parse_directive_reply, remote_directive

from conftest import settings_with

PICK_REPLY = '{"format": "directive/1", "verb": "pick", "subject_id": "red-cube-0"}'


def _prompt() -> PromptContext:
    rgb = np.zeros((8, 16, 3), dtype=np.uint8)
    rgb[:, :8] = (220, 40, 40)
    return PromptContext(
        system_preamble=SYSTEM_PREAMBLE,
        spatial_context_text="# cstg/1 step=0\nno objects",
        recent_events_text="(none)",
        goal_text="instruction: unstack the tower, then restack it",
        annotated_observation=AnnotatedObservation(rgb=rgb, labels=(("red-cube-0", (4, 4)),)),
        goal=GoalSpec(kind=GoalKind.INSTRUCTION, instruction="unstack the tower, then restack it"),
    )


@pytest.fixture
async def stub_client():
    state = get_stub_state()
    state.reset()
    async with httpx.AsyncClient(transport=httpx.ASGITransport(app=app), base_url="http://stub") as client:
        yield client
    state.reset()


# ── Reply parsing ────────────────────────────────────────────────────────

class TestParseReply:

    def test_plain_object(self):
        directive = parse_directive_reply(PICK_REPLY)
        assert directive.verb == Verb.PICK
        assert directive.subject_id == "red-cube-0"

    def test_code_fence_and_prose_are_ignored(self):
        directive = parse_directive_reply(f"Next I pick it up.\n```json\n{PICK_REPLY}\n```")
        assert directive.key() == "pick(red-cube-0,)"

    def test_list_target_becomes_a_position(self):
        directive = parse_directive_reply(
            '{"format": "directive/1", "verb": "place_at", "subject_id": "red-cube-0", "target": [0.1, 0, 0.025]}'
        )
        assert directive.target == Vec3(x=0.1, y=0.0, z=0.025)

    @pytest.mark.parametrize("reply, kind", [
        ("I would pick the red cube.", MalformedKind.NO_JSON),
        ("{verb: pick, subject_id: red-cube-0}", MalformedKind.INVALID_JSON),
        (PICK_REPLY + "\n" + PICK_REPLY, MalformedKind.MULTIPLE_OBJECTS),
        ('{"format": "directive/1", "verb": "throw", "subject_id": "red-cube-0"}', MalformedKind.UNKNOWN_VERB),
        ('{"verb": "pick", "subject_id": "red-cube-0"}', MalformedKind.SCHEMA_VIOLATION),
        ('{"format": "directive/1", "verb": "pick"}', MalformedKind.SCHEMA_VIOLATION),
        ('{"format": "directive/1", "verb": "pick", "subject_id": "a", "colour": "red"}', MalformedKind.SCHEMA_VIOLATION),
    ])
    def test_malformed_replies_are_classified(self, reply, kind):
        with pytest.raises(MalformedDirective) as info:
            parse_directive_reply(reply)
        assert info.value.kind == kind


# ── Request body ─────────────────────────────────────────────────────────

class TestRequest:

    def test_png_data_url_keeps_image_size(self):
        url = encode_png(_prompt().annotated_observation)
        prefix = "data:image/png;base64,"
        assert url.startswith(prefix)
        image = Image.open(io.BytesIO(base64.b64decode(url[len(prefix):])))
        assert image.size == (16, 8)

    def test_body_carries_preamble_text_and_image(self):
        cfg = settings_with(PLANNER_MODEL="test-model")
        body = build_request(_prompt(), cfg)
        assert body["model"] == "test-model"
        assert body["temperature"] == 0
        system, user = body["messages"]
        assert system == {"role": "system", "content": SYSTEM_PREAMBLE}
        text, image = user["content"]
        assert "## goal\ninstruction: unstack the tower" in text["text"]
        assert image["image_url"]["url"].startswith("data:image/png;base64,")


# ── Stub endpoint round trips ────────────────────────────────────────────

class TestRemoteDirective:

    async def test_malformed_reply_is_retried(self, stub_client):
        get_stub_state().enqueue(["let me think", PICK_REPLY])
        cfg = settings_with(PLANNER_ENDPOINT_URL="http://stub/v1", PLANNER_MAX_RETRIES=2)
        directive = await remote_directive(_prompt(), cfg, stub_client)
        assert directive.key() == "pick(red-cube-0,)"
        assert get_stub_state().status().requests == 2

    async def test_retries_are_bounded(self, stub_client):
        get_stub_state().enqueue(["no"] * 5)
        cfg = settings_with(PLANNER_ENDPOINT_URL="http://stub/v1", PLANNER_MAX_RETRIES=1)
        with pytest.raises(MalformedDirective) as info:
            await remote_directive(_prompt(), cfg, stub_client)
        assert info.value.kind == MalformedKind.NO_JSON
        assert get_stub_state().status().queued == 3

    async def test_empty_queue_answers_done(self, stub_client):
        cfg = settings_with(PLANNER_ENDPOINT_URL="http://stub/v1")
        directive = await remote_directive(_prompt(), cfg, stub_client)
        assert directive.verb == Verb.DONE

    async def test_error_status_is_a_transport_error(self, stub_client):
        cfg = settings_with(PLANNER_ENDPOINT_URL="http://stub/nowhere")
        with pytest.raises(TransportError):
            await remote_directive(_prompt(), cfg, stub_client)
