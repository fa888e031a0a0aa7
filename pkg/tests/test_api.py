"""
HTTP surface: health, task library, episode endpoint, stub planner control
"""
import pytest
from fastapi.testclient import TestClient

from app.api.stub_routes import DONE_REPLY, get_stub_state
from app.core.app import app


@pytest.fixture
def client():
    get_stub_state().reset()
    with TestClient(app) as test_client:
        yield test_client
    get_stub_state().reset()


class TestService:

    def test_health(self, client):
        body = client.get("/health").json()
        assert body["status"] == "ok"
        assert body["service"] == "RoboStream Desk"

    def test_task_library(self, client):
        body = client.get("/api/tasks").json()
        assert body["total"] == 11
        assert body["categories"] == {"build": 6, "cover": 2, "disassemble": 2, "hide_restore": 1}
        stack = next(t for t in body["tasks"] if t["name"] == "stack-3")
        assert stack["goal_kind"] == "goal_image"
        assert stack["objects"] == 3


class TestEpisodes:

    def test_oracle_episode(self, client):
        response = client.post("/api/episodes/run", json={"task": "stack-3", "seed": 0})
        assert response.status_code == 200
        body = response.json()
        assert body["summary"]["success"]
        assert body["arm"] == "full"
        assert body["directives"][0] == "pick(green-cube-0,)"
        assert len(body["directives"]) == 4

    def test_unknown_task_is_a_bad_request(self, client):
        response = client.post("/api/episodes/run", json={"task": "juggling"})
        assert response.status_code == 400
        assert response.json()["detail"]["error"] == "Invalid episode configuration"

    def test_scripted_backend_needs_a_script(self, client):
        response = client.post("/api/episodes/run", json={"task": "stack-3", "backend": "scripted"})
        assert response.status_code == 400

    def test_request_validation(self, client):
        assert client.post("/api/episodes/run", json={"task": "stack-3", "seed": -1}).status_code == 422


class TestStub:

    def test_queued_replies_are_served_in_order(self, client):
        status = client.post("/stub/replies", json={"replies": ["first", "second"]}).json()
        assert status == {"queued": 2, "requests": 0}
        request = {"model": "m", "messages": [{"role": "user", "content": "hi"}]}
        contents = [
            client.post("/v1/chat/completions", json=request).json()["choices"][0]["message"]["content"]
            for _ in range(3)
        ]
        assert contents == ["first", "second", DONE_REPLY]
        assert client.get("/stub/status").json() == {"queued": 0, "requests": 3}

    def test_queue_can_be_extended_without_reset(self, client):
        client.post("/stub/replies", json={"replies": ["a"]})
        status = client.post("/stub/replies", json={"replies": ["b"], "reset": False}).json()
        assert status["queued"] == 2

    def test_empty_conversation_is_rejected(self, client):
        assert client.post("/v1/chat/completions", json={"model": "m", "messages": []}).status_code == 422
