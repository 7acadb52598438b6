import json

import pytest
import requests

from scenemotion.exceptions import LlmFailure, ParseFailure
from scenemotion.llm import (
    ENV_MODEL,
    ENV_URL,
    ChatRequest,
    HttpChatClient,
    MockClient,
    RecordingClient,
    ReplayClient,
    complete_with_retry,
    default_model,
    extract_json_block,
)

REQ = ChatRequest("m", [("system", "be brief"), ("user", "hi")])


class TestRetry:
    def test_one_reply(self):
        waits = []
        client = MockClient(["hello"])
        assert complete_with_retry(client, REQ, sleep=waits.append) == "hello"
        assert waits == [] and len(client.requests) == 1

    def test_fail_twice_then_succeed(self):
        waits = []
        client = MockClient([LlmFailure("a"), TimeoutError("b"), "ok"])
        assert complete_with_retry(client, REQ, retries=2, sleep=waits.append) == "ok"
        assert waits == [1.0, 2.0]

    def test_all_time_out(self):
        waits = []
        client = MockClient([TimeoutError] * 3)
        with pytest.raises(LlmFailure):
            complete_with_retry(client, REQ, retries=2, sleep=waits.append)
        assert len(client.requests) == 3 and waits == [1.0, 2.0]

    def test_negative_retries(self):
        with pytest.raises(ValueError):
            complete_with_retry(MockClient(["x"]), REQ, retries=-1)


class TestExtract:
    def test_fenced(self):
        assert extract_json_block('Answer:\n```json\n{"a": 1}\n```\nbye') == {"a": 1}

    def test_prose(self):
        with pytest.raises(ParseFailure):
            extract_json_block("I think you should sit down.")

    def test_first_block_invalid(self):
        reply = '```json\n{"a": 1,,}\n```\nretry:\n```\n{"b": [1, 2]}\n```'
        assert extract_json_block(reply) == {"b": [1, 2]}

    def test_brace_fallback_prefers_longest(self):
        reply = 'see {"x": 1} and also {"frames": [{"index": 0, "note": "a } b"}]} done'
        assert extract_json_block(reply) == {"frames": [{"index": 0, "note": "a } b"}]}


class TestRequest:
    def test_round_trip(self):
        assert ChatRequest.from_dict(REQ.to_dict()) == REQ

    def test_validation(self):
        with pytest.raises(ValueError):
            ChatRequest("m", [])
        with pytest.raises(ValueError):
            ChatRequest("m", [("robot", "x")])

    def test_model_env(self, monkeypatch):
        monkeypatch.setenv(ENV_MODEL, "local-model")
        assert default_model() == "local-model"
        monkeypatch.delenv(ENV_MODEL)
        assert default_model() == "gpt-4"


class TestReplay:
    def test_record_then_replay(self, tmp_path):
        rec = RecordingClient(MockClient(["first", "second"]))
        r2 = REQ.with_message("assistant", "first").with_message("user", "more")
        assert rec.complete(REQ) == "first"
        assert rec.complete(r2) == "second"
        path = tmp_path / "t.json"
        rec.save(path)
        replay = ReplayClient(str(path))
        assert replay.complete(REQ) == "first"
        assert replay.complete(r2) == "second"
        with pytest.raises(LlmFailure):
            replay.complete(REQ)

    def test_strict_mismatch(self, tmp_path):
        transcript = [{"request": REQ.to_dict(), "reply": "x"}]
        other = ChatRequest("m", [("user", "different")])
        with pytest.raises(LlmFailure):
            ReplayClient(transcript).complete(other)
        assert ReplayClient(transcript, strict=False).complete(other) == "x"


class FakeResponse:
    def __init__(self, status, body):
        self.status_code = status
        self._body = body
        self.text = json.dumps(body)

    def json(self):
        return self._body


class FakeSession:
    def __init__(self, outcome):
        self.outcome = outcome
        self.calls = []

    def post(self, url, json=None, headers=None, timeout=None):
        self.calls.append((url, json, headers, timeout))
        if isinstance(self.outcome, Exception):
            raise self.outcome
        return self.outcome


class TestHttp:
    def test_success(self):
        s = FakeSession(FakeResponse(200, {"choices": [{"message": {"content": "hey"}}]}))
        c = HttpChatClient("http://llm.invalid/v1/chat", api_key="k", session=s)
        assert c.complete(REQ, timeout=3) == "hey"
        url, payload, headers, timeout = s.calls[0]
        assert payload["messages"][1] == {"role": "user", "content": "hi"}
        assert headers["Authorization"] == "Bearer k" and timeout == 3

    def test_errors(self):
        for outcome, exc in ((FakeResponse(500, {}), LlmFailure),
                             (FakeResponse(200, {"choices": []}), LlmFailure),
                             (requests.Timeout("slow"), TimeoutError),
                             (requests.ConnectionError("down"), LlmFailure)):
            with pytest.raises(exc):
                HttpChatClient("http://llm.invalid", session=FakeSession(outcome)).complete(REQ)

    def test_unconfigured(self, monkeypatch):
        monkeypatch.delenv(ENV_URL, raising=False)
        with pytest.raises(LlmFailure):
            HttpChatClient().complete(REQ)

    def test_timeout_is_retried(self):
        waits = []
        c = HttpChatClient("http://llm.invalid", session=FakeSession(requests.Timeout("slow")))
        with pytest.raises(LlmFailure):
            complete_with_retry(c, REQ, retries=1, sleep=waits.append)
        assert waits == [1.0]
