"""Provider-agnostic chat-completion clients.

Every client exposes ``complete(request, timeout=None) -> str``. The HTTP
client speaks the common ``messages`` / ``choices`` JSON shape; the mock and
replay clients make every LLM-dependent path runnable offline.
"""
from __future__ import annotations

import json
import logging
import os
import re
import threading
import time
from dataclasses import dataclass

from .exceptions import LlmFailure, ParseFailure

log = logging.getLogger(__name__)

ENV_URL = "SCENEMOTION_LLM_URL"
ENV_KEY = "SCENEMOTION_LLM_API_KEY"
ENV_MODEL = "SCENEMOTION_LLM_MODEL"
DEFAULT_MODEL = "gpt-4"

ROLES = ("system", "user", "assistant")


def default_model():
    return os.environ.get(ENV_MODEL, "").strip() or DEFAULT_MODEL


@dataclass(frozen=True)
class ChatRequest:
    model: str
    messages: tuple
    temperature: float = 0.0
    max_tokens: int = 2048

    def __post_init__(self):
        msgs = tuple((str(r), str(c)) for r, c in self.messages)
        if not msgs:
            raise ValueError("a chat request needs at least one message")
        for role, _ in msgs:
            if role not in ROLES:
                raise ValueError(f"unknown role {role!r}")
        if not 0.0 <= self.temperature <= 2.0:
            raise ValueError("temperature must lie in [0, 2]")
        if self.max_tokens < 1:
            raise ValueError("max_tokens must be positive")
        object.__setattr__(self, "messages", msgs)

    def with_message(self, role, content):
        return ChatRequest(self.model, self.messages + ((role, content),),
                           self.temperature, self.max_tokens)

    def to_dict(self):
        return {"model": self.model, "temperature": self.temperature,
                "max_tokens": self.max_tokens,
                "messages": [{"role": r, "content": c} for r, c in self.messages]}

    @classmethod
    def from_dict(cls, doc):
        return cls(doc["model"], [(m["role"], m["content"]) for m in doc["messages"]],
                   doc.get("temperature", 0.0), doc.get("max_tokens", 2048))


class HttpChatClient:
    """POSTs to a chat-completions endpoint. Performs no retries itself."""

    def __init__(self, url=None, api_key=None, default_timeout=30.0, session=None):
        self.url = url or os.environ.get(ENV_URL, "").strip()
        self.api_key = api_key if api_key is not None else os.environ.get(ENV_KEY, "")
        self.default_timeout = default_timeout
        self._session = session

    def _post(self, payload, timeout):
        import requests

        session = self._session or requests
        headers = {"Content-Type": "application/json"}
        if self.api_key:
            headers["Authorization"] = f"Bearer {self.api_key}"
        try:
            resp = session.post(self.url, json=payload, headers=headers, timeout=timeout)
        except requests.Timeout as exc:
            raise TimeoutError(str(exc)) from exc
        except requests.RequestException as exc:
            raise LlmFailure(f"transport error: {exc}") from exc
        if resp.status_code != 200:
            raise LlmFailure(f"HTTP {resp.status_code}: {resp.text[:200]}")
        return resp.json()

    def complete(self, request: ChatRequest, timeout=None) -> str:
        if not self.url:
            raise LlmFailure(f"no endpoint configured (set {ENV_URL})")
        body = self._post(request.to_dict(), timeout or self.default_timeout)
        try:
            return body["choices"][0]["message"]["content"]
        except (KeyError, IndexError, TypeError) as exc:
            raise LlmFailure(f"malformed response body: {exc}") from exc


class MockClient:
    """Replays scripted replies in order.

    Items that are exceptions (or exception classes) are raised instead of
    returned, which is how tests script transport failures and timeouts.
    """

    def __init__(self, replies=()):
        self._replies = list(replies)
        self._lock = threading.Lock()
        self.requests = []

    def complete(self, request: ChatRequest, timeout=None) -> str:
        with self._lock:
            self.requests.append(request)
            if not self._replies:
                raise LlmFailure("mock client has no scripted replies left")
            item = self._replies.pop(0)
        if isinstance(item, BaseException) or (isinstance(item, type) and issubclass(item, BaseException)):
            raise item
        return item


class RecordingClient:
    """Wraps a client and keeps a transcript of ``{request, reply}`` pairs."""

    def __init__(self, inner):
        self.inner = inner
        self.transcript = []

    def complete(self, request, timeout=None):
        reply = self.inner.complete(request, timeout=timeout)
        self.transcript.append({"request": request.to_dict(), "reply": reply})
        return reply

    def save(self, path):
        with open(path, "w") as fh:
            json.dump(self.transcript, fh, indent=1, sort_keys=True)


class ReplayClient:
    """Serves a recorded transcript back, optionally checking each request."""

    def __init__(self, transcript, strict=True):
        if isinstance(transcript, (str, os.PathLike)):
            with open(transcript) as fh:
                transcript = json.load(fh)
        self._entries = list(transcript)
        self._pos = 0
        self.strict = strict
        self._lock = threading.Lock()

    def complete(self, request, timeout=None):
        with self._lock:
            if self._pos >= len(self._entries):
                raise LlmFailure("transcript exhausted")
            entry = self._entries[self._pos]
            self._pos += 1
        if self.strict and entry["request"] != request.to_dict():
            raise LlmFailure(f"request {self._pos - 1} differs from the recorded transcript")
        return entry["reply"]


def complete_with_retry(client, request, retries=2, timeout=30.0, backoff=1.0, sleep=time.sleep):
    """First successful reply within ``retries + 1`` attempts.

    Waits ``backoff * 2**i`` seconds after the ``i``-th failed attempt.
    """
    if retries < 0:
        raise ValueError("retries must be >= 0")
    last = None
    for attempt in range(retries + 1):
        try:
            return client.complete(request, timeout=timeout)
        except (LlmFailure, TimeoutError, ConnectionError) as exc:
            last = exc
            log.warning("LLM attempt %d/%d failed: %s", attempt + 1, retries + 1, exc)
            if attempt < retries:
                sleep(backoff * 2 ** attempt)
    raise LlmFailure(f"all {retries + 1} attempts failed; last error: {last}") from last


_FENCE = re.compile(r"```[ \t]*([A-Za-z0-9_-]*)[ \t]*\n?(.*?)```", re.DOTALL)


def _balanced_spans(text):
    """Start/end indices of every bracket-balanced ``{...}`` or ``[...]`` span."""
    spans = []
    for start, ch in enumerate(text):
        if ch not in "{[":
            continue
        stack, in_str, esc = [], False, False
        for i in range(start, len(text)):
            c = text[i]
            if in_str:
                if esc:
                    esc = False
                elif c == "\\":
                    esc = True
                elif c == '"':
                    in_str = False
                continue
            if c == '"':
                in_str = True
            elif c in "{[":
                stack.append("}" if c == "{" else "]")
            elif c in "}]":
                if not stack or stack.pop() != c:
                    break
                if not stack:
                    spans.append((start, i + 1))
                    break
    return spans


def extract_json_block(reply: str):
    """Parse the first fenced block that is valid JSON.

    Falls back to the longest bracket-balanced substring that parses.
    """
    for m in _FENCE.finditer(reply):
        try:
            return json.loads(m.group(2))
        except json.JSONDecodeError:
            continue
    for start, end in sorted(_balanced_spans(reply), key=lambda s: (s[0] - s[1], s[0])):
        try:
            return json.loads(reply[start:end])
        except json.JSONDecodeError:
            continue
    raise ParseFailure("no parseable JSON found in reply")
