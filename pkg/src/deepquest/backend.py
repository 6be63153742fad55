"""Chat-completion backends: live HTTP, deterministic scripted, and replay.

Every model call in the runtime goes through ``complete(ChatRequest)``. The
scripted backend answers from a fixture keyed by (purpose, per-purpose call
counter), which keeps tests independent of prompt wording. A recording
wrapper appends every reply to the run trace so any run can be replayed
offline.
"""

from __future__ import annotations

import json
import time
from dataclasses import dataclass
from enum import Enum
from pathlib import Path
from typing import Any, Iterable, Protocol

from deepquest.trace import TraceWriter


class Purpose(str, Enum):
    """Which part of the runtime is asking; scripted fixtures key on this."""

    PLANNING = "planning"
    MEMORY = "memory"
    SUPERVISOR_DIAGNOSIS = "supervisor_diagnosis"
    SUPERVISOR_REGEN = "supervisor_regen"
    SUBAGENT_BROWSER = "subagent_browser"
    SUBAGENT_DATA = "subagent_data"
    SYNTHESIS = "synthesis"


@dataclass(frozen=True)
class Message:
    """One chat message; attachments are opaque refs (screenshots, files)."""

    role: str
    text: str
    attachments: tuple[str, ...] = ()


@dataclass(frozen=True)
class Sampling:
    temperature: float = 1.0
    top_p: float = 0.95

    def __post_init__(self) -> None:
        if not (0.0 <= self.temperature <= 2.0):
            raise ValueError("temperature must be in [0, 2]")
        if not (0.0 < self.top_p <= 1.0):
            raise ValueError("top_p must be in (0, 1]")


@dataclass(frozen=True)
class ChatRequest:
    messages: tuple[Message, ...]
    purpose: Purpose
    tool_schemas: tuple[dict, ...] = ()
    sampling: Sampling = Sampling()

    def __post_init__(self) -> None:
        if not self.messages:
            raise ValueError("request requires at least one message")


@dataclass(frozen=True)
class ChatReply:
    text: str = ""
    structured_call: tuple[str, dict] | None = None
    usage: dict[str, int] | None = None


class BackendError(RuntimeError):
    """Base class for backend failures."""


class BackendUnreachable(BackendError):
    """The live endpoint could not be reached after the configured retries."""


class FixtureUnderflow(BackendError):
    """A scripted fixture ran out of replies for a purpose."""

    def __init__(self, purpose: Purpose, index: int):
        super().__init__(f"scripted fixture has no reply for purpose={purpose.value} index={index}")
        self.purpose = purpose
        self.index = index


class ModelBackend(Protocol):
    def complete(self, request: ChatRequest) -> ChatReply: ...


@dataclass(frozen=True)
class FixtureEntry:
    purpose: Purpose
    index: int
    reply_text: str = ""
    structured_call: tuple[str, dict] | None = None

    def reply(self) -> ChatReply:
        return ChatReply(text=self.reply_text, structured_call=self.structured_call)


class ScriptedBackend:
    """Deterministic replies selected by (purpose, per-purpose call counter).

    Counters are per instance, so each run gets its own backend. Timing and
    prompt content never influence the reply.
    """

    def __init__(self, entries: Iterable[FixtureEntry]):
        self._table: dict[tuple[str, int], FixtureEntry] = {}
        for entry in entries:
            key = (entry.purpose.value, entry.index)
            if key in self._table:
                raise ValueError(f"duplicate fixture entry for {key}")
            self._table[key] = entry
        self._counters: dict[str, int] = {}

    @classmethod
    def from_path(cls, path: str | Path) -> "ScriptedBackend":
        """Load a JSONL fixture of {purpose, index, reply_text, structured_call}."""
        entries = []
        with open(path, "r", encoding="utf-8") as stream:
            for lineno, line in enumerate(stream, start=1):
                line = line.strip()
                if not line:
                    continue
                try:
                    data = json.loads(line)
                except json.JSONDecodeError as exc:
                    raise ValueError(f"{path}:{lineno}: invalid fixture line: {exc}") from exc
                entries.append(fixture_entry_from_dict(data))
        return cls(entries)

    def complete(self, request: ChatRequest) -> ChatReply:
        purpose = request.purpose.value
        index = self._counters.get(purpose, 0) + 1
        entry = self._table.get((purpose, index))
        if entry is None:
            raise FixtureUnderflow(request.purpose, index)
        self._counters[purpose] = index
        return entry.reply()


def fixture_entry_from_dict(data: dict[str, Any]) -> FixtureEntry:
    call = data.get("structured_call")
    structured = None
    if call:
        structured = (call["name"], dict(call.get("arguments") or {}))
    return FixtureEntry(
        purpose=Purpose(data["purpose"]),
        index=int(data["index"]),
        reply_text=data.get("reply_text", ""),
        structured_call=structured,
    )


def write_fixture(path: str | Path, entries: Iterable[FixtureEntry]) -> None:
    with open(path, "w", encoding="utf-8") as stream:
        for entry in entries:
            record = {
                "purpose": entry.purpose.value,
                "index": entry.index,
                "reply_text": entry.reply_text,
                "structured_call": (
                    {"name": entry.structured_call[0], "arguments": entry.structured_call[1]}
                    if entry.structured_call
                    else None
                ),
            }
            stream.write(json.dumps(record, sort_keys=True) + "\n")


class HttpBackend:
    """Client for a chat-completion endpoint with function-calling support.

    Sends the message list plus tool schemas, returns the assistant message
    and its first tool call if any. Transient failures (connection errors,
    5xx) are retried with a short backoff.
    """

    def __init__(
        self,
        base_url: str,
        model: str,
        api_key: str = "",
        max_retries: int = 2,
        request_timeout: float = 120.0,
        backoff_seconds: float = 1.0,
    ):
        self.base_url = base_url.rstrip("/")
        self.model = model
        self.api_key = api_key
        self.max_retries = max_retries
        self.request_timeout = request_timeout
        self.backoff_seconds = backoff_seconds

    def _payload(self, request: ChatRequest) -> dict[str, Any]:
        messages: list[dict[str, Any]] = []
        for message in request.messages:
            if message.attachments:
                content: Any = [{"type": "text", "text": message.text}]
                content.extend(
                    {"type": "image_url", "image_url": {"url": ref}} for ref in message.attachments
                )
            else:
                content = message.text
            messages.append({"role": message.role, "content": content})
        payload: dict[str, Any] = {
            "model": self.model,
            "messages": messages,
            "temperature": request.sampling.temperature,
            "top_p": request.sampling.top_p,
        }
        if request.tool_schemas:
            payload["tools"] = [
                {"type": "function", "function": schema} for schema in request.tool_schemas
            ]
        return payload

    def complete(self, request: ChatRequest) -> ChatReply:
        import requests

        headers = {"Content-Type": "application/json"}
        if self.api_key:
            headers["Authorization"] = f"Bearer {self.api_key}"
        url = f"{self.base_url}/chat/completions"
        last_error: Exception | None = None
        for attempt in range(self.max_retries + 1):
            try:
                http_response = requests.post(
                    url, json=self._payload(request), headers=headers, timeout=self.request_timeout
                )
                if http_response.status_code >= 500:
                    raise requests.ConnectionError(f"server error {http_response.status_code}")
                http_response.raise_for_status()
                return self._parse(http_response.json())
            except (requests.ConnectionError, requests.Timeout) as exc:
                last_error = exc
                if attempt < self.max_retries:
                    time.sleep(self.backoff_seconds * (attempt + 1))
        raise BackendUnreachable(f"endpoint {url} unreachable: {last_error}")

    @staticmethod
    def _parse(body: dict[str, Any]) -> ChatReply:
        message = body["choices"][0]["message"]
        text = message.get("content") or ""
        structured = None
        tool_calls = message.get("tool_calls") or []
        if tool_calls:
            function = tool_calls[0]["function"]
            raw_args = function.get("arguments") or "{}"
            try:
                arguments = json.loads(raw_args) if isinstance(raw_args, str) else dict(raw_args)
            except json.JSONDecodeError:
                arguments = {"_raw": raw_args}
            structured = (function["name"], arguments)
        usage = body.get("usage")
        return ChatReply(text=text, structured_call=structured, usage=usage)


class RecordingBackend:
    """Wraps a backend and appends every reply to the trace for replay."""

    def __init__(self, inner: ModelBackend, trace: TraceWriter):
        self._inner = inner
        self._trace = trace
        self._counters: dict[str, int] = {}

    def complete(self, request: ChatRequest) -> ChatReply:
        reply = self._inner.complete(request)
        purpose = request.purpose.value
        index = self._counters.get(purpose, 0) + 1
        self._counters[purpose] = index
        self._trace.write(
            {
                "kind": "backend",
                "purpose": purpose,
                "index": index,
                "reply_text": reply.text,
                "structured_call": (
                    {"name": reply.structured_call[0], "arguments": reply.structured_call[1]}
                    if reply.structured_call
                    else None
                ),
            }
        )
        return reply


def replay_backend(records: Iterable[dict[str, Any]]) -> ScriptedBackend:
    """Build a scripted backend from a recorded trace's backend records."""
    entries = []
    for record in records:
        if record.get("kind") != "backend":
            continue
        entries.append(
            fixture_entry_from_dict(
                {
                    "purpose": record["purpose"],
                    "index": record["index"],
                    "reply_text": record.get("reply_text", ""),
                    "structured_call": record.get("structured_call"),
                }
            )
        )
    return ScriptedBackend(entries)
