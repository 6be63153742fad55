"""Client side of the code-execution sandbox protocol.

Scripts run out of process. The wire protocol is length-prefixed JSON over
the runner's stdin/stdout: a 4-byte big-endian length, then a UTF-8 JSON
payload. Request: {script, manifest: [{name, content_b64}], limits:
{cpu_seconds, memory_bytes, wall_clock_seconds}}. Response: {status, stdout,
stderr, error, error_class, artifacts: [{name, ...}]}.

Tests use the stub client, which returns canned feedback and never spawns a
process.
"""

from __future__ import annotations

import base64
import json
import struct
import subprocess
from dataclasses import dataclass
from enum import Enum
from pathlib import Path
from typing import IO, Protocol, Sequence


class ExecStatus(str, Enum):
    OK = "ok"
    ERROR = "error"


@dataclass(frozen=True)
class ExecLimits:
    cpu_seconds: float = 10.0
    memory_bytes: int = 256 * 1024 * 1024
    wall_clock_seconds: float = 30.0


@dataclass(frozen=True)
class ExecFeedback:
    """Structured outcome of one sandboxed execution."""

    status: ExecStatus
    stdout: str = ""
    stderr: str = ""
    error: str = ""
    artifacts: tuple[str, ...] = ()

    def __post_init__(self) -> None:
        if self.status is ExecStatus.ERROR and not self.error:
            raise ValueError("error feedback requires an error message")

    def render(self) -> str:
        lines = [f"status: {self.status.value}"]
        if self.stdout:
            lines.append(f"stdout:\n{self.stdout}")
        if self.stderr:
            lines.append(f"stderr:\n{self.stderr}")
        if self.error:
            lines.append(f"error: {self.error}")
        if self.artifacts:
            lines.append("artifacts: " + ", ".join(self.artifacts))
        return "\n".join(lines)


class SandboxUnreachable(RuntimeError):
    """The runner process could not be started or did not answer."""


class SandboxClient(Protocol):
    def run(self, script: str, manifest: dict[str, bytes], limits: ExecLimits) -> ExecFeedback: ...


class StubSandbox:
    """Canned feedback in order; after the list is exhausted, returns ok.

    ``run`` never executes anything, which keeps the full test suite free of
    subprocesses and network access.
    """

    def __init__(self, feedbacks: Sequence[ExecFeedback] = ()):
        self._queue = list(feedbacks)
        self.requests: list[str] = []

    def run(self, script: str, manifest: dict[str, bytes], limits: ExecLimits) -> ExecFeedback:
        self.requests.append(script)
        if self._queue:
            return self._queue.pop(0)
        return ExecFeedback(status=ExecStatus.OK, stdout="")


def write_frame(stream: IO[bytes], payload: dict) -> None:
    data = json.dumps(payload, sort_keys=True).encode("utf-8")
    stream.write(struct.pack(">I", len(data)) + data)
    stream.flush()


def read_frame(stream: IO[bytes]) -> dict | None:
    header = stream.read(4)
    if len(header) < 4:
        return None
    (length,) = struct.unpack(">I", header)
    data = stream.read(length)
    if len(data) < length:
        return None
    return json.loads(data.decode("utf-8"))


def feedback_from_response(response: dict) -> ExecFeedback:
    status = ExecStatus(response.get("status", "error"))
    artifacts = tuple(item["name"] for item in response.get("artifacts", ()))
    return ExecFeedback(
        status=status,
        stdout=response.get("stdout", ""),
        stderr=response.get("stderr", ""),
        error=response.get("error") or ("" if status is ExecStatus.OK else "unknown error"),
        artifacts=artifacts,
    )


class SubprocessSandbox:
    """Runs each request through a fresh runner process over the wire protocol."""

    def __init__(self, command: Sequence[str]):
        if not command:
            raise ValueError("runner command must be non-empty")
        self.command = list(command)

    def run(self, script: str, manifest: dict[str, bytes], limits: ExecLimits) -> ExecFeedback:
        request = {
            "script": script,
            "manifest": [
                {"name": name, "content_b64": base64.b64encode(content).decode("ascii")}
                for name, content in sorted(manifest.items())
            ],
            "limits": {
                "cpu_seconds": limits.cpu_seconds,
                "memory_bytes": limits.memory_bytes,
                "wall_clock_seconds": limits.wall_clock_seconds,
            },
        }
        try:
            process = subprocess.Popen(
                self.command, stdin=subprocess.PIPE, stdout=subprocess.PIPE
            )
        except OSError as exc:
            raise SandboxUnreachable(f"cannot start runner {self.command!r}: {exc}") from exc
        assert process.stdin is not None and process.stdout is not None
        try:
            write_frame(process.stdin, request)
            process.stdin.close()
            # Grace: the runner enforces its own limits; this guards a hung runner.
            deadline = limits.wall_clock_seconds + limits.cpu_seconds + 10.0
            response = read_frame(process.stdout)
            process.wait(timeout=deadline)
        except (subprocess.TimeoutExpired, OSError) as exc:
            process.kill()
            raise SandboxUnreachable(f"runner did not answer: {exc}") from exc
        if response is None:
            raise SandboxUnreachable("runner closed the pipe without a response")
        return feedback_from_response(response)


def load_manifest(paths: Sequence[str | Path]) -> dict[str, bytes]:
    manifest: dict[str, bytes] = {}
    for path in paths:
        path = Path(path)
        manifest[path.name] = path.read_bytes()
    return manifest
