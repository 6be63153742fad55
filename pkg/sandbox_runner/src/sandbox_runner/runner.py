"""Execute one untrusted script under resource limits and report feedback."""

from __future__ import annotations

import base64
import hashlib
import os
import shutil
import signal
import subprocess
import sys
import tempfile
from pathlib import Path
from typing import Any

DEFAULT_CPU_SECONDS = 10.0
DEFAULT_MEMORY_BYTES = 256 * 1024 * 1024
DEFAULT_WALL_CLOCK_SECONDS = 30.0
GRACE_SECONDS = 1.0

STREAM_CAP = 100_000
ARTIFACT_CONTENT_CAP = 256 * 1024

SCRIPT_NAME = "__script__.py"

# Imported by the child interpreter at startup (via PYTHONPATH); turns every
# socket constructor into an error so the executed script cannot reach the
# network even though it runs in a separate process.
SITECUSTOMIZE = """\
import socket


def _network_disabled(*args, **kwargs):
    raise OSError("network disabled in sandbox")


socket.socket = _network_disabled
socket.create_connection = _network_disabled
socket.create_server = _network_disabled
socket.getaddrinfo = _network_disabled
"""


def _error(message: str, error_class: str, stdout: str = "", stderr: str = "") -> dict[str, Any]:
    return {
        "status": "error",
        "stdout": stdout,
        "stderr": stderr,
        "error": message,
        "error_class": error_class,
        "artifacts": [],
    }


def _clip(text: str) -> str:
    if len(text) > STREAM_CAP:
        return text[:STREAM_CAP] + "[truncated]"
    return text


def _validate(request: Any) -> str | None:
    if not isinstance(request, dict):
        return "request must be an object"
    if not isinstance(request.get("script"), str) or not request["script"]:
        return "request.script must be a non-empty string"
    manifest = request.get("manifest", [])
    if not isinstance(manifest, list):
        return "request.manifest must be a list"
    for item in manifest:
        if not isinstance(item, dict) or not isinstance(item.get("name"), str):
            return "manifest entries must be {name, content_b64} objects"
        name = item["name"]
        if name.startswith(("/", "\\")) or ".." in Path(name).parts or not name:
            return f"manifest name {name!r} must be a relative path without '..'"
    limits = request.get("limits", {})
    if not isinstance(limits, dict):
        return "request.limits must be an object"
    for key in ("cpu_seconds", "memory_bytes", "wall_clock_seconds"):
        value = limits.get(key)
        if value is not None and (not isinstance(value, (int, float)) or value <= 0):
            return f"limits.{key} must be a positive number"
    return None


def _snapshot(scratch: Path) -> dict[str, str]:
    digests = {}
    for path in scratch.rglob("*"):
        if path.is_file():
            digests[str(path.relative_to(scratch))] = hashlib.sha256(
                path.read_bytes()
            ).hexdigest()
    return digests


def _collect_artifacts(scratch: Path, before: dict[str, str]) -> list[dict[str, str]]:
    """New or modified files, excluding the runner's own support files."""
    artifacts = []
    for path in sorted(scratch.rglob("*")):
        if not path.is_file():
            continue
        name = str(path.relative_to(scratch))
        if name in (SCRIPT_NAME, "sitecustomize.py") or "__pycache__" in Path(name).parts:
            continue
        digest = hashlib.sha256(path.read_bytes()).hexdigest()
        if before.get(name) == digest:
            continue
        entry: dict[str, str] = {"name": name}
        if path.stat().st_size <= ARTIFACT_CONTENT_CAP:
            entry["content_b64"] = base64.b64encode(path.read_bytes()).decode("ascii")
        artifacts.append(entry)
    return artifacts


def _limit_preexec(cpu_seconds: float, memory_bytes: int):
    import resource

    cpu = max(int(cpu_seconds), 1)

    def apply_limits() -> None:
        # Soft cpu limit raises SIGXCPU at `cpu`; the kernel hard-kills one
        # second later, which is the protocol's grace period.
        resource.setrlimit(resource.RLIMIT_CPU, (cpu, cpu + 1))
        resource.setrlimit(resource.RLIMIT_AS, (memory_bytes, memory_bytes))
        resource.setrlimit(resource.RLIMIT_NPROC, (64, 64))
        os.setsid()

    return apply_limits


def run_script(request: Any) -> dict[str, Any]:
    """Run one request to completion; always returns a well-formed feedback dict."""
    problem = _validate(request)
    if problem is not None:
        return _error(problem, "protocol")

    limits = request.get("limits", {})
    cpu_seconds = float(limits.get("cpu_seconds", DEFAULT_CPU_SECONDS))
    memory_bytes = int(limits.get("memory_bytes", DEFAULT_MEMORY_BYTES))
    wall_clock = float(limits.get("wall_clock_seconds", DEFAULT_WALL_CLOCK_SECONDS))

    scratch = Path(tempfile.mkdtemp(prefix="sandbox-run-"))
    try:
        for item in request.get("manifest", []):
            target = scratch / item["name"]
            target.parent.mkdir(parents=True, exist_ok=True)
            try:
                target.write_bytes(base64.b64decode(item.get("content_b64", "")))
            except (ValueError, OSError) as exc:
                return _error(f"cannot materialize {item['name']!r}: {exc}", "protocol")
        (scratch / SCRIPT_NAME).write_text(request["script"], encoding="utf-8")
        (scratch / "sitecustomize.py").write_text(SITECUSTOMIZE, encoding="utf-8")
        before = _snapshot(scratch)

        env = {
            "PATH": os.environ.get("PATH", "/usr/bin:/bin"),
            "PYTHONPATH": str(scratch),
            "HOME": str(scratch),
            "LC_ALL": "C.UTF-8",
        }
        try:
            completed = subprocess.run(
                [sys.executable, SCRIPT_NAME],
                cwd=scratch,
                env=env,
                capture_output=True,
                text=True,
                timeout=wall_clock + GRACE_SECONDS,
                preexec_fn=_limit_preexec(cpu_seconds, memory_bytes),
            )
        except subprocess.TimeoutExpired as exc:
            stdout = (exc.stdout or b"").decode("utf-8", "replace") if isinstance(exc.stdout, bytes) else (exc.stdout or "")
            stderr = (exc.stderr or b"").decode("utf-8", "replace") if isinstance(exc.stderr, bytes) else (exc.stderr or "")
            return _error(
                f"resource limit: wall clock exceeded {wall_clock:g}s",
                "resource limit",
                stdout=_clip(stdout),
                stderr=_clip(stderr),
            )

        stdout = _clip(completed.stdout)
        stderr = _clip(completed.stderr)

        if completed.returncode < 0:
            sig = -completed.returncode
            if sig in (signal.SIGXCPU, signal.SIGKILL):
                return _error(
                    f"resource limit: cpu exceeded {cpu_seconds:g}s",
                    "resource limit",
                    stdout=stdout,
                    stderr=stderr,
                )
            return _error(f"killed by signal {sig}", "runtime", stdout=stdout, stderr=stderr)

        if completed.returncode != 0:
            if "MemoryError" in stderr:
                return _error(
                    f"resource limit: memory exceeded {memory_bytes} bytes",
                    "resource limit",
                    stdout=stdout,
                    stderr=stderr,
                )
            tail = [line for line in stderr.splitlines() if line.strip()]
            message = tail[-1] if tail else f"exit code {completed.returncode}"
            return _error(message, "runtime", stdout=stdout, stderr=stderr)

        return {
            "status": "ok",
            "stdout": stdout,
            "stderr": stderr,
            "error": None,
            "error_class": None,
            "artifacts": _collect_artifacts(scratch, before),
        }
    finally:
        shutil.rmtree(scratch, ignore_errors=True)
