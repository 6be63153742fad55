"""Data-analysis sub-agent: profile files, then generate-execute-refine.

Profiling turns heterogeneous input files into a standardized context
(metadata, schema, preview). The analysis loop asks the backend for a script,
executes it in the sandbox, and feeds errors back for revision until the
model finishes or the execution budget runs out.
"""

from __future__ import annotations

import csv
import io
import json
import time
import zipfile
from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence

from deepquest.backend import ChatRequest, Message, ModelBackend, Purpose, Sampling
from deepquest.parsing import parse_tool_calls
from deepquest.sandbox import ExecFeedback, ExecLimits, ExecStatus, SandboxClient
from deepquest.trace import TraceWriter
from deepquest.trajectory import (
    DEFAULT_MAX_SUBAGENT_STEPS,
    Observation,
    ObservationStatus,
)

PREVIEW_ROWS = 10
PREVIEW_CHARS = 2_000

CODEGEN_INSTRUCTIONS = (
    "You automate data analysis with Python. Given the goal, the data profile, "
    "and the execution history, reply with one JSON object: either "
    '{"action": "run_script", "script": "<python source>"} to execute code, or '
    '{"action": "finish", "report": "<final summary with supporting evidence>"} '
    "when the goal is met. After an error, revise the script; never resubmit "
    "it unchanged."
)

_TABULAR_SUFFIXES = {".csv": ",", ".tsv": "\t"}
_TEXT_SUFFIXES = {".txt", ".md", ".markdown", ".log", ".json"}


@dataclass(frozen=True)
class ColumnSummary:
    minimum: float
    maximum: float
    mean: float


@dataclass(frozen=True)
class FileProfile:
    """Metadata, schema, and preview for one input file (or archive member)."""

    name: str
    size: int
    media_type: str
    error: str | None = None
    rows: int | None = None
    columns: tuple[str, ...] = ()
    preview: str = ""
    summaries: dict[str, ColumnSummary] = field(default_factory=dict)
    members: tuple["FileProfile", ...] = ()


@dataclass(frozen=True)
class DataProfile:
    entries: tuple[FileProfile, ...]

    def render(self) -> str:
        lines: list[str] = []
        for entry in self.entries:
            lines.extend(_render_entry(entry, indent=""))
        return "\n".join(lines)


def _render_entry(entry: FileProfile, indent: str) -> list[str]:
    lines = [f"{indent}## {entry.name} ({entry.media_type}, {entry.size} bytes)"]
    if entry.error:
        lines.append(f"{indent}error: {entry.error}")
        return lines
    if entry.rows is not None:
        lines.append(f"{indent}dimensions: ({entry.rows}, {len(entry.columns)})")
        lines.append(f"{indent}columns: {', '.join(entry.columns)}")
    if entry.summaries:
        for column, summary in entry.summaries.items():
            lines.append(
                f"{indent}{column}: min={summary.minimum:g} max={summary.maximum:g} "
                f"mean={summary.mean:g}"
            )
    if entry.preview:
        lines.append(f"{indent}preview:")
        lines.extend(f"{indent}  {line}" for line in entry.preview.splitlines())
    for member in entry.members:
        lines.extend(_render_entry(member, indent + "  "))
    return lines


def _profile_tabular(name: str, data: bytes, delimiter: str) -> FileProfile:
    text = data.decode("utf-8", errors="replace")
    reader = csv.reader(io.StringIO(text), delimiter=delimiter)
    rows = [row for row in reader if row]
    if not rows:
        return FileProfile(
            name=name, size=len(data), media_type="text/csv", rows=0, preview="(empty table)"
        )
    header = tuple(rows[0])
    body = rows[1:]
    preview_lines = [" | ".join(row) for row in rows[: PREVIEW_ROWS + 1]]
    summaries: dict[str, ColumnSummary] = {}
    for col, column_name in enumerate(header):
        values = []
        for row in body:
            if col >= len(row):
                continue
            try:
                values.append(float(row[col]))
            except ValueError:
                values = []
                break
        if values:
            summaries[column_name] = ColumnSummary(
                minimum=min(values), maximum=max(values), mean=sum(values) / len(values)
            )
    return FileProfile(
        name=name,
        size=len(data),
        media_type="text/csv",
        rows=len(body),
        columns=header,
        preview="\n".join(preview_lines),
        summaries=summaries,
    )


def _profile_bytes(name: str, data: bytes) -> FileProfile:
    """Profile in-memory content, routed by suffix and light content sniffing."""
    suffix = Path(name).suffix.lower()
    if len(data) == 0:
        return FileProfile(
            name=name, size=0, media_type="application/x-empty", preview="(empty file)"
        )
    if suffix in _TABULAR_SUFFIXES:
        return _profile_tabular(name, data, _TABULAR_SUFFIXES[suffix])
    if zipfile.is_zipfile(io.BytesIO(data)):
        members: list[FileProfile] = []
        with zipfile.ZipFile(io.BytesIO(data)) as archive:
            for info in archive.infolist():
                if info.is_dir():
                    continue
                members.append(_profile_bytes(info.filename, archive.read(info)))
        return FileProfile(
            name=name,
            size=len(data),
            media_type="application/zip",
            preview=f"archive with {len(members)} member(s)",
            members=tuple(members),
        )
    if suffix in _TEXT_SUFFIXES:
        text = data.decode("utf-8", errors="replace")
        return FileProfile(
            name=name, size=len(data), media_type="text/plain", preview=text[:PREVIEW_CHARS]
        )
    return FileProfile(
        name=name, size=len(data), media_type="application/octet-stream",
        preview="(binary content, metadata only)",
    )


def profile(files: Sequence[str | Path]) -> DataProfile:
    """Profile every input file; unreadable files still get an entry.

    Totality: the number of top-level entries always equals the number of
    input files, with archive members nested under their archive.
    """
    entries: list[FileProfile] = []
    for path in files:
        path = Path(path)
        try:
            data = path.read_bytes()
        except OSError as exc:
            entries.append(
                FileProfile(
                    name=path.name,
                    size=0,
                    media_type="unknown",
                    error=f"unreadable: {exc.__class__.__name__}: {exc}",
                )
            )
            continue
        entries.append(_profile_bytes(path.name, data))
    return DataProfile(entries=tuple(entries))


# ---------------------------------------------------------------------------
# Analysis loop
# ---------------------------------------------------------------------------


def _parse_codegen_reply(text: str, structured: tuple[str, dict] | None) -> dict | None:
    data: dict | None = None
    if structured is not None:
        data = dict(structured[1])
        data.setdefault("action", structured[0])
    else:
        for call in parse_tool_calls(text):
            merged = dict(call.arguments)
            merged.setdefault("action", call.name)
            data = merged
            break
        if data is None:
            try:
                candidate = json.loads(text.strip())
                if isinstance(candidate, dict):
                    data = candidate
            except json.JSONDecodeError:
                return None
    if data is None:
        return None
    action = data.get("action")
    if action == "run_script" and isinstance(data.get("script"), str) and data["script"]:
        return {"action": "run_script", "script": data["script"]}
    if action == "finish" and isinstance(data.get("report"), str):
        return {"action": "finish", "report": data["report"]}
    return None


def analysis_loop(
    goal: str,
    data_profile: DataProfile,
    backend: ModelBackend,
    sandbox: SandboxClient,
    manifest: dict[str, bytes] | None = None,
    max_steps: int = DEFAULT_MAX_SUBAGENT_STEPS,
    limits: ExecLimits | None = None,
    sampling: Sampling | None = None,
    trace: TraceWriter | None = None,
) -> Observation:
    """Generate, execute, and refine scripts until finished or out of budget.

    ``max_steps`` caps executions. Error feedback is appended to the history
    so the next generation can revise; resubmitting a byte-identical script
    after an error is treated as stagnation and ends the loop.
    """
    sampling = sampling or Sampling()
    manifest = manifest or {}
    limits = limits or ExecLimits()
    history: list[str] = []
    executions = 0
    last_feedback: ExecFeedback | None = None
    last_script: str | None = None
    flagged: str | None = None
    report = ""
    reparse_note = ""

    while executions < max_steps:
        prompt = "\n".join(
            [
                f"Goal: {goal}",
                "Data profile:",
                data_profile.render(),
                "Execution history:" if history else "No executions yet.",
                *history,
                reparse_note,
            ]
        )
        try:
            reply = backend.complete(
                ChatRequest(
                    messages=(
                        Message(role="system", text=CODEGEN_INSTRUCTIONS),
                        Message(role="user", text=prompt),
                    ),
                    purpose=Purpose.SUBAGENT_DATA,
                    sampling=sampling,
                )
            )
        except Exception as exc:
            flagged = f"backend failure: {exc}"
            break
        parsed = _parse_codegen_reply(reply.text, reply.structured_call)
        if parsed is None:
            if reparse_note:
                flagged = "unparseable generation reply twice; stopping"
                break
            reparse_note = "Your previous reply was not a valid action object; reply again."
            continue
        reparse_note = ""

        if parsed["action"] == "finish":
            report = parsed["report"]
            break

        script = parsed["script"]
        if (
            last_feedback is not None
            and last_feedback.status is ExecStatus.ERROR
            and script == last_script
        ):
            flagged = "identical script resubmitted after an error; stopping"
            break
        try:
            feedback = sandbox.run(script, manifest, limits)
        except Exception as exc:
            return Observation(
                status=ObservationStatus.TOOL_ERROR,
                error_detail=f"sandbox unreachable: {exc}",
                produced_at=time.time(),
            )
        executions += 1
        last_feedback = feedback
        last_script = script
        history.append(f"--- execution {executions} ---")
        history.append(f"script:\n{script}")
        history.append(feedback.render())
        if trace is not None:
            trace.write(
                {
                    "kind": "episode",
                    "agent": "data_analysis",
                    "step": executions,
                    "action": {"type": "run_script", "parameters": {}},
                    "status": feedback.status.value,
                    "detail": (feedback.stdout or feedback.error)[:300],
                }
            )
    else:
        flagged = f"execution budget of {max_steps} exhausted"

    lines = [
        "Data-analysis report",
        f"Goal: {goal}",
        f"Executions: {executions}",
    ]
    if flagged:
        lines.append(f"[best-effort] {flagged}")
    if report:
        lines.append(f"Summary: {report}")
    if last_feedback is not None:
        lines.append("Last execution feedback:")
        lines.append(last_feedback.render())
    return Observation(
        status=ObservationStatus.OK, payload="\n".join(lines), produced_at=time.time()
    )
