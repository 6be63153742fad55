"""Canonical data model for runs: queries, rounds, observations, memory units.

Everything here is an immutable value. A run mutates nothing in place; each
round produces new values inside a single sequential loop, so instances are
safe to share read-only across threads.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from enum import Enum

# Tool output folded into an Observation is clipped so that one noisy tool
# cannot defeat the memory design.
OBSERVATION_PAYLOAD_CAP = 20_000
TRUNCATION_MARKER = "[truncated]"

# Per-entry budget for persistent tool-log digests.
DIGEST_CAP = 500

DEFAULT_MAX_TOOL_CALLS = 75
DEFAULT_MAX_WALL_CLOCK_SECONDS = 90 * 60.0
DEFAULT_MAX_SUBAGENT_STEPS = 10


class ContractViolation(ValueError):
    """A caller broke an operation's precondition."""


@dataclass(frozen=True)
class FileRef:
    """A file attached to a query: path plus declared media type."""

    path: str
    media_type: str = "application/octet-stream"


@dataclass(frozen=True)
class UserQuery:
    """The natural-language task a run answers, with optional file attachments."""

    id: str
    text: str
    attachments: tuple[FileRef, ...] = ()

    def __post_init__(self) -> None:
        if not self.text:
            raise ValueError("query text must be non-empty")
        paths = [a.path for a in self.attachments]
        if len(paths) != len(set(paths)):
            raise ValueError("attachment paths must be unique")


@dataclass(frozen=True)
class ToolInvocation:
    """One capability call as emitted by the planner."""

    capability_name: str
    arguments: dict = field(default_factory=dict)
    raw_text: str = ""

    def __post_init__(self) -> None:
        if not self.capability_name:
            raise ValueError("capability_name must be non-empty")
        try:
            json.dumps(self.arguments)
        except (TypeError, ValueError) as exc:
            raise ValueError(f"arguments are not losslessly serializable: {exc}") from exc


class ObservationStatus(str, Enum):
    OK = "ok"
    TOOL_ERROR = "tool_error"
    PARSE_ERROR = "parse_error"
    TIMEOUT = "timeout"


@dataclass(frozen=True)
class Observation:
    """What came back from executing one invocation.

    ``status == OK`` if and only if ``error_detail`` is absent. The payload is
    clipped to ``OBSERVATION_PAYLOAD_CAP`` characters with an explicit
    truncation marker appended.
    """

    status: ObservationStatus
    payload: str = ""
    error_detail: str | None = None
    produced_at: float = 0.0

    def __post_init__(self) -> None:
        if self.status is ObservationStatus.OK and self.error_detail is not None:
            raise ValueError("ok observation must not carry error_detail")
        if self.status is not ObservationStatus.OK and not self.error_detail:
            raise ValueError(f"{self.status.value} observation requires error_detail")
        if len(self.payload) > OBSERVATION_PAYLOAD_CAP:
            clipped = self.payload[:OBSERVATION_PAYLOAD_CAP] + TRUNCATION_MARKER
            object.__setattr__(self, "payload", clipped)


@dataclass(frozen=True)
class AgentResponse:
    """One planner turn: reasoning plus either an action or a final answer.

    A well-formed response either acts (``invocation``) or terminates
    (``final_answer``), never both. When the model output could not be parsed
    at all, ``parse_error`` is set instead and both channels stay empty; the
    supervisor treats such rounds as syntactic anomalies.
    """

    reasoning: str = ""
    invocation: ToolInvocation | None = None
    final_answer: str | None = None
    parse_error: str | None = None
    notes: tuple[str, ...] = ()

    def __post_init__(self) -> None:
        if self.parse_error is not None:
            if self.invocation is not None or self.final_answer is not None:
                raise ValueError("a parse-failure response carries no action or answer")
            return
        has_action = self.invocation is not None
        has_answer = self.final_answer is not None
        if has_action == has_answer:
            raise ValueError("response must carry exactly one of invocation, final_answer")


@dataclass(frozen=True)
class Round:
    """One main-agent turn: global index, response, and its observation.

    The observation is present exactly when the response's invocation was
    dispatched. Terminal rounds (final answer) and parse-failure rounds have
    none.
    """

    index: int
    response: AgentResponse
    observation: Observation | None = None

    def __post_init__(self) -> None:
        if self.index < 1:
            raise ValueError("round index starts at 1")
        if self.response.final_answer is not None and self.observation is not None:
            raise ValueError("terminal round carries no observation")
        if self.response.parse_error is not None and self.observation is not None:
            raise ValueError("parse-failure round carries no observation")


@dataclass(frozen=True)
class ToolLogEntry:
    """Compact, persistent record of one tool call inside a memory unit."""

    round_index: int
    capability_name: str
    arguments_digest: str
    result_digest: str

    def __post_init__(self) -> None:
        if not self.arguments_digest or not self.result_digest:
            raise ValueError("digests must be non-empty")
        if len(self.arguments_digest) > DIGEST_CAP or len(self.result_digest) > DIGEST_CAP:
            raise ValueError(f"digests are capped at {DIGEST_CAP} characters")


def make_digest(text: str) -> str:
    """Collapse whitespace and clip to the per-entry digest budget."""
    compact = " ".join(text.split()) or "(empty)"
    if len(compact) > DIGEST_CAP:
        compact = compact[: DIGEST_CAP - 1] + "…"
    return compact


def arguments_digest(arguments: dict) -> str:
    """Deterministic one-line rendering of call arguments, sorted by key."""
    if not arguments:
        return "(no arguments)"
    parts = [f"{key}={json.dumps(arguments[key], sort_keys=True)}" for key in sorted(arguments)]
    return make_digest(", ".join(parts))


@dataclass(frozen=True)
class MemoryUnit:
    """One folded sub-goal: the rounds it spans, its tool log, and a summary.

    Kept deliberately permissive at construction so that
    :func:`validate_memory_list` can report structural violations instead of
    making them unrepresentable.
    """

    round_indices: tuple[int, ...]
    sub_goal: str
    tool_log: tuple[ToolLogEntry, ...] = ()
    summary: str = ""


@dataclass(frozen=True)
class MemoryList:
    """Ordered list of memory units covering all rounds processed so far."""

    units: tuple[MemoryUnit, ...] = ()

    def __len__(self) -> int:
        return len(self.units)

    @property
    def latest(self) -> MemoryUnit | None:
        return self.units[-1] if self.units else None


@dataclass(frozen=True)
class RunBudget:
    """Hard caps for one run: tool calls, wall clock, sub-agent steps."""

    max_tool_calls: int = DEFAULT_MAX_TOOL_CALLS
    max_wall_clock_seconds: float = DEFAULT_MAX_WALL_CLOCK_SECONDS
    max_subagent_steps: int = DEFAULT_MAX_SUBAGENT_STEPS

    def __post_init__(self) -> None:
        if self.max_tool_calls <= 0 or self.max_wall_clock_seconds <= 0 or self.max_subagent_steps <= 0:
            raise ValueError("all budget limits must be positive")


@dataclass(frozen=True)
class ValidationReport:
    """Outcome of a memory-list structure check. Empty violations == valid."""

    violations: tuple[str, ...] = ()

    @property
    def ok(self) -> bool:
        return not self.violations


def validate_memory_list(memory: MemoryList, processed_rounds: int) -> ValidationReport:
    """Check that the units partition rounds 1..processed_rounds in order.

    Reports every violation rather than raising: empty units, non-increasing
    or non-contiguous indices inside a unit, overlaps between units, gaps in
    the covered range, rounds beyond the processed count, and units out of
    round order.
    """
    violations: list[str] = []
    seen: dict[int, int] = {}

    for pos, unit in enumerate(memory.units, start=1):
        if not unit.round_indices:
            violations.append(f"empty unit at position {pos}")
            continue
        if not unit.sub_goal:
            violations.append(f"unit {pos} has an empty sub_goal")
        indices = unit.round_indices
        if any(b <= a for a, b in zip(indices, indices[1:])):
            violations.append(f"unit {pos} round indices not strictly increasing")
        elif indices[-1] - indices[0] + 1 != len(indices):
            violations.append(f"unit {pos} round indices not contiguous")
        for idx in indices:
            seen[idx] = seen.get(idx, 0) + 1

    for idx in sorted(i for i, count in seen.items() if count > 1):
        violations.append(f"overlap at round {idx}")
    for idx in range(1, processed_rounds + 1):
        if idx not in seen:
            violations.append(f"gap at round {idx}")
    for idx in sorted(i for i in seen if i < 1 or i > processed_rounds):
        violations.append(f"round {idx} outside processed range 1..{processed_rounds}")

    starts = [u.round_indices[0] for u in memory.units if u.round_indices]
    if any(b <= a for a, b in zip(starts, starts[1:])):
        violations.append("unit order does not match round order")

    return ValidationReport(tuple(violations))


def render_memory(memory: MemoryList) -> str:
    """Serialize folded memory as deterministic text.

    Each unit renders as a sub-goal header, one line per tool-log entry, and
    a summary line. Byte-identical across runs for identical input; an empty
    list renders as the empty string.
    """
    blocks: list[str] = []
    for pos, unit in enumerate(memory.units, start=1):
        lines = [f"## Sub-goal {pos}: {unit.sub_goal}"]
        lines.extend(
            f"- round {entry.round_index}: {entry.capability_name}"
            f"({entry.arguments_digest}) -> {entry.result_digest}"
            for entry in unit.tool_log
        )
        lines.append(f"Summary: {unit.summary}")
        blocks.append("\n".join(lines))
    return "\n\n".join(blocks)
