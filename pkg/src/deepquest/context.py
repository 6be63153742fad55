"""Folding memory and adaptive context construction.

After every round a memory model decides whether the round continued the
current sub-goal (fold: the latest unit is replaced in place) or opened a
new one (add: a fresh unit is appended). The model context is then either
extended incrementally or, at the first round of a new unit, reset to the
query plus the serialized memory of all completed units. That reset is what
keeps context size proportional to the number of sub-goals instead of the
number of rounds.

The runtime, not the model, maintains round indices and tool logs, so the
partition invariants hold regardless of model quality.
"""

from __future__ import annotations

import json
import re
from dataclasses import dataclass
from enum import Enum
from pathlib import Path
from typing import Any, Iterable

from deepquest.backend import ChatRequest, Message, ModelBackend, Purpose
from deepquest.trace import TraceError, read_trace
from deepquest.trajectory import (
    AgentResponse,
    ContractViolation,
    MemoryList,
    MemoryUnit,
    Observation,
    Round,
    ToolLogEntry,
    UserQuery,
    arguments_digest,
    make_digest,
    render_memory,
)

SUMMARY_CHAR_BUDGET = 1_500

FALLBACK_SUB_GOAL = "(sub-goal pending)"

MEMORY_INSTRUCTIONS = (
    "You maintain the working memory of a research agent. Given the current "
    "sub-goal state and the latest round, reply with a single JSON object: "
    '{"same_sub_goal": true|false, "sub_goal": "<short description>", '
    '"summary": "<dense summary of key findings so far>"}. '
    "Set same_sub_goal to true when the round continued the current sub-goal; "
    "then sub_goal must restate the current one and summary must be its "
    "updated summary. Set it to false when the round started a new sub-goal; "
    "then sub_goal names the new one and summary holds its initial findings."
)


@dataclass(frozen=True)
class MemoryStepOutcome:
    """Result of one memory update: the unit to store and the fold flag."""

    unit: MemoryUnit
    fold: bool


class ContextMode(str, Enum):
    INCREMENTAL = "incremental"
    RESET = "reset"


@dataclass(frozen=True)
class ContextMessage:
    """One entry of the rendered model input.

    ``round_index`` ties response/observation messages to their round so the
    supervisor can prune them; structural messages (preamble, query, memory,
    guidance) carry None.
    """

    role: str
    text: str
    round_index: int | None = None
    tag: str = ""


@dataclass(frozen=True)
class ContextState:
    """The rendered model input after a round, incremental or reset."""

    messages: tuple[ContextMessage, ...]
    mode: ContextMode
    rounds_in_current_unit: int

    def __post_init__(self) -> None:
        if not self.messages or self.messages[0].tag != "preamble" or self.messages[1].tag != "query":
            raise ValueError("context must begin with the system preamble and the query")


def query_text(query: UserQuery) -> str:
    lines = [query.text]
    if query.attachments:
        lines.append("Attached files:")
        lines.extend(f"- {ref.path} ({ref.media_type})" for ref in query.attachments)
    return "\n".join(lines)


def _base_messages(query: UserQuery, preamble: str) -> list[ContextMessage]:
    return [
        ContextMessage(role="system", text=preamble, tag="preamble"),
        ContextMessage(role="user", text=query_text(query), tag="query"),
    ]


def render_response_text(response: AgentResponse) -> str:
    """Stable text footprint of a response for the context window."""
    parts = [response.reasoning] if response.reasoning else []
    if response.invocation is not None and response.invocation.raw_text not in response.reasoning:
        call = response.invocation
        parts.append(f"[call] {call.capability_name}({json.dumps(call.arguments, sort_keys=True)})")
    if response.final_answer is not None:
        parts.append(f"FINAL ANSWER: {response.final_answer}")
    if response.parse_error is not None:
        parts.append(f"[unparseable output: {response.parse_error}]")
    return "\n".join(parts) or "(empty response)"


def round_messages(rnd: Round) -> list[ContextMessage]:
    messages = [
        ContextMessage(
            role="assistant",
            text=render_response_text(rnd.response),
            round_index=rnd.index,
            tag="response",
        )
    ]
    if rnd.observation is not None:
        messages.append(
            ContextMessage(
                role="tool",
                text=f"[{rnd.observation.status.value}] "
                + (rnd.observation.payload or rnd.observation.error_detail or ""),
                round_index=rnd.index,
                tag="observation",
            )
        )
    return messages


# ---------------------------------------------------------------------------
# Memory step
# ---------------------------------------------------------------------------


def _tool_log_entry(rnd: Round) -> ToolLogEntry | None:
    if rnd.response.invocation is None or rnd.observation is None:
        return None
    return ToolLogEntry(
        round_index=rnd.index,
        capability_name=rnd.response.invocation.capability_name,
        arguments_digest=arguments_digest(rnd.response.invocation.arguments),
        result_digest=make_digest(
            rnd.observation.payload or rnd.observation.error_detail or ""
        ),
    )


def _clip_summary(summary: str, budget: int) -> str:
    return summary if len(summary) <= budget else summary[:budget]

_JSON_BLOB = re.compile(r"\{.*\}", re.DOTALL)


def _parse_memory_reply(text: str, structured: tuple[str, dict] | None) -> dict[str, Any] | None:
    """Extract {same_sub_goal, sub_goal, summary} from a model reply."""
    data: Any = None
    if structured is not None:
        data = structured[1]
    else:
        match = _JSON_BLOB.search(text)
        if match:
            try:
                data = json.loads(match.group(0))
            except json.JSONDecodeError:
                return None
    if not isinstance(data, dict) or "same_sub_goal" not in data:
        return None
    same = data["same_sub_goal"]
    sub_goal = data.get("sub_goal", "")
    summary = data.get("summary", "")
    if not isinstance(same, bool) or not isinstance(sub_goal, str) or not isinstance(summary, str):
        return None
    if not same and not sub_goal:
        return None
    return {"same_sub_goal": same, "sub_goal": sub_goal, "summary": summary}


def _memory_request(
    rnd: Round, latest_unit: MemoryUnit | None, sampling
) -> ChatRequest:
    state_lines = []
    if latest_unit is None:
        state_lines.append("No sub-goal is open yet; this is the first round.")
    else:
        state_lines.append(f"Current sub-goal: {latest_unit.sub_goal}")
        state_lines.append(f"Current summary: {latest_unit.summary or '(none)'}")
    state_lines.append(f"Round {rnd.index} assistant output:")
    state_lines.append(render_response_text(rnd.response))
    if rnd.observation is not None:
        state_lines.append(f"Round {rnd.index} observation ({rnd.observation.status.value}):")
        state_lines.append(rnd.observation.payload or rnd.observation.error_detail or "")
    return ChatRequest(
        messages=(
            Message(role="system", text=MEMORY_INSTRUCTIONS),
            Message(role="user", text="\n".join(state_lines)),
        ),
        purpose=Purpose.MEMORY,
        sampling=sampling,
    )


def _fallback_outcome(
    rnd: Round, latest_unit: MemoryUnit | None, entry: ToolLogEntry | None
) -> MemoryStepOutcome:
    # Conservative: a lost or unparseable memory reply never loses a unit
    # boundary permanently; the current sub-goal simply continues.
    if latest_unit is None:
        unit = MemoryUnit(
            round_indices=(rnd.index,),
            sub_goal=FALLBACK_SUB_GOAL,
            tool_log=(entry,) if entry else (),
            summary="",
        )
        return MemoryStepOutcome(unit=unit, fold=False)
    unit = MemoryUnit(
        round_indices=latest_unit.round_indices + (rnd.index,),
        sub_goal=latest_unit.sub_goal,
        tool_log=latest_unit.tool_log + ((entry,) if entry else ()),
        summary=latest_unit.summary,
    )
    return MemoryStepOutcome(unit=unit, fold=True)


def memory_step(
    rnd: Round,
    latest_unit: MemoryUnit | None,
    backend: ModelBackend,
    sampling=None,
    summary_budget: int = SUMMARY_CHAR_BUDGET,
) -> MemoryStepOutcome:
    """Decide fold-vs-add for one round and produce the updated unit.

    The backend is asked for a structured verdict; round indices and tool-log
    entries are appended mechanically by the runtime. A failed or unparseable
    backend reply is retried once, then the deterministic fallback applies:
    continue the current sub-goal with the summary unchanged. Parse-failure
    rounds skip the backend entirely and take the fallback.
    """
    from deepquest.backend import Sampling

    sampling = sampling or Sampling()
    entry = _tool_log_entry(rnd)

    if rnd.response.parse_error is not None:
        return _fallback_outcome(rnd, latest_unit, entry)

    parsed: dict[str, Any] | None = None
    request = _memory_request(rnd, latest_unit, sampling)
    for _ in range(2):
        try:
            reply = backend.complete(request)
        except Exception:
            continue
        parsed = _parse_memory_reply(reply.text, reply.structured_call)
        if parsed is not None:
            break
    if parsed is None:
        return _fallback_outcome(rnd, latest_unit, entry)

    summary = _clip_summary(parsed["summary"], summary_budget)
    if latest_unit is None or not parsed["same_sub_goal"]:
        # New sub-goal (forced at round 1, where no prior unit exists).
        sub_goal = parsed["sub_goal"] or FALLBACK_SUB_GOAL
        unit = MemoryUnit(
            round_indices=(rnd.index,),
            sub_goal=sub_goal,
            tool_log=(entry,) if entry else (),
            summary=summary,
        )
        return MemoryStepOutcome(unit=unit, fold=False)

    unit = MemoryUnit(
        round_indices=latest_unit.round_indices + (rnd.index,),
        sub_goal=latest_unit.sub_goal,
        tool_log=latest_unit.tool_log + ((entry,) if entry else ()),
        summary=summary,
    )
    return MemoryStepOutcome(unit=unit, fold=True)


def apply_memory_update(memory: MemoryList, outcome: MemoryStepOutcome) -> MemoryList:
    """Replace the last unit (fold) or append a new one (add)."""
    if outcome.fold:
        if not memory.units:
            raise ContractViolation("cannot fold into an empty memory list")
        return MemoryList(memory.units[:-1] + (outcome.unit,))
    return MemoryList(memory.units + (outcome.unit,))


# ---------------------------------------------------------------------------
# Context construction
# ---------------------------------------------------------------------------


def build_context(
    query: UserQuery,
    memory: MemoryList,
    previous: ContextState | None,
    latest_round: Round,
    preamble: str,
) -> ContextState:
    """Construct the context after a round, per the fold state of its unit.

    While the round extended an in-progress sub-goal the previous context is
    extended with the latest response and observation. When the round opened
    a new unit a compression reset rebuilds the context from the preamble,
    the query, and the serialized memory of all completed units; the raw
    per-round history of completed units never reappears.
    """
    current = memory.latest
    if current is None or latest_round.index not in current.round_indices:
        raise ContractViolation("memory must already include the latest round")

    rounds_in_unit = len(current.round_indices)
    if rounds_in_unit > 1:
        if previous is None:
            raise ContractViolation("incremental context requires a previous context")
        messages = list(previous.messages) + round_messages(latest_round)
        return ContextState(
            messages=tuple(messages),
            mode=ContextMode.INCREMENTAL,
            rounds_in_current_unit=rounds_in_unit,
        )

    messages = _base_messages(query, preamble)
    completed = MemoryList(memory.units[:-1])
    if completed.units:
        messages.append(
            ContextMessage(
                role="user",
                text="Progress so far (completed sub-goals):\n" + render_memory(completed),
                tag="memory",
            )
        )
    messages.extend(round_messages(latest_round))
    return ContextState(
        messages=tuple(messages),
        mode=ContextMode.RESET,
        rounds_in_current_unit=1,
    )


def build_ablation_context(
    query: UserQuery,
    previous: ContextState | None,
    latest_round: Round,
    preamble: str,
) -> ContextState:
    """No-memory mode: plain linear history, never reset. Grows with rounds."""
    if previous is None:
        messages = _base_messages(query, preamble) + round_messages(latest_round)
    else:
        messages = list(previous.messages) + round_messages(latest_round)
    return ContextState(
        messages=tuple(messages),
        mode=ContextMode.INCREMENTAL,
        rounds_in_current_unit=0,
    )


def prune_context(
    context: ContextState, round_indices: Iterable[int], guidance: str | None = None
) -> ContextState:
    """Drop the given rounds' messages; optionally append recovery guidance."""
    doomed = set(round_indices)
    messages = [m for m in context.messages if m.round_index not in doomed]
    if guidance is not None:
        messages.append(ContextMessage(role="user", text=f"[supervisor] {guidance}", tag="guidance"))
    return ContextState(
        messages=tuple(messages),
        mode=context.mode,
        rounds_in_current_unit=context.rounds_in_current_unit,
    )


def context_size_profile(trace: str | Path | Iterable[dict[str, Any]]) -> list[tuple[int, int]]:
    """Per-round message counts of a recorded run, ordered by round index."""
    if isinstance(trace, (str, Path)):
        records = read_trace(trace)
    else:
        records = list(trace)
    profile: list[tuple[int, int]] = []
    for record in records:
        if not isinstance(record, dict):
            raise TraceError("trace records must be objects")
        if record.get("kind") != "round":
            continue
        index = record.get("index")
        count = record.get("context_messages")
        if not isinstance(index, int) or not isinstance(count, int):
            raise TraceError(f"round record missing index/context_messages: {record!r:.120}")
        profile.append((index, count))
    profile.sort(key=lambda pair: pair[0])
    return profile
