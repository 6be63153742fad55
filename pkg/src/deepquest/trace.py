"""JSONL run traces: persistence, reading, and replay comparison.

One record per line. Record kinds:

``run``      run header: query and a config snapshot (written first)
``backend``  one model reply, keyed by (purpose, per-purpose index)
``round``    one main-agent round with its context mode and size
``memory``   full memory snapshot after the round's memory update
``anomaly``  a supervisor detection/recovery event
``episode``  one internal step of a sub-agent
``final``    terminal status, answer, and run statistics

Field names are stable; see the README for the full schema. Timestamps and
elapsed durations are volatile and excluded from replay comparison.
"""

from __future__ import annotations

import json
from dataclasses import dataclass
from pathlib import Path
from typing import IO, Any, Iterable

from deepquest.trajectory import (
    AgentResponse,
    MemoryList,
    MemoryUnit,
    Observation,
    ObservationStatus,
    Round,
    ToolInvocation,
    ToolLogEntry,
)

RECORD_KINDS = ("run", "backend", "round", "memory", "anomaly", "episode", "final")

# Stripped before replay comparison: wall-clock fields differ between a run
# and its replay even when behavior is identical.
VOLATILE_FIELDS = frozenset({"produced_at", "elapsed", "trace_path"})


class TraceError(ValueError):
    """A trace file or record could not be parsed."""


class TraceWriter:
    """Appends records to a JSONL target and keeps them in memory.

    The target may be a path or an open text stream. Each record is flushed
    immediately so a crashed run still leaves a readable prefix.
    """

    def __init__(self, target: str | Path | IO[str]):
        if isinstance(target, (str, Path)):
            self.path: Path | None = Path(target)
            self._stream: IO[str] = open(self.path, "w", encoding="utf-8")
            self._owns_stream = True
        else:
            self.path = None
            self._stream = target
            self._owns_stream = False
        self.records: list[dict[str, Any]] = []

    def write(self, record: dict[str, Any]) -> None:
        kind = record.get("kind")
        if kind not in RECORD_KINDS:
            raise TraceError(f"unknown trace record kind: {kind!r}")
        self.records.append(record)
        self._stream.write(json.dumps(record, sort_keys=True) + "\n")
        self._stream.flush()

    def close(self) -> None:
        if self._owns_stream:
            self._stream.close()


def read_trace(path: str | Path) -> list[dict[str, Any]]:
    """Load all records from a trace file, validating shape line by line."""
    records: list[dict[str, Any]] = []
    with open(path, "r", encoding="utf-8") as stream:
        for lineno, line in enumerate(stream, start=1):
            line = line.strip()
            if not line:
                continue
            try:
                record = json.loads(line)
            except json.JSONDecodeError as exc:
                raise TraceError(f"line {lineno}: not valid JSON: {exc}") from exc
            if not isinstance(record, dict) or record.get("kind") not in RECORD_KINDS:
                raise TraceError(f"line {lineno}: not a trace record")
            records.append(record)
    return records


def strip_volatile(record: Any) -> Any:
    """Deep-copy a record with volatile (timing) fields removed."""
    if isinstance(record, dict):
        return {k: strip_volatile(v) for k, v in record.items() if k not in VOLATILE_FIELDS}
    if isinstance(record, list):
        return [strip_volatile(v) for v in record]
    return record


def first_divergence(
    recorded: Iterable[dict[str, Any]], produced: Iterable[dict[str, Any]]
) -> str | None:
    """Compare two record sequences modulo volatile fields.

    Returns a human-readable diagnostic for the first divergent record, or
    None when the sequences match.
    """
    recorded = list(recorded)
    produced = list(produced)
    for pos, (a, b) in enumerate(zip(recorded, produced)):
        if strip_volatile(a) != strip_volatile(b):
            return (
                f"record {pos} diverges: recorded kind={a.get('kind')!r} "
                f"vs produced kind={b.get('kind')!r}\n"
                f"  recorded: {json.dumps(strip_volatile(a), sort_keys=True)[:400]}\n"
                f"  produced: {json.dumps(strip_volatile(b), sort_keys=True)[:400]}"
            )
    if len(recorded) != len(produced):
        return f"record count diverges: recorded {len(recorded)} vs produced {len(produced)}"
    return None


# ---------------------------------------------------------------------------
# Serialization between trajectory values and trace records
# ---------------------------------------------------------------------------


def invocation_to_dict(invocation: ToolInvocation) -> dict[str, Any]:
    return {
        "capability": invocation.capability_name,
        "arguments": invocation.arguments,
        "raw_text": invocation.raw_text,
    }


def invocation_from_dict(data: dict[str, Any]) -> ToolInvocation:
    return ToolInvocation(
        capability_name=data["capability"],
        arguments=dict(data.get("arguments") or {}),
        raw_text=data.get("raw_text", ""),
    )


def response_to_dict(response: AgentResponse) -> dict[str, Any]:
    return {
        "reasoning": response.reasoning,
        "invocation": invocation_to_dict(response.invocation) if response.invocation else None,
        "final_answer": response.final_answer,
        "parse_error": response.parse_error,
        "notes": list(response.notes),
    }


def response_from_dict(data: dict[str, Any]) -> AgentResponse:
    invocation = data.get("invocation")
    return AgentResponse(
        reasoning=data.get("reasoning", ""),
        invocation=invocation_from_dict(invocation) if invocation else None,
        final_answer=data.get("final_answer"),
        parse_error=data.get("parse_error"),
        notes=tuple(data.get("notes") or ()),
    )


def observation_to_dict(observation: Observation) -> dict[str, Any]:
    return {
        "status": observation.status.value,
        "payload": observation.payload,
        "error_detail": observation.error_detail,
        "produced_at": observation.produced_at,
    }


def observation_from_dict(data: dict[str, Any]) -> Observation:
    return Observation(
        status=ObservationStatus(data["status"]),
        payload=data.get("payload", ""),
        error_detail=data.get("error_detail"),
        produced_at=data.get("produced_at", 0.0),
    )


def round_record(rnd: Round, context_mode: str, context_messages: int) -> dict[str, Any]:
    return {
        "kind": "round",
        "index": rnd.index,
        "response": response_to_dict(rnd.response),
        "observation": observation_to_dict(rnd.observation) if rnd.observation else None,
        "context_mode": context_mode,
        "context_messages": context_messages,
    }


def round_from_record(record: dict[str, Any]) -> Round:
    observation = record.get("observation")
    return Round(
        index=record["index"],
        response=response_from_dict(record["response"]),
        observation=observation_from_dict(observation) if observation else None,
    )


def memory_unit_to_dict(unit: MemoryUnit) -> dict[str, Any]:
    return {
        "round_indices": list(unit.round_indices),
        "sub_goal": unit.sub_goal,
        "tool_log": [
            {
                "round_index": entry.round_index,
                "capability": entry.capability_name,
                "arguments_digest": entry.arguments_digest,
                "result_digest": entry.result_digest,
            }
            for entry in unit.tool_log
        ],
        "summary": unit.summary,
    }


def memory_unit_from_dict(data: dict[str, Any]) -> MemoryUnit:
    return MemoryUnit(
        round_indices=tuple(data["round_indices"]),
        sub_goal=data["sub_goal"],
        tool_log=tuple(
            ToolLogEntry(
                round_index=entry["round_index"],
                capability_name=entry["capability"],
                arguments_digest=entry["arguments_digest"],
                result_digest=entry["result_digest"],
            )
            for entry in data.get("tool_log", ())
        ),
        summary=data.get("summary", ""),
    )


def memory_record(round_index: int, memory: MemoryList) -> dict[str, Any]:
    return {
        "kind": "memory",
        "round": round_index,
        "units": [memory_unit_to_dict(unit) for unit in memory.units],
    }


def memory_from_record(record: dict[str, Any]) -> MemoryList:
    return MemoryList(tuple(memory_unit_from_dict(u) for u in record.get("units", ())))


@dataclass(frozen=True)
class ReconstructedRun:
    """Run state rebuilt from a trace, for round-trip checks."""

    rounds: tuple[Round, ...]
    memory: MemoryList
    status: str | None
    answer: str | None
    stats: dict[str, Any]
    pruned_rounds: tuple[int, ...]


def load_run_state(records: Iterable[dict[str, Any]]) -> ReconstructedRun:
    """Rebuild rounds, final memory, and the terminal record from a trace."""
    rounds: list[Round] = []
    memory = MemoryList()
    status: str | None = None
    answer: str | None = None
    stats: dict[str, Any] = {}
    pruned: set[int] = set()
    for record in records:
        kind = record["kind"]
        if kind == "round":
            rounds.append(round_from_record(record))
        elif kind == "memory":
            memory = memory_from_record(record)
        elif kind == "anomaly":
            pruned.update(record.get("pruned_rounds", ()))
        elif kind == "final":
            status = record.get("status")
            answer = record.get("answer")
            stats = dict(record.get("stats") or {})
    return ReconstructedRun(
        rounds=tuple(rounds),
        memory=memory,
        status=status,
        answer=answer,
        stats=stats,
        pruned_rounds=tuple(sorted(pruned)),
    )
