"""Trajectory supervision: anomaly detection and three-stage recovery.

Detection is rule-based and pure; the backend is consulted only for the
diagnosis and regeneration stages. On recovery the offending rounds'
messages are pruned from the context window and their tool-log digests from
the current memory unit, so future decisions are not biased by the failed
attempts. Pruned rounds stay in the persistent trace.
"""

from __future__ import annotations

import json
from dataclasses import dataclass
from enum import Enum
from typing import Sequence

from deepquest.backend import ChatRequest, Message, ModelBackend, Purpose, Sampling
from deepquest.context import ContextState, prune_context, render_response_text
from deepquest.trajectory import (
    MemoryList,
    MemoryUnit,
    ObservationStatus,
    Round,
)

UNKNOWN_CAPABILITY_PREFIX = "unknown capability"

DIAGNOSIS_INSTRUCTIONS = (
    "You are the supervisor of a research agent. The following rounds were "
    "flagged as anomalous. Identify the root cause of the failure in two or "
    "three sentences."
)
REGEN_INSTRUCTIONS = (
    "You are the supervisor of a research agent. Given the diagnosis below, "
    "produce concise guidance for the agent's next step: a revised plan or "
    "an alternative action that breaks the failure pattern."
)


class AnomalyKind(str, Enum):
    MALFORMED_CALL = "malformed_call"
    UNKNOWN_CAPABILITY = "unknown_capability"
    REPEATED_ACTION = "repeated_action"
    REPEATED_ERROR = "repeated_error"
    STAGNANT_OUTPUT = "stagnant_output"


# Highest priority first; when several patterns are present the strongest
# syntactic signal wins.
_PRIORITY = (
    AnomalyKind.MALFORMED_CALL,
    AnomalyKind.UNKNOWN_CAPABILITY,
    AnomalyKind.REPEATED_ERROR,
    AnomalyKind.REPEATED_ACTION,
    AnomalyKind.STAGNANT_OUTPUT,
)


@dataclass(frozen=True)
class AnomalySignal:
    kind: AnomalyKind
    evidence_rounds: tuple[int, ...]
    first_detected_round: int

    def __post_init__(self) -> None:
        if not self.evidence_rounds:
            raise ValueError("a signal requires evidence rounds")
        if any(idx > self.first_detected_round for idx in self.evidence_rounds):
            raise ValueError("evidence rounds cannot postdate detection")


@dataclass(frozen=True)
class RecoveryOutcome:
    diagnosis: str
    pruned_rounds: tuple[int, ...]
    regenerated: bool
    attempts_used: int
    guidance: str = ""


@dataclass(frozen=True)
class Thresholds:
    """Detection thresholds and the recovery attempt cap, config-overridable."""

    repeated_action: int = 3
    repeated_error: int = 3
    stagnant_output: int = 2
    max_recovery_attempts: int = 3
    window: int = 8

    def __post_init__(self) -> None:
        if min(self.repeated_action, self.repeated_error, self.stagnant_output) < 2:
            raise ValueError("repetition thresholds below 2 would flag every round")
        if self.window < 1 or self.max_recovery_attempts < 1:
            raise ValueError("window and max_recovery_attempts must be positive")


def normalize_arguments(arguments: dict) -> str:
    """Whitespace-collapsed, case-folded rendering for repetition checks."""

    def norm(value):
        if isinstance(value, str):
            return " ".join(value.split()).casefold()
        if isinstance(value, dict):
            return {k: norm(v) for k, v in sorted(value.items())}
        if isinstance(value, list):
            return [norm(v) for v in value]
        return value

    return json.dumps(norm(dict(arguments)), sort_keys=True)


def _action_key(rnd: Round) -> str | None:
    invocation = rnd.response.invocation
    if invocation is None:
        return None
    return f"{invocation.capability_name}|{normalize_arguments(invocation.arguments)}"


def _trailing_matches(window: Sequence[Round], key, count: int) -> tuple[int, ...] | None:
    """Indices of the last `count` rounds if they all share a non-None key."""
    if len(window) < count:
        return None
    tail = window[-count:]
    keys = [key(rnd) for rnd in tail]
    if any(k is None for k in keys) or len(set(keys)) != 1:
        return None
    return tuple(rnd.index for rnd in tail)


def inspect(recent_rounds: Sequence[Round], thresholds: Thresholds) -> AnomalySignal | None:
    """Detect the highest-priority anomaly anchored at the latest round.

    Pure: calling twice on the same window returns the same result. Callers
    pass a window that already excludes pruned rounds.
    """
    if not recent_rounds:
        return None
    window = list(recent_rounds)[-thresholds.window :]
    latest = window[-1]

    found: dict[AnomalyKind, tuple[int, ...]] = {}

    if latest.response.parse_error is not None:
        found[AnomalyKind.MALFORMED_CALL] = (latest.index,)

    obs = latest.observation
    if (
        obs is not None
        and obs.status is ObservationStatus.TOOL_ERROR
        and (obs.error_detail or "").startswith(UNKNOWN_CAPABILITY_PREFIX)
    ):
        found[AnomalyKind.UNKNOWN_CAPABILITY] = (latest.index,)

    def error_key(rnd: Round):
        if rnd.observation is None or rnd.observation.status is ObservationStatus.OK:
            return None
        return "error"

    evidence = _trailing_matches(window, error_key, thresholds.repeated_error)
    if evidence:
        found[AnomalyKind.REPEATED_ERROR] = evidence

    evidence = _trailing_matches(window, _action_key, thresholds.repeated_action)
    if evidence:
        found[AnomalyKind.REPEATED_ACTION] = evidence

    def reasoning_key(rnd: Round):
        return rnd.response.reasoning or None

    evidence = _trailing_matches(window, reasoning_key, thresholds.stagnant_output)
    if evidence:
        found[AnomalyKind.STAGNANT_OUTPUT] = evidence

    for kind in _PRIORITY:
        if kind in found:
            return AnomalySignal(
                kind=kind, evidence_rounds=found[kind], first_detected_round=latest.index
            )
    return None


class RecoveryExhausted(RuntimeError):
    """The same anomaly kind recurred past the attempt cap; the run aborts."""

    def __init__(self, signal: AnomalySignal, attempts: int):
        super().__init__(
            f"{signal.kind.value} recurred after {attempts} recovery attempts "
            f"(evidence rounds {list(signal.evidence_rounds)})"
        )
        self.signal = signal


class RecoveryFailed(RuntimeError):
    """A backend stage failed; the loop continues un-pruned."""


def _render_evidence(rounds: Sequence[Round], evidence: tuple[int, ...]) -> str:
    by_index = {rnd.index: rnd for rnd in rounds}
    lines = []
    for idx in evidence:
        rnd = by_index.get(idx)
        if rnd is None:
            continue
        lines.append(f"Round {idx} output: {render_response_text(rnd.response)[:400]}")
        if rnd.observation is not None:
            lines.append(
                f"Round {idx} observation ({rnd.observation.status.value}): "
                f"{(rnd.observation.payload or rnd.observation.error_detail or '')[:400]}"
            )
    return "\n".join(lines)


def prune_memory(memory: MemoryList, round_indices: tuple[int, ...]) -> MemoryList:
    """Drop pruned rounds' tool-log digests from the last unit only.

    Completed units are never touched, and no unit is added or removed; the
    round indices themselves stay assigned so the partition remains intact.
    """
    if not memory.units:
        return memory
    doomed = set(round_indices)
    last = memory.units[-1]
    kept = tuple(entry for entry in last.tool_log if entry.round_index not in doomed)
    if len(kept) == len(last.tool_log):
        return memory
    replacement = MemoryUnit(
        round_indices=last.round_indices,
        sub_goal=last.sub_goal,
        tool_log=kept,
        summary=last.summary,
    )
    return MemoryList(memory.units[:-1] + (replacement,))


def interrupt_and_recover(
    rounds: Sequence[Round],
    context: ContextState,
    memory: MemoryList,
    signal: AnomalySignal,
    backend: ModelBackend,
    attempts_so_far: int,
    thresholds: Thresholds,
    sampling: Sampling | None = None,
) -> tuple[ContextState, MemoryList, RecoveryOutcome]:
    """Run the three-stage protocol: diagnose, prune, regenerate.

    Raises RecoveryExhausted when this signal kind already used up its
    attempts, and RecoveryFailed when a backend stage fails (in which case
    nothing was pruned). Returns the pruned context, the pruned memory, and
    the recovery outcome; the caller persists the anomaly event.
    """
    sampling = sampling or Sampling()
    attempts_used = attempts_so_far + 1
    if attempts_used > thresholds.max_recovery_attempts:
        raise RecoveryExhausted(signal, attempts_so_far)

    evidence_text = _render_evidence(rounds, signal.evidence_rounds)
    try:
        diagnosis_reply = backend.complete(
            ChatRequest(
                messages=(
                    Message(role="system", text=DIAGNOSIS_INSTRUCTIONS),
                    Message(
                        role="user",
                        text=f"Anomaly kind: {signal.kind.value}\n{evidence_text}",
                    ),
                ),
                purpose=Purpose.SUPERVISOR_DIAGNOSIS,
                sampling=sampling,
            )
        )
        diagnosis = diagnosis_reply.text.strip() or "(no diagnosis)"
        regen_reply = backend.complete(
            ChatRequest(
                messages=(
                    Message(role="system", text=REGEN_INSTRUCTIONS),
                    Message(role="user", text=f"Diagnosis: {diagnosis}"),
                ),
                purpose=Purpose.SUPERVISOR_REGEN,
                sampling=sampling,
            )
        )
        guidance = regen_reply.text.strip() or "Try a different approach."
    except Exception as exc:
        raise RecoveryFailed(f"recovery backend stage failed: {exc}") from exc

    pruned_context = prune_context(context, signal.evidence_rounds, guidance=guidance)
    pruned_memory = prune_memory(memory, signal.evidence_rounds)
    outcome = RecoveryOutcome(
        diagnosis=diagnosis,
        pruned_rounds=tuple(sorted(signal.evidence_rounds)),
        regenerated=True,
        attempts_used=attempts_used,
        guidance=guidance,
    )
    return pruned_context, pruned_memory, outcome
