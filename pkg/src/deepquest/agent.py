"""The main agent: a budgeted reasoning-and-acting loop with folding memory.

Per round: build the context, ask the backend for a plan, parse it, dispatch
through the capability pool, fold the round into memory, and consult the
supervisor at its two checkpoints (after parsing, after the observation).
The loop stops on a final answer, the tool-call cap, or the wall clock, and
always leaves a complete trace.
"""

from __future__ import annotations

import time
from dataclasses import dataclass, field
from enum import Enum
from typing import Callable

from deepquest.backend import ChatReply, ChatRequest, Message, ModelBackend, Purpose, Sampling
from deepquest.capabilities import CapabilityRegistry, render_capability_prompt
from deepquest.context import (
    ContextState,
    build_ablation_context,
    build_context,
    memory_step,
    apply_memory_update,
    query_text,
)
from deepquest.parsing import find_final_answer, parse_tool_calls
from deepquest.supervisor import (
    AnomalySignal,
    RecoveryExhausted,
    RecoveryFailed,
    Thresholds,
    inspect,
    interrupt_and_recover,
)
from deepquest.trace import TraceWriter, memory_record, round_record
from deepquest.trajectory import (
    AgentResponse,
    MemoryList,
    Round,
    RunBudget,
    ToolInvocation,
    UserQuery,
    render_memory,
)

SYSTEM_PREAMBLE_TEMPLATE = """\
You are a deep-research agent. Work step by step: reason about what you
know, then either invoke exactly one capability or finish. To invoke one,
reply with a JSON object {{"tool": "<name>", "arguments": {{...}}}}. To finish,
reply with a line starting "FINAL ANSWER:" followed by your answer.

{capabilities}"""

SYNTHESIS_INSTRUCTIONS = (
    "The run hit its budget before finishing. Using the query and the memory "
    "of completed sub-goals below, give your best-effort final answer."
)

NO_ANSWER = "no answer"


class RunStatus(str, Enum):
    RUNNING = "running"
    FINISHED = "finished"
    BUDGET_EXHAUSTED = "budget_exhausted"
    ABORTED = "aborted"


@dataclass
class RunState:
    """Mutable aggregate for one run; all contained values are immutable."""

    query: UserQuery
    rounds: list[Round] = field(default_factory=list)
    memory: MemoryList = field(default_factory=MemoryList)
    context: ContextState | None = None
    status: RunStatus = RunStatus.RUNNING
    tool_calls_used: int = 0
    resets: int = 0
    anomalies: int = 0
    pruned_rounds: set[int] = field(default_factory=set)
    recovery_attempts: dict[str, int] = field(default_factory=dict)
    diagnostic: str = ""

    def live_rounds(self) -> list[Round]:
        return [r for r in self.rounds if r.index not in self.pruned_rounds]


@dataclass(frozen=True)
class FinalReport:
    answer: str
    trace_ref: str
    status: RunStatus
    stats: dict

    @property
    def exit_code(self) -> int:
        return {RunStatus.FINISHED: 0, RunStatus.BUDGET_EXHAUSTED: 2}.get(self.status, 3)


def parse_agent_response(reply: ChatReply) -> AgentResponse:
    """Turn a raw backend reply into a structured response.

    The structured tool-call channel wins when present; otherwise the text
    grammar applies. A call beats a final-answer marker when both appear
    (noted), extra calls beyond the first are noted, and a reply with
    neither becomes a parse-failure response for the supervisor to flag.
    """
    notes: list[str] = []
    text = reply.text or ""

    if reply.structured_call is not None:
        name, arguments = reply.structured_call
        try:
            invocation = ToolInvocation(
                capability_name=name,
                arguments=dict(arguments),
                raw_text=f"{name}({arguments})",
            )
        except ValueError as exc:
            return AgentResponse(reasoning=text, parse_error=f"malformed tool call: {exc}")
        if find_final_answer(text) is not None:
            notes.append("reply carried both a tool call and a final answer; the call won")
        return AgentResponse(reasoning=text, invocation=invocation, notes=tuple(notes))

    calls = parse_tool_calls(text)
    answer = find_final_answer(text)
    if calls:
        if answer is not None:
            notes.append("reply carried both a tool call and a final answer; the call won")
        if len(calls) > 1:
            notes.append(f"{len(calls)} tool calls in one reply; only the first was honored")
        call = calls[0]
        try:
            invocation = ToolInvocation(
                capability_name=call.name, arguments=dict(call.arguments), raw_text=call.raw
            )
        except ValueError as exc:
            return AgentResponse(reasoning=text, parse_error=f"malformed tool call: {exc}")
        return AgentResponse(reasoning=text, invocation=invocation, notes=tuple(notes))
    if answer is not None:
        return AgentResponse(reasoning=text, final_answer=answer)
    return AgentResponse(reasoning=text, parse_error="no tool call or final answer found")


class MainAgent:
    """Runs one query end to end against a backend and a capability registry."""

    def __init__(
        self,
        backend: ModelBackend,
        registry: CapabilityRegistry,
        trace: TraceWriter,
        budget: RunBudget | None = None,
        sampling: Sampling | None = None,
        thresholds: Thresholds | None = None,
        memory_enabled: bool = True,
        supervisor_enabled: bool = True,
        summary_budget: int = 1_500,
        clock: Callable[[], float] = time.monotonic,
        config_snapshot: dict | None = None,
    ):
        if not registry.names():
            raise ValueError("the capability registry is empty")
        self.backend = backend
        self.registry = registry
        self.trace = trace
        self.budget = budget or RunBudget()
        self.sampling = sampling or Sampling()
        self.thresholds = thresholds or Thresholds()
        self.memory_enabled = memory_enabled
        self.supervisor_enabled = supervisor_enabled
        self.summary_budget = summary_budget
        self.clock = clock
        self.config_snapshot = config_snapshot or {}
        self.preamble = SYSTEM_PREAMBLE_TEMPLATE.format(
            capabilities=render_capability_prompt(registry)
        )
        self.last_state: RunState | None = None

    # -- helpers ------------------------------------------------------------

    def _bootstrap_messages(self, query: UserQuery) -> tuple[Message, ...]:
        return (
            Message(role="system", text=self.preamble),
            Message(role="user", text=query_text(query)),
        )

    def _context_messages(self, state: RunState) -> tuple[Message, ...]:
        if state.context is None:
            return self._bootstrap_messages(state.query)
        return tuple(Message(role=m.role, text=m.text) for m in state.context.messages)

    def _complete(self, messages: tuple[Message, ...], purpose: Purpose) -> ChatReply:
        return self.backend.complete(
            ChatRequest(
                messages=messages,
                purpose=purpose,
                tool_schemas=self.registry.schemas() if purpose is Purpose.PLANNING else (),
                sampling=self.sampling,
            )
        )

    def _absorb_round(self, state: RunState, rnd: Round) -> None:
        """Memory step, context construction, and trace records for one round."""
        state.rounds.append(rnd)
        if self.memory_enabled:
            outcome = memory_step(
                rnd,
                state.memory.latest,
                self.backend,
                sampling=self.sampling,
                summary_budget=self.summary_budget,
            )
            state.memory = apply_memory_update(state.memory, outcome)
            state.context = build_context(
                state.query, state.memory, state.context, rnd, self.preamble
            )
        else:
            state.context = build_ablation_context(
                state.query, state.context, rnd, self.preamble
            )
        if state.context.mode.value == "reset":
            state.resets += 1
        self.trace.write(
            round_record(rnd, state.context.mode.value, len(state.context.messages))
        )
        if self.memory_enabled:
            self.trace.write(memory_record(rnd.index, state.memory))

    def _consult_supervisor(self, state: RunState) -> bool:
        """Inspect the live window; recover if needed. False means abort."""
        if not self.supervisor_enabled:
            return True
        signal = inspect(state.live_rounds(), self.thresholds)
        if signal is None:
            return True
        return self._recover(state, signal)

    def _recover(self, state: RunState, signal: AnomalySignal) -> bool:
        state.anomalies += 1
        kind = signal.kind.value
        attempts_so_far = state.recovery_attempts.get(kind, 0)
        assert state.context is not None
        try:
            context, memory, outcome = interrupt_and_recover(
                state.rounds,
                state.context,
                state.memory,
                signal,
                self.backend,
                attempts_so_far,
                self.thresholds,
                self.sampling,
            )
        except RecoveryExhausted as exc:
            state.recovery_attempts[kind] = attempts_so_far + 1
            self.trace.write(
                {
                    "kind": "anomaly",
                    "round": signal.first_detected_round,
                    "signal_kind": kind,
                    "evidence_rounds": list(signal.evidence_rounds),
                    "diagnosis": str(exc),
                    "pruned_rounds": [],
                    "regenerated": False,
                    "attempts_used": attempts_so_far + 1,
                    "aborted": True,
                }
            )
            state.status = RunStatus.ABORTED
            state.diagnostic = str(exc)
            return False
        except RecoveryFailed as exc:
            state.recovery_attempts[kind] = attempts_so_far + 1
            self.trace.write(
                {
                    "kind": "anomaly",
                    "round": signal.first_detected_round,
                    "signal_kind": kind,
                    "evidence_rounds": list(signal.evidence_rounds),
                    "diagnosis": f"recovery aborted: {exc}",
                    "pruned_rounds": [],
                    "regenerated": False,
                    "attempts_used": attempts_so_far + 1,
                    "aborted": False,
                }
            )
            return True
        state.recovery_attempts[kind] = outcome.attempts_used
        state.context = context
        state.memory = memory
        state.pruned_rounds.update(outcome.pruned_rounds)
        self.trace.write(
            {
                "kind": "anomaly",
                "round": signal.first_detected_round,
                "signal_kind": kind,
                "evidence_rounds": list(signal.evidence_rounds),
                "diagnosis": outcome.diagnosis,
                "pruned_rounds": list(outcome.pruned_rounds),
                "regenerated": outcome.regenerated,
                "attempts_used": outcome.attempts_used,
                "aborted": False,
            }
        )
        if self.memory_enabled and state.rounds:
            self.trace.write(memory_record(state.rounds[-1].index, state.memory))
        return True

    # -- the loop -----------------------------------------------------------

    def run(self, query: UserQuery) -> FinalReport:
        state = RunState(query=query)
        started = self.clock()
        self.trace.write(
            {
                "kind": "run",
                "query": {
                    "id": query.id,
                    "text": query.text,
                    "attachments": [
                        {"path": a.path, "media_type": a.media_type} for a in query.attachments
                    ],
                },
                "config": self.config_snapshot,
            }
        )

        while state.status is RunStatus.RUNNING:
            elapsed = self.clock() - started
            if elapsed > self.budget.max_wall_clock_seconds:
                state.status = RunStatus.BUDGET_EXHAUSTED
                state.diagnostic = "wall clock budget exhausted"
                break

            try:
                reply = self._complete(self._context_messages(state), Purpose.PLANNING)
            except Exception as exc:
                state.status = RunStatus.ABORTED
                state.diagnostic = f"backend unreachable: {exc}"
                break

            response = parse_agent_response(reply)
            index = len(state.rounds) + 1

            if response.final_answer is not None:
                self._absorb_round(state, Round(index=index, response=response))
                state.status = RunStatus.FINISHED
                break

            if response.parse_error is not None:
                # Checkpoint 1: syntactic anomalies right after parsing.
                self._absorb_round(state, Round(index=index, response=response))
                if not self._consult_supervisor(state):
                    break
                continue

            if state.tool_calls_used >= self.budget.max_tool_calls:
                # The parsed response is discarded, never dispatched or persisted.
                state.status = RunStatus.BUDGET_EXHAUSTED
                state.diagnostic = "tool call budget exhausted"
                break

            remaining = RunBudget(
                max_tool_calls=max(self.budget.max_tool_calls - state.tool_calls_used, 1),
                max_wall_clock_seconds=max(
                    self.budget.max_wall_clock_seconds - (self.clock() - started), 0.001
                ),
                max_subagent_steps=self.budget.max_subagent_steps,
            )
            assert response.invocation is not None
            result = self.registry.dispatch(response.invocation, remaining)
            state.tool_calls_used += result.tool_calls_consumed
            self._absorb_round(
                state, Round(index=index, response=response, observation=result.observation)
            )
            # Checkpoint 2: semantic anomalies after the observation.
            if not self._consult_supervisor(state):
                break

        self.last_state = state
        return self._finalize(state, started)

    # -- synthesis ----------------------------------------------------------

    def _best_effort_answer(self, state: RunState) -> str:
        parts = [SYNTHESIS_INSTRUCTIONS, f"Query: {state.query.text}"]
        rendered = render_memory(state.memory)
        if rendered:
            parts.append("Memory of completed work:\n" + rendered)
        try:
            reply = self._complete(
                (
                    Message(role="system", text=self.preamble),
                    Message(role="user", text="\n\n".join(parts)),
                ),
                Purpose.SYNTHESIS,
            )
        except Exception:
            return NO_ANSWER
        return reply.text.strip() or NO_ANSWER

    def _finalize(self, state: RunState, started: float) -> FinalReport:
        best_effort = False
        if state.status is RunStatus.FINISHED:
            answer = state.rounds[-1].response.final_answer or ""
        elif state.status is RunStatus.BUDGET_EXHAUSTED:
            answer = self._best_effort_answer(state)
            best_effort = True
        else:
            answer = NO_ANSWER

        stats = {
            "rounds": len(state.rounds),
            "tool_calls": state.tool_calls_used,
            "resets": state.resets,
            "anomalies": state.anomalies,
            "elapsed": self.clock() - started,
            "best_effort": best_effort,
            "status": state.status.value,
        }
        if state.diagnostic:
            stats["diagnostic"] = state.diagnostic
        self.trace.write(
            {
                "kind": "final",
                "status": state.status.value,
                "answer": answer,
                "best_effort": best_effort,
                "stats": stats,
            }
        )
        trace_ref = str(self.trace.path) if self.trace.path else "(in-memory)"
        return FinalReport(answer=answer, trace_ref=trace_ref, status=state.status, stats=stats)
