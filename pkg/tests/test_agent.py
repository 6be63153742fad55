"""Main-agent loop: parsing, budgets, supervision checkpoints, synthesis."""

from __future__ import annotations

import io

import pytest

from conftest import FailingBackend, memory_reply, planning_call, planning_final, scripted
from deepquest.agent import MainAgent, RunStatus, parse_agent_response
from deepquest.backend import ChatReply, FixtureEntry, Purpose
from deepquest.capabilities import (
    CapabilityDescriptor,
    CapabilityKind,
    CapabilityRegistry,
    Parameter,
)
from deepquest.trace import TraceWriter, load_run_state
from deepquest.trajectory import (
    Observation,
    ObservationStatus,
    RunBudget,
    UserQuery,
    validate_memory_list,
)

QUERY = UserQuery(id="q1", text="what is the answer?")


def echo_registry() -> CapabilityRegistry:
    registry = CapabilityRegistry()

    def search_handler(arguments):
        return Observation(
            status=ObservationStatus.OK, payload=f"results for {arguments['query']}"
        )

    def read_handler(arguments):
        return Observation(status=ObservationStatus.OK, payload=f"text of {arguments['source']}")

    registry.register(
        CapabilityDescriptor(
            name="search",
            kind=CapabilityKind.BASIC_TOOL,
            description="look up",
            parameters=(Parameter("query", "string", required=True),),
        ),
        search_handler,
    )
    registry.register(
        CapabilityDescriptor(
            name="read_parse",
            kind=CapabilityKind.BASIC_TOOL,
            description="read a source",
            parameters=(Parameter("source", "string", required=True),),
        ),
        read_handler,
    )
    return registry


def make_agent(backend, **kwargs) -> MainAgent:
    defaults = dict(
        backend=backend,
        registry=echo_registry(),
        trace=TraceWriter(io.StringIO()),
    )
    defaults.update(kwargs)
    return MainAgent(**defaults)


class CapturingBackend:
    """Records every request's (purpose, messages) before delegating."""

    def __init__(self, inner):
        self.inner = inner
        self.requests: list[tuple[str, tuple]] = []

    def complete(self, request):
        self.requests.append((request.purpose.value, request.messages))
        return self.inner.complete(request)


# ---------------------------------------------------------------------------
# parse_agent_response
# ---------------------------------------------------------------------------


def test_parse_structured_call():
    response = parse_agent_response(
        ChatReply(text="thinking", structured_call=("search", {"query": "x"}))
    )
    assert response.invocation.capability_name == "search"
    assert response.invocation.arguments == {"query": "x"}
    assert response.parse_error is None


def test_parse_fenced_text_call():
    text = 'I will look.\n```tool\n{"tool": "search", "arguments": {"query": "x"}}\n```'
    response = parse_agent_response(ChatReply(text=text))
    assert response.invocation.capability_name == "search"


def test_parse_bare_json_call():
    response = parse_agent_response(ChatReply(text='{"tool": "search", "args": {"query": "x"}}'))
    assert response.invocation.arguments == {"query": "x"}


def test_parse_final_answer():
    response = parse_agent_response(ChatReply(text="done\nFINAL ANSWER: 42"))
    assert response.final_answer == "42"
    assert response.invocation is None


def test_parse_plain_text_is_parse_failure():
    response = parse_agent_response(ChatReply(text="just musing, no action"))
    assert response.parse_error is not None


def test_call_wins_over_final_answer_with_note():
    text = 'FINAL ANSWER: 42\n{"tool": "search", "arguments": {"query": "x"}}'
    response = parse_agent_response(ChatReply(text=text))
    assert response.invocation is not None
    assert response.final_answer is None
    assert any("final answer" in note for note in response.notes)


def test_multiple_calls_first_honored_with_note():
    text = (
        '{"tool": "search", "arguments": {"query": "first"}}\n'
        '{"tool": "search", "arguments": {"query": "second"}}'
    )
    response = parse_agent_response(ChatReply(text=text))
    assert response.invocation.arguments == {"query": "first"}
    assert any("only the first" in note for note in response.notes)


# ---------------------------------------------------------------------------
# run loop
# ---------------------------------------------------------------------------


def test_degenerate_run_immediate_final_answer():
    backend = scripted(
        planning_final(1, "42"),
        memory_reply(1, same=False, sub_goal="answer directly", summary="it is 42"),
    )
    agent = make_agent(backend)
    report = agent.run(QUERY)
    assert report.status is RunStatus.FINISHED
    assert report.answer == "42"
    assert report.stats["rounds"] == 1
    assert report.stats["tool_calls"] == 0
    assert report.exit_code == 0


def five_round_fixture():
    return scripted(
        planning_call(1, "search", {"query": "the engine"}, reasoning="r1: find the source"),
        planning_call(2, "read_parse", {"source": "u1"}, reasoning="r2: read it"),
        planning_call(3, "search", {"query": "the year"}, reasoning="r3: new angle"),
        planning_call(4, "read_parse", {"source": "u2"}, reasoning="r4: read more"),
        planning_final(5, "the answer is 7", reasoning="r5: got it"),
        memory_reply(1, same=False, sub_goal="locate the source", summary="found engine"),
        memory_reply(2, same=True, sub_goal="locate the source", summary="source says X"),
        memory_reply(3, same=False, sub_goal="pin down the year", summary="searching year"),
        memory_reply(4, same=True, sub_goal="pin down the year", summary="year is 1999"),
        memory_reply(5, same=True, sub_goal="pin down the year", summary="answered"),
    )


def test_five_round_fixture_hand_simulated():
    agent = make_agent(five_round_fixture())
    report = agent.run(QUERY)
    assert report.status is RunStatus.FINISHED
    assert report.answer == "the answer is 7"
    assert report.stats["rounds"] == 5
    assert report.stats["tool_calls"] == 4
    assert report.stats["resets"] == 2
    state = agent.last_state
    assert len(state.memory.units) == 2
    assert validate_memory_list(state.memory, 5).ok


def test_trace_round_trip_reconstructs_run():
    trace = TraceWriter(io.StringIO())
    agent = make_agent(five_round_fixture(), trace=trace)
    report = agent.run(QUERY)
    rebuilt = load_run_state(trace.records)
    state = agent.last_state
    assert rebuilt.rounds == tuple(state.rounds)
    assert rebuilt.memory == state.memory
    assert rebuilt.status == report.status.value
    assert rebuilt.answer == report.answer
    assert rebuilt.stats["rounds"] == len(rebuilt.rounds)
    assert rebuilt.stats["tool_calls"] == sum(
        1 for rnd in rebuilt.rounds if rnd.observation is not None
    )


def test_tool_call_budget_stops_at_cap():
    entries = [
        planning_call(i, "search", {"query": f"probe {i}"}, reasoning=f"step {i}")
        for i in range(1, 6)
    ]
    entries += [
        memory_reply(i, same=(i != 1), sub_goal="probing", summary=f"s{i}") for i in range(1, 6)
    ]
    entries.append(FixtureEntry(purpose=Purpose.SYNTHESIS, index=1, reply_text="likely X"))
    agent = make_agent(scripted(*entries), budget=RunBudget(max_tool_calls=3))
    report = agent.run(QUERY)
    assert report.status is RunStatus.BUDGET_EXHAUSTED
    assert report.stats["tool_calls"] == 3
    assert report.stats["rounds"] == 3
    assert report.answer == "likely X"
    assert report.stats["best_effort"] is True
    assert report.exit_code == 2


def test_best_effort_with_backend_down_yields_no_answer():
    entries = [
        planning_call(i, "search", {"query": f"probe {i}"}, reasoning=f"step {i}")
        for i in range(1, 4)
    ]
    entries += [
        memory_reply(i, same=(i != 1), sub_goal="probing", summary=f"s{i}") for i in range(1, 4)
    ]
    agent = make_agent(scripted(*entries), budget=RunBudget(max_tool_calls=2))
    report = agent.run(QUERY)
    assert report.status is RunStatus.BUDGET_EXHAUSTED
    assert report.answer == "no answer"
    assert report.stats["best_effort"] is True


def test_wall_clock_budget():
    class JumpyClock:
        def __init__(self):
            self.now = 0.0

        def __call__(self):
            self.now += 100.0
            return self.now

    entries = [FixtureEntry(purpose=Purpose.SYNTHESIS, index=1, reply_text="partial")]
    agent = make_agent(
        scripted(*entries),
        budget=RunBudget(max_wall_clock_seconds=50.0),
        clock=JumpyClock(),
    )
    report = agent.run(QUERY)
    assert report.status is RunStatus.BUDGET_EXHAUSTED
    assert report.stats["rounds"] == 0
    assert report.answer == "partial"


def test_unreachable_backend_aborts():
    agent = make_agent(FailingBackend())
    report = agent.run(QUERY)
    assert report.status is RunStatus.ABORTED
    assert report.answer == "no answer"
    assert "backend unreachable" in report.stats["diagnostic"]
    assert report.exit_code == 3


def test_empty_registry_rejected():
    with pytest.raises(ValueError):
        make_agent(scripted(), registry=CapabilityRegistry())


# ---------------------------------------------------------------------------
# supervision inside the loop
# ---------------------------------------------------------------------------


def test_unknown_capability_recovered_and_pruned():
    backend = CapturingBackend(
        scripted(
            planning_call(1, "teleport", {}, reasoning="r1: try teleporting"),
            planning_final(2, "done without teleport", reasoning="r2: fine"),
            memory_reply(1, same=False, sub_goal="solve it", summary="tried teleport"),
            memory_reply(2, same=True, sub_goal="solve it", summary="done"),
            FixtureEntry(
                purpose=Purpose.SUPERVISOR_DIAGNOSIS, index=1, reply_text="called a missing tool"
            ),
            FixtureEntry(
                purpose=Purpose.SUPERVISOR_REGEN, index=1, reply_text="use registered tools only"
            ),
        )
    )
    agent = make_agent(backend)
    report = agent.run(QUERY)
    assert report.status is RunStatus.FINISHED
    assert report.stats["anomalies"] == 1
    state = agent.last_state
    assert state.pruned_rounds == {1}
    # The second planning request must not contain round 1's text, but must
    # carry the regeneration guidance.
    planning_requests = [m for p, m in backend.requests if p == "planning"]
    assert len(planning_requests) == 2
    second = " ".join(m.text for m in planning_requests[1])
    assert "try teleporting" not in second
    assert "use registered tools only" in second
    anomaly_records = [r for r in agent.trace.records if r["kind"] == "anomaly"]
    assert len(anomaly_records) == 1
    assert anomaly_records[0]["signal_kind"] == "unknown_capability"
    assert anomaly_records[0]["pruned_rounds"] == [1]


def test_repeated_action_recovery_breaks_loop():
    entries = [
        planning_call(i, "search", {"query": "loop"}, reasoning=f"attempt {i}")
        for i in range(1, 4)
    ]
    entries.append(planning_final(4, "escaped", reasoning="fresh idea"))
    entries += [
        memory_reply(i, same=(i != 1), sub_goal="looping", summary=f"s{i}") for i in range(1, 5)
    ]
    entries += [
        FixtureEntry(purpose=Purpose.SUPERVISOR_DIAGNOSIS, index=1, reply_text="identical calls"),
        FixtureEntry(purpose=Purpose.SUPERVISOR_REGEN, index=1, reply_text="vary the query"),
    ]
    agent = make_agent(scripted(*entries))
    report = agent.run(QUERY)
    assert report.status is RunStatus.FINISHED
    assert agent.last_state.pruned_rounds == {1, 2, 3}
    assert report.stats["anomalies"] == 1


def test_malformed_call_round_has_no_observation_and_recovers():
    entries = [
        FixtureEntry(purpose=Purpose.PLANNING, index=1, reply_text="no action here at all"),
        planning_final(2, "recovered"),
        memory_reply(1, same=False, sub_goal="solve", summary="s"),
        memory_reply(2, same=True, sub_goal="solve", summary="s"),
        FixtureEntry(purpose=Purpose.SUPERVISOR_DIAGNOSIS, index=1, reply_text="bad syntax"),
        FixtureEntry(purpose=Purpose.SUPERVISOR_REGEN, index=1, reply_text="emit a json call"),
    ]
    agent = make_agent(scripted(*entries))
    report = agent.run(QUERY)
    assert report.status is RunStatus.FINISHED
    state = agent.last_state
    assert state.rounds[0].response.parse_error is not None
    assert state.rounds[0].observation is None
    assert state.pruned_rounds == {1}
    assert report.stats["tool_calls"] == 0
    # The malformed round still belongs to the memory partition.
    assert validate_memory_list(state.memory, 2).ok


def test_recurring_signal_past_attempt_cap_aborts():
    entries = []
    for i in range(1, 13):
        entries.append(
            planning_call(i, "search", {"query": "loop"}, reasoning=f"attempt {i}")
        )
        entries.append(memory_reply(i, same=(i != 1), sub_goal="looping", summary=f"s{i}"))
    for i in range(1, 5):
        entries.append(
            FixtureEntry(purpose=Purpose.SUPERVISOR_DIAGNOSIS, index=i, reply_text="loop")
        )
        entries.append(
            FixtureEntry(purpose=Purpose.SUPERVISOR_REGEN, index=i, reply_text="change")
        )
    agent = make_agent(scripted(*entries))
    report = agent.run(QUERY)
    assert report.status is RunStatus.ABORTED
    assert "repeated_action" in report.stats["diagnostic"]
    assert report.exit_code == 3


def test_recovery_backend_failure_continues_unpruned():
    entries = [
        planning_call(i, "search", {"query": "loop"}, reasoning=f"attempt {i}")
        for i in range(1, 4)
    ]
    entries.append(planning_final(4, "done anyway", reasoning="different"))
    entries += [
        memory_reply(i, same=(i != 1), sub_goal="looping", summary=f"s{i}") for i in range(1, 5)
    ]
    # No supervisor entries: diagnosis underflows, recovery aborts un-pruned.
    agent = make_agent(scripted(*entries))
    report = agent.run(QUERY)
    assert report.status is RunStatus.FINISHED
    assert agent.last_state.pruned_rounds == set()
    anomaly_records = [r for r in agent.trace.records if r["kind"] == "anomaly"]
    assert anomaly_records and anomaly_records[0]["regenerated"] is False
