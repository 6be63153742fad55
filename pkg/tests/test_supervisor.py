"""Anomaly detection rules and the diagnose/prune/regenerate protocol."""

from __future__ import annotations

import pytest

from conftest import (
    make_parse_failure_round,
    make_round,
    scripted,
)
from deepquest.backend import FixtureEntry, Purpose
from deepquest.context import build_context
from deepquest.supervisor import (
    AnomalyKind,
    RecoveryExhausted,
    RecoveryFailed,
    Thresholds,
    inspect,
    interrupt_and_recover,
    normalize_arguments,
    prune_memory,
)
from deepquest.trajectory import (
    MemoryList,
    MemoryUnit,
    ObservationStatus,
    ToolLogEntry,
    UserQuery,
)

THRESHOLDS = Thresholds()


def repeated_rounds(start: int, count: int, query: str = "same thing"):
    # Distinct reasoning keeps stagnant_output quiet; the invocation repeats.
    return [
        make_round(start + i, args={"query": query}, reasoning=f"attempt {start + i}")
        for i in range(count)
    ]


# ---------------------------------------------------------------------------
# inspect
# ---------------------------------------------------------------------------


def test_parse_failure_is_malformed_call():
    signal = inspect([make_parse_failure_round(1)], THRESHOLDS)
    assert signal.kind is AnomalyKind.MALFORMED_CALL
    assert signal.evidence_rounds == (1,)


def test_three_identical_invocations_is_repeated_action():
    signal = inspect(repeated_rounds(1, 3), THRESHOLDS)
    assert signal.kind is AnomalyKind.REPEATED_ACTION
    assert signal.evidence_rounds == (1, 2, 3)


def test_two_identical_then_different_is_quiet():
    window = repeated_rounds(1, 2) + [
        make_round(3, args={"query": "different"}, reasoning="attempt 3")
    ]
    assert inspect(window, THRESHOLDS) is None


def test_argument_normalization_catches_reformatting():
    window = [
        make_round(1, args={"query": "Same  Thing"}, reasoning="a"),
        make_round(2, args={"query": "same thing"}, reasoning="b"),
        make_round(3, args={"query": " SAME THING "}, reasoning="c"),
    ]
    signal = inspect(window, THRESHOLDS)
    assert signal.kind is AnomalyKind.REPEATED_ACTION
    assert normalize_arguments({"q": "A  b"}) == normalize_arguments({"q": "a b"})


def test_three_consecutive_errors_is_repeated_error():
    window = [
        make_round(
            i,
            args={"source": f"u{i}"},
            reasoning=f"try {i}",
            status=ObservationStatus.TOOL_ERROR,
            payload="",
            error_detail="not found",
        )
        for i in range(1, 4)
    ]
    signal = inspect(window, THRESHOLDS)
    assert signal.kind is AnomalyKind.REPEATED_ERROR
    assert signal.evidence_rounds == (1, 2, 3)


def test_unknown_capability_fires_immediately_and_outranks_errors():
    window = [
        make_round(
            1,
            name="search",
            args={"query": "a"},
            reasoning="r1",
            status=ObservationStatus.TOOL_ERROR,
            payload="",
            error_detail="not found",
        ),
        make_round(
            2,
            name="search",
            args={"query": "b"},
            reasoning="r2",
            status=ObservationStatus.TOOL_ERROR,
            payload="",
            error_detail="not found",
        ),
        make_round(
            3,
            name="teleport",
            args={},
            reasoning="r3",
            status=ObservationStatus.TOOL_ERROR,
            payload="",
            error_detail="unknown capability 'teleport'",
        ),
    ]
    signal = inspect(window, THRESHOLDS)
    assert signal.kind is AnomalyKind.UNKNOWN_CAPABILITY
    assert signal.evidence_rounds == (3,)


def test_two_identical_reasonings_is_stagnant_output():
    window = [
        make_round(1, args={"query": "a"}, reasoning="the same thought"),
        make_round(2, args={"query": "b"}, reasoning="the same thought"),
    ]
    signal = inspect(window, THRESHOLDS)
    assert signal.kind is AnomalyKind.STAGNANT_OUTPUT
    assert signal.evidence_rounds == (1, 2)


def test_malformed_outranks_everything():
    window = repeated_rounds(1, 3) + [make_parse_failure_round(4)]
    signal = inspect(window, THRESHOLDS)
    assert signal.kind is AnomalyKind.MALFORMED_CALL


def test_signal_only_fires_anchored_at_latest_round():
    window = repeated_rounds(1, 3) + [
        make_round(4, args={"query": "fresh"}, reasoning="new idea")
    ]
    assert inspect(window, THRESHOLDS) is None


def test_inspect_is_pure():
    window = repeated_rounds(5, 3)
    assert inspect(window, THRESHOLDS) == inspect(window, THRESHOLDS)


# ---------------------------------------------------------------------------
# interrupt_and_recover
# ---------------------------------------------------------------------------

QUERY = UserQuery(id="q", text="find it")
PREAMBLE = "preamble"


def build_run(rounds):
    """Fold every round into one unit and build the running context."""
    entries = []
    memory = MemoryList()
    context = None
    for rnd in rounds:
        entry = None
        if rnd.response.invocation and rnd.observation:
            from deepquest.context import _tool_log_entry

            entry = _tool_log_entry(rnd)
        if memory.latest is None:
            unit = MemoryUnit(
                round_indices=(rnd.index,),
                sub_goal="the goal",
                tool_log=(entry,) if entry else (),
                summary="facts",
            )
            memory = MemoryList((unit,))
        else:
            last = memory.latest
            unit = MemoryUnit(
                round_indices=last.round_indices + (rnd.index,),
                sub_goal=last.sub_goal,
                tool_log=last.tool_log + ((entry,) if entry else ()),
                summary=last.summary,
            )
            memory = MemoryList(memory.units[:-1] + (unit,))
        context = build_context(QUERY, memory, context, rnd, PREAMBLE)
    return context, memory


def recovery_backend():
    return scripted(
        FixtureEntry(purpose=Purpose.SUPERVISOR_DIAGNOSIS, index=1, reply_text="stuck in a loop"),
        FixtureEntry(purpose=Purpose.SUPERVISOR_REGEN, index=1, reply_text="try another query"),
    )


def test_recovery_prunes_context_and_memory():
    rounds = repeated_rounds(1, 3)
    context, memory = build_run(rounds)
    signal = inspect(rounds, THRESHOLDS)
    new_context, new_memory, outcome = interrupt_and_recover(
        rounds, context, memory, signal, recovery_backend(), 0, THRESHOLDS
    )
    # All six round messages gone, guidance appended.
    assert len(new_context.messages) == len(context.messages) - 6 + 1
    joined = " ".join(m.text for m in new_context.messages)
    for rnd in rounds:
        assert rnd.response.reasoning not in joined
    assert "try another query" in joined
    # Tool log pruned; unit structure and round assignment untouched.
    assert len(new_memory.units) == len(memory.units)
    assert new_memory.units[-1].tool_log == ()
    assert new_memory.units[-1].round_indices == (1, 2, 3)
    assert outcome.diagnosis == "stuck in a loop"
    assert outcome.pruned_rounds == (1, 2, 3)
    assert outcome.regenerated is True
    assert outcome.attempts_used == 1


def test_recovery_of_malformed_round_prunes_single_message():
    good = make_round(1, reasoning="fine")
    bad = make_parse_failure_round(2)
    context, memory = build_run([good, bad])
    signal = inspect([good, bad], THRESHOLDS)
    assert signal.kind is AnomalyKind.MALFORMED_CALL
    new_context, _, outcome = interrupt_and_recover(
        [good, bad], context, memory, signal, recovery_backend(), 0, THRESHOLDS
    )
    assert outcome.pruned_rounds == (2,)
    assert len(new_context.messages) == len(context.messages) - 1 + 1


def test_recovery_never_touches_completed_units():
    completed = MemoryUnit(
        round_indices=(1, 2),
        sub_goal="done already",
        tool_log=(
            ToolLogEntry(
                round_index=2, capability_name="search", arguments_digest="q=1", result_digest="r"
            ),
        ),
        summary="kept",
    )
    current = MemoryUnit(
        round_indices=(3,),
        sub_goal="now",
        tool_log=(
            ToolLogEntry(
                round_index=3, capability_name="search", arguments_digest="q=2", result_digest="r"
            ),
        ),
        summary="s",
    )
    memory = MemoryList((completed, current))
    pruned = prune_memory(memory, (2, 3))
    assert pruned.units[0] == completed
    assert pruned.units[1].tool_log == ()
    assert len(pruned.units) == 2


def test_recovery_attempt_cap_aborts():
    rounds = repeated_rounds(1, 3)
    context, memory = build_run(rounds)
    signal = inspect(rounds, THRESHOLDS)
    with pytest.raises(RecoveryExhausted):
        interrupt_and_recover(
            rounds, context, memory, signal, recovery_backend(), 3, THRESHOLDS
        )


def test_backend_failure_leaves_run_unpruned():
    rounds = repeated_rounds(1, 3)
    context, memory = build_run(rounds)
    signal = inspect(rounds, THRESHOLDS)
    with pytest.raises(RecoveryFailed):
        interrupt_and_recover(rounds, context, memory, signal, scripted(), 0, THRESHOLDS)


def test_thresholds_validate():
    with pytest.raises(ValueError):
        Thresholds(stagnant_output=1)
    with pytest.raises(ValueError):
        Thresholds(window=0)
