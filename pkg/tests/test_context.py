"""Memory step, fold/add application, and adaptive context construction."""

from __future__ import annotations

import pytest

from conftest import CountingBackend, make_parse_failure_round, make_round, memory_reply, scripted
from deepquest.backend import FixtureEntry, Purpose
from deepquest.context import (
    ContextMode,
    ContextState,
    apply_memory_update,
    build_ablation_context,
    build_context,
    context_size_profile,
    memory_step,
)
from deepquest.trace import TraceError, round_record
from deepquest.trajectory import (
    ContractViolation,
    MemoryList,
    MemoryUnit,
    UserQuery,
    validate_memory_list,
)

QUERY = UserQuery(id="q", text="who wrote it?")
PREAMBLE = "you are an agent"


# ---------------------------------------------------------------------------
# memory_step
# ---------------------------------------------------------------------------


def test_first_round_always_opens_a_unit():
    backend = scripted(memory_reply(1, same=True, sub_goal="ignored", summary="s1"))
    outcome = memory_step(make_round(1), None, backend)
    assert outcome.fold is False
    assert outcome.unit.round_indices == (1,)


def test_fold_extends_indices_and_tool_log():
    prior = MemoryUnit(
        round_indices=(3, 4),
        sub_goal="trace the source",
        tool_log=(),
        summary="old",
    )
    backend = scripted(memory_reply(1, same=True, sub_goal="trace the source", summary="new facts"))
    outcome = memory_step(make_round(5, name="read_parse", args={"source": "u"}), prior, backend)
    assert outcome.fold is True
    assert outcome.unit.round_indices == (3, 4, 5)
    assert outcome.unit.sub_goal == "trace the source"
    assert outcome.unit.summary == "new facts"
    assert len(outcome.unit.tool_log) == 1
    assert outcome.unit.tool_log[0].round_index == 5
    assert outcome.unit.tool_log[0].capability_name == "read_parse"


def test_new_sub_goal_opens_fresh_unit():
    prior = MemoryUnit(round_indices=(1, 2, 3, 4, 5), sub_goal="old goal", summary="old")
    backend = scripted(memory_reply(1, same=False, sub_goal="verify the date", summary="initial"))
    outcome = memory_step(make_round(6), prior, backend)
    assert outcome.fold is False
    assert outcome.unit.round_indices == (6,)
    assert outcome.unit.sub_goal == "verify the date"
    assert outcome.unit.summary == "initial"
    assert len(outcome.unit.tool_log) == 1


def test_backend_failure_falls_back_to_fold():
    prior = MemoryUnit(round_indices=(1,), sub_goal="goal", summary="kept")
    backend = scripted()  # no memory entries: both attempts underflow
    outcome = memory_step(make_round(2), prior, backend)
    assert outcome.fold is True
    assert outcome.unit.summary == "kept"
    assert outcome.unit.round_indices == (1, 2)


def test_unparseable_reply_retries_then_falls_back():
    prior = MemoryUnit(round_indices=(1,), sub_goal="goal", summary="kept")
    backend = CountingBackend(
        scripted(
            FixtureEntry(purpose=Purpose.MEMORY, index=1, reply_text="not json"),
            FixtureEntry(purpose=Purpose.MEMORY, index=2, reply_text="still not json"),
        )
    )
    outcome = memory_step(make_round(2), prior, backend)
    assert backend.calls["memory"] == 2
    assert outcome.fold is True and outcome.unit.summary == "kept"


def test_parse_failure_round_skips_backend():
    prior = MemoryUnit(round_indices=(1,), sub_goal="goal", summary="kept")
    backend = CountingBackend(scripted())
    outcome = memory_step(make_parse_failure_round(2), prior, backend)
    assert backend.calls == {}
    assert outcome.fold is True
    assert outcome.unit.round_indices == (1, 2)
    assert len(outcome.unit.tool_log) == 0


def test_parse_failure_first_round_gets_placeholder_unit():
    backend = CountingBackend(scripted())
    outcome = memory_step(make_parse_failure_round(1), None, backend)
    assert backend.calls == {}
    assert outcome.fold is False
    assert outcome.unit.round_indices == (1,)
    assert outcome.unit.sub_goal


def test_summary_clipped_to_budget():
    backend = scripted(memory_reply(1, same=False, sub_goal="g", summary="x" * 5_000))
    outcome = memory_step(make_round(1), None, backend, summary_budget=100)
    assert len(outcome.unit.summary) == 100


# ---------------------------------------------------------------------------
# apply_memory_update
# ---------------------------------------------------------------------------


def _unit(indices, sub_goal="g"):
    return MemoryUnit(round_indices=tuple(indices), sub_goal=sub_goal)


def test_fold_replaces_last_element():
    from deepquest.context import MemoryStepOutcome

    m1, m2 = _unit([1]), _unit([2])
    m2_prime = _unit([2, 3])
    result = apply_memory_update(MemoryList((m1, m2)), MemoryStepOutcome(unit=m2_prime, fold=True))
    assert result.units == (m1, m2_prime)


def test_add_appends():
    from deepquest.context import MemoryStepOutcome

    m1, m2 = _unit([1]), _unit([2])
    result = apply_memory_update(MemoryList((m1,)), MemoryStepOutcome(unit=m2, fold=False))
    assert result.units == (m1, m2)
    first = apply_memory_update(MemoryList(), MemoryStepOutcome(unit=m1, fold=False))
    assert first.units == (m1,)


def test_fold_on_empty_memory_is_contract_violation():
    from deepquest.context import MemoryStepOutcome

    with pytest.raises(ContractViolation):
        apply_memory_update(MemoryList(), MemoryStepOutcome(unit=_unit([1]), fold=True))


# ---------------------------------------------------------------------------
# build_context
# ---------------------------------------------------------------------------


def simulate(decisions: list[bool | None], backend_entries=None):
    """Drive rounds through memory_step/apply/build.

    decisions[t-1]: None for round 1 and for fold, False forces a new
    sub-goal at that round. Returns per-round (context, memory) snapshots.
    """
    entries = []
    for t, decision in enumerate(decisions, start=1):
        new = decision is False or t == 1
        entries.append(
            memory_reply(
                t,
                same=not new,
                sub_goal=f"goal-{t}" if new else "whatever",
                summary=f"summary after round {t}",
            )
        )
    backend = scripted(*entries)
    memory = MemoryList()
    context = None
    snapshots = []
    for t in range(1, len(decisions) + 1):
        rnd = make_round(t, args={"query": f"q{t}"})
        outcome = memory_step(rnd, memory.latest, backend)
        memory = apply_memory_update(memory, outcome)
        context = build_context(QUERY, memory, context, rnd, PREAMBLE)
        snapshots.append((context, memory))
    return snapshots


def test_first_round_is_reset_without_memory_message():
    (context, _), = simulate([None])
    assert context.mode is ContextMode.RESET
    tags = [m.tag for m in context.messages]
    assert tags == ["preamble", "query", "response", "observation"]


def test_incremental_adds_exactly_two_messages():
    snapshots = simulate([None, True, True])
    c2, _ = snapshots[1]
    c3, _ = snapshots[2]
    assert c3.mode is ContextMode.INCREMENTAL
    assert c3.rounds_in_current_unit == 3
    assert len(c3.messages) == len(c2.messages) + 2
    assert c3.messages[: len(c2.messages)] == c2.messages


def test_reset_rebuilds_from_rendered_memory():
    snapshots = simulate([None, True, False])
    c3, memory = snapshots[2]
    assert c3.mode is ContextMode.RESET
    tags = [m.tag for m in c3.messages]
    assert tags == ["preamble", "query", "memory", "response", "observation"]
    memory_text = c3.messages[2].text
    assert memory.units[0].sub_goal in memory_text
    assert memory.units[0].summary in memory_text
    # Raw history of round 1/2 does not survive the reset.
    assert "step 1" not in " ".join(m.text for m in c3.messages)


def test_ten_round_run_with_three_sub_goals_resets_three_times():
    decisions = [None, True, False, True, True, False, True, True, True, True]
    snapshots = simulate(decisions)
    modes = [c.mode for c, _ in snapshots]
    resets = [t for t, mode in enumerate(modes, start=1) if mode is ContextMode.RESET]
    assert resets == [1, 3, 6]
    final_memory = snapshots[-1][1]
    assert len(final_memory.units) == 3
    assert validate_memory_list(final_memory, 10).ok


def test_incremental_without_previous_is_contract_violation():
    backend = scripted(
        memory_reply(1, same=False, sub_goal="g", summary="s"),
        memory_reply(2, same=True, sub_goal="g", summary="s"),
    )
    memory = MemoryList()
    r1 = make_round(1)
    memory = apply_memory_update(memory, memory_step(r1, None, backend))
    r2 = make_round(2)
    memory = apply_memory_update(memory, memory_step(r2, memory.latest, backend))
    with pytest.raises(ContractViolation):
        build_context(QUERY, memory, None, r2, PREAMBLE)


def test_memory_must_cover_latest_round():
    memory = MemoryList((_unit([1]),))
    with pytest.raises(ContractViolation):
        build_context(QUERY, memory, None, make_round(2), PREAMBLE)


def test_ablation_context_grows_linearly():
    context = None
    for t in range(1, 6):
        context = build_ablation_context(QUERY, context, make_round(t), PREAMBLE)
        assert len(context.messages) == 2 + 2 * t
        assert context.mode is ContextMode.INCREMENTAL


def test_context_requires_preamble_and_query_first():
    from deepquest.context import ContextMessage

    with pytest.raises(ValueError):
        ContextState(
            messages=(ContextMessage(role="user", text="x", tag="query"),),
            mode=ContextMode.RESET,
            rounds_in_current_unit=1,
        )


# ---------------------------------------------------------------------------
# context_size_profile
# ---------------------------------------------------------------------------


def test_profile_single_round_run():
    (context, _), = simulate([None])
    records = [round_record(make_round(1), context.mode.value, len(context.messages))]
    assert context_size_profile(records) == [(1, 4)]


def test_profile_single_sub_goal_is_strictly_increasing():
    decisions = [None] + [True] * 19
    snapshots = simulate(decisions)
    counts = [len(c.messages) for c, _ in snapshots]
    assert all(b > a for a, b in zip(counts, counts[1:]))
    assert counts == [4 + 2 * k for k in range(20)]


def test_profile_new_sub_goal_every_round_is_bounded():
    decisions = [None] + [False] * 19
    snapshots = simulate(decisions)
    for t, (context, memory) in enumerate(snapshots, start=1):
        completed = len(memory.units) - 1
        base = 2
        assert context.mode is ContextMode.RESET
        assert len(context.messages) <= base + completed + 2


def test_profile_rejects_malformed_records():
    with pytest.raises(TraceError):
        context_size_profile([{"kind": "round", "index": "one", "context_messages": 3}])
