"""Property tests for the load-bearing invariants."""

from __future__ import annotations

import json

from hypothesis import given, settings
from hypothesis import strategies as st

from conftest import make_round, memory_reply, scripted
from deepquest.browser.sim import SimSiteGraph, pdf_to_markdown
from deepquest.context import (
    ContextMode,
    MemoryStepOutcome,
    apply_memory_update,
    build_context,
    memory_step,
)
from deepquest.parsing import parse_tool_calls
from deepquest.supervisor import normalize_arguments
from deepquest.trajectory import (
    OBSERVATION_PAYLOAD_CAP,
    MemoryList,
    MemoryUnit,
    Observation,
    ObservationStatus,
    UserQuery,
    validate_memory_list,
)

QUERY = UserQuery(id="q", text="anything")

# Each element decides round t>1: True folds, False opens a new unit.
decision_lists = st.lists(st.booleans(), min_size=0, max_size=30)


@given(decision_lists)
def test_fold_add_preserves_partition(decisions):
    memory = MemoryList()
    for t, fold in enumerate([False] + decisions, start=1):
        fold = fold and memory.latest is not None
        if fold:
            last = memory.latest
            unit = MemoryUnit(
                round_indices=last.round_indices + (t,),
                sub_goal=last.sub_goal,
                summary=last.summary,
            )
        else:
            unit = MemoryUnit(round_indices=(t,), sub_goal=f"goal {t}", summary="s")
        before = len(memory)
        memory = apply_memory_update(memory, MemoryStepOutcome(unit=unit, fold=fold))
        assert len(memory) == before if fold else before + 1
        assert validate_memory_list(memory, t).ok


@given(decision_lists)
@settings(max_examples=40)
def test_context_size_bound_holds_for_any_fold_sequence(decisions):
    entries = []
    sequence = [False] + decisions
    for t, fold in enumerate(sequence, start=1):
        entries.append(
            memory_reply(t, same=fold and t > 1, sub_goal=f"goal {t}", summary=f"sum {t}")
        )
    backend = scripted(*entries)
    memory = MemoryList()
    context = None
    base = 2
    for t in range(1, len(sequence) + 1):
        rnd = make_round(t, args={"query": f"q{t}"})
        memory = apply_memory_update(memory, memory_step(rnd, memory.latest, backend))
        context = build_context(QUERY, memory, context, rnd, "preamble")
        completed = len(memory) - 1
        in_unit = len(memory.latest.round_indices)
        assert len(context.messages) <= base + 3 * completed + 2 * in_unit
        assert (context.mode is ContextMode.RESET) == (in_unit == 1)


@given(st.text(min_size=1, max_size=3000), st.integers(min_value=1, max_value=500))
def test_pdf_paging_reconstruction_identity(document, budget):
    graph = SimSiteGraph(
        pages={}, pdf_store={"https://x.test/d.pdf": document}
    )
    pieces, offset, done = [], 0, False
    while not done:
        text, offset, done = pdf_to_markdown(graph, "https://x.test/d.pdf", offset, budget)
        pieces.append(text)
        assert len(text) <= budget
    assert "".join(pieces) == document


@given(st.text(max_size=OBSERVATION_PAYLOAD_CAP * 2))
def test_observation_payload_always_bounded(payload):
    observation = Observation(status=ObservationStatus.OK, payload=payload)
    assert len(observation.payload) <= OBSERVATION_PAYLOAD_CAP + len("[truncated]")
    if len(payload) > OBSERVATION_PAYLOAD_CAP:
        assert observation.payload.endswith("[truncated]")


@given(
    st.dictionaries(
        st.text(st.characters(categories=("Ll",), max_codepoint=127), min_size=1, max_size=8),
        st.text(st.characters(min_codepoint=32, max_codepoint=126), max_size=30),
        max_size=5,
    )
)
def test_argument_normalization_ignores_whitespace_and_case(arguments):
    noisy = {
        key: "  " + value.upper().replace(" ", "   ") + " " if isinstance(value, str) else value
        for key, value in arguments.items()
    }
    assert normalize_arguments(arguments) == normalize_arguments(noisy)


@given(
    st.text(max_size=80).filter(lambda s: "{" not in s and "}" not in s and "```" not in s),
    st.dictionaries(
        st.text(st.characters(categories=("Ll",)), min_size=1, max_size=6),
        st.one_of(st.integers(), st.text(max_size=20), st.booleans()),
        max_size=4,
    ),
)
def test_embedded_call_always_found(prose, arguments):
    blob = json.dumps({"tool": "search", "arguments": arguments})
    text = f"{prose}\n{blob}\n{prose}"
    calls = parse_tool_calls(text)
    assert len(calls) == 1
    assert calls[0].name == "search"
    assert calls[0].arguments == arguments
