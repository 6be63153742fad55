"""Shared builders for scripted fixtures and synthetic rounds."""

from __future__ import annotations

import json

import pytest

from deepquest.backend import FixtureEntry, Purpose, ScriptedBackend
from deepquest.trajectory import (
    AgentResponse,
    Observation,
    ObservationStatus,
    Round,
    ToolInvocation,
)


def planning_call(index: int, name: str, args: dict, reasoning: str = "") -> FixtureEntry:
    return FixtureEntry(
        purpose=Purpose.PLANNING,
        index=index,
        reply_text=reasoning or f"I will call {name}.",
        structured_call=(name, args),
    )


def planning_final(index: int, answer: str, reasoning: str = "") -> FixtureEntry:
    text = (reasoning + "\n" if reasoning else "") + f"FINAL ANSWER: {answer}"
    return FixtureEntry(purpose=Purpose.PLANNING, index=index, reply_text=text)


def memory_reply(index: int, same: bool, sub_goal: str, summary: str) -> FixtureEntry:
    return FixtureEntry(
        purpose=Purpose.MEMORY,
        index=index,
        reply_text=json.dumps(
            {"same_sub_goal": same, "sub_goal": sub_goal, "summary": summary}
        ),
    )


def scripted(*entries: FixtureEntry) -> ScriptedBackend:
    return ScriptedBackend(entries)


def make_call_response(
    name: str = "search", args: dict | None = None, reasoning: str = "thinking"
) -> AgentResponse:
    return AgentResponse(
        reasoning=reasoning,
        invocation=ToolInvocation(capability_name=name, arguments=args or {}),
    )


def make_round(
    index: int,
    name: str = "search",
    args: dict | None = None,
    reasoning: str | None = None,
    status: ObservationStatus = ObservationStatus.OK,
    payload: str = "result",
    error_detail: str | None = None,
) -> Round:
    response = make_call_response(name, args, reasoning if reasoning is not None else f"step {index}")
    if status is not ObservationStatus.OK and error_detail is None:
        error_detail = "it failed"
    observation = Observation(status=status, payload=payload, error_detail=error_detail)
    return Round(index=index, response=response, observation=observation)


def make_final_round(index: int, answer: str = "done") -> Round:
    return Round(
        index=index,
        response=AgentResponse(reasoning="finishing", final_answer=answer),
    )


def make_parse_failure_round(index: int, text: str = "???") -> Round:
    return Round(
        index=index,
        response=AgentResponse(reasoning=text, parse_error="no tool call or final answer found"),
    )


def site_graph_dict() -> dict:
    """A small site with off-viewport content, collapsibles, lazy regions,
    a login pop-up, a dead external link, a search index, and a stored PDF."""
    pdf_text = "".join(f"pdf line {i:04d} of the document".ljust(39, ".") + "\n" for i in range(250))
    assert len(pdf_text) == 10_000
    return {
        "pages": [
            {
                "url": "https://site.test/home",
                "title": "Research hub",
                "total_height": 2500,
                "blocks": [
                    {"kind": "text", "offset": 0, "text": "Welcome to the research hub."},
                    {"kind": "link", "offset": 150, "text": "Results",
                     "target": "https://site.test/results/1"},
                    {"kind": "link", "offset": 400, "text": "Archive",
                     "target": "https://site.test/archive"},
                    {"kind": "button", "offset": 900, "text": "Load teaser", "reveals": "teaser"},
                    {"kind": "text", "offset": 950, "text": "Teaser: see page two.",
                     "hidden_until": "teaser"},
                    {"kind": "link", "offset": 1200, "text": "Deep link",
                     "target": "https://site.test/deep"},
                    {"kind": "input", "offset": 1500, "text": "Query box", "block_id": "q"},
                ],
            },
            {
                "url": "https://site.test/results/1",
                "title": "Results 1",
                "total_height": 1000,
                "blocks": [
                    {"kind": "text", "offset": 0,
                     "text": "Results page one. Nothing conclusive here."},
                    {"kind": "link", "offset": 200, "text": "Next page",
                     "target": "https://site.test/results/2"},
                    {"kind": "link", "offset": 500, "text": "Dead end",
                     "target": "https://gone.test/404"},
                ],
            },
            {
                "url": "https://site.test/results/2",
                "title": "Results 2",
                "total_height": 1000,
                "blocks": [
                    {"kind": "text", "offset": 100, "text": "The code name is ZEPHYR-7741."},
                    {"kind": "link", "offset": 300, "text": "Back",
                     "target": "https://site.test/results/1"},
                ],
            },
            {
                "url": "https://site.test/archive",
                "title": "Archive",
                "total_height": 2200,
                "blocks": [
                    {"kind": "text", "offset": 0, "text": "Archive of documents."},
                    {"kind": "collapsible", "offset": 300, "text": "Older records",
                     "block_id": "c-details", "children": [
                         {"kind": "text", "offset": 350,
                          "text": "Hidden note: the archive remembers."},
                         {"kind": "link", "offset": 400, "text": "Secret link",
                          "target": "https://site.test/deep"},
                     ]},
                    {"kind": "lazy", "offset": 1600, "block_id": "lz-footer", "children": [
                        {"kind": "text", "offset": 1700, "text": "Lazy footer content."},
                        {"kind": "link", "offset": 1800, "text": "Lazy link",
                         "target": "https://site.test/results/1"},
                    ]},
                ],
            },
            {
                "url": "https://site.test/deep",
                "title": "Deep page",
                "total_height": 1000,
                "blocks": [
                    {"kind": "login_popup", "offset": 0, "text": "Sign in to continue",
                     "block_id": "lp"},
                    {"kind": "text", "offset": 200,
                     "text": "Deep page content behind the popup: code DELTA-9."},
                ],
            },
        ],
        "external_dead": ["https://gone.test/404"],
        "search_index": [
            {"query": "zephyr code name", "results": [
                {"url": "https://site.test/results/1", "title": "Results 1",
                 "snippet": "start here"},
            ]},
            {"query": "archive", "results": [
                {"url": "https://site.test/archive", "title": "Archive", "snippet": "old stuff"},
            ]},
        ],
        "pdf_store": [{"url": "https://site.test/paper.pdf", "markdown": pdf_text}],
    }


def browser_action_entry(index: int, action_type: str, params: dict) -> FixtureEntry:
    return FixtureEntry(
        purpose=Purpose.SUBAGENT_BROWSER,
        index=index,
        reply_text=f"step {index}",
        structured_call=(action_type, params),
    )


class CountingBackend:
    """Delegates to an inner backend while counting calls per purpose."""

    def __init__(self, inner):
        self.inner = inner
        self.calls: dict[str, int] = {}

    def complete(self, request):
        self.calls[request.purpose.value] = self.calls.get(request.purpose.value, 0) + 1
        return self.inner.complete(request)


class FailingBackend:
    def complete(self, request):
        raise RuntimeError("backend down")


@pytest.fixture
def failing_backend():
    return FailingBackend()
