"""Policy loop for the browser sub-agent.

One backend call per step yields exactly one action; the episode ends on
``terminate`` or at the step budget. The current screenshot reference rides
along as ephemeral input on the request only; serialized history never
contains it.
"""

from __future__ import annotations

import json
import time
from dataclasses import dataclass, field

from deepquest.backend import ChatRequest, Message, ModelBackend, Purpose, Sampling
from deepquest.browser.sim import (
    BrowserAction,
    BrowserObservation,
    BrowserState,
    SimSiteGraph,
    act,
    initial_state,
    observe,
)
from deepquest.parsing import parse_tool_calls
from deepquest.trace import TraceWriter
from deepquest.trajectory import (
    DEFAULT_MAX_SUBAGENT_STEPS,
    Observation,
    ObservationStatus,
)

POLICY_INSTRUCTIONS = (
    "You control a web browser to complete one sub-task. Reply with exactly "
    "one action as a JSON object {\"tool\": \"<action_type>\", \"arguments\": {...}}. "
    "Action types: web_search(query, top_k?), pdf_to_markdown(url, offset?, budget?), "
    "go_to_url(url), click_element(index), input_text(index, text), "
    "scroll_down(pixels?), scroll_up(pixels?), extract_content(), open_tab(url), "
    "switch_tab(index), close_tab(index?), terminate(findings?). "
    "Element indices refer to the numbered elements in the current snapshot. "
    "At most one action is executed per step."
)


@dataclass(frozen=True)
class BrowserTask:
    instruction: str
    max_steps: int = DEFAULT_MAX_SUBAGENT_STEPS

    def __post_init__(self) -> None:
        if not self.instruction:
            raise ValueError("instruction must be non-empty")
        if self.max_steps < 1:
            raise ValueError("max_steps must be positive")


@dataclass
class BrowserHistory:
    """Alternating observations and actions for one episode.

    The serialized form deliberately omits every screenshot reference; only
    the current step's request carries one, as an attachment.
    """

    task: str
    steps: list[tuple[BrowserObservation, BrowserAction, str]] = field(default_factory=list)
    findings: list[str] = field(default_factory=list)
    notes: list[str] = field(default_factory=list)

    def last_step(self) -> tuple[BrowserAction, str] | None:
        if not self.steps:
            return None
        _, action, result = self.steps[-1]
        return action, result

    def record(self, observation: BrowserObservation, action: BrowserAction, result: str) -> None:
        self.steps.append((observation, action, result))

    def serialize(self) -> str:
        lines = [f"Task: {self.task}"]
        for number, (observation, action, result) in enumerate(self.steps, start=1):
            lines.append(f"--- step {number} ---")
            lines.append(observation.browser_snapshot)
            lines.append(
                f"Action: {action.action_type}({json.dumps(action.parameters, sort_keys=True)})"
            )
            lines.append(f"Result: {result[:800]}")
        return "\n".join(lines)


def _parse_action(reply_text: str, structured: tuple[str, dict] | None) -> tuple[BrowserAction | None, list[str]]:
    notes: list[str] = []
    if structured is not None:
        name, arguments = structured
        try:
            return BrowserAction(action_type=name, parameters=dict(arguments)), notes
        except ValueError as exc:
            return None, [f"invalid action: {exc}"]
    calls = parse_tool_calls(reply_text)
    if not calls:
        return None, ["no action found in reply"]
    if len(calls) > 1:
        notes.append(f"{len(calls)} tool calls in one reply; only the first was executed")
    try:
        return BrowserAction(action_type=calls[0].name, parameters=dict(calls[0].arguments)), notes
    except ValueError as exc:
        return None, [f"invalid action: {exc}"]


def policy_step(
    history: BrowserHistory,
    observation: BrowserObservation,
    backend: ModelBackend,
    sampling: Sampling | None = None,
) -> tuple[BrowserAction, list[str]]:
    """Ask the policy for the next action given the serialized history.

    An unparseable reply gets one corrective retry; a second failure forces
    terminate so the episode always ends cleanly.
    """
    sampling = sampling or Sampling()
    notes: list[str] = []
    corrective = ""
    for attempt in range(2):
        text = "\n".join(
            [
                history.serialize(),
                "--- current step ---",
                observation.textual_context,
                observation.browser_snapshot,
                corrective,
                "Reply with exactly one action.",
            ]
        )
        request = ChatRequest(
            messages=(
                Message(role="system", text=POLICY_INSTRUCTIONS),
                Message(role="user", text=text, attachments=(observation.screenshot_ref,)),
            ),
            purpose=Purpose.SUBAGENT_BROWSER,
            sampling=sampling,
        )
        reply = backend.complete(request)
        action, parse_notes = _parse_action(reply.text, reply.structured_call)
        notes.extend(parse_notes)
        if action is not None:
            return action, notes
        corrective = f"Your previous reply was invalid ({parse_notes[0]}). "
    notes.append("forced terminate after two unparseable replies")
    return BrowserAction(action_type="terminate", parameters={}), notes


def run_subtask(
    task: BrowserTask,
    graph: SimSiteGraph,
    backend: ModelBackend,
    sampling: Sampling | None = None,
    trace: TraceWriter | None = None,
    start_url: str | None = None,
) -> Observation:
    """Run one browser episode and fold it into a single Observation.

    The loop is observe -> policy -> act, at most ``task.max_steps`` times or
    until the policy terminates. The report aggregates extracted content and
    the terminate findings for the main agent.
    """
    state: BrowserState = initial_state(graph, start_url or "about:blank")
    history = BrowserHistory(task=task.instruction)
    terminated = False
    terminate_findings = ""
    steps_used = 0

    try:
        for step in range(1, task.max_steps + 1):
            observation = observe(graph, state, history)
            action, notes = policy_step(history, observation, backend, sampling)
            history.notes.extend(notes)
            state, result = act(graph, state, action)
            history.record(observation, action, result)
            steps_used = step
            if action.action_type == "extract_content":
                history.findings.append(result)
            if action.action_type == "web_search":
                history.findings.append(result)
            if trace is not None:
                trace.write(
                    {
                        "kind": "episode",
                        "agent": "browser",
                        "step": step,
                        "action": {"type": action.action_type, "parameters": action.parameters},
                        "status": "ok",
                        "detail": result[:300],
                    }
                )
            if action.action_type == "terminate":
                terminated = True
                terminate_findings = action.parameters.get("findings", "")
                break
    except Exception as exc:
        return Observation(
            status=ObservationStatus.TOOL_ERROR,
            error_detail=f"browser episode failed: {exc}",
            produced_at=time.time(),
        )

    lines = [
        "Browser sub-task report",
        f"Task: {task.instruction}",
        f"Steps used: {steps_used}",
        "Terminated: yes" if terminated else f"Terminated: no (step budget {task.max_steps} reached)",
    ]
    if terminate_findings:
        lines.append(f"Findings: {terminate_findings}")
    if history.notes:
        lines.append("Notes: " + "; ".join(history.notes))
    if history.findings:
        lines.append("Extracted content:")
        lines.extend(history.findings)
    return Observation(
        status=ObservationStatus.OK, payload="\n".join(lines), produced_at=time.time()
    )


class LiveBrowserAdapter:
    """Contract for plugging a real browser behind the same observe/act API.

    No implementation is bundled; the simulated graph keeps the runtime
    hermetic. A live adapter must provide the three methods below with the
    same shapes as the sim functions.
    """

    def observe(self, state, history) -> BrowserObservation:
        raise NotImplementedError("live browsing requires an adapter implementation")

    def act(self, state, action: BrowserAction):
        raise NotImplementedError("live browsing requires an adapter implementation")

    def pdf_to_markdown(self, url: str, offset: int, budget: int):
        raise NotImplementedError("live browsing requires an adapter implementation")
