"""Browser sub-agent: a simulated site graph plus a policy loop over it."""

from deepquest.browser.agent import BrowserTask, LiveBrowserAdapter, run_subtask
from deepquest.browser.sim import (
    VIEWPORT_HEIGHT,
    BrowserAction,
    BrowserState,
    SimPage,
    SimSiteGraph,
    act,
    initial_state,
    observe,
    pdf_to_markdown,
)

__all__ = [
    "BrowserAction",
    "BrowserState",
    "BrowserTask",
    "LiveBrowserAdapter",
    "SimPage",
    "SimSiteGraph",
    "VIEWPORT_HEIGHT",
    "act",
    "initial_state",
    "observe",
    "pdf_to_markdown",
    "run_subtask",
]
