"""Deterministic browser environment over a fixture site graph.

The agent never sees the full graph. Each observation exposes only the
interactive elements inside the current viewport, so content behind scrolls,
collapsed sections, lazy regions, or login pop-ups must be reached by
acting. All transitions are pure functions of (graph, state, action).
"""

from __future__ import annotations

import hashlib
import json
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Any, Iterator

VIEWPORT_HEIGHT = 1_000
DEFAULT_PDF_PAGE_BUDGET = 4_000
START_URL = "about:blank"

INTERACTIVE_KINDS = frozenset({"link", "button", "input", "collapsible", "login_popup"})
BLOCK_KINDS = INTERACTIVE_KINDS | {"text", "lazy"}


@dataclass(frozen=True)
class Block:
    """One content block of a page; children belong to collapsible/lazy blocks."""

    kind: str
    offset: int
    text: str = ""
    target: str | None = None
    reveals: str | None = None
    hidden_until: str | None = None
    block_id: str = ""
    children: tuple["Block", ...] = ()

    def __post_init__(self) -> None:
        if self.kind not in BLOCK_KINDS:
            raise ValueError(f"unknown block kind {self.kind!r}")
        if self.kind == "link" and not self.target:
            raise ValueError("link blocks require a target")


@dataclass(frozen=True)
class SimPage:
    url: str
    title: str
    blocks: tuple[Block, ...] = ()
    total_height: int = VIEWPORT_HEIGHT


@dataclass(frozen=True)
class SearchHit:
    url: str
    title: str
    snippet: str


@dataclass(frozen=True)
class SimSiteGraph:
    """The environment's true state space: pages, search index, PDF store."""

    pages: dict[str, SimPage]
    search_index: dict[str, tuple[SearchHit, ...]] = field(default_factory=dict)
    pdf_store: dict[str, str] = field(default_factory=dict)
    external_dead: frozenset[str] = frozenset()

    def __post_init__(self) -> None:
        if START_URL not in self.pages:
            self.pages[START_URL] = SimPage(url=START_URL, title="Blank page", total_height=0)
        for page in self.pages.values():
            for block, _ in _walk_all(page.blocks):
                if block.kind == "link" and block.target not in self.pages:
                    if block.target not in self.external_dead:
                        raise ValueError(
                            f"page {page.url!r} links to unresolvable target {block.target!r}"
                        )

    @classmethod
    def from_path(cls, path: str | Path) -> "SimSiteGraph":
        with open(path, "r", encoding="utf-8") as stream:
            return cls.from_dict(json.load(stream))

    @classmethod
    def from_dict(cls, data: dict[str, Any]) -> "SimSiteGraph":
        pages: dict[str, SimPage] = {}
        for page_data in data.get("pages", ()):
            blocks = tuple(
                _block_from_dict(b, f"b{i}") for i, b in enumerate(page_data.get("blocks", ()))
            )
            page = SimPage(
                url=page_data["url"],
                title=page_data.get("title", page_data["url"]),
                blocks=blocks,
                total_height=int(page_data.get("total_height", VIEWPORT_HEIGHT)),
            )
            pages[page.url] = page
        index: dict[str, tuple[SearchHit, ...]] = {}
        for item in data.get("search_index", ()):
            hits = tuple(
                SearchHit(url=r["url"], title=r.get("title", r["url"]), snippet=r.get("snippet", ""))
                for r in item.get("results", ())
            )
            index[item["query"]] = hits
        pdf_store = {item["url"]: item["markdown"] for item in data.get("pdf_store", ())}
        return cls(
            pages=pages,
            search_index=index,
            pdf_store=pdf_store,
            external_dead=frozenset(data.get("external_dead", ())),
        )


def _block_from_dict(data: dict[str, Any], default_id: str) -> Block:
    children = tuple(
        _block_from_dict(c, f"{default_id}.{i}") for i, c in enumerate(data.get("children", ()))
    )
    return Block(
        kind=data["kind"],
        offset=int(data.get("offset", 0)),
        text=data.get("text", ""),
        target=data.get("target"),
        reveals=data.get("reveals"),
        hidden_until=data.get("hidden_until"),
        block_id=data.get("block_id") or default_id,
        children=children,
    )


def _walk_all(blocks: tuple[Block, ...]) -> Iterator[tuple[Block, str]]:
    for block in blocks:
        yield block, block.block_id
        yield from _walk_all(block.children)


# ---------------------------------------------------------------------------
# Browser state
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class TabState:
    url: str
    scroll_offset: int = 0
    expanded: frozenset[str] = frozenset()
    revealed: frozenset[str] = frozenset()
    materialized: frozenset[str] = frozenset()
    dismissed: frozenset[str] = frozenset()
    inputs: tuple[tuple[str, str], ...] = ()


@dataclass(frozen=True)
class BrowserState:
    tabs: tuple[TabState, ...]
    active_tab: int = 0
    navigation_history: tuple[str, ...] = ()

    def __post_init__(self) -> None:
        if not (0 <= self.active_tab < len(self.tabs)):
            raise ValueError("active_tab out of range")

    @property
    def active(self) -> TabState:
        return self.tabs[self.active_tab]

    def with_active(self, tab: TabState) -> "BrowserState":
        tabs = self.tabs[: self.active_tab] + (tab,) + self.tabs[self.active_tab + 1 :]
        return replace(self, tabs=tabs)


def _materialize(page: SimPage, tab: TabState) -> TabState:
    # Lazy regions stay materialized once scrolling has brought them into view.
    visible_limit = tab.scroll_offset + VIEWPORT_HEIGHT
    fresh = {
        block.block_id
        for block, _ in _walk_all(page.blocks)
        if block.kind == "lazy" and block.offset < visible_limit
    }
    if fresh - tab.materialized:
        return replace(tab, materialized=tab.materialized | fresh)
    return tab


def _fresh_tab(graph: SimSiteGraph, url: str) -> TabState:
    return _materialize(graph.pages[url], TabState(url=url))


def initial_state(graph: SimSiteGraph, start_url: str = START_URL) -> BrowserState:
    if start_url not in graph.pages:
        raise ValueError(f"start url {start_url!r} not in site graph")
    return BrowserState(tabs=(_fresh_tab(graph, start_url),), navigation_history=(start_url,))


# ---------------------------------------------------------------------------
# Visibility and observation
# ---------------------------------------------------------------------------


def _revealed_blocks(page: SimPage, tab: TabState) -> list[Block]:
    """Blocks reachable in the current tab state, ignoring the viewport.

    A pending login pop-up obstructs everything else on the page.
    """
    popups = [
        b
        for b in page.blocks
        if b.kind == "login_popup" and b.block_id not in tab.dismissed
    ]
    if popups:
        return popups

    result: list[Block] = []

    def walk(blocks: tuple[Block, ...]) -> None:
        for block in blocks:
            if block.hidden_until and block.hidden_until not in tab.revealed:
                continue
            if block.kind == "collapsible":
                result.append(block)
                if block.block_id in tab.expanded:
                    walk(block.children)
            elif block.kind == "lazy":
                if block.block_id in tab.materialized:
                    walk(block.children)
            elif block.kind == "login_popup":
                continue  # dismissed
            else:
                result.append(block)

    walk(page.blocks)
    return result


@dataclass(frozen=True)
class ElementRef:
    index: int
    kind: str
    label: str
    block_id: str
    offset: int


def visible_elements(graph: SimSiteGraph, state: BrowserState) -> list[ElementRef]:
    """Interactive elements inside the viewport, indexed in document order.

    Indices are assigned per observation; the same rule runs again at
    act-time, so an index is stable between an observe and the action that
    answers it. Login pop-ups float above the page and are always visible
    while pending.
    """
    tab = state.active
    page = graph.pages[tab.url]
    low, high = tab.scroll_offset, tab.scroll_offset + VIEWPORT_HEIGHT
    elements: list[ElementRef] = []
    for block in _revealed_blocks(page, tab):
        if block.kind not in INTERACTIVE_KINDS:
            continue
        if block.kind != "login_popup" and not (low <= block.offset < high):
            continue
        elements.append(
            ElementRef(
                index=len(elements) + 1,
                kind=block.kind,
                label=block.text,
                block_id=block.block_id,
                offset=block.offset,
            )
        )
    return elements


@dataclass(frozen=True)
class BrowserObservation:
    """What the policy sees at one step: text context, viewport snapshot, screenshot ref."""

    textual_context: str
    browser_snapshot: str
    screenshot_ref: str
    elements: tuple[ElementRef, ...]


def _screenshot_ref(state: BrowserState) -> str:
    tab = state.active
    seed = json.dumps(
        {
            "url": tab.url,
            "scroll": tab.scroll_offset,
            "expanded": sorted(tab.expanded),
            "revealed": sorted(tab.revealed),
            "materialized": sorted(tab.materialized),
            "dismissed": sorted(tab.dismissed),
            "inputs": sorted(tab.inputs),
            "tab": state.active_tab,
        },
        sort_keys=True,
    )
    return "screenshot:" + hashlib.sha256(seed.encode("utf-8")).hexdigest()[:16]


def render_snapshot(graph: SimSiteGraph, state: BrowserState) -> tuple[str, tuple[ElementRef, ...]]:
    tab = state.active
    page = graph.pages[tab.url]
    elements = tuple(visible_elements(graph, state))
    lines = [
        f"URL: {tab.url}",
        f"Title: {page.title}",
        "Tabs: " + ", ".join(f"[{i}] {t.url}" for i, t in enumerate(state.tabs)),
        f"Scroll: {tab.scroll_offset}/{max(page.total_height - VIEWPORT_HEIGHT, 0)}"
        f" (viewport {VIEWPORT_HEIGHT})",
        "Interactive elements in viewport:",
    ]
    if elements:
        lines.extend(
            f"  [{e.index}] <{e.kind}> {e.label or '(unlabeled)'}" for e in elements
        )
    else:
        lines.append("  (none)")
    return "\n".join(lines), elements


# ---------------------------------------------------------------------------
# Actions
# ---------------------------------------------------------------------------

ACTION_SCHEMAS: dict[str, dict[str, tuple[type, bool]]] = {
    "web_search": {"query": (str, True), "top_k": (int, False)},
    "pdf_to_markdown": {"url": (str, True), "offset": (int, False), "budget": (int, False)},
    "go_to_url": {"url": (str, True)},
    "click_element": {"index": (int, True)},
    "input_text": {"index": (int, True), "text": (str, True)},
    "scroll_down": {"pixels": (int, False)},
    "scroll_up": {"pixels": (int, False)},
    "extract_content": {"goal": (str, False)},
    "open_tab": {"url": (str, True)},
    "switch_tab": {"index": (int, True)},
    "close_tab": {"index": (int, False)},
    "terminate": {"findings": (str, False)},
}


@dataclass(frozen=True)
class BrowserAction:
    """A parameterized browser operation: action type plus typed parameters."""

    action_type: str
    parameters: dict = field(default_factory=dict)

    def __post_init__(self) -> None:
        schema = ACTION_SCHEMAS.get(self.action_type)
        if schema is None:
            raise ValueError(f"unknown action type {self.action_type!r}")
        for key, value in self.parameters.items():
            if key not in schema:
                raise ValueError(f"action {self.action_type} has no parameter {key!r}")
            expected = schema[key][0]
            if expected is int and isinstance(value, bool) or not isinstance(value, expected):
                raise ValueError(f"parameter {key!r} must be {expected.__name__}")
        for key, (_, required) in schema.items():
            if required and key not in self.parameters:
                raise ValueError(f"action {self.action_type} requires parameter {key!r}")


def pdf_to_markdown(
    graph: SimSiteGraph, url: str, offset: int = 0, budget: int = DEFAULT_PDF_PAGE_BUDGET
) -> tuple[str, int, bool]:
    """Read one page of a stored PDF's markdown rendering.

    Returns (text, next_offset, done); paging with the returned offsets
    reconstructs the document exactly.
    """
    if budget <= 0:
        raise ValueError("budget must be positive")
    document = graph.pdf_store.get(url)
    if document is None:
        raise KeyError(f"no PDF stored at {url!r}")
    offset = max(offset, 0)
    chunk = document[offset : offset + budget]
    next_offset = offset + len(chunk)
    return chunk, next_offset, next_offset >= len(document)


def _navigate(graph: SimSiteGraph, state: BrowserState, url: str) -> tuple[BrowserState, str]:
    if url not in graph.pages:
        return state, f"navigation failed: {url} is unreachable"
    new_state = state.with_active(_fresh_tab(graph, url))
    new_state = replace(new_state, navigation_history=state.navigation_history + (url,))
    return new_state, f"navigated to {url} ({graph.pages[url].title})"


def _scroll(graph: SimSiteGraph, state: BrowserState, delta: int) -> tuple[BrowserState, str]:
    tab = state.active
    page = graph.pages[tab.url]
    limit = max(page.total_height - VIEWPORT_HEIGHT, 0)
    new_offset = min(max(tab.scroll_offset + delta, 0), limit)
    tab = replace(tab, scroll_offset=new_offset)
    tab = _materialize(page, tab)
    return state.with_active(tab), f"scrolled to offset {new_offset} of {limit}"


def act(
    graph: SimSiteGraph, state: BrowserState, action: BrowserAction
) -> tuple[BrowserState, str]:
    """Apply one action; returns the new state and a result line.

    Invalid targets (bad element index, dead link, closing the last tab)
    leave the state unchanged and report the problem in the result.
    """
    kind = action.action_type
    params = action.parameters

    if kind == "web_search":
        hits = search_site(graph, params["query"], params.get("top_k", 5))
        if not hits:
            return state, "search returned no results"
        lines = [f"- {h.url} | {h.title} | {h.snippet}" for h in hits]
        return state, "search results:\n" + "\n".join(lines)

    if kind == "pdf_to_markdown":
        try:
            text, next_offset, done = pdf_to_markdown(
                graph,
                params["url"],
                params.get("offset", 0),
                params.get("budget", DEFAULT_PDF_PAGE_BUDGET),
            )
        except KeyError as exc:
            return state, f"pdf error: {exc.args[0]}"
        marker = "end of document" if done else f"continue at offset {next_offset}"
        return state, f"pdf page ({marker}):\n{text}"

    if kind == "go_to_url":
        return _navigate(graph, state, params["url"])

    if kind == "scroll_down":
        return _scroll(graph, state, params.get("pixels", VIEWPORT_HEIGHT))
    if kind == "scroll_up":
        return _scroll(graph, state, -params.get("pixels", VIEWPORT_HEIGHT))

    if kind == "extract_content":
        return state, extract_content(graph, state)

    if kind == "open_tab":
        url = params["url"]
        if url not in graph.pages:
            return state, f"navigation failed: {url} is unreachable"
        tabs = state.tabs + (_fresh_tab(graph, url),)
        new_state = BrowserState(
            tabs=tabs,
            active_tab=len(tabs) - 1,
            navigation_history=state.navigation_history + (url,),
        )
        return new_state, f"opened tab {len(tabs) - 1} at {url}"

    if kind == "switch_tab":
        index = params["index"]
        if not (0 <= index < len(state.tabs)):
            return state, f"no such tab {index}"
        return replace(state, active_tab=index), f"switched to tab {index} ({state.tabs[index].url})"

    if kind == "close_tab":
        index = params.get("index", state.active_tab)
        if not (0 <= index < len(state.tabs)):
            return state, f"no such tab {index}"
        if len(state.tabs) == 1:
            return state, "cannot close the last tab"
        tabs = state.tabs[:index] + state.tabs[index + 1 :]
        active = min(state.active_tab if state.active_tab < index else state.active_tab - 1,
                     len(tabs) - 1)
        return (
            BrowserState(tabs=tabs, active_tab=active, navigation_history=state.navigation_history),
            f"closed tab {index}",
        )

    if kind == "click_element":
        return _click(graph, state, params["index"])

    if kind == "input_text":
        elements = visible_elements(graph, state)
        ref = _element_at(elements, params["index"])
        if ref is None:
            return state, f"no such element {params['index']}"
        if ref.kind != "input":
            return state, f"element {ref.index} is not an input"
        tab = state.active
        inputs = tuple((k, v) for k, v in tab.inputs if k != ref.block_id)
        inputs += ((ref.block_id, params["text"]),)
        return state.with_active(replace(tab, inputs=inputs)), f"typed into {ref.label or ref.block_id!r}"

    if kind == "terminate":
        return state, "terminated"

    raise AssertionError(f"unhandled action {kind}")  # schemas keep this unreachable


def _element_at(elements: list[ElementRef], index: int) -> ElementRef | None:
    for element in elements:
        if element.index == index:
            return element
    return None


def _click(graph: SimSiteGraph, state: BrowserState, index: int) -> tuple[BrowserState, str]:
    elements = visible_elements(graph, state)
    ref = _element_at(elements, index)
    if ref is None:
        return state, f"no such element {index}"
    tab = state.active
    page = graph.pages[tab.url]
    block = next(b for b, _ in _walk_all(page.blocks) if b.block_id == ref.block_id)

    if block.kind == "link":
        return _navigate(graph, state, block.target or "")
    if block.kind == "collapsible":
        if block.block_id in tab.expanded:
            tab = replace(tab, expanded=tab.expanded - {block.block_id})
            verb = "collapsed"
        else:
            tab = replace(tab, expanded=tab.expanded | {block.block_id})
            verb = "expanded"
        return state.with_active(tab), f"{verb} section {block.text!r}"
    if block.kind == "button":
        if block.reveals:
            tab = replace(tab, revealed=tab.revealed | {block.reveals})
        return state.with_active(tab), f"clicked button {block.text!r}"
    if block.kind == "login_popup":
        tab = replace(tab, dismissed=tab.dismissed | {block.block_id})
        return state.with_active(tab), "dismissed login popup"
    return state, f"clicked {block.kind} {block.text!r}"


def extract_content(graph: SimSiteGraph, state: BrowserState) -> str:
    """Text blocks currently revealed on the page, across its full height."""
    tab = state.active
    page = graph.pages[tab.url]
    revealed = _revealed_blocks(page, tab)
    if revealed and all(b.kind == "login_popup" for b in revealed):
        return "content obstructed by login popup"
    paragraphs = [b.text for b in revealed if b.kind == "text" and b.text]
    body = "\n\n".join(paragraphs) if paragraphs else "(no text content)"
    return f"# {page.title}\n\n{body}"


def search_site(graph: SimSiteGraph, query: str, top_k: int = 5) -> list[SearchHit]:
    """Exact lookup first, then substring containment in either direction."""
    folded = query.casefold().strip()
    for key, hits in graph.search_index.items():
        if key.casefold() == folded:
            return list(hits[:top_k])
    for key in sorted(graph.search_index):
        kf = key.casefold()
        if kf in folded or folded in kf:
            return list(graph.search_index[key][:top_k])
    return []


def observe(graph: SimSiteGraph, state: BrowserState, history) -> BrowserObservation:
    """Build the agent's partial view: text context, viewport snapshot, screenshot.

    The screenshot reference is fresh per observation and never serialized
    into history; in simulation it is a deterministic digest of the state.
    """
    snapshot, elements = render_snapshot(graph, state)
    context_lines = [f"Task: {history.task}"]
    last = history.last_step()
    if last is not None:
        action, result = last
        context_lines.append(
            f"Previous action: {action.action_type}({json.dumps(action.parameters, sort_keys=True)})"
        )
        context_lines.append(f"Previous result: {result[:500]}")
    if history.findings:
        context_lines.append("Key findings so far:")
        context_lines.extend(f"- {line[:200]}" for line in history.findings[-5:])
    return BrowserObservation(
        textual_context="\n".join(context_lines),
        browser_snapshot=snapshot,
        screenshot_ref=_screenshot_ref(state),
        elements=elements,
    )
