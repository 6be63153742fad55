"""Basic tools: search, read & parse, code execution.

Each tool has a live provider and a fixture provider behind the same
callable shape, so offline runs never open a network connection. Handlers
return Observations; every failure is a non-ok status, never an exception
through dispatch.
"""

from __future__ import annotations

import csv
import html.parser
import io
import json
import time
from dataclasses import dataclass
from pathlib import Path
from typing import Sequence

from deepquest.sandbox import ExecLimits, ExecStatus, SandboxClient, load_manifest
from deepquest.trajectory import Observation, ObservationStatus

READ_PARSE_CAP = 30_000
DEFAULT_TOP_K = 5


def _ok(payload: str) -> Observation:
    return Observation(status=ObservationStatus.OK, payload=payload, produced_at=time.time())


def _tool_error(detail: str) -> Observation:
    return Observation(
        status=ObservationStatus.TOOL_ERROR, error_detail=detail, produced_at=time.time()
    )


# ---------------------------------------------------------------------------
# Search
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class SearchResult:
    url: str
    title: str
    snippet: str


def render_results(results: Sequence[SearchResult]) -> str:
    if not results:
        return "no results"
    return "\n".join(f"- {r.url} | {r.title} | {r.snippet}" for r in results)


class FixtureSearchProvider:
    """Exact/substring lookup in a seeded index file.

    Index format: JSON object mapping query strings to result lists of
    {url, title, snippet}.
    """

    def __init__(self, index: dict[str, list[dict]]):
        self._index = index

    @classmethod
    def from_path(cls, path: str | Path) -> "FixtureSearchProvider":
        with open(path, "r", encoding="utf-8") as stream:
            return cls(json.load(stream))

    def __call__(self, query: str, top_k: int) -> list[SearchResult]:
        folded = query.casefold().strip()
        rows: list[dict] | None = None
        for key, candidates in self._index.items():
            if key.casefold() == folded:
                rows = candidates
                break
        if rows is None:
            for key in sorted(self._index):
                kf = key.casefold()
                if kf in folded or folded in kf:
                    rows = self._index[key]
                    break
        if rows is None:
            return []
        return [
            SearchResult(url=r["url"], title=r.get("title", r["url"]), snippet=r.get("snippet", ""))
            for r in rows[:top_k]
        ]


class LiveSearchProvider:
    """Engine-agnostic client: POSTs {query, top_k}, expects {results: [...]}."""

    def __init__(self, endpoint: str, api_key: str = "", timeout: float = 30.0):
        self.endpoint = endpoint
        self.api_key = api_key
        self.timeout = timeout

    def __call__(self, query: str, top_k: int) -> list[SearchResult]:
        import requests

        headers = {"Content-Type": "application/json"}
        if self.api_key:
            headers["Authorization"] = f"Bearer {self.api_key}"
        response = requests.post(
            self.endpoint, json={"query": query, "top_k": top_k},
            headers=headers, timeout=self.timeout,
        )
        response.raise_for_status()
        return [
            SearchResult(url=r["url"], title=r.get("title", r["url"]), snippet=r.get("snippet", ""))
            for r in response.json().get("results", [])[:top_k]
        ]


def make_search_handler(provider) -> "callable":
    def handler(arguments: dict) -> Observation:
        query = arguments["query"]
        top_k = arguments.get("top_k", DEFAULT_TOP_K)
        try:
            results = provider(query, top_k)
        except Exception as exc:
            return _tool_error(f"search provider failed: {exc}")
        return _ok(render_results(results))

    return handler


# ---------------------------------------------------------------------------
# Read & parse
# ---------------------------------------------------------------------------


class _TextExtractor(html.parser.HTMLParser):
    _SKIP = {"script", "style"}
    _BREAKS = {"p", "div", "br", "li", "h1", "h2", "h3", "h4", "tr", "section", "article"}

    def __init__(self) -> None:
        super().__init__()
        self.parts: list[str] = []
        self._skipping = 0

    def handle_starttag(self, tag, attrs):
        if tag in self._SKIP:
            self._skipping += 1
        elif tag in self._BREAKS:
            self.parts.append("\n")

    def handle_endtag(self, tag):
        if tag in self._SKIP and self._skipping:
            self._skipping -= 1

    def handle_data(self, data):
        if not self._skipping and data.strip():
            self.parts.append(data)


def html_to_markdown(markup: str) -> str:
    extractor = _TextExtractor()
    extractor.feed(markup)
    text = "".join(extractor.parts)
    lines = [line.strip() for line in text.splitlines()]
    return "\n".join(line for line in lines if line)


def csv_to_markdown_table(text: str) -> str:
    rows = [row for row in csv.reader(io.StringIO(text)) if row]
    if not rows:
        return "(empty table)"
    width = max(len(row) for row in rows)
    rows = [row + [""] * (width - len(row)) for row in rows]
    lines = ["| " + " | ".join(rows[0]) + " |", "|" + "---|" * width]
    lines.extend("| " + " | ".join(row) + " |" for row in rows[1:])
    return "\n".join(lines)


def _clip(text: str) -> str:
    if len(text) > READ_PARSE_CAP:
        return text[:READ_PARSE_CAP] + "[truncated]"
    return text


class ReadParseError(RuntimeError):
    """A source could not be fetched or converted."""


@dataclass
class ReadParseProvider:
    """Routes a source to the right parser; output is markdown text.

    URLs resolve against the fixture page store when present, otherwise via
    a live fetch. Local files route by format: text verbatim, csv rendered as
    a markdown table, pdf through the fixture's paged store. Output is capped
    at READ_PARSE_CAP characters; anything bigger belongs to the browser
    agent or PDF paging.
    """

    page_store: dict[str, str] | None = None
    pdf_store: dict[str, str] | None = None
    allow_network: bool = False
    timeout: float = 30.0

    @classmethod
    def from_fixture(cls, path: str | Path) -> "ReadParseProvider":
        """Fixture file: {"pages": {url: markdown}, "pdfs": {url_or_path: markdown}}."""
        with open(path, "r", encoding="utf-8") as stream:
            data = json.load(stream)
        return cls(page_store=data.get("pages", {}), pdf_store=data.get("pdfs", {}))

    def read_text(self, source: str) -> str:
        if source.startswith(("http://", "https://")):
            return _clip(self._read_url(source))
        return _clip(self._read_file(source))

    def read(self, source: str) -> Observation:
        try:
            return _ok(self.read_text(source))
        except ReadParseError as exc:
            return _tool_error(str(exc))

    def _read_url(self, url: str) -> str:
        if self.page_store is not None and url in self.page_store:
            return self.page_store[url]
        if self.pdf_store is not None and url in self.pdf_store:
            return self.pdf_store[url]
        if not self.allow_network:
            raise ReadParseError(f"not found: {url} is not in the fixture store")
        import requests

        try:
            response = requests.get(url, timeout=self.timeout)
            response.raise_for_status()
        except Exception as exc:
            raise ReadParseError(f"fetch failed: {exc}") from exc
        return html_to_markdown(response.text)

    def _read_file(self, source: str) -> str:
        path = Path(source)
        suffix = path.suffix.lower()
        if suffix == ".pdf":
            if self.pdf_store is not None and source in self.pdf_store:
                return self.pdf_store[source]
            raise ReadParseError("unsupported format: pdf outside the fixture store")
        try:
            data = path.read_bytes()
        except OSError:
            raise ReadParseError(f"not found: {source}")
        if suffix in (".csv", ".tsv"):
            return csv_to_markdown_table(data.decode("utf-8", errors="replace"))
        if suffix in (".txt", ".md", ".markdown", ".json", ".log", ""):
            return data.decode("utf-8", errors="replace")
        if suffix in (".html", ".htm"):
            return html_to_markdown(data.decode("utf-8", errors="replace"))
        raise ReadParseError(f"unsupported format: {suffix or '(none)'}")


def make_read_parse_handler(provider: ReadParseProvider) -> "callable":
    def handler(arguments: dict) -> Observation:
        return provider.read(arguments["source"])

    return handler


# ---------------------------------------------------------------------------
# Code execution
# ---------------------------------------------------------------------------


def execute_code(
    sandbox: SandboxClient,
    script: str,
    files: Sequence[str] = (),
    limits: ExecLimits | None = None,
) -> Observation:
    """Run a script in the sandbox and fold the feedback into an Observation.

    A failing script surfaces as tool_error with the runtime's error text; an
    unreachable runner does too, with a distinct detail.
    """
    limits = limits or ExecLimits()
    try:
        manifest = load_manifest(files)
    except OSError as exc:
        return _tool_error(f"manifest file unreadable: {exc}")
    try:
        feedback = sandbox.run(script, manifest, limits)
    except Exception as exc:
        return _tool_error(f"sandbox unreachable: {exc}")
    if feedback.status is ExecStatus.ERROR:
        return Observation(
            status=ObservationStatus.TOOL_ERROR,
            payload=feedback.render(),
            error_detail=feedback.error,
            produced_at=time.time(),
        )
    return _ok(feedback.render())


def make_execute_code_handler(sandbox: SandboxClient, limits: ExecLimits | None = None) -> "callable":
    def handler(arguments: dict) -> Observation:
        return execute_code(
            sandbox,
            arguments["script"],
            arguments.get("files", []),
            limits,
        )

    return handler
