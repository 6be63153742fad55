"""Text-embedded tool-call grammar.

Structured tool-call channels are preferred everywhere; this fallback grammar
accepts calls embedded in plain model text, either as fenced code blocks or
as bare JSON objects carrying a "tool"/"name" key with "arguments"/"args".
A final answer is a line starting with "FINAL ANSWER:".
"""

from __future__ import annotations

import json
import re
from dataclasses import dataclass

_FENCE = re.compile(r"```(?:tool_call|tool|json)?\s*\n(.*?)```", re.DOTALL)
_FINAL = re.compile(r"^\s*FINAL ANSWER:\s*(.*)$", re.IGNORECASE | re.MULTILINE | re.DOTALL)


@dataclass(frozen=True)
class ParsedCall:
    name: str
    arguments: dict
    raw: str


def _balanced_objects(text: str) -> list[str]:
    """All top-level {...} spans, found by brace matching outside strings."""
    spans: list[str] = []
    depth = 0
    start = -1
    in_string = False
    escape = False
    for pos, char in enumerate(text):
        if in_string:
            if escape:
                escape = False
            elif char == "\\":
                escape = True
            elif char == '"':
                in_string = False
            continue
        if char == '"':
            in_string = True
        elif char == "{":
            if depth == 0:
                start = pos
            depth += 1
        elif char == "}":
            if depth > 0:
                depth -= 1
                if depth == 0:
                    spans.append(text[start : pos + 1])
    return spans


def _call_from_blob(blob: str) -> ParsedCall | None:
    try:
        data = json.loads(blob)
    except json.JSONDecodeError:
        return None
    if not isinstance(data, dict):
        return None
    name = data.get("tool") or data.get("name")
    if not isinstance(name, str) or not name:
        return None
    arguments = data.get("arguments", data.get("args", {}))
    if not isinstance(arguments, dict):
        return None
    return ParsedCall(name=name, arguments=arguments, raw=blob)


def parse_tool_calls(text: str) -> list[ParsedCall]:
    """Every tool call embedded in the text, in order of appearance."""
    calls: list[ParsedCall] = []
    seen_spans: list[str] = []
    for match in _FENCE.finditer(text):
        body = match.group(1).strip()
        for blob in _balanced_objects(body) or [body]:
            call = _call_from_blob(blob)
            if call:
                calls.append(call)
                seen_spans.append(blob)
    for blob in _balanced_objects(text):
        if any(blob in span or span in blob for span in seen_spans):
            continue
        call = _call_from_blob(blob)
        if call:
            calls.append(call)
    return calls


def find_final_answer(text: str) -> str | None:
    match = _FINAL.search(text)
    if match is None:
        return None
    return match.group(1).strip()
