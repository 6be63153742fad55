"""Wire protocol: 4-byte big-endian length prefix, then a UTF-8 JSON payload.

Request:
    {"script": str,
     "manifest": [{"name": str, "content_b64": str}, ...],
     "limits": {"cpu_seconds": number, "memory_bytes": int,
                "wall_clock_seconds": number}}

Response:
    {"status": "ok" | "error",
     "stdout": str, "stderr": str,
     "error": str | null,
     "error_class": "runtime" | "resource limit" | "protocol" | null,
     "artifacts": [{"name": str, "content_b64": str?}, ...]}
"""

from __future__ import annotations

import json
import struct
from typing import IO

MAX_FRAME_BYTES = 64 * 1024 * 1024


class FrameError(ValueError):
    pass


def write_frame(stream: IO[bytes], payload: dict) -> None:
    data = json.dumps(payload, sort_keys=True).encode("utf-8")
    if len(data) > MAX_FRAME_BYTES:
        raise FrameError(f"frame of {len(data)} bytes exceeds the {MAX_FRAME_BYTES} cap")
    stream.write(struct.pack(">I", len(data)) + data)
    stream.flush()


def read_frame(stream: IO[bytes]) -> dict | None:
    """Read one frame; None on clean EOF, FrameError on a malformed frame."""
    header = stream.read(4)
    if not header:
        return None
    if len(header) < 4:
        raise FrameError("truncated length prefix")
    (length,) = struct.unpack(">I", header)
    if length > MAX_FRAME_BYTES:
        raise FrameError(f"declared frame of {length} bytes exceeds the cap")
    data = stream.read(length)
    if len(data) < length:
        raise FrameError("truncated frame body")
    try:
        payload = json.loads(data.decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise FrameError(f"frame is not valid JSON: {exc}") from exc
    if not isinstance(payload, dict):
        raise FrameError("frame payload must be a JSON object")
    return payload
