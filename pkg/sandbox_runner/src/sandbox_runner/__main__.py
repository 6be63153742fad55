"""Process entry: one request frame in, one feedback frame out, then exit.

The wrapper guarantees protocol totality: whatever happens inside, exactly
one well-formed feedback record is written.
"""

from __future__ import annotations

import sys

from sandbox_runner.protocol import FrameError, read_frame, write_frame
from sandbox_runner.runner import _error, run_script


def main() -> int:
    try:
        request = read_frame(sys.stdin.buffer)
    except FrameError as exc:
        write_frame(sys.stdout.buffer, _error(f"malformed request: {exc}", "protocol"))
        return 0
    if request is None:
        write_frame(sys.stdout.buffer, _error("empty request stream", "protocol"))
        return 0
    try:
        response = run_script(request)
    except Exception as exc:  # totality: even runner bugs yield a record
        response = _error(f"runner crashed: {type(exc).__name__}: {exc}", "protocol")
    write_frame(sys.stdout.buffer, response)
    return 0


if __name__ == "__main__":
    sys.exit(main())
