"""Sandbox runner: one request in, one script executed, one feedback out.

The runner process reads a single length-prefixed JSON request from stdin,
materializes the file manifest into a scratch directory, executes the script
under cpu/memory/wall-clock limits, and writes a single length-prefixed JSON
feedback record to stdout. It never opens the network, and the executed
script gets a socket guard injected at interpreter startup.
"""

from sandbox_runner.protocol import read_frame, write_frame
from sandbox_runner.runner import run_script

__version__ = "0.1.0"

__all__ = ["read_frame", "run_script", "write_frame", "__version__"]
