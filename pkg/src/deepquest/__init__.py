"""deepquest: a hierarchical deep-research agent runtime.

A main agent runs a reasoning-and-acting loop over a pool of basic tools
and specialized sub-agents. Completed sub-goals are folded into compact
memory units so the model context grows with the number of sub-goals, not
the number of rounds. A supervisor watches the trajectory for anomalies
(malformed calls, repetition, stagnation) and repairs it by pruning the
polluted rounds and regenerating a plan. Every run is traced to JSONL and
can be replayed offline against the recorded model replies.
"""

from deepquest.trajectory import (
    AgentResponse,
    FileRef,
    MemoryList,
    MemoryUnit,
    Observation,
    ObservationStatus,
    Round,
    RunBudget,
    ToolInvocation,
    ToolLogEntry,
    UserQuery,
)

__version__ = "0.1.0"

__all__ = [
    "AgentResponse",
    "FileRef",
    "MemoryList",
    "MemoryUnit",
    "Observation",
    "ObservationStatus",
    "Round",
    "RunBudget",
    "ToolInvocation",
    "ToolLogEntry",
    "UserQuery",
    "__version__",
]
