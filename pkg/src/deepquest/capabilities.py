"""The atomic capability pool: one registry for basic tools and sub-agents.

The planner chooses capabilities by name from the rendered listing; the pool
only validates arguments and executes. Every failure mode maps to a non-ok
Observation, so dispatch never raises into the main loop. The registry is
frozen once a run starts and is safe for concurrent reads.
"""

from __future__ import annotations

import time
from concurrent.futures import Future, ThreadPoolExecutor
from concurrent.futures import TimeoutError as FutureTimeout
from dataclasses import dataclass
from enum import Enum
from typing import Callable

from deepquest.trajectory import Observation, ObservationStatus, RunBudget, ToolInvocation

BASIC_TOOL_TIMEOUT_SECONDS = 120.0
SUB_AGENT_TIMEOUT_SECONDS = 20 * 60.0

_PARAMETER_TYPES = {
    "string": str,
    "integer": int,
    "number": (int, float),
    "boolean": bool,
    "list": list,
    "object": dict,
}


class CapabilityKind(str, Enum):
    BASIC_TOOL = "basic_tool"
    SUB_AGENT = "sub_agent"


class CostHint(str, Enum):
    LOW_LATENCY = "low_latency"
    LONG_HORIZON = "long_horizon"


@dataclass(frozen=True)
class Parameter:
    name: str
    type: str = "string"
    required: bool = False
    description: str = ""

    def __post_init__(self) -> None:
        if self.type not in _PARAMETER_TYPES:
            raise ValueError(f"unknown parameter type {self.type!r}")


@dataclass(frozen=True)
class CapabilityDescriptor:
    name: str
    kind: CapabilityKind
    description: str
    parameters: tuple[Parameter, ...] = ()
    cost_hint: CostHint = CostHint.LOW_LATENCY

    def __post_init__(self) -> None:
        names = [p.name for p in self.parameters]
        if len(names) != len(set(names)):
            raise ValueError(f"duplicate parameter names in capability {self.name!r}")

    def schema(self) -> dict:
        """Function-calling schema for backends that support tools natively."""
        properties = {
            p.name: {"type": p.type, "description": p.description} for p in self.parameters
        }
        return {
            "name": self.name,
            "description": self.description,
            "parameters": {
                "type": "object",
                "properties": properties,
                "required": [p.name for p in self.parameters if p.required],
            },
        }


@dataclass(frozen=True)
class DispatchResult:
    observation: Observation
    tool_calls_consumed: int = 1
    elapsed: float = 0.0

    def __post_init__(self) -> None:
        if self.tool_calls_consumed < 1:
            raise ValueError("a dispatch consumes at least one tool call")


Handler = Callable[[dict], Observation]


class RegistrationError(ValueError):
    pass


@dataclass
class _Registered:
    descriptor: CapabilityDescriptor
    handler: Handler
    timeout_seconds: float


class CapabilityRegistry:
    """Holds descriptors and handlers; dispatches invocations with validation."""

    def __init__(self) -> None:
        self._entries: dict[str, _Registered] = {}
        self._executor: ThreadPoolExecutor | None = None

    def register(
        self,
        descriptor: CapabilityDescriptor,
        handler: Handler,
        timeout_seconds: float | None = None,
    ) -> None:
        if descriptor.name in self._entries:
            raise RegistrationError(f"capability {descriptor.name!r} already registered")
        if timeout_seconds is None:
            timeout_seconds = (
                SUB_AGENT_TIMEOUT_SECONDS
                if descriptor.kind is CapabilityKind.SUB_AGENT
                else BASIC_TOOL_TIMEOUT_SECONDS
            )
        self._entries[descriptor.name] = _Registered(descriptor, handler, timeout_seconds)

    def names(self) -> list[str]:
        return sorted(self._entries)

    def get(self, name: str) -> CapabilityDescriptor | None:
        entry = self._entries.get(name)
        return entry.descriptor if entry else None

    def schemas(self) -> tuple[dict, ...]:
        return tuple(self._entries[name].descriptor.schema() for name in self.names())

    def _validate(self, descriptor: CapabilityDescriptor, arguments: dict) -> str | None:
        by_name = {p.name: p for p in descriptor.parameters}
        for key in arguments:
            if key not in by_name:
                return f"unexpected parameter {key!r}"
        for parameter in descriptor.parameters:
            if parameter.name not in arguments:
                if parameter.required:
                    return f"missing required parameter {parameter.name!r}"
                continue
            expected = _PARAMETER_TYPES[parameter.type]
            value = arguments[parameter.name]
            if parameter.type in ("integer", "number") and isinstance(value, bool):
                return f"parameter {parameter.name!r} must be a {parameter.type}"
            if not isinstance(value, expected):
                return f"parameter {parameter.name!r} must be a {parameter.type}"
            if parameter.required and parameter.type == "string" and not value:
                return f"required parameter {parameter.name!r} must be non-empty"
        return None

    def dispatch(self, invocation: ToolInvocation, budget: RunBudget | None = None) -> DispatchResult:
        """Run one invocation; every failure becomes a non-ok Observation."""
        started = time.monotonic()

        def finish(observation: Observation) -> DispatchResult:
            return DispatchResult(observation=observation, elapsed=time.monotonic() - started)

        entry = self._entries.get(invocation.capability_name)
        if entry is None:
            return finish(
                Observation(
                    status=ObservationStatus.TOOL_ERROR,
                    error_detail=f"unknown capability {invocation.capability_name!r}",
                    produced_at=time.time(),
                )
            )

        problem = self._validate(entry.descriptor, invocation.arguments)
        if problem is not None:
            return finish(
                Observation(
                    status=ObservationStatus.PARSE_ERROR,
                    error_detail=problem,
                    produced_at=time.time(),
                )
            )

        timeout = entry.timeout_seconds
        if budget is not None:
            timeout = min(timeout, budget.max_wall_clock_seconds)

        if self._executor is None:
            self._executor = ThreadPoolExecutor(max_workers=4, thread_name_prefix="dispatch")
        future: Future = self._executor.submit(entry.handler, dict(invocation.arguments))
        try:
            observation = future.result(timeout=timeout)
        except FutureTimeout:
            return finish(
                Observation(
                    status=ObservationStatus.TIMEOUT,
                    error_detail=f"{invocation.capability_name} exceeded {timeout:g}s",
                    produced_at=time.time(),
                )
            )
        except Exception as exc:
            return finish(
                Observation(
                    status=ObservationStatus.TOOL_ERROR,
                    error_detail=f"{type(exc).__name__}: {exc}",
                    produced_at=time.time(),
                )
            )
        if not isinstance(observation, Observation):
            observation = Observation(
                status=ObservationStatus.OK, payload=str(observation), produced_at=time.time()
            )
        return finish(observation)


def render_capability_prompt(registry: CapabilityRegistry) -> str:
    """Deterministic listing of all capabilities, alphabetical by name."""
    names = registry.names()
    if not names:
        return "No capabilities are registered."
    lines = ["Available capabilities:"]
    for name in names:
        descriptor = registry.get(name)
        assert descriptor is not None
        lines.append(
            f"- {name} ({descriptor.kind.value}, {descriptor.cost_hint.value}): "
            f"{descriptor.description}"
        )
        for parameter in descriptor.parameters:
            flag = "required" if parameter.required else "optional"
            suffix = f" - {parameter.description}" if parameter.description else ""
            lines.append(f"    {parameter.name} ({parameter.type}, {flag}){suffix}")
    return "\n".join(lines)
