"""Run configuration: one JSON file, validated strictly, defaults applied.

Unknown keys are rejected with their dotted path so a misspelled option
fails at startup instead of silently using a default. Secrets never live in
the file; credential options name environment variables instead.
"""

from __future__ import annotations

import json
import os
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any

from deepquest.backend import Sampling
from deepquest.trajectory import RunBudget


class ConfigError(ValueError):
    """A config file failed validation; the message names the offending key."""


@dataclass(frozen=True)
class BackendConfig:
    mode: str = "scripted"
    fixture_path: str | None = None
    base_url: str | None = None
    model: str | None = None
    credential_env: str | None = None
    temperature: float = 1.0
    top_p: float = 0.95
    max_retries: int = 2
    request_timeout_seconds: float = 120.0

    def sampling(self) -> Sampling:
        return Sampling(temperature=self.temperature, top_p=self.top_p)

    def api_key(self) -> str:
        if not self.credential_env:
            return ""
        return os.environ.get(self.credential_env, "")


@dataclass(frozen=True)
class MemoryConfig:
    enabled: bool = True
    summary_budget: int = 1_500


@dataclass(frozen=True)
class SupervisorConfig:
    enabled: bool = True
    repeat_threshold: int = 3
    error_threshold: int = 3
    stagnant_threshold: int = 2
    max_recovery_attempts: int = 3
    window: int = 8


@dataclass(frozen=True)
class ToolConfig:
    provider: str = "fixture"
    fixture_path: str | None = None
    endpoint: str | None = None
    credential_env: str | None = None


@dataclass(frozen=True)
class ExecuteCodeConfig:
    provider: str = "stub"
    runner_command: tuple[str, ...] = ()
    cpu_seconds: float = 10.0
    memory_bytes: int = 256 * 1024 * 1024
    wall_clock_seconds: float = 30.0


@dataclass(frozen=True)
class BrowserConfig:
    enabled: bool = False
    site_fixture: str | None = None
    start_url: str | None = None


@dataclass(frozen=True)
class DataAnalysisConfig:
    enabled: bool = False


@dataclass(frozen=True)
class RunConfig:
    backend: BackendConfig = field(default_factory=BackendConfig)
    budget: RunBudget = field(default_factory=RunBudget)
    memory: MemoryConfig = field(default_factory=MemoryConfig)
    supervisor: SupervisorConfig = field(default_factory=SupervisorConfig)
    search: ToolConfig = field(default_factory=ToolConfig)
    read_parse: ToolConfig = field(default_factory=ToolConfig)
    execute_code: ExecuteCodeConfig = field(default_factory=ExecuteCodeConfig)
    browser: BrowserConfig = field(default_factory=BrowserConfig)
    data_analysis: DataAnalysisConfig = field(default_factory=DataAnalysisConfig)
    trace_path: str | None = None


_SCHEMA: dict[str, Any] = {
    "backend": {
        "mode": str,
        "fixture_path": str,
        "base_url": str,
        "model": str,
        "credential_env": str,
        "temperature": float,
        "top_p": float,
        "max_retries": int,
        "request_timeout_seconds": float,
    },
    "budget": {
        "max_tool_calls": int,
        "max_wall_clock_seconds": float,
        "max_subagent_steps": int,
    },
    "memory": {"enabled": bool, "summary_budget": int},
    "supervisor": {
        "enabled": bool,
        "repeat_threshold": int,
        "error_threshold": int,
        "stagnant_threshold": int,
        "max_recovery_attempts": int,
        "window": int,
    },
    "tools": {
        "search": {"provider": str, "fixture_path": str, "endpoint": str, "credential_env": str},
        "read_parse": {"provider": str, "fixture_path": str, "endpoint": str, "credential_env": str},
        "execute_code": {
            "provider": str,
            "runner_command": list,
            "cpu_seconds": float,
            "memory_bytes": int,
            "wall_clock_seconds": float,
        },
    },
    "subagents": {
        "browser": {"enabled": bool, "site_fixture": str, "start_url": str},
        "data_analysis": {"enabled": bool},
    },
    "trace_path": str,
}


def _check_keys(data: dict, schema: dict, path: str, source: str) -> None:
    for key, value in data.items():
        here = f"{path}.{key}" if path else key
        if key not in schema:
            raise ConfigError(f"{source}: unknown config key {here!r}")
        expected = schema[key]
        if isinstance(expected, dict):
            if not isinstance(value, dict):
                raise ConfigError(f"{source}: {here!r} must be an object")
            _check_keys(value, expected, here, source)
        else:
            if expected is float and isinstance(value, int) and not isinstance(value, bool):
                continue
            if isinstance(value, bool) and expected is not bool:
                raise ConfigError(f"{source}: {here!r} must be a {expected.__name__}")
            if value is not None and not isinstance(value, expected):
                raise ConfigError(f"{source}: {here!r} must be a {expected.__name__}")


def _resolve(base: Path, value: str | None) -> str | None:
    if value is None:
        return None
    path = Path(value)
    return str(path if path.is_absolute() else (base / path).resolve())


def config_from_dict(data: dict[str, Any], base_dir: str | Path = ".", source: str = "<config>") -> RunConfig:
    """Validate a raw mapping and build a RunConfig with defaults filled in."""
    if not isinstance(data, dict):
        raise ConfigError(f"{source}: config root must be an object")
    _check_keys(data, _SCHEMA, "", source)
    base = Path(base_dir)

    backend_data = data.get("backend", {})
    backend = BackendConfig(
        mode=backend_data.get("mode", "scripted"),
        fixture_path=_resolve(base, backend_data.get("fixture_path")),
        base_url=backend_data.get("base_url"),
        model=backend_data.get("model"),
        credential_env=backend_data.get("credential_env"),
        temperature=float(backend_data.get("temperature", 1.0)),
        top_p=float(backend_data.get("top_p", 0.95)),
        max_retries=backend_data.get("max_retries", 2),
        request_timeout_seconds=float(backend_data.get("request_timeout_seconds", 120.0)),
    )
    if backend.mode not in ("scripted", "http", "replay"):
        raise ConfigError(f"{source}: backend.mode must be scripted, http, or replay")

    budget_data = data.get("budget", {})
    budget = RunBudget(
        max_tool_calls=budget_data.get("max_tool_calls", 75),
        max_wall_clock_seconds=float(budget_data.get("max_wall_clock_seconds", 90 * 60.0)),
        max_subagent_steps=budget_data.get("max_subagent_steps", 10),
    )

    memory_data = data.get("memory", {})
    memory = MemoryConfig(
        enabled=memory_data.get("enabled", True),
        summary_budget=memory_data.get("summary_budget", 1_500),
    )

    supervisor_data = data.get("supervisor", {})
    supervisor = SupervisorConfig(
        enabled=supervisor_data.get("enabled", True),
        repeat_threshold=supervisor_data.get("repeat_threshold", 3),
        error_threshold=supervisor_data.get("error_threshold", 3),
        stagnant_threshold=supervisor_data.get("stagnant_threshold", 2),
        max_recovery_attempts=supervisor_data.get("max_recovery_attempts", 3),
        window=supervisor_data.get("window", 8),
    )

    tools_data = data.get("tools", {})
    search_data = tools_data.get("search", {})
    search = ToolConfig(
        provider=search_data.get("provider", "fixture"),
        fixture_path=_resolve(base, search_data.get("fixture_path")),
        endpoint=search_data.get("endpoint"),
        credential_env=search_data.get("credential_env"),
    )
    read_data = tools_data.get("read_parse", {})
    read_parse = ToolConfig(
        provider=read_data.get("provider", "fixture"),
        fixture_path=_resolve(base, read_data.get("fixture_path")),
        endpoint=read_data.get("endpoint"),
        credential_env=read_data.get("credential_env"),
    )
    exec_data = tools_data.get("execute_code", {})
    execute_code = ExecuteCodeConfig(
        provider=exec_data.get("provider", "stub"),
        runner_command=tuple(exec_data.get("runner_command", ())),
        cpu_seconds=float(exec_data.get("cpu_seconds", 10.0)),
        memory_bytes=exec_data.get("memory_bytes", 256 * 1024 * 1024),
        wall_clock_seconds=float(exec_data.get("wall_clock_seconds", 30.0)),
    )

    subagents_data = data.get("subagents", {})
    browser_data = subagents_data.get("browser", {})
    browser = BrowserConfig(
        enabled=browser_data.get("enabled", False),
        site_fixture=_resolve(base, browser_data.get("site_fixture")),
        start_url=browser_data.get("start_url"),
    )
    analysis_data = subagents_data.get("data_analysis", {})
    data_analysis = DataAnalysisConfig(enabled=analysis_data.get("enabled", False))

    return RunConfig(
        backend=backend,
        budget=budget,
        memory=memory,
        supervisor=supervisor,
        search=search,
        read_parse=read_parse,
        execute_code=execute_code,
        browser=browser,
        data_analysis=data_analysis,
        trace_path=_resolve(base, data.get("trace_path")),
    )


def load_config(path: str | Path) -> RunConfig:
    path = Path(path)
    try:
        raw = path.read_text(encoding="utf-8")
    except OSError as exc:
        raise ConfigError(f"cannot read config {path}: {exc}") from exc
    try:
        data = json.loads(raw)
    except json.JSONDecodeError as exc:
        raise ConfigError(f"{path}:{exc.lineno}: invalid JSON: {exc.msg}") from exc
    return config_from_dict(data, base_dir=path.parent, source=str(path))


def config_snapshot(config: RunConfig) -> dict[str, Any]:
    """Serializable snapshot embedded in the trace header; replay rebuilds from it."""
    return {
        "backend": {
            "mode": config.backend.mode,
            "fixture_path": config.backend.fixture_path,
            "temperature": config.backend.temperature,
            "top_p": config.backend.top_p,
        },
        "budget": {
            "max_tool_calls": config.budget.max_tool_calls,
            "max_wall_clock_seconds": config.budget.max_wall_clock_seconds,
            "max_subagent_steps": config.budget.max_subagent_steps,
        },
        "memory": {"enabled": config.memory.enabled, "summary_budget": config.memory.summary_budget},
        "supervisor": {
            "enabled": config.supervisor.enabled,
            "repeat_threshold": config.supervisor.repeat_threshold,
            "error_threshold": config.supervisor.error_threshold,
            "stagnant_threshold": config.supervisor.stagnant_threshold,
            "max_recovery_attempts": config.supervisor.max_recovery_attempts,
            "window": config.supervisor.window,
        },
        "tools": {
            "search": {"provider": config.search.provider, "fixture_path": config.search.fixture_path},
            "read_parse": {
                "provider": config.read_parse.provider,
                "fixture_path": config.read_parse.fixture_path,
            },
            "execute_code": {
                "provider": config.execute_code.provider,
                "runner_command": list(config.execute_code.runner_command),
                "cpu_seconds": config.execute_code.cpu_seconds,
                "memory_bytes": config.execute_code.memory_bytes,
                "wall_clock_seconds": config.execute_code.wall_clock_seconds,
            },
        },
        "subagents": {
            "browser": {
                "enabled": config.browser.enabled,
                "site_fixture": config.browser.site_fixture,
                "start_url": config.browser.start_url,
            },
            "data_analysis": {"enabled": config.data_analysis.enabled},
        },
    }


def config_from_snapshot(snapshot: dict[str, Any]) -> RunConfig:
    """Rebuild a config from a trace header snapshot (absolute paths kept)."""
    data = {k: v for k, v in snapshot.items()}
    cleaned: dict[str, Any] = {}
    for section, content in data.items():
        if isinstance(content, dict):
            cleaned[section] = {
                k: v for k, v in _drop_nones(content).items()
            }
        elif content is not None:
            cleaned[section] = content
    return config_from_dict(cleaned, base_dir="/", source="<snapshot>")


def _drop_nones(data: dict[str, Any]) -> dict[str, Any]:
    result: dict[str, Any] = {}
    for key, value in data.items():
        if isinstance(value, dict):
            result[key] = _drop_nones(value)
        elif value is not None:
            result[key] = value
    return result
