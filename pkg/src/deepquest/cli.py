"""Command-line entry points: run a query, or replay a recorded trace.

Exit codes: 0 finished, 2 budget exhausted, 3 aborted, 4 replay divergence,
1 startup/config errors.
"""

from __future__ import annotations

import argparse
import io
import mimetypes
import sys
import uuid
from pathlib import Path

from deepquest.agent import FinalReport, MainAgent
from deepquest.backend import (
    HttpBackend,
    ModelBackend,
    RecordingBackend,
    ScriptedBackend,
    replay_backend,
)
from deepquest.browser.agent import BrowserTask, run_subtask
from deepquest.browser.sim import SimSiteGraph
from deepquest.capabilities import (
    CapabilityDescriptor,
    CapabilityKind,
    CapabilityRegistry,
    CostHint,
    Parameter,
)
from deepquest.config import (
    ConfigError,
    RunConfig,
    config_from_snapshot,
    config_snapshot,
    load_config,
)
from deepquest.data_analysis import analysis_loop, profile
from deepquest.sandbox import ExecLimits, StubSandbox, SubprocessSandbox
from deepquest.supervisor import Thresholds
from deepquest.tools import (
    FixtureSearchProvider,
    LiveSearchProvider,
    ReadParseProvider,
    make_execute_code_handler,
    make_read_parse_handler,
    make_search_handler,
)
from deepquest.trace import TraceError, TraceWriter, first_divergence, read_trace
from deepquest.trajectory import FileRef, Observation, UserQuery

REPLAY_DIVERGENCE_EXIT = 4


def build_backend(config: RunConfig) -> ModelBackend:
    backend = config.backend
    if backend.mode == "scripted":
        if not backend.fixture_path:
            raise ConfigError("backend.mode=scripted requires backend.fixture_path")
        return ScriptedBackend.from_path(backend.fixture_path)
    if backend.mode == "http":
        if not backend.base_url or not backend.model:
            raise ConfigError("backend.mode=http requires backend.base_url and backend.model")
        return HttpBackend(
            base_url=backend.base_url,
            model=backend.model,
            api_key=backend.api_key(),
            max_retries=backend.max_retries,
            request_timeout=backend.request_timeout_seconds,
        )
    raise ConfigError(f"backend mode {backend.mode!r} cannot be built directly")


def build_registry(
    config: RunConfig, backend: ModelBackend, trace: TraceWriter | None = None
) -> CapabilityRegistry:
    """Wire the capability pool from config: basic tools plus enabled sub-agents."""
    registry = CapabilityRegistry()
    sampling = config.backend.sampling()

    if config.search.provider == "live":
        if not config.search.endpoint:
            raise ConfigError("tools.search.provider=live requires tools.search.endpoint")
        search_provider = LiveSearchProvider(config.search.endpoint)
    else:
        if config.search.fixture_path:
            search_provider = FixtureSearchProvider.from_path(config.search.fixture_path)
        else:
            search_provider = FixtureSearchProvider({})
    registry.register(
        CapabilityDescriptor(
            name="search",
            kind=CapabilityKind.BASIC_TOOL,
            description="Query a search engine; returns ranked urls with snippets.",
            parameters=(
                Parameter("query", "string", required=True, description="search terms"),
                Parameter("top_k", "integer", description="maximum results, default 5"),
            ),
        ),
        make_search_handler(search_provider),
    )

    if config.read_parse.fixture_path:
        read_provider = ReadParseProvider.from_fixture(config.read_parse.fixture_path)
    else:
        read_provider = ReadParseProvider(allow_network=config.read_parse.provider == "live")
    registry.register(
        CapabilityDescriptor(
            name="read_parse",
            kind=CapabilityKind.BASIC_TOOL,
            description="Fetch a url or local file and convert it to markdown text.",
            parameters=(
                Parameter("source", "string", required=True, description="url or file path"),
            ),
        ),
        make_read_parse_handler(read_provider),
    )

    if config.execute_code.provider == "subprocess":
        if not config.execute_code.runner_command:
            raise ConfigError(
                "tools.execute_code.provider=subprocess requires tools.execute_code.runner_command"
            )
        sandbox = SubprocessSandbox(config.execute_code.runner_command)
    else:
        sandbox = StubSandbox()
    limits = ExecLimits(
        cpu_seconds=config.execute_code.cpu_seconds,
        memory_bytes=config.execute_code.memory_bytes,
        wall_clock_seconds=config.execute_code.wall_clock_seconds,
    )
    registry.register(
        CapabilityDescriptor(
            name="execute_code",
            kind=CapabilityKind.BASIC_TOOL,
            description="Run a Python script in an isolated sandbox with optional input files.",
            parameters=(
                Parameter("script", "string", required=True, description="python source"),
                Parameter("files", "list", description="paths to mount into the sandbox"),
            ),
        ),
        make_execute_code_handler(sandbox, limits),
    )

    if config.browser.enabled:
        if not config.browser.site_fixture:
            raise ConfigError("subagents.browser.enabled requires subagents.browser.site_fixture")
        graph = SimSiteGraph.from_path(config.browser.site_fixture)
        max_steps = config.budget.max_subagent_steps
        start_url = config.browser.start_url

        def browser_handler(arguments: dict) -> Observation:
            task = BrowserTask(instruction=arguments["instruction"], max_steps=max_steps)
            return run_subtask(
                task, graph, backend, sampling=sampling, trace=trace, start_url=start_url
            )

        registry.register(
            CapabilityDescriptor(
                name="browser_agent",
                kind=CapabilityKind.SUB_AGENT,
                description="Delegate an interactive web sub-task (navigate, click, scroll, "
                "extract) to the browser agent.",
                parameters=(
                    Parameter("instruction", "string", required=True, description="the sub-task"),
                ),
                cost_hint=CostHint.LONG_HORIZON,
            ),
            browser_handler,
        )

    if config.data_analysis.enabled:
        max_steps = config.budget.max_subagent_steps
        analysis_sandbox = sandbox
        analysis_limits = limits

        def analysis_handler(arguments: dict) -> Observation:
            files = [str(f) for f in arguments.get("files", [])]
            data_profile = profile(files)
            manifest = {}
            for path in files:
                try:
                    manifest[Path(path).name] = Path(path).read_bytes()
                except OSError:
                    continue
            return analysis_loop(
                goal=arguments["goal"],
                data_profile=data_profile,
                backend=backend,
                sandbox=analysis_sandbox,
                manifest=manifest,
                max_steps=max_steps,
                limits=analysis_limits,
                sampling=sampling,
                trace=trace,
            )

        registry.register(
            CapabilityDescriptor(
                name="data_analysis",
                kind=CapabilityKind.SUB_AGENT,
                description="Delegate a data task: profiles the files, then iterates "
                "code generation and sandboxed execution.",
                parameters=(
                    Parameter("goal", "string", required=True, description="what to compute"),
                    Parameter("files", "list", description="input file paths"),
                ),
                cost_hint=CostHint.LONG_HORIZON,
            ),
            analysis_handler,
        )

    return registry


def build_agent(
    config: RunConfig,
    trace: TraceWriter,
    backend: ModelBackend | None = None,
    clock=None,
) -> MainAgent:
    inner = backend or build_backend(config)
    recording = RecordingBackend(inner, trace)
    registry = build_registry(config, recording, trace)
    kwargs = {}
    if clock is not None:
        kwargs["clock"] = clock
    return MainAgent(
        backend=recording,
        registry=registry,
        trace=trace,
        budget=config.budget,
        sampling=config.backend.sampling(),
        thresholds=Thresholds(
            repeated_action=config.supervisor.repeat_threshold,
            repeated_error=config.supervisor.error_threshold,
            stagnant_output=config.supervisor.stagnant_threshold,
            max_recovery_attempts=config.supervisor.max_recovery_attempts,
            window=config.supervisor.window,
        ),
        memory_enabled=config.memory.enabled,
        supervisor_enabled=config.supervisor.enabled,
        summary_budget=config.memory.summary_budget,
        config_snapshot=config_snapshot(config),
        **kwargs,
    )


def _query_from_args(text: str, files: list[str]) -> UserQuery:
    attachments = []
    for path in files:
        media_type = mimetypes.guess_type(path)[0] or "application/octet-stream"
        attachments.append(FileRef(path=path, media_type=media_type))
    return UserQuery(id=str(uuid.uuid4()), text=text, attachments=tuple(attachments))


def command_run(args: argparse.Namespace) -> int:
    try:
        config = load_config(args.config)
        if args.backend:
            from dataclasses import replace

            config = replace(config, backend=replace(config.backend, mode=args.backend))
        trace_path = args.trace or config.trace_path or "deepquest-trace.jsonl"
        trace = TraceWriter(trace_path)
        agent = build_agent(config, trace)
    except (ConfigError, ValueError, OSError) as exc:
        print(f"startup error: {exc}", file=sys.stderr)
        return 1
    query = _query_from_args(args.query, args.file or [])
    try:
        report = agent.run(query)
    finally:
        trace.close()
    _print_report(report)
    return report.exit_code


def _print_report(report: FinalReport) -> None:
    print(f"status: {report.status.value}")
    print(f"answer: {report.answer}")
    stats = report.stats
    print(
        f"rounds: {stats['rounds']}  tool_calls: {stats['tool_calls']}  "
        f"resets: {stats['resets']}  anomalies: {stats['anomalies']}"
    )
    print(f"trace: {report.trace_ref}")


def replay_trace(trace_path: str | Path) -> tuple[int, str]:
    """Re-drive a recorded run against its recorded replies.

    Returns (exit_code, diagnostic). The replay executes the full pipeline
    with a backend that serves the recorded replies, then compares the fresh
    trace against the recorded one modulo timestamps.
    """
    records = read_trace(trace_path)
    if not records or records[0].get("kind") != "run":
        return 1, "trace does not start with a run header"
    header = records[0]
    try:
        config = config_from_snapshot(header.get("config", {}))
    except ConfigError as exc:
        return 1, f"cannot rebuild config from trace: {exc}"

    query_data = header.get("query", {})
    query = UserQuery(
        id=query_data.get("id", "replay"),
        text=query_data.get("text", ""),
        attachments=tuple(
            FileRef(path=a["path"], media_type=a.get("media_type", "application/octet-stream"))
            for a in query_data.get("attachments", ())
        ),
    )

    buffer = io.StringIO()
    trace = TraceWriter(buffer)
    try:
        agent = build_agent(config, trace, backend=replay_backend(records))
        agent.run(query)
    except Exception as exc:
        return 1, f"replay execution failed: {exc}"

    divergence = first_divergence(records, trace.records)
    if divergence is not None:
        return REPLAY_DIVERGENCE_EXIT, divergence
    return 0, "replay matches the recorded trace"


def command_replay(args: argparse.Namespace) -> int:
    try:
        code, diagnostic = replay_trace(args.trace)
    except (TraceError, OSError) as exc:
        print(f"trace error: {exc}", file=sys.stderr)
        return 1
    stream = sys.stderr if code else sys.stdout
    print(diagnostic, file=stream)
    return code


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="deepquest")
    sub = parser.add_subparsers(dest="command", required=True)

    run_parser = sub.add_parser("run", help="answer one query end to end")
    run_parser.add_argument("--query", required=True, help="the research question")
    run_parser.add_argument("--file", action="append", help="attach a file (repeatable)")
    run_parser.add_argument("--config", required=True, help="path to the JSON config")
    run_parser.add_argument("--backend", choices=["scripted", "http"], help="override backend mode")
    run_parser.add_argument("--trace", help="trace output path")
    run_parser.set_defaults(func=command_run)

    replay_parser = sub.add_parser("replay", help="re-drive a recorded trace and verify it")
    replay_parser.add_argument("--trace", required=True, help="path to the recorded trace")
    replay_parser.set_defaults(func=command_replay)
    return parser


def main(argv: list[str] | None = None) -> int:
    args = build_parser().parse_args(argv)
    return args.func(args)


def entrypoint() -> None:
    sys.exit(main())


if __name__ == "__main__":
    entrypoint()
