"""Reachable seed generation.

A preliminary seed plus its fixed command line come first; the seed is then
optimized step by step along the entry-to-target call chain, or via direct
callers of the target when no complete chain exists, until its execution
trace contains the target function or the time budget runs out.
"""

from __future__ import annotations

import base64
import binascii
import logging
import random
import shlex
import subprocess
import sys
import time
from dataclasses import dataclass, field, replace
from pathlib import Path

from . import callgraph
from .callgraph import CallChain, CallGraph
from .errors import MaterializeError, TaskError
from .llm_client import TEMPERATURE_GENERATION
from .query_engine import Engine

log = logging.getLogger(__name__)

DEFAULT_OPT_BUDGET = 3600.0
MAX_CANDIDATES_PER_STEP = 4
MAX_KEPT_SEEDS = 8
SCRIPT_CPU_LIMIT = 10  # seconds
SCRIPT_WALL_LIMIT = 30.0
INPUT_DUMP_LIMIT = 4096


@dataclass(frozen=True)
class CommandLine:
    """Fixed program invocation with exactly one ``@@`` input placeholder.

    The command is chosen once per campaign; only the seed mutates afterward.
    """

    program: str
    args: tuple[str, ...]
    description: str = ""

    def __post_init__(self):
        if not self.program:
            raise ValueError("program must be non-empty")
        placeholders = sum(arg.count("@@") for arg in self.args)
        if placeholders != 1:
            raise ValueError("args must contain the @@ placeholder exactly once")

    def render(self) -> str:
        return " ".join((self.program,) + self.args)


@dataclass(frozen=True)
class Seed:
    data: bytes
    command: CommandLine
    provenance: tuple[dict, ...] = ()

    def derived(self, data: bytes, step: dict) -> "Seed":
        return replace(self, data=data, provenance=self.provenance + (step,))


@dataclass(frozen=True)
class GeneratorSpec:
    """Either literal input bytes or a script that writes them to stdout."""

    kind: str  # literal | script
    payload: str
    runtime_label: str = "python3"
    encoding: str = "utf-8"

    def __post_init__(self):
        if self.kind not in ("literal", "script"):
            raise ValueError(f"unknown generator kind {self.kind!r}")
        if self.kind == "script" and not self.payload.strip():
            raise ValueError("script payload must be non-empty")


@dataclass
class OptimizationOutcome:
    status: str  # reached | partial | isolated-target | timeout
    best_seed: Seed
    candidates: list[Seed] = field(default_factory=list)


def hexdump(data: bytes, limit: int = INPUT_DUMP_LIMIT) -> str:
    """Hex plus printable dump of the input, truncated at ``limit`` bytes."""
    rows = []
    shown = data[:limit]
    for off in range(0, len(shown), 16):
        row = shown[off:off + 16]
        hexpart = " ".join(f"{b:02x}" for b in row)
        text = "".join(chr(b) if 32 <= b < 127 else "." for b in row)
        rows.append(f"{off:08x}  {hexpart:<47}  |{text}|")
    if len(data) > limit:
        rows.append(f"... {len(data) - limit} more bytes")
    if not rows:
        rows.append("(empty input)")
    return "\n".join(rows)


# --- command selection and preliminary generation ---------------------------

def _flag_base(token: str) -> str:
    return token.split("=", 1)[0]


def parse_command_line(text: str) -> CommandLine:
    tokens = shlex.split(text.strip())
    if len(tokens) < 2:
        raise ValueError(f"command line needs a program and arguments: {text!r}")
    return CommandLine(program=tokens[0], args=tuple(tokens[1:]))


def select_command(bug_info, usage, target_summary, engine: Engine,
                   stage: str = "opt", max_retries: int = 3) -> CommandLine:
    """Pick the command line most likely to activate the target function.

    Answers naming option flags absent from the program usage are rejected
    and re-queried with the known flags listed, up to ``max_retries`` times.
    """
    known_flags = {_flag_base(flag) for flag in usage.flags()}
    fillers = {
        "program_usage": usage.render(),
        "target_function_summary": target_summary.render(),
    }
    note = ""
    last_error = ""
    for _ in range(1 + max_retries):
        answer = engine.run("command_selection", fillers, stage=stage,
                            extra_suggestion=note)
        text = answer.text("command")
        try:
            command = parse_command_line(text)
        except ValueError as exc:
            last_error = str(exc)
            note = f"The previous command was unusable: {exc}. Give program, options, and one @@."
            continue
        unknown = [t for t in command.args
                   if t.startswith("-") and _flag_base(t) not in known_flags]
        if unknown:
            last_error = f"unknown options {unknown}"
            note = ("These options are not in the program usage: "
                    + " ".join(unknown) + ". Use only listed options.")
            continue
        return replace(command, description=answer.text("description"))
    raise TaskError(f"command selection kept producing invalid commands: {last_error}")


def _spec_from_answer(answer, payload_field: str) -> GeneratorSpec:
    kind = answer.text("kind").strip().lower()
    encoding = (answer.values.get("encoding", "") or "utf-8").strip().lower() or "utf-8"
    runtime = (answer.values.get("runtime", "") or "python3").strip() or "python3"
    return GeneratorSpec(kind=kind, payload=answer.text(payload_field),
                         runtime_label=runtime, encoding=encoding)


def generate_preliminary(command: CommandLine, bug_info, engine: Engine,
                         input_expectations: str = "", stage: str = "opt") -> GeneratorSpec:
    """Ask for the first input: literal bytes for simple formats, a generator
    script for complex ones."""
    answer = engine.run(
        "preliminary_seed",
        {"command": command.render(),
         "bug_summary": bug_info.query_text(),
         "input_expectations": input_expectations or command.description or "(none)"},
        stage=stage, temperature=TEMPERATURE_GENERATION,
    )
    return _spec_from_answer(answer, "payload")


# --- materialization ----------------------------------------------------------

def _decode_literal(spec: GeneratorSpec) -> bytes:
    payload = spec.payload
    try:
        if spec.encoding == "utf-8":
            return payload.encode("utf-8")
        if spec.encoding == "hex":
            return bytes.fromhex("".join(payload.split()))
        if spec.encoding == "base64":
            return base64.b64decode("".join(payload.split()), validate=True)
    except (ValueError, binascii.Error) as exc:
        raise MaterializeError(f"payload does not decode as {spec.encoding}: {exc}") from None
    raise MaterializeError(f"unknown literal encoding {spec.encoding!r}")


def _runtime_argv(runtime_label: str) -> list[str]:
    if runtime_label in ("python", "python3"):
        return [sys.executable]
    return [runtime_label]


def _run_script(payload: str, runtime_label: str, sandbox: Path) -> tuple[bytes, str]:
    """Run a generator script in the sandbox dir; returns (stdout, stderr)."""
    sandbox.mkdir(parents=True, exist_ok=True)
    script = sandbox / "generator.py"
    script.write_text(payload, encoding="utf-8")

    def limit_cpu():
        import resource

        resource.setrlimit(resource.RLIMIT_CPU, (SCRIPT_CPU_LIMIT, SCRIPT_CPU_LIMIT))

    try:
        proc = subprocess.run(
            _runtime_argv(runtime_label) + [str(script)],
            cwd=sandbox,
            stdout=subprocess.PIPE,
            stderr=subprocess.PIPE,
            timeout=SCRIPT_WALL_LIMIT,
            preexec_fn=limit_cpu,
        )
    except subprocess.TimeoutExpired:
        return b"", "generator script exceeded its time limit"
    except OSError as exc:
        return b"", f"cannot launch runtime {runtime_label!r}: {exc}"
    stderr = proc.stderr.decode("utf-8", errors="replace")
    if proc.returncode != 0:
        return b"", stderr or f"generator script exited {proc.returncode}"
    return proc.stdout, stderr


def materialize(spec: GeneratorSpec, sandbox: str | Path, engine: Engine | None = None,
                max_repairs: int = 3, stage: str = "opt",
                input_expectations: str = "") -> bytes:
    """Turn a generator spec into input bytes.

    Script errors are fed back through the query engine for repair, bounded
    at ``max_repairs`` rounds; without an engine the first failure is final.
    """
    if spec.kind == "literal":
        data = _decode_literal(spec)
        if not data:
            raise MaterializeError("literal payload decoded to zero bytes")
        return data
    sandbox = Path(sandbox)
    payload = spec.payload
    for attempt in range(1 + max_repairs):
        output, stderr = _run_script(payload, spec.runtime_label, sandbox)
        if output:
            return output
        error = stderr or "generator script produced no output"
        if engine is None or attempt == max_repairs:
            break
        try:
            answer = engine.run(
                "generator_repair",
                {"script": payload, "error_output": error,
                 "runtime": spec.runtime_label,
                 "input_expectations": input_expectations or "(none)"},
                stage=stage, temperature=TEMPERATURE_GENERATION,
            )
        except TaskError:
            break
        payload = answer.text("payload")
    raise MaterializeError(f"generator script never produced output: {error}")


# --- optimization loops ---------------------------------------------------------

def _trace_level(graph: CallGraph, dist_to_target: dict[int, int], trace) -> int | None:
    levels = [dist_to_target[fn] for fn in trace.reached if fn in dist_to_target]
    return min(levels) if levels else None


class _AttemptLog:
    """Executed candidates with their distance level, for subset selection."""

    def __init__(self, graph: CallGraph, target: int):
        self.dist = callgraph.distances_to(graph, target)
        self.graph = graph
        self.attempts: list[tuple[int, Seed]] = []

    def record(self, seed: Seed, trace) -> int | None:
        level = _trace_level(self.graph, self.dist, trace)
        if level is not None:
            self.attempts.append((level, seed))
        return level

    def subset(self, cap: int = MAX_KEPT_SEEDS) -> list[Seed]:
        best: dict[int, Seed] = {}
        for level, seed in self.attempts:
            kept = best.get(level)
            if kept is None or len(seed.data) < len(kept.data):
                best[level] = seed
        kept_seeds = []
        for level in sorted(best)[:cap]:
            seed = best[level]
            kept_seeds.append(seed.derived(seed.data, {"task": "keep", "level": level,
                                                       "accepted": True}))
        return kept_seeds


def _candidates_from_answer(answer, limit: int = MAX_CANDIDATES_PER_STEP) -> list[GeneratorSpec]:
    specs = []
    for i in range(1, limit + 1):
        payload = answer.values.get(f"candidate_{i}")
        if not payload or not str(payload).strip():
            continue
        specs.append(_spec_from_answer(answer, f"candidate_{i}"))
    return specs


def optimize_along_chain(seed: Seed, chain: CallChain, graph: CallGraph, runner,
                         engine: Engine, budget: float,
                         definition_source, sandbox: str | Path,
                         stage: str = "opt") -> OptimizationOutcome:
    """Iteratively adjust the seed until its trace reaches the chain target.

    Each round executes the current seed, finds the deviation function and
    the next goal on the chain, asks for candidate modifications (several
    when branch constraints are ambiguous), and adopts the first candidate
    whose trace reaches the goal. Stops at the target or the budget.
    """
    if budget <= 0:
        raise ValueError("budget must be positive")
    deadline = time.monotonic() + budget
    target = chain.target
    attempts = _AttemptLog(graph, target)
    current = seed
    result = runner(current.data)
    attempts.record(current, result.trace)
    trace = result.trace

    while True:
        if trace.contains(target):
            return OptimizationOutcome("reached", current, [current])
        if time.monotonic() >= deadline:
            return OptimizationOutcome("timeout", current, attempts.subset())
        step = callgraph.deviation(graph, chain, trace)
        if step is None:  # deviation found the target in the trace
            return OptimizationOutcome("reached", current, [current])
        dev, goal = step
        goal_name = graph.name_of(goal)
        executed_names = " -> ".join(graph.name_of(f) for f in trace.reached)
        answer = engine.run(
            "chain_step",
            {
                "deviation_function": definition_source(graph.name_of(dev)),
                "next_goal": goal_name,
                "executed_path": executed_names,
                "current_input": hexdump(current.data),
            },
            stage=stage, temperature=TEMPERATURE_GENERATION,
        )
        advanced = False
        for spec in _candidates_from_answer(answer):
            if time.monotonic() >= deadline:
                return OptimizationOutcome("timeout", current, attempts.subset())
            step_record = {"task": "chain_step", "goal": goal_name}
            try:
                data = materialize(spec, sandbox, engine, stage=stage)
            except MaterializeError as exc:
                log.warning("candidate failed to materialize: %s", exc)
                continue
            candidate = current.derived(data, step_record | {"accepted": False})
            cand_result = runner(data)
            attempts.record(candidate, cand_result.trace)
            if cand_result.trace.contains(goal) or cand_result.trace.contains(target):
                current = current.derived(data, step_record | {"accepted": True})
                trace = cand_result.trace
                advanced = True
                break
        if not advanced:
            # Re-query next round; useless answers burn budget, not progress.
            continue


def optimize_by_functionality(seed: Seed, graph: CallGraph, target: int, runner,
                              engine: Engine, budget: float, rng: random.Random,
                              usage, summary_source, definition_source,
                              sandbox: str | Path,
                              stage: str = "opt") -> OptimizationOutcome:
    """Reach the target through one of its direct callers when no complete
    chain exists.

    Callers are probed in seeded-random order; once an input reaches one, a
    chain suffix from that caller hands off to the chain optimization loop.
    With no callers at all the target is isolated and reported as such.
    """
    if budget <= 0:
        raise ValueError("budget must be positive")
    direct_callers = callgraph.neighbors(graph, target)
    if not direct_callers:
        return OptimizationOutcome("isolated-target", seed, [])
    deadline = time.monotonic() + budget
    attempts = _AttemptLog(graph, target)
    order = list(direct_callers)
    rng.shuffle(order)
    for neighbor in order:
        if time.monotonic() >= deadline:
            return OptimizationOutcome("timeout", seed, attempts.subset())
        neighbor_name = graph.name_of(neighbor)
        answer = engine.run(
            "neighbor_probe",
            {
                "neighbor_name": neighbor_name,
                "neighbor_summary": summary_source(neighbor_name).render(),
                "program_usage": usage.render(),
                "command": seed.command.render(),
            },
            stage=stage, temperature=TEMPERATURE_GENERATION,
        )
        for spec in _candidates_from_answer(answer):
            if time.monotonic() >= deadline:
                return OptimizationOutcome("timeout", seed, attempts.subset())
            step_record = {"task": "neighbor_probe", "goal": neighbor_name}
            try:
                data = materialize(spec, sandbox, engine, stage=stage)
            except MaterializeError as exc:
                log.warning("neighbor candidate failed to materialize: %s", exc)
                continue
            candidate = seed.derived(data, step_record | {"accepted": False})
            result = runner(data)
            attempts.record(candidate, result.trace)
            if result.trace.contains(neighbor):
                reached_seed = seed.derived(data, step_record | {"accepted": True})
                suffix = CallChain(_suffix_path(graph, neighbor, target))
                remaining = max(deadline - time.monotonic(), 1.0)
                return optimize_along_chain(
                    reached_seed, suffix, graph, runner, engine, remaining,
                    definition_source, sandbox, stage=stage,
                )
    return OptimizationOutcome("partial", seed, attempts.subset())


def _suffix_path(graph: CallGraph, start: int, target: int) -> tuple[int, ...]:
    if start == target:
        return (target,)
    return (start, target)


def write_outcome(outcome: OptimizationOutcome, directory: str | Path) -> list[Path]:
    """Persist kept seeds as ``seed-<level>-<n>.bin`` plus a provenance log."""
    import json

    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    paths = []
    seeds = outcome.candidates or [outcome.best_seed]
    with open(directory / "provenance.jsonl", "w", encoding="utf-8") as fh:
        for n, seed in enumerate(seeds):
            level = 0
            for entry in reversed(seed.provenance):
                if "level" in entry:
                    level = entry["level"]
                    break
            path = directory / f"seed-{level}-{n}.bin"
            path.write_bytes(seed.data)
            paths.append(path)
            fh.write(json.dumps({
                "file": path.name,
                "status": outcome.status,
                "command": seed.command.render(),
                "provenance": list(seed.provenance),
            }, sort_keys=True) + "\n")
    return paths
