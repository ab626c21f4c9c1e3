"""Iterative investigation loop over a bug report.

The model alternates thought/action/observation turns against the web
toolbox until it commits to a final explanation, which the second stage
turns into labels. The loop talks a plain-text protocol so it works on
any chat backend; backends with native tool calling are handled too.

Termination is guaranteed: an action budget (max_iterations) plus a hard
cap on model turns, after which the loop demands a final answer.
"""

from __future__ import annotations

import re
import threading
import time
from dataclasses import dataclass, field
from enum import Enum
from typing import Protocol

from .corpus import DIFF_BYTE_BUDGET, PostRecord, strip_solutions, truncate_text
from .gateway import Backend, ChatRequest, ChatResponse, Message, Usage
from .toolbox import (
    NO_RESULTS,
    SUMMARY_BUDGET_CHARS,
    CacheStore,
    Fetcher,
    ToolRegistry,
    ToolResult,
    UnknownTool,
    normalize_query,
    run_tool,
    tool_schemas,
)

DEFAULT_MAX_ITERATIONS = 10

FINAL_MARKER = re.compile(r"^\s*final answer\s*:", re.IGNORECASE | re.MULTILINE)
ACTION_LINE = re.compile(r"^Action:\s*([A-Za-z0-9_]+)\[(.*)\]\s*$", re.MULTILINE)
_EXPLANATION = re.compile(r"^\s*explanation\s*:\s*", re.IGNORECASE | re.MULTILINE)
_REASONING = re.compile(r"^\s*reasoning\s*:\s*", re.IGNORECASE | re.MULTILINE)

FORCE_FINAL_PROMPT = (
    "Stop investigating now. Respond with exactly:\n"
    "Final Answer:\n"
    "Explanation: <what the bug is and why it happens>\n"
    "Reasoning: <how your findings support that>"
)

NUDGE_PROMPT = (
    "Continue. Either take one action as `Action: tool_name[search terms]` "
    "or finish with `Final Answer:` followed by Explanation and Reasoning lines."
)


class StepKind(str, Enum):
    THOUGHT = "thought"
    ACTION = "action"
    OBSERVATION = "observation"
    FINAL = "final"


@dataclass(frozen=True)
class ActionDetail:
    tool: str
    query: str


@dataclass(frozen=True)
class ReActStep:
    kind: StepKind
    text: str
    step_index: int
    action_detail: ActionDetail | None = None


@dataclass(frozen=True)
class ReActTrace:
    """Everything the loop produced for one post. wall_ms is runtime
    bookkeeping only; persisted traces leave it out so replays of the
    same script are byte-identical."""

    post_id: str
    steps: tuple[ReActStep, ...]
    explanation: str
    reasoning: str
    total_usage: Usage
    wall_ms: int = 0


@dataclass(frozen=True)
class ReActLimits:
    max_iterations: int = DEFAULT_MAX_ITERATIONS
    include_solutions: bool = True
    summary_budget_chars: int = SUMMARY_BUDGET_CHARS

    def __post_init__(self):
        if self.max_iterations < 1:
            raise ValueError("max_iterations must be at least 1")


class ToolRunnerLike(Protocol):
    registry: ToolRegistry

    def run(self, tool_name: str, query: str) -> ToolResult: ...


class ToolRunner:
    """Binds the registry to a fetcher, cache, and summarizer backend.
    Safe to share across worker threads; counters are locked."""

    def __init__(
        self,
        registry: ToolRegistry,
        fetcher: Fetcher,
        cache: CacheStore,
        backend: Backend | None = None,
        budget_chars: int = SUMMARY_BUDGET_CHARS,
    ):
        self.registry = registry
        self._fetcher = fetcher
        self._cache = cache
        self._backend = backend
        self._budget = budget_chars
        self._lock = threading.Lock()
        self.calls = 0
        self.cache_hits = 0

    def run(self, tool_name: str, query: str) -> ToolResult:
        spec = self.registry.get(tool_name)
        result = run_tool(
            spec, query, self._fetcher, self._cache, self._backend, self._budget
        )
        with self._lock:
            self.calls += 1
            if result.from_cache:
                self.cache_hits += 1
        return result

    @property
    def fetch_attempts(self) -> int:
        with self._lock:
            return self.calls - self.cache_hits


class NullToolRunner:
    """Stands in when web knowledge is withheld: every known tool answers
    with the no-results sentinel and nothing is ever fetched."""

    def __init__(self, registry: ToolRegistry):
        self.registry = registry
        self.calls = 0
        self.cache_hits = 0

    def run(self, tool_name: str, query: str) -> ToolResult:
        self.registry.get(tool_name)
        self.calls += 1
        return ToolResult(
            tool=tool_name,
            query=normalize_query(query),
            summary=NO_RESULTS,
            from_cache=False,
        )

    @property
    def fetch_attempts(self) -> int:
        return 0


def render_post(post: PostRecord, include_solutions: bool = True) -> str:
    """Flatten a post into prompt text. include_solutions=False withholds
    the accepted answer and every reply (the title-and-body-only
    condition); commit diffs are clipped to the byte budget."""
    if not include_solutions:
        post = strip_solutions(post)
    lines = [f"Source: {post.source.value}", f"Title: {post.title}"]
    if post.tags:
        lines.append(f"Tags: {', '.join(post.tags)}")
    lines.append(f"Posted: {post.created_at.isoformat()}")
    lines += ["", "Body:", post.body]
    for i, snippet in enumerate(post.code_snippets, start=1):
        lines += ["", f"Code snippet {i}:", "```", snippet, "```"]
    if post.commit_message:
        lines += ["", "Commit message:", post.commit_message]
    if post.diff:
        lines += ["", "Diff:", truncate_text(post.diff, DIFF_BYTE_BUDGET)]
    if post.accepted_answer:
        lines += ["", "Accepted answer:", post.accepted_answer]
    for reply in post.replies:
        tag = ", marked as solution" if reply.is_solution else ""
        lines += ["", f"Reply ({reply.author_role.value}{tag}):", reply.text]
    return "\n".join(lines)


def build_system_prompt(registry: ToolRegistry) -> str:
    tool_lines = "\n".join(f"  - {spec.name}: {spec.description}" for spec in registry)
    return (
        "You investigate bug reports about software built on LLM-agent "
        "frameworks. Work step by step. On each turn either look something "
        "up:\n"
        "Thought: <why this lookup helps>\n"
        "Action: <tool_name>[<search terms>]\n"
        "or, once you understand the bug, finish with:\n"
        "Final Answer:\n"
        "Explanation: <what the bug is and why it happens>\n"
        "Reasoning: <how your findings support that>\n"
        "\n"
        "One action per turn. Available tools:\n" + tool_lines
    )


def parse_action(content: str) -> tuple[str, ActionDetail] | None:
    """Pull (thought text, action) out of a model turn, or None if the
    turn contains no action line."""
    match = ACTION_LINE.search(content)
    if match is None:
        return None
    thought = content[: match.start()].strip()
    thought = re.sub(r"^\s*thought\s*:\s*", "", thought, flags=re.IGNORECASE)
    return thought.strip(), ActionDetail(tool=match.group(1), query=match.group(2))


def parse_final(content: str) -> tuple[str, str] | None:
    """Pull (explanation, reasoning) out of a final-answer turn."""
    marker = FINAL_MARKER.search(content)
    if marker is None:
        return None
    tail = content[marker.end():]
    expl_match = _EXPLANATION.search(tail)
    if expl_match is None:
        return tail.strip(), ""
    rest = tail[expl_match.end():]
    reason_match = _REASONING.search(rest)
    if reason_match is None:
        return rest.strip(), ""
    explanation = rest[: reason_match.start()].strip()
    reasoning = rest[reason_match.end():].strip()
    return explanation, reasoning


def run_react(
    post: PostRecord,
    backend: Backend,
    runner: ToolRunnerLike,
    limits: ReActLimits = ReActLimits(),
) -> ReActTrace:
    """Drive the investigation loop for one post.

    Backend failures propagate to the caller, which records the post as
    failed; everything below the tool boundary degrades instead.
    """
    started = time.monotonic()
    system = build_system_prompt(runner.registry)
    messages: list[Message] = [Message("user", render_post(post, limits.include_solutions))]
    steps: list[ReActStep] = []
    usages: list[Usage] = []
    actions = 0
    calls = 0
    turn_cap = 2 * limits.max_iterations + 1
    explanation: str | None = None
    reasoning = ""

    def add_step(kind: StepKind, text: str, detail: ActionDetail | None = None):
        steps.append(ReActStep(kind, text, len(steps), detail))

    def observe(detail: ActionDetail) -> str:
        try:
            result = runner.run(detail.tool, detail.query)
            summary = result.summary
        except UnknownTool:
            known = ", ".join(runner.registry.names())
            summary = f"Unknown tool: {detail.tool}. Available tools: {known}"
        add_step(StepKind.ACTION, f"{detail.tool}[{detail.query}]", detail)
        add_step(StepKind.OBSERVATION, summary)
        return summary

    while explanation is None:
        forced = actions >= limits.max_iterations or calls >= turn_cap
        if forced:
            messages.append(Message("user", FORCE_FINAL_PROMPT))
        schemas = (
            tool_schemas(runner.registry)
            if backend.supports_tool_calls and not forced
            else None
        )
        response = backend.complete(
            ChatRequest(system_prompt=system, messages=tuple(messages), tool_schemas=schemas)
        )
        calls += 1
        usages.append(response.usage)
        content = response.content or ""

        if response.tool_calls and not forced:
            if content:
                add_step(StepKind.THOUGHT, content)
            observations = []
            for call in response.tool_calls:
                query = str(call.arguments.get("query", ""))
                observations.append(observe(ActionDetail(call.tool_name, query)))
                actions += 1
            messages.append(Message("assistant", content, tool_call=response.tool_calls[0]))
            messages.append(
                Message("user", "\n".join(f"Observation: {o}" for o in observations))
            )
            continue

        final = parse_final(content)
        if final is not None:
            explanation, reasoning = final
            add_step(StepKind.FINAL, content.strip())
            break

        if forced:
            # The demand for a final answer went unanswered; salvage what
            # the turn said so downstream stages still have something.
            explanation = content.strip() or "(investigation ended without a final explanation)"
            add_step(StepKind.FINAL, explanation)
            break

        parsed = parse_action(content)
        if parsed is not None:
            thought, detail = parsed
            if thought:
                add_step(StepKind.THOUGHT, thought)
            observation = observe(detail)
            actions += 1
            messages.append(Message("assistant", content))
            messages.append(Message("user", f"Observation: {observation}"))
            continue

        add_step(StepKind.THOUGHT, content.strip())
        messages.append(Message("assistant", content))
        messages.append(Message("user", NUDGE_PROMPT))

    total = Usage()
    for usage in usages:
        total = total + usage
    return ReActTrace(
        post_id=post.post_id,
        steps=tuple(steps),
        explanation=explanation,
        reasoning=reasoning,
        total_usage=total,
        wall_ms=int((time.monotonic() - started) * 1000),
    )


# --- scratchpad text form ---


def _escape(text: str) -> str:
    return text.replace("\\", "\\\\").replace("\n", "\\n")


def _unescape(text: str) -> str:
    out: list[str] = []
    i = 0
    while i < len(text):
        ch = text[i]
        if ch == "\\" and i + 1 < len(text):
            nxt = text[i + 1]
            if nxt == "n":
                out.append("\n")
                i += 2
                continue
            if nxt == "\\":
                out.append("\\")
                i += 2
                continue
        out.append(ch)
        i += 1
    return "".join(out)


_STEP_PREFIXES = {
    StepKind.THOUGHT: "Thought: ",
    StepKind.OBSERVATION: "Observation: ",
    StepKind.FINAL: "Final: ",
}

_TRACE_ACTION = re.compile(r"^Action: ([A-Za-z0-9_]+)\[(.*)\]$")


def serialize_trace(steps: tuple[ReActStep, ...] | list[ReActStep]) -> str:
    """One line per step, newline-safe. Inverse of parse_trace."""
    lines = []
    for step in steps:
        if step.kind is StepKind.ACTION:
            detail = step.action_detail
            if detail is None:
                raise ValueError(f"action step {step.step_index} lacks detail")
            lines.append(f"Action: {detail.tool}[{_escape(detail.query)}]")
        else:
            lines.append(_STEP_PREFIXES[step.kind] + _escape(step.text))
    return "\n".join(lines)


def parse_trace(text: str) -> tuple[ReActStep, ...]:
    steps: list[ReActStep] = []
    if not text:
        return ()
    for line in text.split("\n"):
        action = _TRACE_ACTION.match(line)
        if action is not None:
            tool, query = action.group(1), _unescape(action.group(2))
            steps.append(
                ReActStep(StepKind.ACTION, f"{tool}[{query}]", len(steps), ActionDetail(tool, query))
            )
            continue
        for kind, prefix in _STEP_PREFIXES.items():
            if line.startswith(prefix):
                steps.append(ReActStep(kind, _unescape(line[len(prefix):]), len(steps)))
                break
        else:
            raise ValueError(f"unrecognized trace line: {line[:60]!r}")
    return tuple(steps)


def trace_to_json_dict(trace: ReActTrace) -> dict:
    """Persistable form. Deliberately free of wall-clock readings so the
    same scripted run always writes the same bytes."""
    step_dicts = []
    for step in trace.steps:
        entry: dict = {"kind": step.kind.value, "text": step.text}
        if step.action_detail is not None:
            entry["tool"] = step.action_detail.tool
            entry["query"] = step.action_detail.query
        step_dicts.append(entry)
    return {
        "post_id": trace.post_id,
        "steps": step_dicts,
        "explanation": trace.explanation,
        "reasoning": trace.reasoning,
        "usage": {
            "input_tokens": trace.total_usage.input_tokens,
            "output_tokens": trace.total_usage.output_tokens,
            "estimated": trace.total_usage.estimated,
        },
    }


def trace_from_json_dict(data: dict) -> ReActTrace:
    steps = []
    for i, entry in enumerate(data["steps"]):
        detail = None
        if "tool" in entry:
            detail = ActionDetail(entry["tool"], entry["query"])
        steps.append(ReActStep(StepKind(entry["kind"]), entry["text"], i, detail))
    usage = data.get("usage", {})
    return ReActTrace(
        post_id=data["post_id"],
        steps=tuple(steps),
        explanation=data["explanation"],
        reasoning=data.get("reasoning", ""),
        total_usage=Usage(
            int(usage.get("input_tokens", 0)),
            int(usage.get("output_tokens", 0)),
            bool(usage.get("estimated", False)),
        ),
    )
