"""Stage 2: turn a bug report (plus the stage-1 explanation, when there is
one) into six taxonomy labels and three rationales.

The same labeling turn also powers the comparison setups: direct zero-shot
labeling, one-shot labeling with per-bug-type exemplars, and the
no-web-knowledge variant of the two-stage pipeline. All of them emit the
identical record shape, validated against the taxonomy before anything is
persisted. Malformed or invalid model output gets up to two repair re-asks.
"""

from __future__ import annotations

import json
import logging
import math
import time
import warnings
from dataclasses import dataclass, replace
from enum import Enum

from .corpus import PostRecord
from .gateway import Backend, ChatRequest, Message, MeteredBackend, Usage
from .react import (
    NullToolRunner,
    ReActLimits,
    ReActTrace,
    ToolRunnerLike,
    render_post,
    run_react,
)
from .taxonomy import (
    CATEGORIES,
    DEFINITIONS,
    SUBCLASSES,
    AnnotationRecord,
    BugType,
    RootCause,
    UnknownLabel,
    normalize_framework,
    normalize_language,
    resolve_label,
    validate_record,
)
from .toolbox import default_registry, summarize

log = logging.getLogger(__name__)

REPAIR_BUDGET = 2
DEFAULT_CONTEXT_BUDGET_TOKENS = 8000

# Values a model may emit to mean "no subclass applies".
_NULL_SUBCLASS = frozenset({"", "null", "none", "n/a", "not applicable"})

REQUIRED_FIELDS = (
    "bug_type",
    "root_cause",
    "root_cause_subclass",
    "effect",
    "component",
    "language",
    "framework",
    "rationale_bug_type",
    "rationale_root_cause",
    "rationale_effect",
)


class Mode(str, Enum):
    TWO_STAGE = "two_stage"
    ZERO_SHOT = "zero_shot"
    ONE_SHOT = "one_shot"
    REACT_NO_TOOLS = "react_no_tools"


class SchemaViolation(RuntimeError):
    """Model output still unparseable or invalid after all repair re-asks."""

    def __init__(self, post_id: str, problems: list[str]):
        super().__init__(f"{post_id}: {'; '.join(problems)}")
        self.post_id = post_id
        self.problems = problems


class MalformedOutput(ValueError):
    """No usable JSON object in a model turn."""


class NoExemplar(Warning):
    """A taxonomy value has no gold example to learn from."""


@dataclass(frozen=True)
class Exemplar:
    bug_type: BugType
    text: str
    record: AnnotationRecord
    summarized: bool = False


@dataclass(frozen=True)
class PromptKit:
    """Everything prompt-side the labeling turn needs: the taxonomy
    rendered as text, the operating mode, and exemplars when one-shot."""

    mode: Mode
    definitions_block: str
    exemplars: tuple[Exemplar, ...] = ()

    def __post_init__(self):
        if self.exemplars and self.mode is not Mode.ONE_SHOT:
            raise ValueError("exemplars are only meaningful in one_shot mode")


def build_definitions_block() -> str:
    """Render every category member once, as one '- Name: definition' entry.
    Members whose short form differs get it in parentheses."""

    def entry(member, indent: str = "") -> str:
        shown = member.long_name
        if member.abbrev != member.long_name:
            shown += f" ({member.abbrev})"
        return f"{indent}- {shown}: {DEFINITIONS[member]}"

    lines = ["Bug types:"]
    lines += [entry(m) for m in BugType]
    lines.append("")
    lines.append("Root causes (some list two subclasses; pick one when the cause applies):")
    for cause in RootCause:
        lines.append(entry(cause))
        for sub in SUBCLASSES.get(cause, ()):
            lines.append(entry(sub, indent="  "))
    lines.append("")
    lines.append("Effects:")
    lines += [entry(m) for m in CATEGORIES["effect"]]
    lines.append("")
    lines.append("Agent components:")
    lines += [entry(m) for m in CATEGORIES["component"]]
    return "\n".join(lines)


def default_kit(mode: Mode, exemplars: tuple[Exemplar, ...] = ()) -> PromptKit:
    return PromptKit(mode=mode, definitions_block=build_definitions_block(), exemplars=exemplars)


def build_label_schema() -> dict:
    """JSON schema for the labeling output. Encodes the same rules as
    validate_record (cross-field ones via conditionals) so schema acceptance
    and record validity coincide."""
    names = lambda category: [m.long_name for m in CATEGORIES[category]]
    rationale = {"type": "string", "pattern": "\\S"}
    subclass_rules: list[dict] = []
    for cause in CATEGORIES["root_cause"]:
        children = SUBCLASSES.get(cause, ())
        allowed = [s.long_name for s in children] + [None]
        subclass_rules.append(
            {
                "if": {"properties": {"root_cause": {"const": cause.long_name}}, "required": ["root_cause"]},
                "then": {"properties": {"root_cause_subclass": {"enum": allowed}}},
            }
        )
    component_rule = {
        "if": {"properties": {"component": {"const": "Not Applicable"}}, "required": ["component"]},
        "then": {"properties": {"bug_type": {"const": "Resource Limitation Bug"}}},
    }
    return {
        "type": "object",
        "additionalProperties": False,
        "required": list(REQUIRED_FIELDS),
        "properties": {
            "bug_type": {"enum": names("bug_type")},
            "root_cause": {"enum": names("root_cause")},
            "root_cause_subclass": {"enum": names("root_cause_subclass") + [None]},
            "effect": {"enum": names("effect")},
            "component": {"enum": names("component")},
            "language": {"type": "string"},
            "framework": {"type": "string"},
            "rationale_bug_type": rationale,
            "rationale_root_cause": rationale,
            "rationale_effect": rationale,
        },
        "allOf": subclass_rules + [component_rule],
    }


def label_schema_text() -> str:
    return json.dumps(build_label_schema(), ensure_ascii=False)


def extract_json(text: str) -> dict:
    """Find the JSON object in a model turn: direct parse, then fenced
    block, then first balanced brace span. Raises MalformedOutput."""
    for candidate in _json_candidates(text):
        try:
            data = json.loads(candidate)
        except json.JSONDecodeError:
            continue
        if isinstance(data, dict):
            return data
    raise MalformedOutput("no JSON object found in reply")


def _json_candidates(text: str):
    yield text.strip()
    fence = text.find("```")
    while fence != -1:
        end = text.find("```", fence + 3)
        if end == -1:
            break
        block = text[fence + 3 : end]
        if block.startswith(("json", "JSON")):
            block = block[4:]
        yield block.strip()
        fence = text.find("```", end + 3)
    start = text.find("{")
    while start != -1:
        span = _balanced_span(text, start)
        if span is not None:
            yield span
        start = text.find("{", start + 1)


def _balanced_span(text: str, start: int) -> str | None:
    depth = 0
    in_string = False
    escaped = False
    for i in range(start, len(text)):
        ch = text[i]
        if in_string:
            if escaped:
                escaped = False
            elif ch == "\\":
                escaped = True
            elif ch == '"':
                in_string = False
        elif ch == '"':
            in_string = True
        elif ch == "{":
            depth += 1
        elif ch == "}":
            depth -= 1
            if depth == 0:
                return text[start : i + 1]
    return None


def parse_labels(content: str, post_id: str, bug_index: int, annotator: str) -> AnnotationRecord:
    """Typed record from one model turn. Label text is matched leniently
    (long names, short forms, known synonyms); genuinely unregistered
    labels raise UnknownLabel, structural problems raise MalformedOutput."""
    data = extract_json(content)
    missing = [f for f in REQUIRED_FIELDS if f not in data]
    if missing:
        raise MalformedOutput(f"missing fields: {', '.join(missing)}")
    raw_subclass = data["root_cause_subclass"]
    subclass = None
    if raw_subclass is not None and str(raw_subclass).strip().lower() not in _NULL_SUBCLASS:
        subclass = resolve_label("root_cause_subclass", str(raw_subclass))
    return AnnotationRecord(
        post_id=post_id,
        bug_index=bug_index,
        bug_type=resolve_label("bug_type", str(data["bug_type"])),
        root_cause=resolve_label("root_cause", str(data["root_cause"])),
        effect=resolve_label("effect", str(data["effect"])),
        component=resolve_label("component", str(data["component"])),
        language=normalize_language(str(data["language"])),
        framework=normalize_framework(str(data["framework"])),
        rationale_bug_type=str(data["rationale_bug_type"]),
        rationale_root_cause=str(data["rationale_root_cause"]),
        rationale_effect=str(data["rationale_effect"]),
        annotator=annotator,
        root_cause_subclass=subclass,
    )


_OUTPUT_CONTRACT = (
    "Reply with exactly one JSON object and nothing else. Fields:\n"
    "  bug_type: one of the bug type names\n"
    "  root_cause: one of the root cause names\n"
    "  root_cause_subclass: a listed subclass of that root cause, else null\n"
    "  effect: one of the effect names\n"
    '  component: one of the agent component names; "Not Applicable" is\n'
    '  allowed only together with bug_type "Resource Limitation Bug"\n'
    "  language: main programming language of the report, lowercase\n"
    "  framework: agent framework involved, lowercase\n"
    "  rationale_bug_type, rationale_root_cause, rationale_effect: one or\n"
    "  two sentences each justifying those choices; never empty"
)


def _system_prompt(kit: PromptKit) -> str:
    return (
        "You label bug reports about software built on LLM-agent frameworks, "
        "using a fixed taxonomy.\n\n"
        + kit.definitions_block
        + "\n\n"
        + _OUTPUT_CONTRACT
    )


def _exemplar_block(exemplar: Exemplar) -> str:
    record = exemplar.record
    labels = {
        "bug_type": record.bug_type.long_name,
        "root_cause": record.root_cause.long_name,
        "root_cause_subclass": (
            record.root_cause_subclass.long_name if record.root_cause_subclass else None
        ),
        "effect": record.effect.long_name,
        "component": record.component.long_name,
        "language": record.language,
        "framework": record.framework,
        "rationale_bug_type": record.rationale_bug_type,
        "rationale_root_cause": record.rationale_root_cause,
        "rationale_effect": record.rationale_effect,
    }
    return (
        f"Example of a {record.bug_type.long_name}:\n{exemplar.text}\n"
        f"Labels:\n{json.dumps(labels, ensure_ascii=False)}"
    )


def _user_prompt(post: PostRecord, explanation: str | None, kit: PromptKit, include_solutions: bool) -> str:
    parts = []
    if kit.exemplars:
        parts += [_exemplar_block(ex) for ex in kit.exemplars]
        parts.append("Now label this report:")
    parts.append(render_post(post, include_solutions))
    if explanation is not None:
        parts.append("Investigator's explanation of the bug:\n" + explanation)
    parts.append("Produce the JSON object now.")
    return "\n\n".join(parts)


def _repair_prompt(problems: list[str]) -> str:
    return (
        "That reply was not acceptable: "
        + "; ".join(problems)
        + ". Reply again with one valid JSON object only, following the field rules exactly."
    )


def classify(
    post: PostRecord,
    explanation: str | None,
    kit: PromptKit,
    backend: Backend,
    bug_index: int = 0,
    include_solutions: bool = True,
) -> AnnotationRecord:
    """One labeling conversation with up to REPAIR_BUDGET re-asks covering
    both malformed output and taxonomy-invalid records.

    An explanation is required in two_stage mode and disallowed elsewhere:
    it exists exactly when an investigation stage ran.
    """
    if kit.mode is Mode.TWO_STAGE and explanation is None:
        raise ValueError("two_stage labeling needs the investigation explanation")
    if kit.mode is not Mode.TWO_STAGE and explanation is not None:
        raise ValueError(f"{kit.mode.value} labeling must not receive an explanation")

    system = _system_prompt(kit)
    messages: list[Message] = [
        Message("user", _user_prompt(post, explanation, kit, include_solutions))
    ]
    schema = label_schema_text() if backend.supports_schema else None
    problems: list[str] = ["no model turn happened"]
    pending_unknown: UnknownLabel | None = None

    for attempt in range(1 + REPAIR_BUDGET):
        response = backend.complete(
            ChatRequest(system_prompt=system, messages=tuple(messages), output_schema=schema)
        )
        content = response.content or ""
        pending_unknown = None
        try:
            record = parse_labels(content, post.post_id, bug_index, backend.model_id)
        except MalformedOutput as exc:
            problems = [str(exc)]
        except UnknownLabel as exc:
            problems = [f"unknown label: {exc}"]
            pending_unknown = exc
        else:
            violations = validate_record(record)
            if not violations:
                return record
            problems = [f"{v.code}: {v.message}" for v in violations]
        if attempt < REPAIR_BUDGET:
            log.warning(
                "repair %d/%d for %s: %s", attempt + 1, REPAIR_BUDGET, post.post_id, "; ".join(problems)
            )
            messages.append(Message("assistant", content))
            messages.append(Message("user", _repair_prompt(problems)))

    if pending_unknown is not None:
        raise pending_unknown
    raise SchemaViolation(post.post_id, problems)


def run_zero_shot(
    post: PostRecord,
    kit: PromptKit,
    backend: Backend,
    bug_index: int = 0,
    include_solutions: bool = True,
) -> AnnotationRecord:
    """Direct labeling from the report alone, no investigation stage."""
    if kit.mode is not Mode.ZERO_SHOT:
        raise ValueError(f"run_zero_shot needs a zero_shot kit, got {kit.mode.value}")
    return classify(post, None, kit, backend, bug_index, include_solutions)


def run_one_shot(
    post: PostRecord,
    kit: PromptKit,
    backend: Backend,
    bug_index: int = 0,
    include_solutions: bool = True,
) -> AnnotationRecord:
    """Direct labeling with one worked example per bug type in context."""
    if kit.mode is not Mode.ONE_SHOT:
        raise ValueError(f"run_one_shot needs a one_shot kit, got {kit.mode.value}")
    return classify(post, None, kit, backend, bug_index, include_solutions)


def build_one_shot_exemplars(
    gold: list[tuple[PostRecord, AnnotationRecord]],
    backend: Backend,
    context_budget_tokens: int = DEFAULT_CONTEXT_BUDGET_TOKENS,
) -> tuple[Exemplar, ...]:
    """Pick, per bug type, the gold example with the shortest rendered text.

    If everything together would blow the context budget (at the usual
    4-chars-per-token estimate), oversized exemplar texts are replaced with
    model-written summaries. Bug types without any gold example are skipped
    with a NoExemplar warning.
    """
    by_type: dict[BugType, list[tuple[PostRecord, AnnotationRecord]]] = {}
    for post, record in gold:
        by_type.setdefault(record.bug_type, []).append((post, record))

    exemplars: list[Exemplar] = []
    for bug_type in BugType:
        candidates = by_type.get(bug_type)
        if not candidates:
            warnings.warn(NoExemplar(f"no gold example for {bug_type.long_name}"))
            continue
        post, record = min(candidates, key=lambda pair: len(render_post(pair[0])))
        exemplars.append(Exemplar(bug_type, render_post(post), record))

    total_chars = sum(len(ex.text) for ex in exemplars)
    if exemplars and math.ceil(total_chars / 4) > context_budget_tokens:
        per_chars = max(1, (context_budget_tokens * 4) // (len(exemplars) + 1))
        exemplars = [
            replace(ex, text=summarize(backend, ex.text, budget_chars=per_chars), summarized=True)
            if len(ex.text) > per_chars
            else ex
            for ex in exemplars
        ]
    return tuple(exemplars)


def exemplars_to_json(exemplars: tuple[Exemplar, ...]) -> list[dict]:
    """Audit form of the exemplar set."""
    return [
        {
            "bug_type": ex.bug_type.abbrev,
            "summarized": ex.summarized,
            "text": ex.text,
            "labels": ex.record.to_json_dict(),
        }
        for ex in exemplars
    ]


@dataclass(frozen=True)
class AnnotationOutcome:
    """One post fully processed: the record, the investigation trace when
    one ran, and what it cost."""

    record: AnnotationRecord
    trace: ReActTrace | None
    usage: Usage
    wall_ms: int


def annotate_post(
    post: PostRecord,
    backend: Backend,
    kit: PromptKit,
    runner: ToolRunnerLike | None = None,
    limits: ReActLimits = ReActLimits(),
    bug_index: int = 0,
) -> AnnotationOutcome:
    """Process one post in whatever mode the kit selects.

    two_stage needs a tool runner; react_no_tools always substitutes the
    null runner so nothing is ever fetched, whatever was passed in.
    """
    started = time.monotonic()
    meter = MeteredBackend(backend)

    if kit.mode in (Mode.ZERO_SHOT, Mode.ONE_SHOT):
        run = run_zero_shot if kit.mode is Mode.ZERO_SHOT else run_one_shot
        record = run(post, kit, meter, bug_index, limits.include_solutions)
        return AnnotationOutcome(
            record, None, meter.total(), int((time.monotonic() - started) * 1000)
        )

    if kit.mode is Mode.REACT_NO_TOOLS:
        runner = NullToolRunner(default_registry())
    elif runner is None:
        raise ValueError("two_stage mode needs a tool runner")

    trace = run_react(post, meter, runner, limits)
    explanation = trace.explanation
    if trace.reasoning:
        explanation += "\n\nReasoning: " + trace.reasoning
    record = classify(
        post,
        explanation,
        replace(kit, mode=Mode.TWO_STAGE, exemplars=()),
        meter,
        bug_index,
        limits.include_solutions,
    )
    return AnnotationOutcome(
        record, trace, meter.total(), int((time.monotonic() - started) * 1000)
    )


def run_react_no_tools(
    post: PostRecord,
    backend: Backend,
    limits: ReActLimits = ReActLimits(),
    kit: PromptKit | None = None,
    bug_index: int = 0,
) -> AnnotationRecord:
    """Two-stage pipeline with web knowledge withheld: every lookup
    observes the no-results sentinel and zero fetches happen."""
    if kit is None:
        kit = default_kit(Mode.REACT_NO_TOOLS)
    outcome = annotate_post(post, backend, kit, limits=limits, bug_index=bug_index)
    return outcome.record
