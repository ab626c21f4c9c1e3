"""Canonical label space for LLM-agent bug annotation.

Four fixed categories (bug type, root cause, effect, agent component) plus
open-ended language/framework tokens. Every label carries a long name and an
abbreviation; parsing accepts either form, or the combined
"Long Name (ABBR)" rendering, case-insensitively.
"""

from __future__ import annotations

from dataclasses import dataclass, field, fields
from enum import Enum
from typing import Any


class UnknownLabel(ValueError):
    """Raised when a text does not name any registered label."""

    def __init__(self, category: str, text: str):
        super().__init__(f"unknown {category} label: {text!r}")
        self.category = category
        self.text = text


class _Label(Enum):
    """Base for label enums: value is the abbreviation, long_name attached."""

    def __new__(cls, long_name: str, abbrev: str):
        obj = object.__new__(cls)
        obj._value_ = abbrev
        obj.long_name = long_name
        obj.abbrev = abbrev
        return obj

    def __repr__(self) -> str:
        return f"<{type(self).__name__}.{self.name}>"


class BugType(_Label):
    """What kind of defect the report describes."""

    LOGIC = ("Logic Bug", "LB")
    CONFIGURATION = ("Configuration Bug", "CB")
    INITIALIZATION = ("Initialization Bug", "IB")
    ARGUMENT = ("Argument Bug", "AB")
    PARSING = ("Parsing Bug", "PRB")
    PROMPTING = ("Prompting Bug", "PPB")
    API = ("API Bug", "APIB")
    REFERENCE = ("Reference Bug", "RB")
    AVAILABILITY = ("Availability Bug", "AVB")
    MODEL = ("Model Bug", "MB")
    RESOURCE_LIMITATION = ("Resource Limitation Bug", "RLB")


class RootCause(_Label):
    """Why the bug happened. Five causes admit a finer subclass."""

    API_MISUSE = ("API Misuse", "AM")
    INCORRECT_OR_MISSING_PARAMETER = ("Incorrect or Missing Parameter", "IMP")
    INCORRECT_DATA_FORMAT = ("Incorrect Data Format", "IDF")
    INCORRECT_OR_MISSING_CONTROL_FLOW = ("Incorrect or Missing Control Flow", "IMCF")
    INCORRECT_INSTRUCTION = ("Incorrect Instruction", "II")
    API_LIMITATION = ("API Limitation", "AL")
    COMPONENT_MISMATCH = ("Component Mismatch", "CM")
    REQUIREMENT_VIOLATION = ("Requirement Violation", "RV")
    OTHERS = ("Others", "Others")


class RootCauseSubclass(_Label):
    WRONG_API_CONTEXT = ("Wrong API Context", "Wrong API Context")
    INVALID_API_ARGUMENTS = ("Invalid API Arguments", "Invalid API Arguments")
    INCORRECT_VALUE = ("Incorrect Value", "Incorrect Value")
    MISSING_VALUE = ("Missing Value", "Missing Value")
    INPUT_DATA_FORMAT_ERROR = ("Input Data Format Error", "Input Data Format Error")
    OUTPUT_DATA_FORMAT_ERROR = ("Output Data Format Error", "Output Data Format Error")
    MISSING_FLOW = ("Missing Flow", "Missing Flow")
    INCORRECT_FLOW = ("Incorrect Flow", "Incorrect Flow")
    PROMPT_SPECIFICATION = ("Prompt Specification", "Prompt Specification")
    PROMPT_ORCHESTRATION = ("Prompt Orchestration", "Prompt Orchestration")


class Effect(_Label):
    """Observable symptom of the bug. Unknown is a first-class label, not a null."""

    CRASH = ("Crash", "Crash")
    INCORRECT_OUTPUT = ("Incorrect Output", "IO")
    EMPTY_RESPONSE = ("Empty Response", "ER")
    OUTPUT_DUMP = ("Output Dump", "OD")
    STATELESS_INTERACTION = ("Stateless Interaction", "SI")
    PARTIAL_OUTPUT = ("Partial Output", "PO")
    TOOL_IGNORED = ("Tool Ignored", "TI")
    SLOW_OUTPUT = ("Slow Output", "SO")
    WARNING = ("Warning", "Warning")
    HANG = ("Hang", "Hang")
    INDETERMINATE_LOOP = ("Indeterminate Loop", "IL")
    RESOURCE_OVERUSE = ("Resource Overuse", "RO")
    SILENT_FAIL = ("Silent Fail", "SF")
    UNKNOWN = ("Unknown", "Unknown")


class AgentComponent(_Label):
    """Which part of the agent hosted the bug."""

    PLANNING = ("Planning", "Planning")
    AGENT_CORE = ("Agent Core", "Agent Core")
    MEMORY = ("Memory", "Memory")
    TOOLS = ("Tools", "Tools")
    NOT_APPLICABLE = ("Not Applicable", "Not Applicable")


# Root causes that admit a subclass, and the subclasses each one allows.
SUBCLASSES: dict[RootCause, tuple[RootCauseSubclass, ...]] = {
    RootCause.API_MISUSE: (
        RootCauseSubclass.WRONG_API_CONTEXT,
        RootCauseSubclass.INVALID_API_ARGUMENTS,
    ),
    RootCause.INCORRECT_OR_MISSING_PARAMETER: (
        RootCauseSubclass.INCORRECT_VALUE,
        RootCauseSubclass.MISSING_VALUE,
    ),
    RootCause.INCORRECT_DATA_FORMAT: (
        RootCauseSubclass.INPUT_DATA_FORMAT_ERROR,
        RootCauseSubclass.OUTPUT_DATA_FORMAT_ERROR,
    ),
    RootCause.INCORRECT_OR_MISSING_CONTROL_FLOW: (
        RootCauseSubclass.MISSING_FLOW,
        RootCauseSubclass.INCORRECT_FLOW,
    ),
    RootCause.INCORRECT_INSTRUCTION: (
        RootCauseSubclass.PROMPT_SPECIFICATION,
        RootCauseSubclass.PROMPT_ORCHESTRATION,
    ),
}

CATEGORIES: dict[str, type[_Label]] = {
    "bug_type": BugType,
    "root_cause": RootCause,
    "root_cause_subclass": RootCauseSubclass,
    "effect": Effect,
    "component": AgentComponent,
}

# One-line operational definitions shown to annotators (human or model).
# Kept free of other labels' exact capitalized names so a definitions block
# mentions each member exactly once.
DEFINITIONS: dict[_Label, str] = {
    BugType.LOGIC: "The pipeline's logic is flawed: an unsuitable function for the task, a missing or wrongly implemented code segment, or an absent guard condition.",
    BugType.CONFIGURATION: "A configuration mistake, in either parameters or the environment the program runs in.",
    BugType.INITIALIZATION: "A variable or function is used before being initialized, or is initialized incorrectly (for example in the wrong place in a loop).",
    BugType.ARGUMENT: "A call does not match the API signature: wrong argument format, or extra or missing parameters. A wrong value that still fits the signature is not this bug.",
    BugType.PARSING: "Agent-specific failure when parsing model output: the generated format does not line up with what the parser or the user expects.",
    BugType.PROMPTING: "A problem in the prompts themselves, such as missing prompt variables or instructing the model incorrectly.",
    BugType.API: "A problem with the libraries the agent is built on: dependency conflicts, wrong versions, upstream library defects, or uninstalled packages.",
    BugType.REFERENCE: "The code refers to a renamed, relocated, deprecated, or missing module, typically surfacing at import time.",
    BugType.AVAILABILITY: "A server-side or provider-side outage: the model or service is down or not yet released.",
    BugType.MODEL: "The model itself cannot do what is asked, such as a chat-only model being asked for images or function calls.",
    BugType.RESOURCE_LIMITATION: "The user's own system or account runs out of capacity: insufficient hardware for the model, or exhausted credits.",
    RootCause.API_MISUSE: "An interface is used for the wrong job or with a misunderstanding of its purpose.",
    RootCause.INCORRECT_OR_MISSING_PARAMETER: "A parameter carries a logically wrong value, or an optional parameter was omitted and the default misbehaves.",
    RootCause.INCORRECT_DATA_FORMAT: "Data crossing the model boundary is not in the expected shape, in either direction.",
    RootCause.INCORRECT_OR_MISSING_CONTROL_FLOW: "Required control logic is absent or implemented wrongly.",
    RootCause.INCORRECT_INSTRUCTION: "The instructions given to the model are defective, in wording or in how they are assembled.",
    RootCause.API_LIMITATION: "The library or service simply cannot do it: an unsupported capability or downtime the user cannot control.",
    RootCause.COMPONENT_MISMATCH: "A poorly chosen or incompatible building block (model, tool, or memory module) breaks the integration.",
    RootCause.REQUIREMENT_VIOLATION: "Dependency conflicts or unmet prerequisites, such as incompatible library versions.",
    RootCause.OTHERS: "Causes outside the agent itself, usually the user's machine, environment, or an external part.",
    RootCauseSubclass.WRONG_API_CONTEXT: "the interface is invoked in a situation it was never meant for",
    RootCauseSubclass.INVALID_API_ARGUMENTS: "the wrong types or number of arguments are passed",
    RootCauseSubclass.INCORRECT_VALUE: "a valid parameter holds a logically wrong value",
    RootCauseSubclass.MISSING_VALUE: "an optional parameter is omitted and the default surprises",
    RootCauseSubclass.INPUT_DATA_FORMAT_ERROR: "external data fed to the model is not in the expected type, structure, or schema",
    RootCauseSubclass.OUTPUT_DATA_FORMAT_ERROR: "the model's response misses required keys or deviates from the requested format",
    RootCauseSubclass.MISSING_FLOW: "a required code path, condition, or call is absent",
    RootCauseSubclass.INCORRECT_FLOW: "the logic exists but checks or routes the wrong thing",
    RootCauseSubclass.PROMPT_SPECIFICATION: "ambiguous wording, poor formatting, or missing cues in the prompt text",
    RootCauseSubclass.PROMPT_ORCHESTRATION: "the prompt is assembled wrongly, such as variables not passed through",
    Effect.CRASH: "The program throws an error and stops.",
    Effect.INCORRECT_OUTPUT: "A complete answer is produced but it is not the expected one.",
    Effect.EMPTY_RESPONSE: "Nothing is generated at all.",
    Effect.OUTPUT_DUMP: "Everything arrives at once instead of streaming gradually.",
    Effect.STATELESS_INTERACTION: "Past conversation is forgotten; only the current question is answered.",
    Effect.PARTIAL_OUTPUT: "The response is incomplete or truncated.",
    Effect.TOOL_IGNORED: "The system never invokes its tool(s) during the run.",
    Effect.SLOW_OUTPUT: "The response arrives, but slowly.",
    Effect.WARNING: "The program keeps running but emits a warning.",
    Effect.HANG: "The system stops responding and needs human intervention to recover.",
    Effect.INDETERMINATE_LOOP: "The system loops indefinitely.",
    Effect.RESOURCE_OVERUSE: "The run consumes excessive resources such as RAM.",
    Effect.SILENT_FAIL: "The task fails without any log or signal that it failed.",
    Effect.UNKNOWN: "The report does not say what the observable symptom was.",
    AgentComponent.PLANNING: "The stage that decides what to do next.",
    AgentComponent.AGENT_CORE: "The central orchestration around the model itself.",
    AgentComponent.MEMORY: "State carried across turns of the conversation.",
    AgentComponent.TOOLS: "The external capabilities the agent can invoke.",
    AgentComponent.NOT_APPLICABLE: "Reserved for resource-limitation problems that sit outside the agent's own parts.",
}

# Open-ended language/framework tokens are normalized through a synonym
# table instead of an enum; unrecognized tokens pass through verbatim.
LANGUAGE_SYNONYMS: dict[str, str] = {
    "c#": "csharp",
    "c sharp": "csharp",
    "js": "javascript",
    "node.js": "javascript",
    "nodejs": "javascript",
    "ts": "typescript",
    "py": "python",
    "python3": "python",
}

FRAMEWORK_SYNONYMS: dict[str, str] = {
    "langchainjs": "langchain-js",
    "langchain.js": "langchain-js",
    "llama-index": "llamaindex",
    "llama index": "llamaindex",
    "semantic-kernel": "semantic kernel",
    "semantickernel": "semantic kernel",
    "ms autogen": "autogen",
    "none": "custom",
    "no framework": "custom",
}


def normalize_language(token: str) -> str:
    t = " ".join(token.strip().lower().split())
    return LANGUAGE_SYNONYMS.get(t, t)


def normalize_framework(token: str) -> str:
    t = " ".join(token.strip().lower().split())
    return FRAMEWORK_SYNONYMS.get(t, t)


def _candidate_forms(member: _Label) -> tuple[str, ...]:
    combined = f"{member.long_name} ({member.abbrev})"
    return (member.long_name, member.abbrev, combined)


def parse_label(category: str, text: str) -> _Label:
    """Return the member of `category` whose long name, abbreviation, or
    "Long Name (ABBR)" rendering equals `text` (case-insensitive, trimmed).

    Raises UnknownLabel when nothing matches. No fuzzy matching.
    """
    if category not in CATEGORIES:
        raise ValueError(f"no such label category: {category!r}")
    needle = text.strip().lower()
    for member in CATEGORIES[category]:
        if any(needle == form.lower() for form in _candidate_forms(member)):
            return member
    raise UnknownLabel(category, text)


def render_label(value: _Label, style: str = "abbrev") -> str:
    """Render a label in `style` ("long" or "abbrev"); round-trips through
    parse_label."""
    if style == "long":
        return value.long_name
    if style == "abbrev":
        return value.abbrev
    raise ValueError(f"unknown render style: {style!r}")


# Loose textual variants seen in model output; tried only after exact
# parsing fails. Maps normalized text to the canonical member.
LABEL_SYNONYMS: dict[str, dict[str, _Label]] = {
    "bug_type": {
        "api bug": BugType.API,
        "apibug": BugType.API,
        "resource limit bug": BugType.RESOURCE_LIMITATION,
    },
    "root_cause": {
        "other": RootCause.OTHERS,
        "api misuses": RootCause.API_MISUSE,
    },
    "effect": {
        "crashes": Effect.CRASH,
        "infinite loop": Effect.INDETERMINATE_LOOP,
        "incorrect outputs": Effect.INCORRECT_OUTPUT,
    },
    "component": {
        "core": AgentComponent.AGENT_CORE,
        "agentcore": AgentComponent.AGENT_CORE,
        "tool": AgentComponent.TOOLS,
        "n/a": AgentComponent.NOT_APPLICABLE,
        "na": AgentComponent.NOT_APPLICABLE,
        "not applicable (resource limitation)": AgentComponent.NOT_APPLICABLE,
    },
    "root_cause_subclass": {},
}


def resolve_label(category: str, text: str) -> _Label:
    """parse_label plus a synonym fallback for transcription noise in model
    output (underscores, plural forms, shorthand). Still raises UnknownLabel
    for genuinely unregistered labels."""
    try:
        return parse_label(category, text)
    except UnknownLabel:
        pass
    loose = " ".join(text.strip().lower().replace("_", " ").split())
    try:
        return parse_label(category, loose)
    except UnknownLabel:
        pass
    synonyms = LABEL_SYNONYMS.get(category, {})
    if loose in synonyms:
        return synonyms[loose]
    raise UnknownLabel(category, text)


@dataclass(frozen=True)
class Violation:
    """One invariant breach found by validate_record. Data, not an exception."""

    code: str
    message: str


@dataclass(frozen=True)
class AnnotationRecord:
    """Six labels plus three rationales for one bug instance of one post.

    A post with several bugs gets several records, distinguished by
    bug_index; (post_id, bug_index, annotator) identifies a record within
    a dataset. Immutable, safe to share across workers.
    """

    post_id: str
    bug_index: int
    bug_type: BugType
    root_cause: RootCause
    effect: Effect
    component: AgentComponent
    language: str
    framework: str
    rationale_bug_type: str
    rationale_root_cause: str
    rationale_effect: str
    annotator: str
    root_cause_subclass: RootCauseSubclass | None = None

    def key(self) -> tuple[str, int]:
        return (self.post_id, self.bug_index)

    def to_json_dict(self) -> dict[str, Any]:
        """JSON form: snake_case fields, labels in abbreviated style."""
        return {
            "post_id": self.post_id,
            "bug_index": self.bug_index,
            "bug_type": self.bug_type.abbrev,
            "root_cause": self.root_cause.abbrev,
            "root_cause_subclass": (
                self.root_cause_subclass.abbrev if self.root_cause_subclass else None
            ),
            "effect": self.effect.abbrev,
            "component": self.component.abbrev,
            "language": self.language,
            "framework": self.framework,
            "rationale_bug_type": self.rationale_bug_type,
            "rationale_root_cause": self.rationale_root_cause,
            "rationale_effect": self.rationale_effect,
            "annotator": self.annotator,
        }

    @classmethod
    def from_json_dict(cls, obj: dict[str, Any]) -> "AnnotationRecord":
        subclass_text = obj.get("root_cause_subclass")
        return cls(
            post_id=str(obj["post_id"]),
            bug_index=int(obj["bug_index"]),
            bug_type=parse_label("bug_type", obj["bug_type"]),
            root_cause=parse_label("root_cause", obj["root_cause"]),
            root_cause_subclass=(
                parse_label("root_cause_subclass", subclass_text)
                if subclass_text
                else None
            ),
            effect=parse_label("effect", obj["effect"]),
            component=parse_label("component", obj["component"]),
            language=str(obj["language"]),
            framework=str(obj["framework"]),
            rationale_bug_type=str(obj["rationale_bug_type"]),
            rationale_root_cause=str(obj["rationale_root_cause"]),
            rationale_effect=str(obj["rationale_effect"]),
            annotator=str(obj["annotator"]),
        )


def validate_record(record: AnnotationRecord) -> list[Violation]:
    """Check all record invariants; an empty list means the record is valid.

    Rules: a subclass must belong to its root cause's allowed set (and only
    subclass-bearing causes may carry one); the Not Applicable component is
    legal only for resource-limitation bug types; all three rationales must
    be non-empty; bug_index must be non-negative.
    """
    violations: list[Violation] = []
    allowed = SUBCLASSES.get(record.root_cause, ())
    if record.root_cause_subclass is not None and record.root_cause_subclass not in allowed:
        violations.append(
            Violation(
                "SubclassViolation",
                f"{record.root_cause.long_name} does not admit subclass "
                f"{record.root_cause_subclass.long_name}",
            )
        )
    if (
        record.component is AgentComponent.NOT_APPLICABLE
        and record.bug_type is not BugType.RESOURCE_LIMITATION
    ):
        violations.append(
            Violation(
                "ComponentRuleViolation",
                "component may be Not Applicable only when the bug type is "
                "Resource Limitation Bug",
            )
        )
    for name in ("rationale_bug_type", "rationale_root_cause", "rationale_effect"):
        if not getattr(record, name).strip():
            violations.append(Violation("EmptyRationale", f"{name} is empty"))
    if record.bug_index < 0:
        violations.append(Violation("NegativeBugIndex", "bug_index must be >= 0"))
    return violations


def records_to_jsonl(records: list[AnnotationRecord]) -> str:
    import json

    return "".join(json.dumps(r.to_json_dict(), ensure_ascii=False) + "\n" for r in records)


def records_from_jsonl(text: str) -> list[AnnotationRecord]:
    import json

    records = []
    for line in text.splitlines():
        if line.strip():
            records.append(AnnotationRecord.from_json_dict(json.loads(line)))
    return records
