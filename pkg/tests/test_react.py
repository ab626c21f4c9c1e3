"""Investigation-loop tests: protocol parsing, the loop itself under a
scripted backend, termination guarantees, and trace round-trips."""

from __future__ import annotations

import json
import random
from datetime import date

import pytest

from buglens.corpus import DIFF_BYTE_BUDGET, AuthorRole, PostRecord, Reply, Source
from buglens.gateway import (
    BackendUnavailable,
    ChatRequest,
    ChatResponse,
    ScriptedBackend,
    ToolCall,
    Usage,
)
from buglens.react import (
    FORCE_FINAL_PROMPT,
    ActionDetail,
    NullToolRunner,
    ReActLimits,
    ReActStep,
    StepKind,
    ToolRunner,
    parse_action,
    parse_final,
    parse_trace,
    render_post,
    run_react,
    serialize_trace,
    trace_from_json_dict,
    trace_to_json_dict,
)
from buglens.toolbox import (
    FixtureFetcher,
    InMemoryCache,
    ToolResult,
    default_registry,
    normalize_query,
)


def make_post(**overrides) -> PostRecord:
    base = dict(
        post_id="so-100",
        source=Source.STACK_OVERFLOW,
        title="Memory not kept between calls",
        body="The agent forgets previous turns.",
        tags=("langchain", "python"),
        created_at=date(2024, 3, 1),
    )
    base.update(overrides)
    return PostRecord(**base)


class StubRunner:
    """Known tools answer with a fixed summary; counts invocations."""

    def __init__(self, summary: str = "docs say: pass memory explicitly"):
        self.registry = default_registry()
        self.summary = summary
        self.calls = 0
        self.cache_hits = 0

    def run(self, tool_name: str, query: str) -> ToolResult:
        self.registry.get(tool_name)
        self.calls += 1
        return ToolResult(
            tool=tool_name,
            query=normalize_query(query),
            summary=self.summary,
            from_cache=False,
        )


def final_turn(explanation: str = "State is not threaded through.", reasoning: str = "Docs confirm it.") -> ChatResponse:
    return ChatResponse(
        content=f"Final Answer:\nExplanation: {explanation}\nReasoning: {reasoning}"
    )


# --- protocol parsing ---


def test_parse_action_extracts_thought_and_detail():
    content = "Thought: the memory docs should say\nAction: search_langchain_docs[ConversationBufferMemory]"
    thought, detail = parse_action(content)
    assert thought == "the memory docs should say"
    assert detail == ActionDetail("search_langchain_docs", "ConversationBufferMemory")


def test_parse_action_keeps_brackets_in_query():
    parsed = parse_action("Action: search_github_discussions[IndexError on data[0]]")
    assert parsed is not None
    assert parsed[1].query == "IndexError on data[0]"


def test_parse_action_none_without_action_line():
    assert parse_action("Just musing about the bug.") is None


def test_parse_final_full_form():
    out = parse_final("Final Answer:\nExplanation: A bad prompt.\nReasoning: The trace shows it.")
    assert out == ("A bad prompt.", "The trace shows it.")


def test_parse_final_multiline_explanation():
    content = "Final Answer:\nExplanation: line one\nline two\nReasoning: because"
    assert parse_final(content) == ("line one\nline two", "because")


def test_parse_final_without_reasoning():
    assert parse_final("final answer:\nexplanation: just this") == ("just this", "")


def test_parse_final_bare_marker():
    explanation, reasoning = parse_final("Final Answer: the loop never updates state")
    assert "never updates state" in explanation
    assert reasoning == ""


def test_parse_final_none_without_marker():
    assert parse_final("Thought: still unsure") is None


# --- the loop ---


def test_run_react_thought_action_final():
    backend = ScriptedBackend(
        [
            ChatResponse(
                content="Thought: check memory docs\nAction: search_langchain_docs[memory]",
                usage=Usage(100, 20),
            ),
            final_turn(),
        ]
    )
    runner = StubRunner()
    trace = run_react(make_post(), backend, runner)
    kinds = [s.kind for s in trace.steps]
    assert kinds == [StepKind.THOUGHT, StepKind.ACTION, StepKind.OBSERVATION, StepKind.FINAL]
    assert trace.steps[1].action_detail == ActionDetail("search_langchain_docs", "memory")
    assert trace.steps[2].text == runner.summary
    assert trace.explanation == "State is not threaded through."
    assert trace.reasoning == "Docs confirm it."
    assert trace.total_usage.input_tokens == 100
    assert runner.calls == 1
    # the observation went back to the model
    assert backend.requests[1].messages[-1].content == f"Observation: {runner.summary}"


def test_run_react_immediate_final_makes_no_tool_calls():
    backend = ScriptedBackend([final_turn("Obvious from the report.")])
    runner = StubRunner()
    trace = run_react(make_post(), backend, runner)
    assert [s.kind for s in trace.steps] == [StepKind.FINAL]
    assert runner.calls == 0
    assert trace.explanation == "Obvious from the report."


def test_run_react_unknown_tool_becomes_observation():
    backend = ScriptedBackend(
        [ChatResponse(content="Action: search_mystery_docs[anything]"), final_turn()]
    )
    trace = run_react(make_post(), backend, StubRunner())
    observation = [s for s in trace.steps if s.kind is StepKind.OBSERVATION][0]
    assert observation.text.startswith("Unknown tool: search_mystery_docs")
    assert "search_langchain_docs" in observation.text


def test_run_react_forces_final_after_action_budget():
    action = ChatResponse(content="Action: search_langchain_docs[memory]")
    backend = ScriptedBackend([action, final_turn()])
    trace = run_react(
        make_post(), backend, StubRunner(), ReActLimits(max_iterations=1)
    )
    assert trace.explanation == "State is not threaded through."
    # the second turn carried the demand for a final answer
    assert backend.requests[1].messages[-1].content == FORCE_FINAL_PROMPT


def test_run_react_turn_cap_stops_thought_only_loops():
    rambling = ChatResponse(content="Thought: hmm, still thinking")
    backend = ScriptedBackend([rambling], strict=False)
    trace = run_react(
        make_post(), backend, StubRunner(), ReActLimits(max_iterations=2)
    )
    # cap: 2 * max_iterations + 1 regular turns, then one forced turn
    assert len(backend.requests) == 2 * 2 + 2
    assert trace.explanation == "Thought: hmm, still thinking"


def test_run_react_salvages_forced_turn_without_marker():
    backend = ScriptedBackend(
        [
            ChatResponse(content="Action: search_pydantic_docs[validators]"),
            ChatResponse(content="It is a validation ordering problem."),
        ]
    )
    trace = run_react(
        make_post(), backend, StubRunner(), ReActLimits(max_iterations=1)
    )
    assert trace.explanation == "It is a validation ordering problem."
    assert trace.reasoning == ""


def test_run_react_native_tool_calls():
    backend = ScriptedBackend(
        [
            ChatResponse(
                content="checking the validator docs",
                tool_calls=(ToolCall("search_pydantic_docs", {"query": "field validator"}),),
            ),
            final_turn(),
        ],
        supports_tool_calls=True,
    )
    runner = StubRunner()
    trace = run_react(make_post(), backend, runner)
    kinds = [s.kind for s in trace.steps]
    assert kinds == [StepKind.THOUGHT, StepKind.ACTION, StepKind.OBSERVATION, StepKind.FINAL]
    assert trace.steps[1].action_detail.tool == "search_pydantic_docs"
    assert backend.requests[0].tool_schemas is not None
    assert runner.calls == 1


def test_run_react_nudges_actionless_turns():
    backend = ScriptedBackend(
        [ChatResponse(content="I wonder what this could be."), final_turn()]
    )
    trace = run_react(make_post(), backend, StubRunner())
    assert trace.steps[0].kind is StepKind.THOUGHT
    assert "Action:" in backend.requests[1].messages[-1].content


def test_run_react_backend_failure_propagates():
    class FailingBackend:
        model_id = "down"
        supports_schema = False
        supports_tool_calls = False

        def complete(self, request: ChatRequest) -> ChatResponse:
            raise BackendUnavailable("offline")

    with pytest.raises(BackendUnavailable):
        run_react(make_post(), FailingBackend(), StubRunner())


def test_run_react_repeated_query_hits_cache_once():
    registry = default_registry()
    cache = InMemoryCache()
    import tempfile
    from pathlib import Path

    with tempfile.TemporaryDirectory() as tmp:
        fetcher = FixtureFetcher(tmp)
        spec = registry.get("search_langchain_docs")
        fixture = fetcher.fixture_path(spec, "memory error")
        fixture.parent.mkdir(parents=True)
        fixture.write_text("<p>ConversationBufferMemory details</p>", encoding="utf-8")
        runner = ToolRunner(registry, fetcher, cache)
        backend = ScriptedBackend(
            [
                ChatResponse(content="Action: search_langchain_docs[memory error]"),
                ChatResponse(content="Action: search_langchain_docs[  Memory   ERROR ]"),
                final_turn(),
            ]
        )
        trace = run_react(make_post(), backend, runner)
        expected = f"[fixture://search_langchain_docs/{fixture.name}]\nConversationBufferMemory details"
    observations = [s.text for s in trace.steps if s.kind is StepKind.OBSERVATION]
    assert observations == [expected] * 2
    assert fetcher.fetch_count == 1
    assert runner.calls == 2
    assert runner.cache_hits == 1
    assert runner.fetch_attempts == 1


def test_null_runner_answers_with_sentinel_and_never_fetches():
    runner = NullToolRunner(default_registry())
    backend = ScriptedBackend(
        [ChatResponse(content="Action: search_crewai_docs[task delegation]"), final_turn()]
    )
    trace = run_react(make_post(), backend, runner)
    observation = [s for s in trace.steps if s.kind is StepKind.OBSERVATION][0]
    assert observation.text == "No results found"
    assert runner.fetch_attempts == 0


# --- prompt rendering ---


def test_render_post_includes_solutions_by_default():
    post = make_post(
        accepted_answer="Pass the memory object in.",
        replies=(
            Reply(AuthorRole.RESPONDER, "Try upgrading.", is_solution=False),
            Reply(AuthorRole.RESPONDER, "Set memory=buffer.", is_solution=True),
        ),
    )
    text = render_post(post)
    assert "Accepted answer:" in text
    assert "Pass the memory object in." in text
    assert "marked as solution" in text
    assert "Set memory=buffer." in text


def test_render_post_can_withhold_solutions():
    post = make_post(
        accepted_answer="Pass the memory object in.",
        replies=(
            Reply(AuthorRole.RESPONDER, "Try upgrading.", is_solution=False),
            Reply(AuthorRole.RESPONDER, "Set memory=buffer.", is_solution=True),
        ),
    )
    text = render_post(post, include_solutions=False)
    # the title-and-body-only condition: no accepted answer, no replies at all
    assert "Pass the memory object in." not in text
    assert "Set memory=buffer." not in text
    assert "Try upgrading." not in text
    assert "The agent forgets previous turns." in text


def test_render_post_clips_huge_diffs():
    diff = "+" + "x" * (DIFF_BYTE_BUDGET * 4)
    post = make_post(
        source=Source.GITHUB_COMMIT,
        diff=diff,
        commit_message="fix tool schema",
    )
    text = render_post(post)
    assert "[... truncated ...]" in text
    assert len(text.encode("utf-8")) < DIFF_BYTE_BUDGET + 2000
    assert "Commit message:" in text


def test_render_post_basic_fields():
    text = render_post(make_post(code_snippets=("agent.run(x)",)))
    assert text.startswith("Source: stack_overflow")
    assert "Title: Memory not kept between calls" in text
    assert "Tags: langchain, python" in text
    assert "agent.run(x)" in text


# --- trace round-trips ---


def hand_trace_steps() -> tuple[ReActStep, ...]:
    return (
        ReActStep(StepKind.THOUGHT, "check the docs\nfor memory", 0),
        ReActStep(
            StepKind.ACTION,
            "search_langchain_docs[memory [buffer]]",
            1,
            ActionDetail("search_langchain_docs", "memory [buffer]"),
        ),
        ReActStep(StepKind.OBSERVATION, "path C:\\temp matters", 2),
        ReActStep(StepKind.FINAL, "Final Answer:\nExplanation: done", 3),
    )


def test_serialize_trace_one_line_per_step():
    text = serialize_trace(hand_trace_steps())
    lines = text.split("\n")
    assert len(lines) == 4
    assert lines[0] == "Thought: check the docs\\nfor memory"
    assert lines[1] == "Action: search_langchain_docs[memory [buffer]]"
    assert lines[2] == "Observation: path C:\\\\temp matters"


def test_trace_text_round_trip():
    steps = hand_trace_steps()
    assert parse_trace(serialize_trace(steps)) == steps


def test_trace_text_round_trip_random():
    rng = random.Random(11)
    alphabet = "ab n[]\\\n:"
    for _ in range(200):
        steps = []
        for _ in range(rng.randrange(1, 6)):
            kind = rng.choice(list(StepKind))
            text = "".join(rng.choice(alphabet) for _ in range(rng.randrange(0, 12)))
            if kind is StepKind.ACTION:
                query = text
                steps.append(
                    ReActStep(kind, f"tool_x[{query}]", len(steps), ActionDetail("tool_x", query))
                )
            else:
                steps.append(ReActStep(kind, text, len(steps)))
        assert parse_trace(serialize_trace(steps)) == tuple(steps)


def test_parse_trace_rejects_garbage():
    with pytest.raises(ValueError):
        parse_trace("Wondering: what is this line")


def test_trace_json_round_trip_and_no_wall_clock():
    backend = ScriptedBackend(
        [
            ChatResponse(
                content="Thought: check\nAction: search_langchain_docs[memory]",
                usage=Usage(50, 10),
            ),
            final_turn(),
        ]
    )
    trace = run_react(make_post(), backend, StubRunner())
    data = trace_to_json_dict(trace)
    assert "wall_ms" not in json.dumps(data)
    restored = trace_from_json_dict(data)
    assert restored.steps == trace.steps
    assert restored.explanation == trace.explanation
    assert restored.total_usage == trace.total_usage


def test_trace_json_is_deterministic_across_runs():
    def one_run() -> str:
        backend = ScriptedBackend(
            [
                ChatResponse(
                    content="Thought: check\nAction: search_langchain_docs[memory]",
                    usage=Usage(50, 10),
                    latency_ms=7,
                ),
                final_turn(),
            ]
        )
        trace = run_react(make_post(), backend, StubRunner())
        return json.dumps(trace_to_json_dict(trace), sort_keys=True)

    assert one_run() == one_run()
