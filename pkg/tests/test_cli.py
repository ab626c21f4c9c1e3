"""End-to-end command tests driven through main() with scripted backends
and temp directories; no network, no real model."""

from __future__ import annotations

import datetime as dt
import json
from pathlib import Path

import pytest

from buglens.cli import EXIT_BACKEND, EXIT_DATA, EXIT_OK, EXIT_USAGE, main
from buglens.corpus import AuthorRole, PostRecord, Reply, Source, load_corpus, save_corpus
from buglens.taxonomy import (
    AgentComponent,
    AnnotationRecord,
    BugType,
    Effect,
    RootCause,
    records_from_jsonl,
    records_to_jsonl,
)
from buglens.toolbox import JsonFileCache

LABELS = {
    "bug_type": "Configuration Bug",
    "root_cause": "API Misuse",
    "root_cause_subclass": "Wrong API Context",
    "effect": "Crash",
    "component": "Tools",
    "language": "python",
    "framework": "langchain",
    "rationale_bug_type": "the report shows a bad retriever setting",
    "rationale_root_cause": "the API is called with the wrong context",
    "rationale_effect": "the traceback ends the run",
}

FINAL_TURN = (
    "Final answer:\n"
    "Explanation: The retriever configuration drops the memory key.\n"
    "Reasoning: The stack trace points at setup, not runtime."
)


def write_corpus(path: Path, post_ids) -> list[PostRecord]:
    posts = [
        PostRecord(
            post_id=pid,
            source=Source.FORUM,
            title=f"Agent crashes on start ({pid})",
            body="The agent raises KeyError right after the first tool call.",
            created_at=dt.date(2023, 3, 4),
        )
        for pid in post_ids
    ]
    save_corpus(posts, path)
    return posts


def write_script(path: Path, entries) -> None:
    path.write_text(json.dumps(entries), encoding="utf-8")


def turn(content: str, input_tokens=100, output_tokens=20) -> dict:
    return {
        "content": content,
        "usage": {"input_tokens": input_tokens, "output_tokens": output_tokens},
    }


def two_stage_script(path: Path, posts: int) -> None:
    entries = []
    for _ in range(posts):
        entries.append(turn(FINAL_TURN))
        entries.append(turn(json.dumps(LABELS), input_tokens=80, output_tokens=40))
    write_script(path, entries)


def make_annotation(post_id: str, bug_type=BugType.CONFIGURATION, annotator="human") -> AnnotationRecord:
    return AnnotationRecord(
        post_id=post_id,
        bug_index=0,
        bug_type=bug_type,
        root_cause=RootCause.API_MISUSE,
        effect=Effect.CRASH,
        component=AgentComponent.TOOLS,
        language="python",
        framework="langchain",
        rationale_bug_type="stated",
        rationale_root_cause="stated",
        rationale_effect="stated",
        annotator=annotator,
    )


def annotate_args(corpus: Path, out: Path, script: Path, fixtures: Path, *extra) -> list[str]:
    return [
        "annotate",
        "--corpus", str(corpus),
        "--out-dir", str(out),
        "--backend", "scripted",
        "--script", str(script),
        "--offline",
        "--fixture-dir", str(fixtures),
        *extra,
    ]


def test_annotate_sorts_output_and_writes_summary(tmp_path, capsys):
    corpus = tmp_path / "corpus.jsonl"
    write_corpus(corpus, ["b1", "a1"])  # deliberately unsorted on disk
    script = tmp_path / "script.json"
    two_stage_script(script, posts=2)
    fixtures = tmp_path / "fixtures"
    fixtures.mkdir()
    out = tmp_path / "out"

    code = main(annotate_args(corpus, out, script, fixtures))
    assert code == EXIT_OK

    records = records_from_jsonl((out / "annotations.jsonl").read_text(encoding="utf-8"))
    assert [r.post_id for r in records] == ["a1", "b1"]
    assert all(r.bug_type is BugType.CONFIGURATION for r in records)

    summary = json.loads((out / "run_summary.json").read_text(encoding="utf-8"))
    assert summary["totals"]["posts"] == 2
    assert summary["totals"]["failures"] == 0
    assert summary["totals"]["fetches"] == 0  # script never took an action
    assert [p["post_id"] for p in summary["posts"]] == ["a1", "b1"]
    assert all("time_s" in p and "cost_usd" in p for p in summary["posts"])
    assert "annotated 2/2" in capsys.readouterr().out


def test_annotate_identical_runs_give_identical_bytes(tmp_path):
    corpus = tmp_path / "corpus.jsonl"
    write_corpus(corpus, ["p1", "p2"])
    script = tmp_path / "script.json"
    two_stage_script(script, posts=2)
    fixtures = tmp_path / "fixtures"
    fixtures.mkdir()

    outputs = []
    for run in ("one", "two"):
        out = tmp_path / run
        traces = tmp_path / f"traces_{run}"
        code = main(annotate_args(corpus, out, script, fixtures, "--trace-dir", str(traces)))
        assert code == EXIT_OK
        outputs.append(
            (
                (out / "annotations.jsonl").read_bytes(),
                (traces / "p1.json").read_bytes(),
                (traces / "p2.json").read_bytes(),
            )
        )
    assert outputs[0] == outputs[1]


def test_annotate_offline_needs_fixture_dir(tmp_path):
    corpus = tmp_path / "corpus.jsonl"
    write_corpus(corpus, ["p1"])
    script = tmp_path / "script.json"
    two_stage_script(script, posts=1)
    out = tmp_path / "out"
    code = main(
        [
            "annotate",
            "--corpus", str(corpus),
            "--out-dir", str(out),
            "--backend", "scripted",
            "--script", str(script),
            "--offline",
        ]
    )
    assert code == EXIT_USAGE
    assert not (out / "annotations.jsonl").exists()  # failed before any work


def test_annotate_react_no_tools_shows_zero_fetches(tmp_path):
    corpus = tmp_path / "corpus.jsonl"
    write_corpus(corpus, ["p1"])
    script = tmp_path / "script.json"
    two_stage_script(script, posts=1)
    out = tmp_path / "out"
    code = main(
        [
            "annotate",
            "--corpus", str(corpus),
            "--out-dir", str(out),
            "--mode", "react_no_tools",
            "--backend", "scripted",
            "--script", str(script),
        ]
    )
    assert code == EXIT_OK
    summary = json.loads((out / "run_summary.json").read_text(encoding="utf-8"))
    assert summary["totals"]["fetches"] == 0
    assert summary["totals"]["annotated"] == 1


def test_annotate_records_failures_and_exits_nonzero(tmp_path):
    corpus = tmp_path / "corpus.jsonl"
    write_corpus(corpus, ["p1", "p2"])
    script = tmp_path / "script.json"
    two_stage_script(script, posts=1)  # second post will exhaust the script
    fixtures = tmp_path / "fixtures"
    fixtures.mkdir()
    out = tmp_path / "out"

    code = main(annotate_args(corpus, out, script, fixtures))
    assert code == EXIT_BACKEND

    records = records_from_jsonl((out / "annotations.jsonl").read_text(encoding="utf-8"))
    assert [r.post_id for r in records] == ["p1"]
    summary = json.loads((out / "run_summary.json").read_text(encoding="utf-8"))
    assert summary["totals"]["failures"] == 1
    failed = [p for p in summary["posts"] if "error" in p]
    assert len(failed) == 1 and failed[0]["post_id"] == "p2"


def test_annotate_prices_checked_before_work(tmp_path):
    corpus = tmp_path / "corpus.jsonl"
    write_corpus(corpus, ["p1"])
    script = tmp_path / "script.json"
    two_stage_script(script, posts=1)
    fixtures = tmp_path / "fixtures"
    fixtures.mkdir()
    prices = tmp_path / "prices.json"
    prices.write_text(json.dumps({"some-other-model": {
        "usd_per_million_input_tokens": 1.0, "usd_per_million_output_tokens": 2.0}}))
    out = tmp_path / "out"
    code = main(annotate_args(corpus, out, script, fixtures, "--price-table", str(prices)))
    assert code == EXIT_DATA
    assert not (out / "annotations.jsonl").exists()


def test_annotate_computes_cost_from_price_table(tmp_path):
    corpus = tmp_path / "corpus.jsonl"
    write_corpus(corpus, ["p1"])
    script = tmp_path / "script.json"
    two_stage_script(script, posts=1)
    fixtures = tmp_path / "fixtures"
    fixtures.mkdir()
    prices = tmp_path / "prices.json"
    prices.write_text(json.dumps({"priced-model": {
        "usd_per_million_input_tokens": 1.0, "usd_per_million_output_tokens": 2.0}}))
    out = tmp_path / "out"
    code = main(
        annotate_args(
            corpus, out, script, fixtures,
            "--price-table", str(prices), "--model", "priced-model",
        )
    )
    assert code == EXIT_OK
    summary = json.loads((out / "run_summary.json").read_text(encoding="utf-8"))
    # two turns: 100+80 input tokens, 20+40 output tokens
    expected = (180 / 1e6) * 1.0 + (60 / 1e6) * 2.0
    assert abs(summary["posts"][0]["cost_usd"] - expected) < 1e-15
    assert summary["model"] == "priced-model"


def test_evaluate_perfect_predictions(tmp_path):
    records = [make_annotation(f"p{i}") for i in range(3)]
    gold = tmp_path / "gold.jsonl"
    gold.write_text(records_to_jsonl(records), encoding="utf-8")
    pred = tmp_path / "pred.jsonl"
    pred.write_text(records_to_jsonl([make_annotation(f"p{i}", annotator="model") for i in range(3)]), encoding="utf-8")
    out = tmp_path / "eval"

    code = main(["evaluate", "--gold", str(gold), "--pred", str(pred), "--out-dir", str(out)])
    assert code == EXIT_OK
    f1_lines = (out / "f1.csv").read_text(encoding="utf-8").strip().split("\n")
    assert "bug_type,1.000000,1.000000" in f1_lines
    match_text = (out / "match.csv").read_text(encoding="utf-8")
    assert "with_replies,overall,1.000000" in match_text
    for category in ("bug_type", "root_cause", "effect", "component"):
        assert (out / "confusion" / f"{category}.csv").exists()


def test_evaluate_reports_orphans(tmp_path, capsys):
    gold = tmp_path / "gold.jsonl"
    gold.write_text(records_to_jsonl([make_annotation("p1"), make_annotation("p2")]), encoding="utf-8")
    pred = tmp_path / "pred.jsonl"
    pred.write_text(records_to_jsonl([make_annotation("p1", annotator="model")]), encoding="utf-8")
    code = main(["evaluate", "--gold", str(gold), "--pred", str(pred), "--out-dir", str(tmp_path / "o")])
    assert code == EXIT_DATA
    assert "p2" in capsys.readouterr().err


def test_agree_writes_kappa_curve(tmp_path):
    types = [BugType.CONFIGURATION, BugType.LOGIC, BugType.MODEL, BugType.PARSING, BugType.API]
    a = [make_annotation(f"p{i}", bug_type=types[i % len(types)], annotator="a") for i in range(10)]
    b = [make_annotation(f"p{i}", bug_type=types[i % len(types)], annotator="b") for i in range(10)]
    file_a = tmp_path / "a.jsonl"
    file_a.write_text(records_to_jsonl(a), encoding="utf-8")
    file_b = tmp_path / "b.jsonl"
    file_b.write_text(records_to_jsonl(b), encoding="utf-8")
    out = tmp_path / "agree"

    code = main(["agree", "--annotator-a", str(file_a), "--annotator-b", str(file_b), "--out-dir", str(out)])
    assert code == EXIT_OK
    lines = (out / "kappa_curve.csv").read_text(encoding="utf-8").strip().split("\n")
    assert lines[1] == "fraction,items,bug_type,root_cause,effect,component"
    assert len(lines) == 2 + 11
    assert lines[-1].startswith("1,10,1.000000")

    code = main([
        "agree", "--annotator-a", str(file_a), "--annotator-b", str(file_b),
        "--out-dir", str(out), "--fractions", "0.5,1.0",
    ])
    assert code == EXIT_OK
    lines = (out / "kappa_curve.csv").read_text(encoding="utf-8").strip().split("\n")
    assert len(lines) == 2 + 2


def test_report_distribution(tmp_path, capsys):
    records = [make_annotation(f"p{i}") for i in range(2)]
    records += [make_annotation(f"q{i}", bug_type=BugType.LOGIC) for i in range(2)]
    annotations = tmp_path / "ann.jsonl"
    annotations.write_text(records_to_jsonl(records), encoding="utf-8")

    out_csv = tmp_path / "dist.csv"
    code = main([
        "report", "--annotations", str(annotations),
        "--group-by", "bug_type", "--output", str(out_csv),
    ])
    assert code == EXIT_OK
    text = out_csv.read_text(encoding="utf-8")
    assert text.startswith("group,count,pct\n")
    assert "CB,2,50.00" in text

    code = main(["report", "--annotations", str(annotations), "--group-by", "bug_type"])
    assert code == EXIT_OK
    assert "group" in capsys.readouterr().out


def test_report_year_axis_needs_corpus(tmp_path):
    annotations = tmp_path / "ann.jsonl"
    annotations.write_text(records_to_jsonl([make_annotation("p1")]), encoding="utf-8")
    code = main(["report", "--annotations", str(annotations), "--group-by", "year"])
    assert code == EXIT_USAGE

    corpus = tmp_path / "corpus.jsonl"
    write_corpus(corpus, ["p1"])
    code = main([
        "report", "--annotations", str(annotations),
        "--group-by", "year", "--corpus", str(corpus),
    ])
    assert code == EXIT_OK


def test_ingest_strip_solutions(tmp_path):
    raw = tmp_path / "raw.jsonl"
    posts = [
        PostRecord(
            post_id="p1",
            source=Source.FORUM,
            title="t",
            body="b",
            accepted_answer="use the other flag",
            replies=(Reply(AuthorRole.RESPONDER, "try x", is_solution=True),),
        )
    ]
    save_corpus(posts, raw)
    cleaned = tmp_path / "clean.jsonl"
    code = main(["ingest", "--input", str(raw), "--output", str(cleaned), "--strip-solutions"])
    assert code == EXIT_OK
    loaded = load_corpus(cleaned)
    assert loaded[0].accepted_answer is None
    assert loaded[0].replies == ()


def test_cache_stats_and_clear(tmp_path, capsys):
    cache_file = tmp_path / "cache.json"
    JsonFileCache(cache_file).put("k1", {"summary": "s", "urls": []})

    assert main(["cache", "stats", "--cache-file", str(cache_file)]) == EXIT_OK
    stats = json.loads(capsys.readouterr().out)
    assert stats["entries"] == 1

    assert main(["cache", "clear", "--cache-file", str(cache_file)]) == EXIT_OK
    capsys.readouterr()
    assert main(["cache", "stats", "--cache-file", str(cache_file)]) == EXIT_OK
    assert json.loads(capsys.readouterr().out)["entries"] == 0


def test_usage_errors_exit_one(tmp_path, capsys):
    corpus = tmp_path / "corpus.jsonl"
    write_corpus(corpus, ["p1"])
    out = str(tmp_path / "out")

    assert main(["frobnicate"]) == EXIT_USAGE
    assert main(["annotate", "--corpus", str(corpus), "--out-dir", out,
                 "--backend", "scripted"]) == EXIT_USAGE  # no --script
    assert main(["annotate", "--corpus", str(corpus), "--out-dir", out,
                 "--backend", "scripted", "--script", "s.json",
                 "--workers", "0"]) == EXIT_USAGE
    script = tmp_path / "script.json"
    two_stage_script(script, posts=1)
    assert main(["annotate", "--corpus", str(corpus), "--out-dir", out,
                 "--backend", "scripted", "--script", str(script),
                 "--mode", "one_shot"]) == EXIT_USAGE  # no exemplar files
    capsys.readouterr()  # argparse noise is not part of the assertions


def test_annotate_rejects_unknown_disabled_tool(tmp_path):
    corpus = tmp_path / "corpus.jsonl"
    write_corpus(corpus, ["p1"])
    script = tmp_path / "script.json"
    two_stage_script(script, posts=1)
    fixtures = tmp_path / "fixtures"
    fixtures.mkdir()
    code = main(
        annotate_args(corpus, tmp_path / "out", script, fixtures,
                      "--disable-tool", "search_everything")
    )
    assert code == EXIT_USAGE
