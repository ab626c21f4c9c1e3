"""Command-line surface: ingest, annotate, evaluate, agree, report, cache.

Exit codes: 0 success, 1 usage or configuration error, 2 data error
(unreadable or inconsistent inputs), 3 backend error (any post failed hard
during annotation). Batch annotation records per-post failures instead of
aborting; outputs are sorted by (post_id, bug_index) so identical inputs
give identical bytes.
"""

from __future__ import annotations

import argparse
import datetime as dt
import json
import sys
import time
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass
from pathlib import Path
from typing import Sequence

from .classifier import Mode, annotate_post, build_one_shot_exemplars, default_kit
from .corpus import (
    CorpusFilter,
    ParseError,
    PostRecord,
    apply_filter,
    load_corpus,
    save_corpus,
    strip_solutions,
)
from .evaluation import (
    DEFAULT_FRACTIONS,
    LABEL_CATEGORIES,
    AlignmentError,
    EmptyInput,
    MatchCondition,
    align_pairs,
    build_eval_report,
    confusion_csv,
    distribution_csv,
    distribution_report,
    f1_csv,
    format_table,
    kappa_curve,
    kappa_curve_csv,
    match_csv,
    match_rate,
    subclass_conditional_accuracy,
)
from .gateway import (
    BackendUnavailable,
    OpenAIChatBackend,
    PriceTable,
    ScriptedBackend,
    UnknownModel,
    accumulate_cost,
    script_from_file,
)
from .react import DEFAULT_MAX_ITERATIONS, ReActLimits, ToolRunner, trace_to_json_dict
from .taxonomy import AnnotationRecord, records_from_jsonl, records_to_jsonl
from .toolbox import (
    DEFAULT_TOOLS,
    FixtureFetcher,
    HttpFetcher,
    InMemoryCache,
    JsonFileCache,
    ToolRegistry,
)

EXIT_OK = 0
EXIT_USAGE = 1
EXIT_DATA = 2
EXIT_BACKEND = 3

_REPORT_AXES = ("bug_type", "root_cause", "effect", "component", "language", "framework", "year")


class UsageError(ValueError):
    """Bad flag combination; reported before any work starts."""


@dataclass(frozen=True)
class RunConfig:
    """Everything one annotation run needs beyond the corpus itself."""

    model: str
    mode: Mode
    backend_kind: str = "openai"  # or "scripted"
    script: str | None = None
    include_solutions: bool = True
    max_iterations: int = DEFAULT_MAX_ITERATIONS
    disabled_tools: tuple[str, ...] = ()
    offline: bool = False
    fixture_dir: str | None = None
    price_table: str | None = None
    workers: int = 1
    trace_dir: str | None = None
    cache_file: str | None = None
    exemplar_corpus: str | None = None
    exemplar_annotations: str | None = None

    def __post_init__(self):
        if self.workers < 1:
            raise UsageError("--workers must be at least 1")
        if self.offline and not self.fixture_dir:
            raise UsageError("--offline needs --fixture-dir")
        if self.backend_kind == "scripted" and not self.script:
            raise UsageError("--backend scripted needs --script")
        if self.backend_kind not in ("openai", "scripted"):
            raise UsageError(f"unknown backend: {self.backend_kind}")
        known = {spec.name for spec in DEFAULT_TOOLS}
        for name in self.disabled_tools:
            if name not in known:
                raise UsageError(f"cannot disable unknown tool: {name}")


def _build_backend(config: RunConfig):
    if config.backend_kind == "scripted":
        return ScriptedBackend(script_from_file(config.script), model_id=config.model)
    return OpenAIChatBackend(model_id=config.model)


def _read_annotations(path: str) -> list[AnnotationRecord]:
    return records_from_jsonl(Path(path).read_text(encoding="utf-8"))


def _data_error(exc: Exception) -> int:
    print(f"data error: {exc}", file=sys.stderr)
    return EXIT_DATA


def cmd_annotate(corpus_path: str, out_dir: str, config: RunConfig) -> int:
    try:
        posts = load_corpus(corpus_path)
        prices = PriceTable.from_file(config.price_table) if config.price_table else None
        if prices is not None:
            prices.get(config.model)  # fail before any work, not per post
        backend = _build_backend(config)
        exemplars = _load_exemplars(config, backend)
    except UsageError:
        raise
    except (OSError, ParseError, ValueError, UnknownModel) as exc:
        return _data_error(exc)
    except BackendUnavailable as exc:
        print(f"backend error: {exc}", file=sys.stderr)
        return EXIT_BACKEND

    kit = default_kit(config.mode, exemplars)
    limits = ReActLimits(
        max_iterations=config.max_iterations,
        include_solutions=config.include_solutions,
    )
    runner = None
    if config.mode is Mode.TWO_STAGE:
        registry = ToolRegistry(
            s for s in DEFAULT_TOOLS if s.name not in config.disabled_tools
        )
        cache = JsonFileCache(config.cache_file) if config.cache_file else InMemoryCache()
        fetcher = FixtureFetcher(config.fixture_dir) if config.offline else HttpFetcher()
        runner = ToolRunner(registry, fetcher, cache, backend)

    def work(post: PostRecord):
        started = time.monotonic()
        try:
            outcome = annotate_post(post, backend, kit, runner=runner, limits=limits)
            return post.post_id, outcome, None, time.monotonic() - started
        except Exception as exc:
            detail = f"{type(exc).__name__}: {exc}"
            return post.post_id, None, detail, time.monotonic() - started

    with ThreadPoolExecutor(max_workers=config.workers) as pool:
        results = list(pool.map(work, posts))

    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    outcomes = sorted(
        (r[1] for r in results if r[1] is not None),
        key=lambda o: (o.record.post_id, o.record.bug_index),
    )
    (out / "annotations.jsonl").write_text(
        records_to_jsonl([o.record for o in outcomes]), encoding="utf-8"
    )

    if config.trace_dir:
        trace_dir = Path(config.trace_dir)
        trace_dir.mkdir(parents=True, exist_ok=True)
        for outcome in outcomes:
            if outcome.trace is not None:
                blob = json.dumps(trace_to_json_dict(outcome.trace), sort_keys=True, indent=2)
                (trace_dir / f"{outcome.trace.post_id}.json").write_text(
                    blob + "\n", encoding="utf-8"
                )

    per_post = []
    total_cost = 0.0
    total_time = 0.0
    for post_id, outcome, error, elapsed in sorted(results, key=lambda r: r[0]):
        entry: dict = {"post_id": post_id, "time_s": round(elapsed, 6)}
        if outcome is not None:
            cost = (
                accumulate_cost([outcome.usage], config.model, prices) if prices else 0.0
            )
            entry.update(
                cost_usd=cost,
                input_tokens=outcome.usage.input_tokens,
                output_tokens=outcome.usage.output_tokens,
                estimated=outcome.usage.estimated,
            )
            total_cost += cost
        else:
            entry.update(cost_usd=0.0, error=error)
        total_time += elapsed
        per_post.append(entry)
    failures = sum(1 for _, outcome, _, _ in results if outcome is None)
    summary = {
        "model": config.model,
        "mode": config.mode.value,
        "posts": per_post,
        "totals": {
            "posts": len(posts),
            "annotated": len(outcomes),
            "failures": failures,
            "time_s": round(total_time, 6),
            "cost_usd": total_cost,
            "fetches": runner.fetch_attempts if runner else 0,
            "tool_calls": runner.calls if runner else 0,
            "cache_hits": runner.cache_hits if runner else 0,
        },
    }
    (out / "run_summary.json").write_text(
        json.dumps(summary, sort_keys=True, indent=2) + "\n", encoding="utf-8"
    )
    print(
        f"annotated {len(outcomes)}/{len(posts)} posts "
        f"({failures} failed) -> {out / 'annotations.jsonl'}"
    )
    return EXIT_BACKEND if failures else EXIT_OK


def _load_exemplars(config: RunConfig, backend):
    if config.mode is not Mode.ONE_SHOT:
        return ()
    if not (config.exemplar_corpus and config.exemplar_annotations):
        raise UsageError("--mode one_shot needs --exemplar-corpus and --exemplar-annotations")
    posts = {p.post_id: p for p in load_corpus(config.exemplar_corpus)}
    gold = []
    for record in _read_annotations(config.exemplar_annotations):
        if record.post_id in posts:
            gold.append((posts[record.post_id], record))
    return build_one_shot_exemplars(gold, backend)


def cmd_evaluate(gold_path: str, pred_path: str, out_dir: str, condition: MatchCondition) -> int:
    try:
        gold = _read_annotations(gold_path)
        pred = _read_annotations(pred_path)
        pairs = align_pairs(gold, pred)
        report = build_eval_report(pairs)
    except AlignmentError as exc:
        print(f"data error: annotations do not align: {exc}", file=sys.stderr)
        return EXIT_DATA
    except (OSError, EmptyInput, ValueError) as exc:
        return _data_error(exc)

    out = Path(out_dir)
    (out / "confusion").mkdir(parents=True, exist_ok=True)
    (out / "f1.csv").write_text(f1_csv(report), encoding="utf-8")
    rates = match_rate(pairs, condition=condition)
    text = match_csv(rates, condition)
    sub = subclass_conditional_accuracy(pairs)
    if sub is not None:
        text += f"{condition.value},root_cause_subclass,{sub:.6f}\n"
    (out / "match.csv").write_text(text, encoding="utf-8")
    for category in LABEL_CATEGORIES:
        (out / "confusion" / f"{category}.csv").write_text(
            confusion_csv(report.confusion[category]), encoding="utf-8"
        )

    rows = [
        (c, f"{report.macro_f1[c]:.4f}", f"{report.accuracy[c]:.4f}")
        for c in LABEL_CATEGORIES
    ]
    print(format_table(("category", "macro_f1", "accuracy"), rows))
    print(f"\noverall match rate: {report.match_rate:.4f} ({len(pairs)} pairs)")
    return EXIT_OK


def cmd_agree(path_a: str, path_b: str, out_dir: str, fractions: Sequence[float]) -> int:
    try:
        points = kappa_curve(_read_annotations(path_a), _read_annotations(path_b), fractions)
    except AlignmentError as exc:
        print(f"data error: annotations do not align: {exc}", file=sys.stderr)
        return EXIT_DATA
    except (OSError, EmptyInput, ValueError) as exc:
        return _data_error(exc)
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    (out / "kappa_curve.csv").write_text(kappa_curve_csv(points), encoding="utf-8")
    rows = [
        (f"{p.fraction:g}", str(p.items), *(f"{p.kappas[c]:.4f}" for c in LABEL_CATEGORIES))
        for p in points
    ]
    print(format_table(("fraction", "items", *LABEL_CATEGORIES), rows))
    return EXIT_OK


def cmd_ingest(args) -> int:
    try:
        posts = load_corpus(args.input)
        cutoff = dt.date.fromisoformat(args.since) if args.since else None
        posts = apply_filter(
            posts,
            CorpusFilter(
                keyword_list=tuple(args.keyword or ()),
                require_code=args.require_code,
                drop_duplicates=args.drop_duplicates,
                date_cutoff=cutoff,
            ),
        )
        if args.strip_solutions:
            posts = [strip_solutions(p) for p in posts]
        Path(args.output).parent.mkdir(parents=True, exist_ok=True)
        save_corpus(posts, args.output)
    except (OSError, ParseError, ValueError) as exc:
        return _data_error(exc)
    print(f"kept {len(posts)} posts -> {args.output}")
    return EXIT_OK


def cmd_report(args) -> int:
    try:
        annotations = _read_annotations(args.annotations)
        posts = load_corpus(args.corpus) if args.corpus else None
        table = distribution_report(annotations, args.group_by, cross=args.cross, posts=posts)
    except (OSError, ParseError) as exc:
        return _data_error(exc)
    except ValueError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    if args.output:
        Path(args.output).parent.mkdir(parents=True, exist_ok=True)
        Path(args.output).write_text(distribution_csv(table), encoding="utf-8")
        print(f"wrote {args.output}")
    else:
        if table.cross is None:
            rows = [(r.group, str(r.count), f"{r.pct:.2f}") for r in table.rows]
            print(format_table(("group", "count", "pct"), rows))
        else:
            rows = [
                (r.group, r.cross_value, str(r.count), f"{r.pct:.2f}") for r in table.rows
            ]
            print(format_table(("group", "cross", "count", "pct"), rows))
    return EXIT_OK


def cmd_cache(args) -> int:
    cache = JsonFileCache(args.cache_file)
    if args.action == "stats":
        print(json.dumps(cache.stats(), sort_keys=True))
    else:
        cache.clear()
        print("cache cleared")
    return EXIT_OK


class _Parser(argparse.ArgumentParser):
    """argparse, but usage problems exit 1 to match the documented codes."""

    def error(self, message):
        self.print_usage(sys.stderr)
        self.exit(EXIT_USAGE, f"{self.prog}: error: {message}\n")


def build_parser() -> _Parser:
    parser = _Parser(prog="buglens", description="Annotate and score LLM-agent bug reports.")
    sub = parser.add_subparsers(dest="command", required=True, parser_class=_Parser)

    p = sub.add_parser("ingest", help="filter a raw post corpus")
    p.add_argument("--input", required=True)
    p.add_argument("--output", required=True)
    p.add_argument("--keyword", action="append", help="keep posts mentioning this (repeatable)")
    p.add_argument("--require-code", action="store_true")
    p.add_argument("--drop-duplicates", action="store_true")
    p.add_argument("--since", help="keep posts from this ISO date on")
    p.add_argument("--strip-solutions", action="store_true")
    p.set_defaults(func=cmd_ingest)

    p = sub.add_parser("annotate", help="label every post in a corpus")
    p.add_argument("--corpus", required=True)
    p.add_argument("--out-dir", required=True)
    p.add_argument("--mode", choices=[m.value for m in Mode], default=Mode.TWO_STAGE.value)
    p.add_argument("--backend", choices=["openai", "scripted"], default="openai")
    p.add_argument("--model", default="gpt-4o")
    p.add_argument("--script", help="canned responses for --backend scripted")
    p.add_argument("--offline", action="store_true")
    p.add_argument("--fixture-dir", help="canned web pages; required with --offline")
    p.add_argument("--price-table", help="JSON of per-model token prices")
    p.add_argument("--workers", type=int, default=1)
    p.add_argument("--trace-dir", help="write one investigation trace JSON per post")
    p.add_argument("--max-iterations", type=int, default=DEFAULT_MAX_ITERATIONS)
    p.add_argument(
        "--include-solutions",
        action=argparse.BooleanOptionalAction,
        default=True,
        help="show accepted answers and replies to the model",
    )
    p.add_argument("--disable-tool", action="append", default=[])
    p.add_argument("--cache-file", help="persistent web cache (JSON file)")
    p.add_argument("--exemplar-corpus", help="posts for one_shot exemplars")
    p.add_argument("--exemplar-annotations", help="gold labels for one_shot exemplars")
    p.set_defaults(func=_handle_annotate)

    p = sub.add_parser("evaluate", help="score predictions against gold annotations")
    p.add_argument("--gold", required=True)
    p.add_argument("--pred", required=True)
    p.add_argument("--out-dir", required=True)
    p.add_argument(
        "--condition",
        choices=[c.value for c in MatchCondition],
        default=MatchCondition.WITH_REPLIES.value,
    )
    p.set_defaults(
        func=lambda a: cmd_evaluate(a.gold, a.pred, a.out_dir, MatchCondition(a.condition))
    )

    p = sub.add_parser("agree", help="inter-annotator kappa over growing prefixes")
    p.add_argument("--annotator-a", required=True)
    p.add_argument("--annotator-b", required=True)
    p.add_argument("--out-dir", required=True)
    p.add_argument("--fractions", help="comma-separated, e.g. 0.5,1.0")
    p.set_defaults(
        func=lambda a: cmd_agree(
            a.annotator_a,
            a.annotator_b,
            a.out_dir,
            tuple(float(x) for x in a.fractions.split(",")) if a.fractions else DEFAULT_FRACTIONS,
        )
    )

    p = sub.add_parser("report", help="distribution tables over annotations")
    p.add_argument("--annotations", required=True)
    p.add_argument("--group-by", required=True, choices=_REPORT_AXES)
    p.add_argument("--cross", choices=_REPORT_AXES)
    p.add_argument("--corpus", help="posts, needed for the year axis")
    p.add_argument("--output", help="CSV path; prints a table when omitted")
    p.set_defaults(func=cmd_report)

    p = sub.add_parser("cache", help="inspect or clear the web cache")
    p.add_argument("action", choices=["stats", "clear"])
    p.add_argument("--cache-file", required=True)
    p.set_defaults(func=cmd_cache)

    return parser


def _handle_annotate(args) -> int:
    config = RunConfig(
        model=args.model,
        mode=Mode(args.mode),
        backend_kind=args.backend,
        script=args.script,
        include_solutions=args.include_solutions,
        max_iterations=args.max_iterations,
        disabled_tools=tuple(args.disable_tool),
        offline=args.offline,
        fixture_dir=args.fixture_dir,
        price_table=args.price_table,
        workers=args.workers,
        trace_dir=args.trace_dir,
        cache_file=args.cache_file,
        exemplar_corpus=args.exemplar_corpus,
        exemplar_annotations=args.exemplar_annotations,
    )
    return cmd_annotate(args.corpus, args.out_dir, config)


def main(argv: Sequence[str] | None = None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:  # argparse printed the message already
        return exc.code if isinstance(exc.code, int) else EXIT_USAGE
    try:
        return args.func(args)
    except UsageError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_USAGE


if __name__ == "__main__":
    sys.exit(main())
