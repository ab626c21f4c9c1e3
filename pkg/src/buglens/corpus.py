"""Ingestion of heterogeneous bug-report sources into one record shape.

Consumes pre-exported JSONL (one post per line); live site crawling is out
of scope. Records are immutable after load and safe for concurrent readers.
"""

from __future__ import annotations

import datetime as dt
import hashlib
import json
from dataclasses import dataclass, replace
from enum import Enum
from pathlib import Path
from typing import Any, Iterable


class Source(str, Enum):
    STACK_OVERFLOW = "stack_overflow"
    GITHUB_COMMIT = "github_commit"
    GITHUB_ISSUE = "github_issue"
    FORUM = "forum"


class AuthorRole(str, Enum):
    ASKER = "asker"
    RESPONDER = "responder"


class ParseError(ValueError):
    """A JSONL line could not be turned into a PostRecord."""

    def __init__(self, line_no: int, reason: str):
        super().__init__(f"line {line_no}: {reason}")
        self.line_no = line_no
        self.reason = reason


@dataclass(frozen=True)
class Reply:
    author_role: AuthorRole
    text: str
    is_solution: bool = False


@dataclass(frozen=True)
class PostRecord:
    """One bug report: a Q&A post, a fix commit, an issue, or a forum thread."""

    post_id: str
    source: Source
    title: str
    body: str
    code_snippets: tuple[str, ...] = ()
    tags: tuple[str, ...] = ()
    created_at: dt.date = dt.date(1970, 1, 1)
    accepted_answer: str | None = None
    replies: tuple[Reply, ...] = ()
    diff: str | None = None
    commit_message: str | None = None
    line_no: int | None = None  # position in the source file, for diagnostics

    def to_json_dict(self) -> dict[str, Any]:
        obj: dict[str, Any] = {
            "post_id": self.post_id,
            "source": self.source.value,
            "title": self.title,
            "body": self.body,
            "code_snippets": list(self.code_snippets),
            "tags": list(self.tags),
            "created_at": self.created_at.isoformat(),
        }
        if self.accepted_answer is not None:
            obj["accepted_answer"] = self.accepted_answer
        if self.replies:
            obj["replies"] = [
                {
                    "author_role": r.author_role.value,
                    "text": r.text,
                    "is_solution": r.is_solution,
                }
                for r in self.replies
            ]
        if self.diff is not None:
            obj["diff"] = self.diff
        if self.commit_message is not None:
            obj["commit_message"] = self.commit_message
        return obj


@dataclass(frozen=True)
class CorpusFilter:
    """Relevance filter: keyword match, code presence, dedup, date cutoff."""

    keyword_list: tuple[str, ...] = ()
    require_code: bool = False
    drop_duplicates: bool = False
    date_cutoff: dt.date | None = None


def _parse_date(value: Any, line_no: int) -> dt.date:
    if not isinstance(value, str):
        raise ParseError(line_no, f"created_at must be an ISO-8601 string, got {value!r}")
    try:
        # Accept a plain date or a full datetime; keep the date part.
        return dt.datetime.fromisoformat(value.replace("Z", "+00:00")).date()
    except ValueError:
        try:
            return dt.date.fromisoformat(value)
        except ValueError:
            raise ParseError(line_no, f"bad created_at: {value!r}") from None


def _record_from_json(obj: dict[str, Any], line_no: int) -> PostRecord:
    for field_name in ("post_id", "source", "title", "body"):
        if field_name not in obj:
            raise ParseError(line_no, f"missing required field {field_name!r}")
    try:
        source = Source(obj["source"])
    except ValueError:
        raise ParseError(line_no, f"unknown source: {obj['source']!r}") from None

    replies = []
    for i, raw in enumerate(obj.get("replies", []) or []):
        try:
            role = AuthorRole(raw["author_role"])
        except (KeyError, ValueError):
            raise ParseError(line_no, f"bad reply #{i}: author_role") from None
        replies.append(
            Reply(role, str(raw.get("text", "")), bool(raw.get("is_solution", False)))
        )

    record = PostRecord(
        post_id=str(obj["post_id"]),
        source=source,
        title=str(obj["title"]),
        body=str(obj["body"]),
        code_snippets=tuple(str(s) for s in obj.get("code_snippets", []) or []),
        tags=tuple(str(t) for t in obj.get("tags", []) or []),
        created_at=_parse_date(obj.get("created_at", "1970-01-01"), line_no),
        accepted_answer=obj.get("accepted_answer"),
        replies=tuple(replies),
        diff=obj.get("diff"),
        commit_message=obj.get("commit_message"),
        line_no=line_no,
    )
    if source is Source.GITHUB_COMMIT and (record.diff is None or record.commit_message is None):
        raise ParseError(line_no, "github_commit records need both diff and commit_message")
    return record


def load_corpus(path: str | Path, format: str = "jsonl") -> list[PostRecord]:
    """Load PostRecords from a line-delimited JSON file, preserving order.

    Blank lines are skipped. Any invalid line aborts the load with a
    ParseError identifying the offending line number.
    """
    if format != "jsonl":
        raise ValueError(f"unsupported corpus format: {format!r}")
    records: list[PostRecord] = []
    text = Path(path).read_text(encoding="utf-8")
    for line_no, line in enumerate(text.splitlines(), start=1):
        if not line.strip():
            continue
        try:
            obj = json.loads(line)
        except json.JSONDecodeError as exc:
            raise ParseError(line_no, f"invalid JSON: {exc}") from None
        if not isinstance(obj, dict):
            raise ParseError(line_no, "line is not a JSON object")
        records.append(_record_from_json(obj, line_no))
    return records


def save_corpus(records: Iterable[PostRecord], path: str | Path) -> None:
    """Write records as JSONL, one object per line, dates ISO-8601."""
    with open(path, "w", encoding="utf-8") as handle:
        for record in records:
            handle.write(json.dumps(record.to_json_dict(), ensure_ascii=False) + "\n")


def _dedup_key(post: PostRecord) -> str:
    # Lowercased title with whitespace collapsed, hashed with the source:
    # the cheapest faithful proxy for "same post seen twice".
    normalized = " ".join(post.title.lower().split())
    return hashlib.sha256(f"{post.source.value}\x00{normalized}".encode()).hexdigest()


def _matches_keywords(post: PostRecord, keywords: tuple[str, ...]) -> bool:
    haystack = f"{post.title}\n{post.body}\n{' '.join(post.tags)}".lower()
    return any(k.lower() in haystack for k in keywords)


def apply_filter(posts: Iterable[PostRecord], f: CorpusFilter) -> list[PostRecord]:
    """Retain posts passing every enabled criterion, in stable order.

    Keyword matching is case-insensitive over title, body, and tags; a post
    passes when at least one keyword occurs. require_code demands at least
    one code snippet; date_cutoff keeps posts created on or before it;
    drop_duplicates removes later posts sharing the dedup key.
    """
    kept: list[PostRecord] = []
    seen: set[str] = set()
    for post in posts:
        if f.keyword_list and not _matches_keywords(post, f.keyword_list):
            continue
        if f.require_code and not post.code_snippets:
            continue
        if f.date_cutoff is not None and post.created_at > f.date_cutoff:
            continue
        if f.drop_duplicates:
            key = _dedup_key(post)
            if key in seen:
                continue
            seen.add(key)
        kept.append(post)
    return kept


def strip_solutions(post: PostRecord) -> PostRecord:
    """Copy of the post without accepted answer or replies (the
    "title and body only" evaluation condition). Idempotent; the original
    is untouched."""
    return replace(post, accepted_answer=None, replies=())


def truncate_text(text: str, budget_bytes: int) -> str:
    """Head-biased truncation to a UTF-8 byte budget, marking the cut."""
    raw = text.encode("utf-8")
    if len(raw) <= budget_bytes:
        return text
    marker = "\n[... truncated ...]"
    keep = max(0, budget_bytes - len(marker.encode("utf-8")))
    head = raw[:keep].decode("utf-8", errors="ignore")
    return head + marker


# Commit diffs can be arbitrarily large; bounded context is enough for
# classification, so prompts get at most this many bytes of diff.
DIFF_BYTE_BUDGET = 16 * 1024
