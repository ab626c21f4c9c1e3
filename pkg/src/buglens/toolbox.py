"""Web-knowledge tools for the annotation agent.

Each tool searches one documentation site or community forum, fetches the
top hits, reduces them to readable text, and compresses that to a short
summary. Summaries are cached under a digest of (tool, normalized query)
so repeated questions never refetch. Failures degrade to a sentinel string
instead of raising past the tool boundary.
"""

from __future__ import annotations

import hashlib
import json
import logging
import os
import re
import tempfile
import threading
import time
from dataclasses import dataclass
from html.parser import HTMLParser
from pathlib import Path
from typing import Callable, Iterable, Protocol
from urllib.parse import quote_plus, urljoin, urlparse

import httpx

from .gateway import Backend, BackendUnavailable, ChatRequest, Message

log = logging.getLogger(__name__)

# Exact sentinel returned for zero hits and for degraded fetches.
NO_RESULTS = "No results found"

SUMMARY_BUDGET_CHARS = 1500
MAX_SUMMARY_INPUT_CHARS = 40_000
TOP_K = 5
FETCH_TIMEOUT_S = 20.0
MIN_HOST_INTERVAL_S = 1.0


class FetchFailure(RuntimeError):
    """Search or page retrieval failed for transient-looking reasons."""


class UnknownTool(KeyError):
    pass


@dataclass(frozen=True)
class ToolSpec:
    """One searchable knowledge source.

    search_url is a template with a {query} placeholder; host scopes which
    result links are worth following and which politeness bucket applies.
    """

    name: str
    description: str
    search_url: str
    host: str


DEFAULT_TOOLS: tuple[ToolSpec, ...] = (
    ToolSpec(
        "search_langchain_docs",
        "Search the LangChain (Python) documentation.",
        "https://python.langchain.com/search?q={query}",
        "python.langchain.com",
    ),
    ToolSpec(
        "search_langchainjs_docs",
        "Search the LangChain.js documentation.",
        "https://js.langchain.com/search?q={query}",
        "js.langchain.com",
    ),
    ToolSpec(
        "search_langgraph_docs",
        "Search the LangGraph documentation.",
        "https://langchain-ai.github.io/langgraph/search/?q={query}",
        "langchain-ai.github.io",
    ),
    ToolSpec(
        "search_pydantic_docs",
        "Search the Pydantic documentation.",
        "https://docs.pydantic.dev/latest/search/?q={query}",
        "docs.pydantic.dev",
    ),
    ToolSpec(
        "search_crewai_docs",
        "Search the CrewAI documentation.",
        "https://docs.crewai.com/search?q={query}",
        "docs.crewai.com",
    ),
    ToolSpec(
        "search_llamaindex_docs",
        "Search the LlamaIndex documentation.",
        "https://docs.llamaindex.ai/en/stable/search.html?q={query}",
        "docs.llamaindex.ai",
    ),
    ToolSpec(
        "search_semantic_kernel_docs",
        "Search the Semantic Kernel documentation.",
        "https://learn.microsoft.com/en-us/search/?terms={query}&scope=semantic-kernel",
        "learn.microsoft.com",
    ),
    ToolSpec(
        "search_autogen_docs",
        "Search the AutoGen documentation.",
        "https://microsoft.github.io/autogen/search?q={query}",
        "microsoft.github.io",
    ),
    ToolSpec(
        "search_openai_community",
        "Search the OpenAI developer community forum.",
        "https://community.openai.com/search?q={query}",
        "community.openai.com",
    ),
    ToolSpec(
        "search_github_discussions",
        "Search GitHub issues and discussions.",
        "https://github.com/search?q={query}&type=discussions",
        "github.com",
    ),
)


class ToolRegistry:
    def __init__(self, specs: Iterable[ToolSpec]):
        self._specs: dict[str, ToolSpec] = {}
        for spec in specs:
            if spec.name in self._specs:
                raise ValueError(f"duplicate tool name: {spec.name}")
            self._specs[spec.name] = spec

    def get(self, name: str) -> ToolSpec:
        try:
            return self._specs[name]
        except KeyError:
            raise UnknownTool(name) from None

    def names(self) -> tuple[str, ...]:
        return tuple(self._specs)

    def __iter__(self):
        return iter(self._specs.values())

    def __len__(self) -> int:
        return len(self._specs)


def default_registry() -> ToolRegistry:
    return ToolRegistry(DEFAULT_TOOLS)


def tool_schemas(registry: ToolRegistry) -> tuple[dict, ...]:
    """OpenAI-style function schemas for every registered tool."""
    return tuple(
        {
            "type": "function",
            "function": {
                "name": spec.name,
                "description": spec.description,
                "parameters": {
                    "type": "object",
                    "properties": {
                        "query": {"type": "string", "description": "search terms"}
                    },
                    "required": ["query"],
                },
            },
        }
        for spec in registry
    )


def normalize_query(query: str) -> str:
    return re.sub(r"\s+", " ", query.strip()).lower()


def cache_key(tool: str, query: str) -> str:
    """Stable digest; also names fixture files on disk."""
    payload = tool + "\x00" + normalize_query(query)
    return hashlib.sha256(payload.encode("utf-8")).hexdigest()[:24]


@dataclass(frozen=True)
class ToolResult:
    tool: str
    query: str  # normalized form actually executed
    summary: str
    from_cache: bool
    fetched_urls: tuple[str, ...] = ()
    elapsed_ms: int = 0
    degraded: bool = False


class CacheStore(Protocol):
    def get(self, key: str) -> dict | None: ...

    def put(self, key: str, value: dict) -> None: ...

    def clear(self) -> int: ...

    def stats(self) -> dict[str, int]: ...


class InMemoryCache:
    def __init__(self):
        self._data: dict[str, dict] = {}
        self._lock = threading.Lock()

    def get(self, key: str) -> dict | None:
        with self._lock:
            return self._data.get(key)

    def put(self, key: str, value: dict) -> None:
        with self._lock:
            self._data[key] = value

    def clear(self) -> int:
        with self._lock:
            count = len(self._data)
            self._data.clear()
            return count

    def stats(self) -> dict[str, int]:
        with self._lock:
            blob = json.dumps(self._data)
        return {"entries": len(self._data), "bytes": len(blob.encode("utf-8"))}


class JsonFileCache:
    """Key-value store in one JSON file; load-modify-replace on writes.

    Unreadable files are treated as empty (with a warning) so a corrupt
    cache never blocks a run or a `cache clear`.
    """

    def __init__(self, path: str | Path):
        self.path = Path(path)
        self._lock = threading.Lock()

    def _load(self) -> dict[str, dict]:
        if not self.path.exists():
            return {}
        try:
            data = json.loads(self.path.read_text(encoding="utf-8"))
        except (json.JSONDecodeError, OSError) as exc:
            log.warning("discarding unreadable cache %s: %s", self.path, exc)
            return {}
        return data if isinstance(data, dict) else {}

    def _save(self, data: dict[str, dict]) -> None:
        self.path.parent.mkdir(parents=True, exist_ok=True)
        fd, tmp = tempfile.mkstemp(dir=self.path.parent, suffix=".tmp")
        try:
            with os.fdopen(fd, "w", encoding="utf-8") as handle:
                json.dump(data, handle, ensure_ascii=False)
            os.replace(tmp, self.path)
        except BaseException:
            if os.path.exists(tmp):
                os.unlink(tmp)
            raise

    def get(self, key: str) -> dict | None:
        with self._lock:
            return self._load().get(key)

    def put(self, key: str, value: dict) -> None:
        with self._lock:
            data = self._load()
            data[key] = value
            self._save(data)

    def clear(self) -> int:
        with self._lock:
            count = len(self._load())
            if self.path.exists():
                self.path.unlink()
            return count

    def stats(self) -> dict[str, int]:
        with self._lock:
            entries = len(self._load())
            size = self.path.stat().st_size if self.path.exists() else 0
        return {"entries": entries, "bytes": size}


# Containers whose text content is boilerplate, not article body.
_SKIP_TAGS = frozenset({"script", "style", "noscript", "nav", "header", "footer", "aside", "template"})
_BLOCK_TAGS = frozenset(
    {"p", "div", "br", "li", "ul", "ol", "h1", "h2", "h3", "h4", "h5", "h6",
     "pre", "tr", "td", "th", "table", "section", "article", "blockquote"}
)


class _TextExtractor(HTMLParser):
    def __init__(self):
        super().__init__(convert_charrefs=True)
        self._chunks: list[str] = []
        self._skip_depth = 0

    def handle_starttag(self, tag, attrs):
        if tag in _SKIP_TAGS:
            self._skip_depth += 1
        elif tag in _BLOCK_TAGS:
            self._chunks.append("\n")

    def handle_endtag(self, tag):
        if tag in _SKIP_TAGS and self._skip_depth:
            self._skip_depth -= 1
        elif tag in _BLOCK_TAGS:
            self._chunks.append("\n")

    def handle_data(self, data):
        if not self._skip_depth and data:
            self._chunks.append(data)

    def text(self) -> str:
        raw = "".join(self._chunks)
        lines = [re.sub(r"[ \t]+", " ", line).strip() for line in raw.splitlines()]
        return "\n".join(line for line in lines if line)


def extract_main_text(html: str) -> str:
    """Readable text of an HTML page, boilerplate containers dropped."""
    parser = _TextExtractor()
    parser.feed(html)
    parser.close()
    return parser.text()


class _LinkCollector(HTMLParser):
    def __init__(self):
        super().__init__()
        self.hrefs: list[str] = []

    def handle_starttag(self, tag, attrs):
        if tag == "a":
            for name, value in attrs:
                if name == "href" and value:
                    self.hrefs.append(value)


def extract_links(html: str, base_url: str, host: str, limit: int) -> list[str]:
    """Absolute links on the page that stay on the tool's host."""
    collector = _LinkCollector()
    collector.feed(html)
    collector.close()
    seen: list[str] = []
    for href in collector.hrefs:
        absolute = urljoin(base_url, href)
        parsed = urlparse(absolute)
        if parsed.scheme not in ("http", "https"):
            continue
        if parsed.netloc != host and not parsed.netloc.endswith("." + host):
            continue
        absolute = absolute.split("#", 1)[0]
        if absolute == base_url.split("#", 1)[0] or absolute in seen:
            continue
        seen.append(absolute)
        if len(seen) >= limit:
            break
    return seen


class Fetcher(Protocol):
    def fetch(self, spec: ToolSpec, query: str) -> list[tuple[str, str]]:
        """Return (url, html) pairs for the top hits; [] means zero hits.
        Raises FetchFailure on transient trouble."""
        ...


class FixtureFetcher:
    """Serves canned pages from <root>/<tool>/<digest>.html for fully
    offline runs. Missing fixture means zero hits, never an error."""

    def __init__(self, root: str | Path):
        self.root = Path(root)
        self.fetch_count = 0

    def fixture_path(self, spec: ToolSpec, query: str) -> Path:
        return self.root / spec.name / f"{cache_key(spec.name, query)}.html"

    def fetch(self, spec: ToolSpec, query: str) -> list[tuple[str, str]]:
        self.fetch_count += 1
        path = self.fixture_path(spec, query)
        if not path.exists():
            return []
        html = path.read_text(encoding="utf-8")
        return [(f"fixture://{spec.name}/{path.name}", html)]


class HttpFetcher:
    """Live fetcher: one search request, then up to top_k result pages.

    Keeps at least min_host_interval_s between requests to the same host.
    Clock and sleep are injectable so tests never wait.
    """

    def __init__(
        self,
        top_k: int = TOP_K,
        timeout_s: float = FETCH_TIMEOUT_S,
        min_host_interval_s: float = MIN_HOST_INTERVAL_S,
        transport: httpx.BaseTransport | None = None,
        clock: Callable[[], float] = time.monotonic,
        sleep: Callable[[float], None] = time.sleep,
    ):
        self.top_k = top_k
        self.min_host_interval_s = min_host_interval_s
        self._clock = clock
        self._sleep = sleep
        self._last_hit: dict[str, float] = {}
        self._client = httpx.Client(
            timeout=timeout_s,
            transport=transport,
            follow_redirects=True,
            headers={"User-Agent": "buglens/0.1 (bug-report annotation research)"},
        )

    def _get(self, url: str) -> httpx.Response:
        host = urlparse(url).netloc
        last = self._last_hit.get(host)
        if last is not None:
            wait = last + self.min_host_interval_s - self._clock()
            if wait > 0:
                self._sleep(wait)
        self._last_hit[host] = self._clock()
        return self._client.get(url)

    def fetch(self, spec: ToolSpec, query: str) -> list[tuple[str, str]]:
        search_url = spec.search_url.format(query=quote_plus(query))
        try:
            response = self._get(search_url)
        except httpx.HTTPError as exc:
            raise FetchFailure(f"search request failed: {exc}") from exc
        if response.status_code >= 400:
            raise FetchFailure(f"search returned HTTP {response.status_code}")
        links = extract_links(response.text, search_url, spec.host, self.top_k)
        if not links:
            return []
        pages: list[tuple[str, str]] = []
        for url in links:
            try:
                page = self._get(url)
            except httpx.HTTPError as exc:
                log.warning("skipping %s: %s", url, exc)
                continue
            if page.status_code >= 400:
                log.warning("skipping %s: HTTP %d", url, page.status_code)
                continue
            pages.append((url, page.text))
        if not pages:
            raise FetchFailure("every result page failed to load")
        return pages


_SUMMARY_INSTRUCTIONS = (
    "Condense the following documentation or forum excerpts for an engineer "
    "diagnosing a bug. Keep exact API names, class and method signatures, "
    "parameter names, error messages, and version numbers. Drop navigation "
    "text and marketing. Reply with the condensed text only, at most "
    "{budget} characters."
)


def summarize(backend: Backend, text: str, budget_chars: int = SUMMARY_BUDGET_CHARS) -> str:
    """Compress text to the budget via the model; short inputs pass through
    untouched and cost nothing."""
    if len(text) <= budget_chars:
        return text
    clipped = text[:MAX_SUMMARY_INPUT_CHARS]
    request = ChatRequest(
        system_prompt=_SUMMARY_INSTRUCTIONS.format(budget=budget_chars),
        messages=(Message("user", clipped),),
    )
    response = backend.complete(request)
    summary = (response.content or "").strip()
    if not summary:
        summary = clipped
    return summary[:budget_chars]


def run_tool(
    spec: ToolSpec,
    query: str,
    fetcher: Fetcher,
    cache: CacheStore,
    backend: Backend | None = None,
    budget_chars: int = SUMMARY_BUDGET_CHARS,
) -> ToolResult:
    """Execute one tool call end to end: cache lookup, fetch, extract,
    summarize, cache fill. Degraded outcomes (fetch or summarizer trouble)
    return the sentinel or a truncation and are deliberately not cached, so
    a later attempt can try again. Never raises.
    """
    started = time.monotonic()
    normalized = normalize_query(query)
    key = cache_key(spec.name, normalized)

    def done(summary: str, from_cache: bool, urls: tuple[str, ...], degraded: bool) -> ToolResult:
        return ToolResult(
            tool=spec.name,
            query=normalized,
            summary=summary,
            from_cache=from_cache,
            fetched_urls=urls,
            elapsed_ms=int((time.monotonic() - started) * 1000),
            degraded=degraded,
        )

    hit = cache.get(key)
    if hit is not None:
        return done(hit.get("summary", NO_RESULTS), True, tuple(hit.get("urls", ())), False)

    try:
        pages = fetcher.fetch(spec, normalized)
    except Exception as exc:  # tool boundary: degrade, never propagate
        log.warning("%s[%s] fetch failed: %s", spec.name, normalized, exc)
        return done(NO_RESULTS, False, (), True)

    if not pages:
        # A genuine empty result is stable knowledge; cache it.
        cache.put(key, {"summary": NO_RESULTS, "urls": []})
        return done(NO_RESULTS, False, (), False)

    urls = tuple(url for url, _ in pages)
    merged = "\n\n".join(f"[{url}]\n{extract_main_text(html)}" for url, html in pages)

    if backend is None:
        summary = merged[:budget_chars]
    else:
        try:
            summary = summarize(backend, merged, budget_chars)
        except BackendUnavailable as exc:
            log.warning("%s[%s] summarizer failed: %s", spec.name, normalized, exc)
            return done(merged[:budget_chars], False, urls, True)

    cache.put(key, {"summary": summary, "urls": list(urls)})
    return done(summary, False, urls, False)
