"""Uniform access to chat-completion backends.

Covers tool calling, schema-constrained output, token/cost accounting, and
a deterministic scripted backend that makes the whole pipeline replayable
in tests. Defaults favor determinism: temperature 0 everywhere.
"""

from __future__ import annotations

import json
import logging
import math
import os
import time
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any, Callable, Protocol

import httpx

log = logging.getLogger(__name__)

DEFAULT_TEMPERATURE = 0.0
DEFAULT_MAX_OUTPUT_TOKENS = 2048

# Transient-failure retry schedule, seconds.
RETRY_BACKOFF = (1.0, 2.0, 4.0)


class BackendUnavailable(RuntimeError):
    """Network or auth failure that makes the backend unusable."""


class EmptyTurn(RuntimeError):
    """The backend produced neither content nor tool calls."""


class ScriptExhausted(RuntimeError):
    """A strict scripted backend ran past the end of its script."""


class UnknownModel(KeyError):
    """The price table has no entry for the requested model."""


@dataclass(frozen=True)
class Usage:
    input_tokens: int = 0
    output_tokens: int = 0
    estimated: bool = False

    def __add__(self, other: "Usage") -> "Usage":
        return Usage(
            self.input_tokens + other.input_tokens,
            self.output_tokens + other.output_tokens,
            self.estimated or other.estimated,
        )


@dataclass(frozen=True)
class ToolCall:
    tool_name: str
    arguments: dict[str, Any]


@dataclass(frozen=True)
class Message:
    role: str  # user | assistant | tool
    content: str
    tool_call: ToolCall | None = None


@dataclass(frozen=True)
class ChatRequest:
    system_prompt: str
    messages: tuple[Message, ...]
    tool_schemas: tuple[dict[str, Any], ...] | None = None
    output_schema: str | None = None
    temperature: float = DEFAULT_TEMPERATURE
    max_output_tokens: int = DEFAULT_MAX_OUTPUT_TOKENS

    def __post_init__(self):
        if not self.messages:
            raise ValueError("ChatRequest needs at least one message")
        if not 0.0 <= self.temperature <= 2.0:
            raise ValueError(f"temperature out of range: {self.temperature}")
        if self.max_output_tokens <= 0:
            raise ValueError("max_output_tokens must be positive")


@dataclass(frozen=True)
class ChatResponse:
    """One model turn: it speaks (content) or acts (tool_calls); both empty
    is invalid. Content alongside tool calls is kept as reasoning text."""

    content: str | None = None
    tool_calls: tuple[ToolCall, ...] = ()
    usage: Usage = Usage()
    latency_ms: int = 0

    def __post_init__(self):
        if not self.content and not self.tool_calls:
            raise ValueError("a turn must carry content or tool calls")


class Backend(Protocol):
    """A chat-completion backend handle. Shareable across workers."""

    model_id: str
    supports_schema: bool
    supports_tool_calls: bool

    def complete(self, request: ChatRequest) -> ChatResponse: ...


def estimate_usage(request: ChatRequest, response_text: str) -> Usage:
    """Fallback token estimate when a backend reports no usage:
    ceil(characters / 4) per side, flagged as estimated."""
    prompt_chars = len(request.system_prompt) + sum(len(m.content) for m in request.messages)
    return Usage(
        input_tokens=math.ceil(prompt_chars / 4),
        output_tokens=math.ceil(len(response_text) / 4),
        estimated=True,
    )


@dataclass(frozen=True)
class ModelPrice:
    usd_per_million_input_tokens: float
    usd_per_million_output_tokens: float

    def __post_init__(self):
        for value in (self.usd_per_million_input_tokens, self.usd_per_million_output_tokens):
            if not math.isfinite(value) or value < 0:
                raise ValueError(f"prices must be finite and non-negative, got {value}")


class PriceTable:
    """Per-model USD prices per million input/output tokens."""

    def __init__(self, prices: dict[str, ModelPrice] | None = None):
        self._prices = dict(prices or {})

    def __contains__(self, model: str) -> bool:
        return model in self._prices

    def get(self, model: str) -> ModelPrice:
        try:
            return self._prices[model]
        except KeyError:
            raise UnknownModel(model) from None

    @classmethod
    def from_file(cls, path: str | Path) -> "PriceTable":
        """Load {"model-id": {"usd_per_million_input_tokens": x,
        "usd_per_million_output_tokens": y}, ...} from JSON."""
        raw = json.loads(Path(path).read_text(encoding="utf-8"))
        prices = {
            model: ModelPrice(
                float(entry["usd_per_million_input_tokens"]),
                float(entry["usd_per_million_output_tokens"]),
            )
            for model, entry in raw.items()
        }
        return cls(prices)


def accumulate_cost(usages: list[Usage], model: str, prices: PriceTable) -> float:
    """Total USD for a list of usages at the model's prices."""
    price = prices.get(model)
    total = 0.0
    for usage in usages:
        total += (usage.input_tokens / 1e6) * price.usd_per_million_input_tokens
        total += (usage.output_tokens / 1e6) * price.usd_per_million_output_tokens
    return total


class ScriptedBackend:
    """Replays a fixed list of canned responses, in order.

    strict=True raises ScriptExhausted when calls outrun the script;
    otherwise the final response repeats. Every received request is
    recorded for assertions. Deterministic by construction.
    """

    def __init__(
        self,
        script: list[ChatResponse],
        strict: bool = True,
        model_id: str = "scripted",
        supports_schema: bool = False,
        supports_tool_calls: bool = False,
    ):
        if not script:
            raise ValueError("script must be non-empty")
        self.script = list(script)
        self.strict = strict
        self.model_id = model_id
        self.supports_schema = supports_schema
        self.supports_tool_calls = supports_tool_calls
        self.requests: list[ChatRequest] = []

    def complete(self, request: ChatRequest) -> ChatResponse:
        self.requests.append(request)
        index = len(self.requests) - 1
        if index >= len(self.script):
            if self.strict:
                raise ScriptExhausted(
                    f"script of {len(self.script)} responses, call #{index + 1}"
                )
            index = len(self.script) - 1
        return self.script[index]


def scripted_backend(script: list[ChatResponse], strict: bool = True) -> ScriptedBackend:
    return ScriptedBackend(script, strict=strict)


class MeteredBackend:
    """Pass-through wrapper that tallies token usage across calls.

    Wrap per unit of work (one post), not globally, so totals stay
    attributable without locking.
    """

    def __init__(self, inner: Backend):
        self.inner = inner
        self.usages: list[Usage] = []

    @property
    def model_id(self) -> str:
        return self.inner.model_id

    @property
    def supports_schema(self) -> bool:
        return self.inner.supports_schema

    @property
    def supports_tool_calls(self) -> bool:
        return self.inner.supports_tool_calls

    def complete(self, request: ChatRequest) -> ChatResponse:
        response = self.inner.complete(request)
        self.usages.append(response.usage)
        return response

    def total(self) -> Usage:
        total = Usage()
        for usage in self.usages:
            total = total + usage
        return total


def script_from_file(path: str | Path) -> list[ChatResponse]:
    """Load canned responses from a JSON list of objects with optional
    content, tool_calls, usage, and latency_ms fields."""
    raw = json.loads(Path(path).read_text(encoding="utf-8"))
    responses = []
    for entry in raw:
        usage = entry.get("usage", {})
        responses.append(
            ChatResponse(
                content=entry.get("content"),
                tool_calls=tuple(
                    ToolCall(tc["tool_name"], dict(tc.get("arguments", {})))
                    for tc in entry.get("tool_calls", [])
                ),
                usage=Usage(
                    int(usage.get("input_tokens", 0)),
                    int(usage.get("output_tokens", 0)),
                ),
                latency_ms=int(entry.get("latency_ms", 0)),
            )
        )
    return responses


class OpenAIChatBackend:
    """Adapter for OpenAI-compatible chat-completion HTTP APIs.

    Credential comes from `api_key_env` (default OPENAI_API_KEY). Retries
    transient failures (timeouts, 5xx, 429) three times with exponential
    backoff; auth and client errors fail immediately.
    """

    supports_schema = True
    supports_tool_calls = True

    def __init__(
        self,
        model_id: str,
        base_url: str = "https://api.openai.com/v1",
        api_key_env: str = "OPENAI_API_KEY",
        timeout_s: float = 60.0,
        transport: httpx.BaseTransport | None = None,
        sleep: Callable[[float], None] = time.sleep,
    ):
        self.model_id = model_id
        self.base_url = base_url.rstrip("/")
        self.api_key_env = api_key_env
        self.timeout_s = timeout_s
        self._sleep = sleep
        self._client = httpx.Client(timeout=timeout_s, transport=transport)

    def _headers(self) -> dict[str, str]:
        key = os.environ.get(self.api_key_env)
        if not key:
            raise BackendUnavailable(f"missing credential: set {self.api_key_env}")
        return {"Authorization": f"Bearer {key}"}

    def _payload(self, request: ChatRequest) -> dict[str, Any]:
        messages: list[dict[str, Any]] = [{"role": "system", "content": request.system_prompt}]
        for msg in request.messages:
            entry: dict[str, Any] = {"role": msg.role, "content": msg.content}
            if msg.role == "assistant" and msg.tool_call is not None:
                entry["tool_calls"] = [
                    {
                        "id": f"call_{len(messages)}",
                        "type": "function",
                        "function": {
                            "name": msg.tool_call.tool_name,
                            "arguments": json.dumps(msg.tool_call.arguments),
                        },
                    }
                ]
            messages.append(entry)
        payload: dict[str, Any] = {
            "model": self.model_id,
            "messages": messages,
            "temperature": request.temperature,
            "max_tokens": request.max_output_tokens,
        }
        if request.tool_schemas:
            payload["tools"] = list(request.tool_schemas)
        if request.output_schema:
            payload["response_format"] = {
                "type": "json_schema",
                "json_schema": {"name": "output", "schema": json.loads(request.output_schema)},
            }
        return payload

    def complete(self, request: ChatRequest) -> ChatResponse:
        last_error: Exception | None = None
        for attempt in range(len(RETRY_BACKOFF) + 1):
            if attempt:
                self._sleep(RETRY_BACKOFF[attempt - 1])
            started = time.monotonic()
            try:
                response = self._client.post(
                    f"{self.base_url}/chat/completions",
                    headers=self._headers(),
                    json=self._payload(request),
                )
            except httpx.HTTPError as exc:
                last_error = exc
                log.warning("transient backend error (attempt %d): %s", attempt + 1, exc)
                continue
            if response.status_code in (429,) or response.status_code >= 500:
                last_error = BackendUnavailable(f"HTTP {response.status_code}")
                log.warning("transient backend status %d (attempt %d)", response.status_code, attempt + 1)
                continue
            if response.status_code >= 400:
                raise BackendUnavailable(
                    f"HTTP {response.status_code}: {response.text[:200]}"
                )
            latency_ms = int((time.monotonic() - started) * 1000)
            return self._parse(request, response.json(), latency_ms)
        raise BackendUnavailable(f"gave up after retries: {last_error}")

    def _parse(self, request: ChatRequest, body: dict[str, Any], latency_ms: int) -> ChatResponse:
        try:
            message = body["choices"][0]["message"]
        except (KeyError, IndexError) as exc:
            raise BackendUnavailable(f"malformed backend response: {exc}") from None
        content = message.get("content") or None
        tool_calls = tuple(
            ToolCall(
                tc["function"]["name"],
                json.loads(tc["function"].get("arguments") or "{}"),
            )
            for tc in message.get("tool_calls") or []
        )
        if not content and not tool_calls:
            raise EmptyTurn("backend returned neither content nor tool calls")
        raw_usage = body.get("usage")
        if raw_usage:
            usage = Usage(
                int(raw_usage.get("prompt_tokens", 0)),
                int(raw_usage.get("completion_tokens", 0)),
            )
        else:
            usage = estimate_usage(request, content or "")
        return ChatResponse(
            content=content, tool_calls=tool_calls, usage=usage, latency_ms=latency_ms
        )
