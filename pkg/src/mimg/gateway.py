"""Uniform access to chat and embedding backends with retries and accounting.

The wire protocol is the OpenAI-compatible ``/v1/chat/completions`` and
``/v1/embeddings`` JSON schema. A deterministic offline mock backend lives in
:mod:`mimg.mockllm`; anything exposing the same ``complete`` / ``embed_texts``
methods can be plugged in (tests use scripted stubs).
"""

from __future__ import annotations

import math
import os
import threading
import time
from dataclasses import dataclass
from typing import Callable, Protocol, Sequence

import requests

from .corpus import estimate_tokens

API_KEY_ENV = "MIMG_API_KEY"

DEFAULT_EMBEDDING_DIM = 768
DEFAULT_MAX_RETRIES = 3
DEFAULT_BACKOFF_BASE = 1.0
DEFAULT_MAX_IN_FLIGHT = 8

VALID_ROLES = ("system", "user", "assistant")


class GatewayError(Exception):
    """Base class for gateway failures."""


class TransportError(GatewayError):
    """Network-level failure (connection, timeout); retryable."""


class RetryableStatusError(GatewayError):
    """HTTP 429/5xx from the backend; retryable."""

    def __init__(self, status: int, body: str):
        super().__init__(f"HTTP {status}: {body[:200]}")
        self.status = status


class NonRetryableError(GatewayError):
    """HTTP 4xx (other than 429); carries status and a body excerpt."""

    def __init__(self, status: int, body: str):
        super().__init__(f"HTTP {status}: {body[:200]}")
        self.status = status
        self.body_excerpt = body[:200]


class RetryExhaustedError(GatewayError):
    """All retry attempts failed with retryable errors."""


class ProtocolError(GatewayError):
    """Backend reply violated the expected response schema."""


@dataclass(frozen=True)
class ChatRequest:
    messages: tuple[tuple[str, str], ...]
    temperature: float = 0.0
    max_output_tokens: int = 1024
    model_name: str = ""
    request_tag: str = "default"

    def __post_init__(self) -> None:
        if not self.messages:
            raise ValueError("messages must be non-empty")
        for role, _ in self.messages:
            if role not in VALID_ROLES:
                raise ValueError(f"invalid role {role!r}")
        if self.temperature < 0:
            raise ValueError("temperature must be >= 0")

    @classmethod
    def user(cls, prompt: str, **kwargs) -> "ChatRequest":
        return cls(messages=(("user", prompt),), **kwargs)

    @property
    def prompt_text(self) -> str:
        return "\n".join(content for _, content in self.messages)


@dataclass(frozen=True)
class ChatResponse:
    text: str
    input_tokens: int
    output_tokens: int
    backend_id: str

    def __post_init__(self) -> None:
        if self.input_tokens < 0 or self.output_tokens < 0:
            raise ValueError("token counts must be >= 0")


@dataclass(frozen=True)
class EmbeddingVector:
    values: tuple[float, ...]
    norm: float

    def __post_init__(self) -> None:
        computed = math.sqrt(sum(v * v for v in self.values))
        if abs(computed - self.norm) > 1e-6:
            raise ValueError(f"stored norm {self.norm} != computed {computed}")

    @classmethod
    def from_values(cls, values: Sequence[float]) -> "EmbeddingVector":
        vals = tuple(float(v) for v in values)
        return cls(values=vals, norm=math.sqrt(sum(v * v for v in vals)))


class UsageLedger:
    """Per-tag accumulators of (calls, input_tokens, output_tokens).

    Updates are serialized behind a lock so concurrent workers can record
    safely; totals always equal the sum of recorded responses.
    """

    def __init__(self) -> None:
        self._lock = threading.Lock()
        self._entries: dict[str, list[int]] = {}

    def record(self, tag: str, input_tokens: int, output_tokens: int) -> None:
        with self._lock:
            entry = self._entries.setdefault(tag, [0, 0, 0])
            entry[0] += 1
            entry[1] += input_tokens
            entry[2] += output_tokens

    def merge(self, snapshot: dict[str, dict[str, int]]) -> None:
        """Fold a previously persisted per-tag snapshot into this ledger."""
        with self._lock:
            for tag, row in snapshot.items():
                entry = self._entries.setdefault(tag, [0, 0, 0])
                entry[0] += row["calls"]
                entry[1] += row["input_tokens"]
                entry[2] += row["output_tokens"]

    def snapshot(self) -> dict[str, dict[str, int]]:
        with self._lock:
            return {
                tag: {"calls": e[0], "input_tokens": e[1], "output_tokens": e[2]}
                for tag, e in sorted(self._entries.items())
            }

    def totals(self) -> dict[str, int]:
        snap = self.snapshot()
        return {
            "calls": sum(r["calls"] for r in snap.values()),
            "input_tokens": sum(r["input_tokens"] for r in snap.values()),
            "output_tokens": sum(r["output_tokens"] for r in snap.values()),
        }


def usage_report(ledger: UsageLedger) -> dict:
    """Deterministic per-tag and total token summary, ordered by tag."""
    return {"tags": ledger.snapshot(), "totals": ledger.totals()}


def render_usage_report(report: dict) -> str:
    lines = [f"{'tag':<24}{'calls':>8}{'input':>12}{'output':>12}"]
    for tag, row in report["tags"].items():
        lines.append(
            f"{tag:<24}{row['calls']:>8}{row['input_tokens']:>12}{row['output_tokens']:>12}"
        )
    t = report["totals"]
    lines.append(f"{'TOTAL':<24}{t['calls']:>8}{t['input_tokens']:>12}{t['output_tokens']:>12}")
    return "\n".join(lines)


class ChatBackend(Protocol):
    backend_id: str

    def complete(self, request: ChatRequest) -> ChatResponse: ...


class EmbeddingBackend(Protocol):
    backend_id: str
    dimension: int

    def embed_texts(self, texts: Sequence[str]) -> list[EmbeddingVector]: ...


def backoff_delays(retries: int, base: float) -> list[float]:
    """Exponential backoff schedule; monotone non-decreasing by construction."""
    return [base * (2**i) for i in range(retries)]


class Gateway:
    """Shared front door to the backends: retries, concurrency cap, ledger."""

    def __init__(
        self,
        chat_backend: ChatBackend,
        embedding_backend: EmbeddingBackend | None = None,
        ledger: UsageLedger | None = None,
        max_retries: int = DEFAULT_MAX_RETRIES,
        backoff_base: float = DEFAULT_BACKOFF_BASE,
        max_in_flight: int = DEFAULT_MAX_IN_FLIGHT,
        sleep: Callable[[float], None] = time.sleep,
    ):
        self.chat_backend = chat_backend
        self.embedding_backend = embedding_backend
        self.ledger = ledger if ledger is not None else UsageLedger()
        self.max_retries = max_retries
        self.backoff_base = backoff_base
        self._sleep = sleep
        self._slot = threading.Semaphore(max_in_flight)

    def chat(self, request: ChatRequest) -> ChatResponse:
        response = self._with_retries(lambda: self._guarded_complete(request))
        self.ledger.record(request.request_tag, response.input_tokens, response.output_tokens)
        return response

    def embed(self, texts: Sequence[str], request_tag: str = "embed") -> list[EmbeddingVector]:
        if not texts:
            raise ValueError("texts must be non-empty")
        if self.embedding_backend is None:
            raise GatewayError("no embedding backend configured")
        vectors = self._with_retries(lambda: self._guarded_embed(texts))
        if len(vectors) != len(texts):
            raise ProtocolError(f"expected {len(texts)} vectors, got {len(vectors)}")
        dim = self.embedding_backend.dimension
        for vec in vectors:
            if len(vec.values) != dim:
                raise ProtocolError(f"embedding dimension {len(vec.values)} != configured {dim}")
        total = sum(estimate_tokens(t) for t in texts)
        self.ledger.record(request_tag, total, 0)
        return vectors

    def _guarded_complete(self, request: ChatRequest) -> ChatResponse:
        with self._slot:
            return self.chat_backend.complete(request)

    def _guarded_embed(self, texts: Sequence[str]) -> list[EmbeddingVector]:
        with self._slot:
            return self.embedding_backend.embed_texts(texts)

    def _with_retries(self, call: Callable):
        delays = backoff_delays(self.max_retries, self.backoff_base)
        attempt = 0
        while True:
            try:
                return call()
            except (TransportError, RetryableStatusError) as exc:
                if attempt >= self.max_retries:
                    raise RetryExhaustedError(
                        f"gave up after {attempt + 1} attempts: {exc}"
                    ) from exc
                self._sleep(delays[attempt])
                attempt += 1


def _auth_headers(api_key: str | None) -> dict[str, str]:
    key = api_key if api_key is not None else os.environ.get(API_KEY_ENV, "")
    headers = {"Content-Type": "application/json"}
    if key:
        headers["Authorization"] = f"Bearer {key}"
    return headers


def _classify_status(status: int, body: str) -> GatewayError:
    if status == 429 or status >= 500:
        return RetryableStatusError(status, body)
    return NonRetryableError(status, body)


class HttpChatBackend:
    """OpenAI-compatible chat-completions client."""

    def __init__(
        self,
        base_url: str,
        model_name: str,
        api_key: str | None = None,
        timeout: float = 120.0,
        session: requests.Session | None = None,
    ):
        self.base_url = base_url.rstrip("/")
        self.model_name = model_name
        self.api_key = api_key
        self.timeout = timeout
        self.session = session or requests.Session()
        self.backend_id = f"http:{model_name}"

    def complete(self, request: ChatRequest) -> ChatResponse:
        payload = {
            "model": request.model_name or self.model_name,
            "messages": [{"role": r, "content": c} for r, c in request.messages],
            "temperature": request.temperature,
            "max_tokens": request.max_output_tokens,
        }
        try:
            resp = self.session.post(
                f"{self.base_url}/v1/chat/completions",
                json=payload,
                headers=_auth_headers(self.api_key),
                timeout=self.timeout,
            )
        except requests.RequestException as exc:
            raise TransportError(str(exc)) from exc
        if resp.status_code != 200:
            raise _classify_status(resp.status_code, resp.text)
        try:
            data = resp.json()
            text = data["choices"][0]["message"]["content"]
        except (ValueError, KeyError, IndexError, TypeError) as exc:
            raise ProtocolError(f"malformed chat response: {exc}") from exc
        usage = data.get("usage") or {}
        input_tokens = usage.get("prompt_tokens")
        output_tokens = usage.get("completion_tokens")
        # Backends that omit usage still feed the cost report via estimates.
        if input_tokens is None:
            input_tokens = estimate_tokens(request.prompt_text)
        if output_tokens is None:
            output_tokens = estimate_tokens(text)
        return ChatResponse(
            text=text,
            input_tokens=int(input_tokens),
            output_tokens=int(output_tokens),
            backend_id=self.backend_id,
        )


class HttpEmbeddingBackend:
    """OpenAI-compatible embeddings client with a fixed expected dimension."""

    def __init__(
        self,
        base_url: str,
        model_name: str,
        dimension: int = DEFAULT_EMBEDDING_DIM,
        api_key: str | None = None,
        timeout: float = 120.0,
        session: requests.Session | None = None,
    ):
        self.base_url = base_url.rstrip("/")
        self.model_name = model_name
        self.dimension = dimension
        self.api_key = api_key
        self.timeout = timeout
        self.session = session or requests.Session()
        self.backend_id = f"http-embed:{model_name}"

    def embed_texts(self, texts: Sequence[str]) -> list[EmbeddingVector]:
        payload = {"model": self.model_name, "input": list(texts)}
        try:
            resp = self.session.post(
                f"{self.base_url}/v1/embeddings",
                json=payload,
                headers=_auth_headers(self.api_key),
                timeout=self.timeout,
            )
        except requests.RequestException as exc:
            raise TransportError(str(exc)) from exc
        if resp.status_code != 200:
            raise _classify_status(resp.status_code, resp.text)
        try:
            data = resp.json()
            rows = sorted(data["data"], key=lambda r: r["index"])
            vectors = [EmbeddingVector.from_values(row["embedding"]) for row in rows]
        except (ValueError, KeyError, TypeError) as exc:
            raise ProtocolError(f"malformed embeddings response: {exc}") from exc
        for vec in vectors:
            if len(vec.values) != self.dimension:
                raise ProtocolError(
                    f"embedding dimension {len(vec.values)} != configured {self.dimension}"
                )
        return vectors
