"""Chat-completion and moderation transports, plus a scriptable test stub.

Credentials and endpoints come only from environment variables
(ANONPIVOT_LLM_KEY, ANONPIVOT_LLM_URL, ANONPIVOT_MOD_URL); prompts contain
unanonymized text, so request bodies are never logged at default verbosity,
only message counts and sizes at DEBUG level.
"""

from __future__ import annotations

import logging
import os
import threading
import time
from collections import deque
from dataclasses import dataclass
from typing import Callable, Iterable, Mapping

import requests

logger = logging.getLogger(__name__)

CHAT_ROLES = ("system", "user", "assistant")

# Moderation category inventory (verdicts may only draw from these).
MODERATION_CATEGORIES = frozenset(
    {
        "sexual",
        "sexual/minors",
        "harassment",
        "harassment/threatening",
        "hate",
        "hate/threatening",
        "illicit",
        "illicit/violent",
        "self-harm",
        "self-harm/intent",
        "self-harm/instructions",
        "violence",
        "violence/graphic",
    }
)

DEFAULT_MODEL_NAME = "gpt-4o-2024-11-20"


class LlmError(Exception):
    """Base class for chat/moderation client failures."""


class AuthError(LlmError):
    """Credentials rejected; never retried."""


class TransientError(LlmError):
    """Temporary failure (connection, timeout, throttling, 5xx); retryable."""


class RetriesExhaustedError(LlmError):
    """Retry attempts or the wall-clock budget ran out."""


class ResponseFormatError(LlmError):
    """The service replied with an unexpected shape."""


@dataclass(frozen=True, slots=True)
class ChatMessage:
    role: str
    content: str


@dataclass(frozen=True)
class ChatRequest:
    messages: tuple[ChatMessage, ...]
    model_name: str = DEFAULT_MODEL_NAME
    temperature: float = 0.0

    def __post_init__(self) -> None:
        if not self.messages:
            raise ValueError("chat request needs at least one message")
        if self.temperature < 0:
            raise ValueError("temperature must be >= 0")
        for msg in self.messages:
            if msg.role not in CHAT_ROLES:
                raise ValueError(f"unknown chat role {msg.role!r}")


@dataclass(frozen=True)
class ModerationVerdict:
    flagged: bool
    categories: frozenset[str] = frozenset()

    def __post_init__(self) -> None:
        if self.flagged != bool(self.categories):
            raise ValueError("flagged must agree with categories being nonempty")

    @classmethod
    def from_categories(cls, categories: Iterable[str]) -> "ModerationVerdict":
        cats = frozenset(categories)
        return cls(flagged=bool(cats), categories=cats)


@dataclass(frozen=True)
class RetryPolicy:
    """Exponential backoff settings; budget bounds total time spent waiting."""

    max_attempts: int = 3
    base_delay_s: float = 0.5
    max_delay_s: float = 8.0
    budget_s: float = 60.0

    def delay(self, attempt: int) -> float:
        # attempt is 1-based; first retry waits base_delay_s.
        return min(self.base_delay_s * (2 ** (attempt - 1)), self.max_delay_s)


class TokenBucket:
    """Thread-safe rate limiter; acquire() blocks until a token is available."""

    def __init__(self, rate_per_s: float, capacity: int):
        if rate_per_s <= 0 or capacity <= 0:
            raise ValueError("rate and capacity must be positive")
        self._rate = rate_per_s
        self._capacity = float(capacity)
        self._tokens = float(capacity)
        self._updated = time.monotonic()
        self._lock = threading.Lock()

    def acquire(self) -> None:
        while True:
            with self._lock:
                now = time.monotonic()
                self._tokens = min(
                    self._capacity, self._tokens + (now - self._updated) * self._rate
                )
                self._updated = now
                if self._tokens >= 1.0:
                    self._tokens -= 1.0
                    return
                wait = (1.0 - self._tokens) / self._rate
            time.sleep(wait)


class RetryingChatClient:
    """Wrap any chat/moderation client with retry-on-transient semantics.

    Auth failures propagate immediately; transient failures back off
    exponentially until the attempt cap or the wall-clock budget is hit.
    """

    def __init__(
        self,
        inner,
        policy: RetryPolicy = RetryPolicy(),
        sleep: Callable[[float], None] = time.sleep,
        clock: Callable[[], float] = time.monotonic,
    ):
        self.inner = inner
        self.policy = policy
        self._sleep = sleep
        self._clock = clock

    def _run(self, call: Callable[[], object]) -> object:
        started = self._clock()
        last: TransientError | None = None
        for attempt in range(1, self.policy.max_attempts + 1):
            try:
                return call()
            except TransientError as exc:
                last = exc
                if attempt == self.policy.max_attempts:
                    break
                delay = self.policy.delay(attempt)
                elapsed = self._clock() - started
                if elapsed + delay > self.policy.budget_s:
                    raise RetriesExhaustedError(
                        f"retry budget of {self.policy.budget_s}s exhausted: {exc}"
                    ) from exc
                logger.debug("transient failure, retry %d in %.2fs", attempt, delay)
                self._sleep(delay)
        raise RetriesExhaustedError(
            f"gave up after {self.policy.max_attempts} attempts: {last}"
        ) from last

    def send_chat(self, req: ChatRequest) -> str:
        return self._run(lambda: self.inner.send_chat(req))  # type: ignore[return-value]

    def moderate(self, text: str) -> ModerationVerdict:
        return self._run(lambda: self.inner.moderate(text))  # type: ignore[return-value]


@dataclass(frozen=True)
class HttpClientConfig:
    llm_url: str | None = None
    moderation_url: str | None = None
    api_key: str | None = None
    timeout_s: float = 120.0
    allowed_categories: frozenset[str] = MODERATION_CATEGORIES


class HttpChatClient:
    """Plain HTTP transport speaking the common messages-array chat schema.

    Raises typed errors for the retry wrapper to interpret; does not retry
    by itself. A token bucket (optional) smooths request bursts when many
    workers share one client.
    """

    def __init__(self, config: HttpClientConfig, bucket: TokenBucket | None = None):
        self.config = config
        self._bucket = bucket
        self._session = requests.Session()

    @classmethod
    def from_env(cls, env: Mapping[str, str] = os.environ) -> "HttpChatClient":
        llm_url = env.get("ANONPIVOT_LLM_URL")
        mod_url = env.get("ANONPIVOT_MOD_URL")
        if not llm_url and not mod_url:
            raise LlmError(
                "set ANONPIVOT_LLM_URL (chat) and/or ANONPIVOT_MOD_URL (moderation)"
            )
        return cls(
            HttpClientConfig(
                llm_url=llm_url,
                moderation_url=mod_url,
                api_key=env.get("ANONPIVOT_LLM_KEY"),
            )
        )

    def _post(self, url: str, payload: dict) -> dict:
        if self._bucket is not None:
            self._bucket.acquire()
        headers = {}
        if self.config.api_key:
            headers["Authorization"] = f"Bearer {self.config.api_key}"
        try:
            response = self._session.post(
                url, json=payload, headers=headers, timeout=self.config.timeout_s
            )
        except requests.RequestException as exc:
            raise TransientError(f"request failed: {exc}") from exc
        if response.status_code in (401, 403):
            raise AuthError(f"authentication rejected (HTTP {response.status_code})")
        if response.status_code == 429 or response.status_code >= 500:
            raise TransientError(f"service unavailable (HTTP {response.status_code})")
        if response.status_code >= 400:
            raise LlmError(f"request rejected (HTTP {response.status_code})")
        try:
            return response.json()
        except ValueError as exc:
            raise ResponseFormatError(f"response is not valid JSON: {exc}") from None

    def send_chat(self, req: ChatRequest) -> str:
        if not self.config.llm_url:
            raise LlmError("no chat endpoint configured (ANONPIVOT_LLM_URL)")
        logger.debug(
            "chat request: %d messages, %d chars",
            len(req.messages),
            sum(len(m.content) for m in req.messages),
        )
        data = self._post(
            self.config.llm_url,
            {
                "model": req.model_name,
                "temperature": req.temperature,
                "messages": [{"role": m.role, "content": m.content} for m in req.messages],
            },
        )
        try:
            content = data["choices"][0]["message"]["content"]
        except (KeyError, IndexError, TypeError):
            raise ResponseFormatError("chat response missing choices[0].message.content") from None
        if not isinstance(content, str):
            raise ResponseFormatError("chat response content must be a string")
        return content

    def moderate(self, text: str) -> ModerationVerdict:
        if not self.config.moderation_url:
            raise LlmError("no moderation endpoint configured (ANONPIVOT_MOD_URL)")
        data = self._post(self.config.moderation_url, {"input": text})
        try:
            result = data["results"][0]
            raw_categories = result["categories"]
        except (KeyError, IndexError, TypeError):
            raise ResponseFormatError("moderation response missing results[0].categories") from None
        if not isinstance(raw_categories, dict):
            raise ResponseFormatError("moderation categories must be an object")
        flagged_names = sorted(name for name, hit in raw_categories.items() if hit)
        unknown = [n for n in flagged_names if n not in self.config.allowed_categories]
        if unknown:
            raise ResponseFormatError(f"moderation flagged unknown categories: {unknown}")
        verdict = ModerationVerdict.from_categories(flagged_names)
        if "flagged" in result and bool(result["flagged"]) != verdict.flagged:
            raise ResponseFormatError("moderation 'flagged' disagrees with category flags")
        return verdict


class ScriptedChatClient:
    """Deterministic in-memory stand-in for tests and offline runs.

    ``replies`` is a queue of strings (returned in order) or exceptions
    (raised); alternatively pass ``responder`` to compute a reply from the
    request. Moderation categories come from ``moderation`` (text -> iterable
    of category names). Every exchange lands in ``transcript`` so tests can
    assert exact prompt bytes.
    """

    def __init__(
        self,
        replies: Iterable[str | Exception] = (),
        responder: Callable[[ChatRequest], str] | None = None,
        moderation: Callable[[str], Iterable[str]] | None = None,
    ):
        self._replies = deque(replies)
        self._responder = responder
        self._moderation = moderation
        self.transcript: list[tuple[str, object, object]] = []
        self._lock = threading.Lock()

    def send_chat(self, req: ChatRequest) -> str:
        with self._lock:
            if self._replies:
                scripted = self._replies.popleft()
            elif self._responder is not None:
                scripted = self._responder(req)
            else:
                raise LlmError("scripted client has no replies left")
            if isinstance(scripted, Exception):
                self.transcript.append(("chat", req, scripted))
                raise scripted
            self.transcript.append(("chat", req, scripted))
            return scripted

    def moderate(self, text: str) -> ModerationVerdict:
        with self._lock:
            categories = tuple(self._moderation(text)) if self._moderation else ()
            verdict = ModerationVerdict.from_categories(categories)
            self.transcript.append(("moderation", text, verdict))
            return verdict

    @property
    def chat_calls(self) -> int:
        return sum(1 for kind, _, _ in self.transcript if kind == "chat")
