"""Single choke point for chat-completion calls.

All prompt traffic flows through :class:`Gateway`: on-disk response caching,
bounded retries with jittered exponential backoff, a concurrency bound, and
structured-output extraction with bounded syntactic repair. Backends are
pluggable; the deterministic mock lives in :mod:`nova.mockllm`.
"""

from __future__ import annotations

import hashlib
import json
import logging
import os
import random
import re
import tempfile
import threading
import time
from dataclasses import dataclass
from pathlib import Path
from typing import Callable, Protocol

from . import schemas

logger = logging.getLogger(__name__)

LLM_API_KEY_ENV = "NOVA_LLM_API_KEY"


class GatewayError(Exception):
    pass


class TransientBackendError(GatewayError):
    """Transport, 429, or 5xx-class failure; worth retrying."""


class BackendUnavailableError(GatewayError):
    """Backend still failing after the retry budget was spent."""


class NoValidJsonError(GatewayError):
    """No schema-valid JSON value could be recovered from a reply."""


class ExtractionFailedError(GatewayError):
    """Re-prompt budget spent without obtaining schema-valid JSON."""


@dataclass(frozen=True)
class ChatRequest:
    model_id: str
    prompt: str
    temperature: float = 0.0
    max_tokens: int = 4096

    @property
    def cache_key(self) -> str:
        """256-bit digest; a pure function of the request fields."""
        payload = json.dumps(
            {
                "model_id": self.model_id,
                "prompt": self.prompt,
                "temperature": self.temperature,
                "max_tokens": self.max_tokens,
            },
            sort_keys=True,
            separators=(",", ":"),
            ensure_ascii=False,
        )
        return hashlib.sha256(payload.encode("utf-8")).hexdigest()


@dataclass(frozen=True)
class ChatResponse:
    text: str
    from_cache: bool
    attempts: int


class ChatBackend(Protocol):
    def send(self, model_id: str, prompt: str, temperature: float, max_tokens: int) -> str: ...


@dataclass(frozen=True)
class GatewayOptions:
    retry_budget: int = 5
    backoff_base: float = 0.5
    backoff_cap: float = 8.0
    parallelism: int = 8
    reprompt_budget: int = 2


class ResponseCache:
    """Content-addressed on-disk store; no eviction, atomic writes."""

    def __init__(self, cache_dir: str | Path):
        self._dir = Path(cache_dir)
        self._dir.mkdir(parents=True, exist_ok=True)
        self._write_lock = threading.Lock()

    def _path(self, key: str) -> Path:
        return self._dir / key[:2] / f"{key}.json"

    def get(self, key: str) -> str | None:
        path = self._path(key)
        if not path.is_file():
            return None
        return json.loads(path.read_text(encoding="utf-8"))["text"]

    def put(self, key: str, text: str) -> None:
        path = self._path(key)
        with self._write_lock:
            path.parent.mkdir(parents=True, exist_ok=True)
            fd, tmp = tempfile.mkstemp(dir=path.parent, suffix=".tmp")
            try:
                with os.fdopen(fd, "w", encoding="utf-8") as fh:
                    json.dump({"text": text}, fh, ensure_ascii=False)
                os.replace(tmp, path)
            finally:
                if os.path.exists(tmp):
                    os.unlink(tmp)


class GatewayStats:
    """Thread-safe call ledger."""

    def __init__(self):
        self._lock = threading.Lock()
        self.requests = 0
        self.cache_hits = 0
        self.live_calls = 0

    def _bump(self, name: str) -> None:
        with self._lock:
            setattr(self, name, getattr(self, name) + 1)

    def snapshot(self) -> dict:
        with self._lock:
            return {
                "requests": self.requests,
                "cache_hits": self.cache_hits,
                "live_calls": self.live_calls,
            }


class Gateway:
    def __init__(
        self,
        backend: ChatBackend | None,
        cache_dir: str | Path,
        options: GatewayOptions = GatewayOptions(),
        sleep: Callable[[float], None] = time.sleep,
    ):
        self._backend = backend
        self._cache = ResponseCache(cache_dir)
        self._options = options
        self._sleep = sleep
        self._semaphore = threading.Semaphore(max(1, options.parallelism))
        self._jitter = random.Random(0)
        self.stats = GatewayStats()

    @property
    def options(self) -> GatewayOptions:
        return self._options

    def complete(self, request: ChatRequest) -> ChatResponse:
        """Return the cached reply for this request, or issue it with retries."""
        self.stats._bump("requests")
        key = request.cache_key
        cached = self._cache.get(key)
        if cached is not None:
            self.stats._bump("cache_hits")
            return ChatResponse(text=cached, from_cache=True, attempts=1)
        if self._backend is None:
            raise BackendUnavailableError(
                f"cache miss for {key[:12]} and no backend configured (cache-only mode)"
            )
        last_error: Exception | None = None
        for attempt in range(1, self._options.retry_budget + 1):
            try:
                with self._semaphore:
                    self.stats._bump("live_calls")
                    text = self._backend.send(
                        request.model_id, request.prompt, request.temperature, request.max_tokens
                    )
                self._cache.put(key, text)
                return ChatResponse(text=text, from_cache=False, attempts=attempt)
            except TransientBackendError as exc:
                last_error = exc
                if attempt == self._options.retry_budget:
                    break
                delay = min(
                    self._options.backoff_cap,
                    self._options.backoff_base * (2 ** (attempt - 1)),
                )
                delay *= 0.5 + self._jitter.random()
                logger.warning(
                    "transient backend failure (attempt %d/%d), retrying in %.2fs: %s",
                    attempt,
                    self._options.retry_budget,
                    delay,
                    exc,
                )
                if delay > 0:
                    self._sleep(delay)
        raise BackendUnavailableError(
            f"backend failed after {self._options.retry_budget} attempts: {last_error}"
        )

    def complete_json(self, request: ChatRequest, schema_name: str):
        """complete() plus extraction; re-prompts on invalid JSON up to budget.

        Returns (parsed_value, final_response). Raises ExtractionFailedError
        once the re-prompt budget is spent.
        """
        prompt = request.prompt
        for attempt in range(self._options.reprompt_budget + 1):
            response = self.complete(
                ChatRequest(
                    model_id=request.model_id,
                    prompt=prompt,
                    temperature=request.temperature,
                    max_tokens=request.max_tokens,
                )
            )
            try:
                return extract_json(response.text, schema_name), response
            except NoValidJsonError as exc:
                logger.warning(
                    "no valid %s JSON (attempt %d/%d): %s",
                    schema_name,
                    attempt + 1,
                    self._options.reprompt_budget + 1,
                    exc,
                )
                prompt = (
                    request.prompt
                    + f"\n\n(Retry {attempt + 1}: your previous reply was not valid JSON "
                    f"for the required format. Reply with the JSON value only.)"
                )
        raise ExtractionFailedError(
            f"no schema-valid {schema_name!r} JSON after "
            f"{self._options.reprompt_budget + 1} prompts"
        )


# ---------------------------------------------------------------------------
# Structured-output extraction
# ---------------------------------------------------------------------------

_FENCE_RE = re.compile(r"```(?:json)?\s*(.*?)```", re.DOTALL)
_TRAILING_COMMA_RE = re.compile(r",(\s*[\]}])")


def _try_parse(fragment: str):
    """Parse the first JSON value in `fragment`, tolerating trailing prose."""
    decoder = json.JSONDecoder()
    for text in (fragment, _TRAILING_COMMA_RE.sub(r"\1", fragment)):
        try:
            value, _ = decoder.raw_decode(text.strip())
            return value
        except (json.JSONDecodeError, ValueError):
            continue
    return None


def _candidates(raw: str):
    """Candidate JSON fragments in text order, across the three repair passes:
    fenced blocks first, then bracketed regions, then the raw reply."""
    for match in _FENCE_RE.finditer(raw):
        yield match.group(1)
    for pos, char in enumerate(raw):
        if char in "[{":
            yield raw[pos:]
    yield raw


def extract_json(raw: str, schema_name: str):
    """First JSON value in `raw` that validates against the named output schema."""
    seen_invalid = 0
    for fragment in _candidates(raw):
        value = _try_parse(fragment)
        if value is None:
            continue
        if not schemas.output_schema_validate(schema_name, value):
            return value
        seen_invalid += 1
    if seen_invalid:
        raise NoValidJsonError(
            f"found {seen_invalid} JSON value(s) but none validate against {schema_name!r}"
        )
    raise NoValidJsonError("no parseable JSON value in reply")


# ---------------------------------------------------------------------------
# Live backend (OpenAI-style chat completions)
# ---------------------------------------------------------------------------


class HttpChatBackend:
    """OpenAI-style chat-completion HTTP client.

    The API key comes from the NOVA_LLM_API_KEY environment variable. A
    custom `post` callable can be injected for testing.
    """

    _RETRYABLE_STATUS = frozenset({429, 500, 502, 503, 504})

    def __init__(self, endpoint: str, post=None, timeout: float = 120.0):
        self._endpoint = endpoint
        self._timeout = timeout
        if post is None:
            import requests

            post = requests.post
        self._post = post

    def send(self, model_id: str, prompt: str, temperature: float, max_tokens: int) -> str:
        api_key = os.environ.get(LLM_API_KEY_ENV, "")
        if not api_key:
            raise GatewayError(f"{LLM_API_KEY_ENV} is not set")
        payload = {
            "model": model_id,
            "messages": [{"role": "user", "content": prompt}],
            "temperature": temperature,
            "max_tokens": max_tokens,
        }
        try:
            resp = self._post(
                self._endpoint,
                json=payload,
                headers={"Authorization": f"Bearer {api_key}"},
                timeout=self._timeout,
            )
        except OSError as exc:
            raise TransientBackendError(f"transport failure: {exc}") from exc
        status = getattr(resp, "status_code", 0)
        if status in self._RETRYABLE_STATUS:
            raise TransientBackendError(f"HTTP {status}")
        if status != 200:
            raise GatewayError(f"HTTP {status}: {getattr(resp, 'text', '')[:200]}")
        body = resp.json()
        try:
            return body["choices"][0]["message"]["content"]
        except (KeyError, IndexError, TypeError) as exc:
            raise GatewayError(f"malformed completion response: {exc}") from exc
