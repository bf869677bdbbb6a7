"""Short-answer LLM access: backends, retry policy, and answer caching.

A backend turns one (system prompt, user prompt, answer budget) request into
raw completion text.  Two backends ship here:

* ``HttpChatBackend`` talks to any OpenAI-compatible chat completions
  endpoint.  Sampling temperature is pinned to 0 so repeated queries are as
  deterministic as the server allows; the answer length cap is sent as
  ``max_tokens`` and enforced server side.
* ``MockBackend`` replays scripted answers keyed by
  (report id, prompt id, abnormality, expression) for offline runs and tests.
  A script entry may hold a list of answers that are consumed one call at a
  time (the last repeats), which lets tests exercise retry paths.

``LlmClient`` wraps a backend with a bounded-exponential-backoff retry loop
for transport failures and an optional persistent answer cache.  The cache is
an append-only JSONL file keyed by model id plus a digest of the request, so
interrupted annotation runs resume without repeating paid queries.  Cache hits
and misses return identical text, keeping cached and uncached runs
interchangeable.

Authentication for the HTTP backend comes from the ``RADLABELER_API_KEY``
environment variable (sent as a bearer token when set).
"""

from __future__ import annotations

import hashlib
import json
import os
import threading
import time
from dataclasses import dataclass

import requests

TEMPERATURE = 0
DEFAULT_MAX_ATTEMPTS = 5
DEFAULT_TIMEOUT = 120.0
AUTH_ENV_VAR = "RADLABELER_API_KEY"
CACHE_VERSION = 1


class TransportError(RuntimeError):
    """A retryable failure: network trouble, timeouts, 429 or 5xx replies."""


class BackendError(RuntimeError):
    """A non-retryable failure: bad request, bad credentials, bad script."""


@dataclass(frozen=True)
class LlmRequest:
    system_prompt: str
    user_prompt: str
    max_new_tokens: int


@dataclass(frozen=True)
class QueryMeta:
    """Identifies which pipeline step produced a request.

    The HTTP backend ignores it; the mock backend uses it as lookup key.
    """

    report_id: str
    prompt_id: int
    abnormality: str
    expression: str | None = None

    def key(self) -> tuple[str, int, str, str | None]:
        return (self.report_id, self.prompt_id, self.abnormality, self.expression)


def cache_key(model: str, request: LlmRequest) -> str:
    digest = hashlib.sha256()
    for part in (request.system_prompt, request.user_prompt,
                 str(request.max_new_tokens)):
        digest.update(part.encode("utf-8"))
        digest.update(b"\x1e")
    return f"{model}:{digest.hexdigest()}"


class HttpChatBackend:
    """OpenAI-compatible chat completions backend."""

    def __init__(self, base_url: str, model: str,
                 timeout: float = DEFAULT_TIMEOUT) -> None:
        base = base_url.rstrip("/")
        if not base.endswith("/chat/completions"):
            base = base + "/chat/completions"
        self.url = base
        self.model = model
        self.timeout = timeout

    def complete(self, request: LlmRequest, meta: QueryMeta | None = None) -> str:
        headers = {"Content-Type": "application/json"}
        token = os.environ.get(AUTH_ENV_VAR)
        if token:
            headers["Authorization"] = f"Bearer {token}"
        payload = {
            "model": self.model,
            "messages": [
                {"role": "system", "content": request.system_prompt},
                {"role": "user", "content": request.user_prompt},
            ],
            "temperature": TEMPERATURE,
            "max_tokens": request.max_new_tokens,
        }
        try:
            response = requests.post(self.url, json=payload, headers=headers,
                                      timeout=self.timeout)
        except requests.RequestException as exc:
            raise TransportError(f"request to {self.url} failed: {exc}") from exc
        if response.status_code == 429 or response.status_code >= 500:
            raise TransportError(
                f"backend returned HTTP {response.status_code}: {response.text[:200]}")
        if response.status_code >= 400:
            raise BackendError(
                f"backend rejected request with HTTP {response.status_code}: "
                f"{response.text[:200]}")
        try:
            body = response.json()
            return body["choices"][0]["message"]["content"]
        except (ValueError, KeyError, IndexError, TypeError) as exc:
            raise BackendError(
                f"backend returned malformed completion payload: {exc}") from exc


class MockBackend:
    """Deterministic scripted backend for tests and offline runs."""

    model = "mock"

    def __init__(self, answers: dict[tuple[str, int, str, str | None], list[str]],
                 default: str | None = None) -> None:
        self._answers = {key: list(values) for key, values in answers.items()}
        self._positions: dict[tuple[str, int, str, str | None], int] = {}
        self.default = default
        self.call_count = 0
        self._lock = threading.Lock()

    @classmethod
    def from_script(cls, path: str) -> "MockBackend":
        """Load a script file: {"default": ..., "answers": [entry, ...]}.

        Each entry holds report_id, prompt_id, abnormality, an optional
        expression, and an answer (string, or list of strings consumed per
        call).
        """
        try:
            with open(path, encoding="utf-8") as fh:
                raw = json.load(fh)
        except (OSError, json.JSONDecodeError) as exc:
            raise BackendError(f"cannot load mock script {path!r}: {exc}") from exc
        if not isinstance(raw, dict) or "answers" not in raw:
            raise BackendError(f"mock script {path!r} must be an object with "
                               f"an 'answers' list")
        answers: dict[tuple[str, int, str, str | None], list[str]] = {}
        for index, entry in enumerate(raw["answers"]):
            try:
                key = (str(entry["report_id"]), int(entry["prompt_id"]),
                       str(entry["abnormality"]), entry.get("expression"))
                value = entry["answer"]
            except (KeyError, TypeError, ValueError) as exc:
                raise BackendError(
                    f"mock script {path!r}: bad entry #{index}: {exc}") from exc
            answers[key] = [value] if isinstance(value, str) else [str(v) for v in value]
        default = raw.get("default")
        return cls(answers, default=None if default is None else str(default))

    def complete(self, request: LlmRequest, meta: QueryMeta | None = None) -> str:
        if meta is None:
            raise BackendError("mock backend needs query metadata to look up answers")
        with self._lock:
            self.call_count += 1
            answers = self._answers.get(meta.key())
            if answers is None:
                if self.default is not None:
                    return self.default
                raise BackendError(
                    f"mock script has no answer for report={meta.report_id!r} "
                    f"prompt={meta.prompt_id} abnormality={meta.abnormality!r} "
                    f"expression={meta.expression!r}")
            position = self._positions.get(meta.key(), 0)
            answer = answers[min(position, len(answers) - 1)]
            self._positions[meta.key()] = position + 1
            return answer


class AnswerCache:
    """Append-only JSONL answer cache, safe for threaded use."""

    def __init__(self, path: str) -> None:
        self.path = path
        self._lock = threading.Lock()
        self._answers: dict[str, str] = {}
        self._load()
        self._fh = open(path, "a", encoding="utf-8")

    def _load(self) -> None:
        if not os.path.exists(self.path):
            with open(self.path, "w", encoding="utf-8") as fh:
                fh.write(json.dumps({"cache_version": CACHE_VERSION}) + "\n")
            return
        with open(self.path, encoding="utf-8") as fh:
            header = fh.readline()
            try:
                version = json.loads(header).get("cache_version")
            except (json.JSONDecodeError, AttributeError):
                version = None
            if version != CACHE_VERSION:
                raise BackendError(
                    f"cache file {self.path!r} has unsupported version {version!r}")
            for line in fh:
                if not line.strip():
                    continue
                try:
                    entry = json.loads(line)
                    self._answers[entry["key"]] = entry["answer"]
                except (json.JSONDecodeError, KeyError, TypeError):
                    # A torn final line from an interrupted run is tolerated.
                    continue

    def get(self, key: str) -> str | None:
        with self._lock:
            return self._answers.get(key)

    def put(self, key: str, answer: str) -> None:
        with self._lock:
            self._answers[key] = answer
            self._fh.write(json.dumps({"key": key, "answer": answer},
                                      ensure_ascii=False) + "\n")
            self._fh.flush()

    def close(self) -> None:
        with self._lock:
            self._fh.close()

    def __len__(self) -> int:
        with self._lock:
            return len(self._answers)


class LlmClient:
    """Backend wrapper adding retries and the persistent answer cache."""

    def __init__(self, backend, cache_path: str | None = None,
                 max_attempts: int = DEFAULT_MAX_ATTEMPTS,
                 retry_base_delay: float = 1.0, sleep=time.sleep) -> None:
        self.backend = backend
        self.cache = AnswerCache(cache_path) if cache_path else None
        self.max_attempts = max_attempts
        self.retry_base_delay = retry_base_delay
        self._sleep = sleep

    @property
    def model(self) -> str:
        return getattr(self.backend, "model", "unknown")

    def query(self, request: LlmRequest, meta: QueryMeta | None = None,
              refresh: bool = False) -> str:
        """Answer a request, consulting the cache unless ``refresh`` is set.

        ``refresh`` skips the cache lookup (the fresh answer is still
        stored), which is how the one-shot retry of unparseable answers asks
        the backend again instead of replaying the cached reply.
        """
        key = cache_key(self.model, request)
        if self.cache is not None and not refresh:
            hit = self.cache.get(key)
            if hit is not None:
                return hit
        answer = self._complete_with_retry(request, meta)
        if self.cache is not None:
            self.cache.put(key, answer)
        return answer

    def _complete_with_retry(self, request: LlmRequest,
                             meta: QueryMeta | None) -> str:
        last_error: TransportError | None = None
        for attempt in range(self.max_attempts):
            try:
                return self.backend.complete(request, meta)
            except TransportError as exc:
                last_error = exc
                if attempt + 1 < self.max_attempts:
                    self._sleep(min(self.retry_base_delay * 2 ** attempt, 30.0))
        raise TransportError(
            f"backend still failing after {self.max_attempts} attempts: {last_error}")

    def close(self) -> None:
        if self.cache is not None:
            self.cache.close()
