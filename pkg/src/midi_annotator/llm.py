"""Provider-agnostic chat-completion client and the LLM captioning flow."""
from __future__ import annotations

import logging
import os
import threading
import time
from dataclasses import dataclass
from typing import Callable, Sequence

import httpx

from .captions import CaptionRecord, FeatureRecord, ValidationError, render_template_caption, validate_caption
from .prompting import InContextExample, build_prompt, corrective_prompt

log = logging.getLogger(__name__)

TRANSIENT_STATUS = {429, 500, 502, 503, 504}


@dataclass(frozen=True)
class LLMEndpointConfig:
    url: str
    model: str
    token_env: str = "LLM_API_TOKEN"
    timeout: float = 60.0
    temperature: float = 0.7
    max_tokens: int = 512
    max_attempts: int = 5
    backoff_base: float = 1.0
    backoff_max: float = 30.0
    requests_per_minute: float = 60.0
    max_concurrency: int = 4


class LlmError(Exception):
    """Request failed for good.  ``kind`` is Timeout, RateLimited, AuthFailed or BadResponse."""

    def __init__(self, kind: str, message: str, file_id: str | None = None, attempts: int = 0):
        self.kind = kind
        self.file_id = file_id
        self.attempts = attempts
        prefix = f"[{file_id}] " if file_id else ""
        super().__init__(f"{prefix}{kind}: {message}")


class RateLimiter:
    """Spaces request starts at least ``60 / per_minute`` seconds apart, across threads."""

    def __init__(self, per_minute: float, clock: Callable[[], float] = time.monotonic,
                 sleep: Callable[[float], None] = time.sleep):
        self.interval = 60.0 / per_minute if per_minute > 0 else 0.0
        self._clock = clock
        self._sleep = sleep
        self._lock = threading.Lock()
        self._next = 0.0

    def acquire(self) -> None:
        with self._lock:
            now = self._clock()
            start = max(now, self._next)
            self._next = start + self.interval
        if start > now:
            self._sleep(start - now)


def _extract_text(payload) -> str:
    # OpenAI-style first, then Anthropic-style, then bare completion
    try:
        if "choices" in payload:
            choice = payload["choices"][0]
            text = choice["message"]["content"] if "message" in choice else choice["text"]
        elif "content" in payload:
            text = "".join(block["text"] for block in payload["content"] if block.get("type", "text") == "text")
        else:
            text = payload["completion"]
    except (KeyError, IndexError, TypeError, AttributeError):
        raise ValueError("unrecognised response shape") from None
    if not isinstance(text, str) or not text.strip():
        raise ValueError("empty completion")
    return text.strip()


class LlmClient:
    def __init__(self, config: LLMEndpointConfig, http: httpx.Client | None = None,
                 sleep: Callable[[float], None] = time.sleep):
        self.config = config
        self._http = http or httpx.Client(timeout=config.timeout)
        self._sleep = sleep
        self._limiter = RateLimiter(config.requests_per_minute, sleep=sleep)
        self._slots = threading.BoundedSemaphore(max(1, config.max_concurrency))

    def close(self) -> None:
        self._http.close()

    def __enter__(self):
        return self

    def __exit__(self, *exc):
        self.close()

    def _headers(self) -> dict[str, str]:
        headers = {"Content-Type": "application/json"}
        token = os.environ.get(self.config.token_env)
        if token:
            headers["Authorization"] = f"Bearer {token}"
        return headers

    def _backoff(self, attempt: int, retry_after: str | None) -> float:
        delay = self.config.backoff_base * 2 ** (attempt - 1)
        if retry_after:
            try:
                delay = max(delay, float(retry_after))
            except ValueError:
                pass
        return min(delay, self.config.backoff_max)

    def complete(self, prompt: str, file_id: str | None = None) -> str:
        """POST one chat-completion request and return the reply text.

        Timeouts, connection failures, 429 and 5xx responses are retried with
        exponential backoff up to ``max_attempts`` requests in total.
        """
        cfg = self.config
        body = {
            "model": cfg.model,
            "messages": [{"role": "user", "content": prompt}],
            "max_tokens": cfg.max_tokens,
            "temperature": cfg.temperature,
        }
        last_kind, last_message = "BadResponse", "no attempt made"
        for attempt in range(1, cfg.max_attempts + 1):
            retry_after = None
            self._limiter.acquire()
            try:
                with self._slots:
                    resp = self._http.post(cfg.url, json=body, headers=self._headers(), timeout=cfg.timeout)
            except httpx.TimeoutException as exc:
                last_kind, last_message = "Timeout", f"no response within {cfg.timeout}s ({exc.__class__.__name__})"
            except httpx.TransportError as exc:
                last_kind, last_message = "BadResponse", f"transport error: {exc}"
            else:
                if resp.status_code in (401, 403):
                    raise LlmError("AuthFailed", f"HTTP {resp.status_code}", file_id, attempt)
                if resp.status_code in TRANSIENT_STATUS:
                    last_kind = "RateLimited" if resp.status_code == 429 else "BadResponse"
                    last_message = f"HTTP {resp.status_code}"
                    retry_after = resp.headers.get("retry-after")
                elif resp.status_code >= 400:
                    raise LlmError("BadResponse", f"HTTP {resp.status_code}", file_id, attempt)
                else:
                    try:
                        return _extract_text(resp.json())
                    except ValueError as exc:
                        raise LlmError("BadResponse", str(exc), file_id, attempt) from None
            if attempt < cfg.max_attempts:
                delay = self._backoff(attempt, retry_after)
                log.debug("attempt %d for %s failed (%s); retrying in %.2fs", attempt, file_id, last_message, delay)
                self._sleep(delay)
        raise LlmError(last_kind, last_message, file_id, cfg.max_attempts)


def generate_llm_caption(prompt: str, endpoint: LLMEndpointConfig | LlmClient, file_id: str | None = None) -> str:
    if isinstance(endpoint, LlmClient):
        return endpoint.complete(prompt, file_id)
    with LlmClient(endpoint) as client:
        return client.complete(prompt, file_id)


def llm_caption(features: FeatureRecord, client: LlmClient, examples: Sequence[InContextExample],
                seed: int = 0) -> CaptionRecord:
    """Caption via the LLM; one corrective retry on a bad caption, then the template.

    Transport failures surface as :class:`LlmError` so the caller can retry
    the file later.
    """
    source = f"llm:{client.config.model}"
    prompt = build_prompt(examples, features)
    text = client.complete(prompt, features.file_id)
    try:
        return validate_caption(text, features, source)
    except ValidationError as first:
        log.info("caption for %s rejected (%s); asking again", features.file_id, first)
        text = client.complete(corrective_prompt(prompt, first, features), features.file_id)
        try:
            return validate_caption(text, features, source)
        except ValidationError as second:
            log.warning("caption for %s rejected twice (%s); using template", features.file_id, second)
            return render_template_caption(features, seed)
