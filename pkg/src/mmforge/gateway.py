"""Uniform client for external model endpoints.

All model access (tagging, generation, judging, quality scoring, loss
scoring) goes over one OpenAI-compatible chat-completions protocol plus a
fixture-only ``/score`` route. Model identity is deployment configuration,
never code. The client retries transient failures with exponential backoff
and jitter, fails fast on other 4xx, and caps in-flight requests per
endpoint with a semaphore.
"""

from __future__ import annotations

import base64
import math
import random
import re
import string
import threading
import time
from dataclasses import dataclass, field
from importlib import resources

import requests

from .dedup import LossScore

DEFAULT_TIMEOUT = 30.0
RETRYABLE_STATUSES = frozenset({429, 500, 502, 503, 504})


class GatewayError(Exception):
    """Base class for endpoint access failures."""


class RetryExhausted(GatewayError):
    """All attempts failed with retryable errors."""


class NonRetryableError(GatewayError):
    """The server rejected the request with a non-retryable status."""


class MalformedResponse(GatewayError):
    """The response body does not match the expected protocol shape."""


class ScoreParseError(GatewayError):
    """No usable score or verdict could be parsed from model output."""


@dataclass(frozen=True)
class RetryPolicy:
    max_attempts: int = 3
    base_backoff: float = 0.5
    jitter: float = 0.1

    def __post_init__(self):
        if self.max_attempts < 1:
            raise ValueError("max_attempts must be >= 1")

    def delay(self, attempt: int, rng: random.Random) -> float:
        """Backoff before retry number ``attempt`` (1-based).

        The deterministic part doubles per attempt; jitter adds up to
        ``jitter`` fraction on top, never below the deterministic floor.
        """
        return self.base_backoff * (2 ** (attempt - 1)) * (1 + self.jitter * rng.random())


@dataclass(frozen=True)
class EndpointConfig:
    base_url: str
    model_name: str
    api_key: str = ""
    max_concurrent: int = 4
    timeout: float = DEFAULT_TIMEOUT
    retry: RetryPolicy = field(default_factory=RetryPolicy)
    temperature: float = 0.7
    top_p: float = 1.0
    max_tokens: int = 512
    seed: int | None = None

    def __post_init__(self):
        if self.max_concurrent < 1:
            raise ValueError("max_concurrent must be >= 1")
        if self.timeout <= 0:
            raise ValueError("timeout must be > 0")


def text_part(text: str) -> dict:
    return {"type": "text", "text": text}


def image_part(data: bytes, mime: str = "image/png") -> dict:
    uri = f"data:{mime};base64,{base64.b64encode(data).decode('ascii')}"
    return {"type": "image_url", "image_url": {"url": uri}}


@dataclass(frozen=True)
class ChatRequest:
    """Ordered messages in OpenAI content-parts shape."""

    messages: tuple[dict, ...]

    def __post_init__(self):
        for idx, msg in enumerate(self.messages):
            role = msg.get("role")
            if role == "system" and idx != 0:
                # also rejects a second system message anywhere
                raise ValueError("at most one system message, and first")
            parts = msg.get("content")
            if not isinstance(parts, list):
                raise ValueError("message content must be a list of parts")
            if role != "user" and any(p.get("type") == "image_url" for p in parts):
                raise ValueError("image parts are only allowed in user messages")

    @classmethod
    def user(cls, text: str, images: list[bytes] = (),  # type: ignore[assignment]
             system: str | None = None, mime: str = "image/png") -> "ChatRequest":
        messages = []
        if system:
            messages.append({"role": "system", "content": [text_part(system)]})
        parts = [image_part(img, mime) for img in images]
        parts.append(text_part(text))
        messages.append({"role": "user", "content": parts})
        return cls(tuple(messages))


@dataclass(frozen=True)
class ChatResponse:
    text: str
    finish_reason: str
    prompt_tokens: int
    completion_tokens: int
    latency_s: float
    attempts: int


@dataclass(frozen=True)
class PromptTemplate:
    """Versioned text template with named placeholders."""

    name: str
    version: int
    body: str

    def render(self, **values: str) -> str:
        try:
            return self.body.format(**values)
        except (KeyError, IndexError) as exc:
            raise ValueError(f"template {self.name} v{self.version}: "
                             f"missing placeholder value {exc}") from exc

    def placeholders(self) -> set[str]:
        return {name for _, name, _, _ in string.Formatter().parse(self.body)
                if name}


def load_prompt(name: str, version: int = 1,
                require: set[str] | None = None) -> PromptTemplate:
    """Load a bundled prompt asset ``assets/prompts/<name>.v<version>.txt``."""
    ref = resources.files("mmforge").joinpath(f"assets/prompts/{name}.v{version}.txt")
    template = PromptTemplate(name=name, version=version,
                              body=ref.read_text(encoding="utf-8").strip())
    if require is not None:
        missing = require - template.placeholders()
        if missing:
            raise ValueError(
                f"template {name} v{version} lacks placeholders {sorted(missing)}")
    return template


def parse_score_1_10(text: str) -> int:
    """First integer in [1, 10] appearing in the text; others are skipped."""
    for token in re.findall(r"\d+", text):
        value = int(token)
        if 1 <= value <= 10:
            return value
    raise ScoreParseError(f"no score in 1..10 found in {text!r}")


def parse_verdict(text: str) -> str | None:
    """Map a judge reply to 'relevant'/'irrelevant'; None if unparseable."""
    token = text.strip().lower().strip(".!,:;\"'")
    if token.startswith("yes"):
        return "relevant"
    if token.startswith("no"):
        return "irrelevant"
    return None


def parse_tag_list(text: str) -> set[tuple[str, float]]:
    """Parse a delimited tag list into (tag, confidence) pairs.

    Splits on pipes, commas, and newlines; tags are lowercased and
    trimmed, duplicates collapse to the first occurrence, and an optional
    ":0.97" suffix is read as the confidence (clamped to [0, 1], default 1).
    """
    tags: dict[str, float] = {}
    for chunk in re.split(r"[|,\n]", text):
        entry = chunk.strip().lower()
        if not entry:
            continue
        confidence = 1.0
        if ":" in entry:
            name, _, conf_text = entry.rpartition(":")
            try:
                confidence = float(conf_text)
                entry = name.strip()
            except ValueError:
                pass
        if not entry:
            continue
        confidence = max(0.0, min(1.0, confidence))
        tags.setdefault(entry, confidence)
    return {(name, conf) for name, conf in tags.items()}


class Gateway:
    """Per-endpoint client with retry, backoff, and a concurrency cap.

    Safe for concurrent use; ``sleep`` and ``rng`` are injectable so tests
    can run the retry path without wall-clock delays.
    """

    def __init__(self, config: EndpointConfig, *, session: requests.Session | None = None,
                 sleep=time.sleep, rng: random.Random | None = None):
        self.config = config
        self._session = session or requests.Session()
        self._sleep = sleep
        self._rng = rng or random.Random()
        self._semaphore = threading.BoundedSemaphore(config.max_concurrent)
        self._lock = threading.Lock()
        self._in_flight = 0
        self.max_in_flight_seen = 0

    # -- plumbing -------------------------------------------------------

    def _headers(self) -> dict:
        headers = {"Content-Type": "application/json"}
        if self.config.api_key:
            headers["Authorization"] = f"Bearer {self.config.api_key}"
        return headers

    def _post_with_retry(self, path: str, payload: dict) -> tuple[dict, float, int]:
        """POST with bounded concurrency and retry; returns (body, latency, attempts)."""
        policy = self.config.retry
        url = self.config.base_url.rstrip("/") + path
        last_error: Exception | None = None
        for attempt in range(1, policy.max_attempts + 1):
            start = time.monotonic()
            try:
                with self._semaphore:
                    with self._lock:
                        self._in_flight += 1
                        self.max_in_flight_seen = max(self.max_in_flight_seen,
                                                      self._in_flight)
                    try:
                        resp = self._session.post(url, json=payload,
                                                  headers=self._headers(),
                                                  timeout=self.config.timeout)
                    finally:
                        with self._lock:
                            self._in_flight -= 1
            except (requests.Timeout, requests.ConnectionError) as exc:
                last_error = exc
            else:
                if resp.status_code == 200:
                    try:
                        return resp.json(), time.monotonic() - start, attempt
                    except ValueError as exc:
                        raise MalformedResponse(
                            f"non-JSON body from {url}: {exc}") from exc
                if resp.status_code in RETRYABLE_STATUSES:
                    last_error = GatewayError(
                        f"status {resp.status_code} from {url}")
                else:
                    raise NonRetryableError(
                        f"status {resp.status_code} from {url}: "
                        f"{resp.text[:200]}")
            if attempt < policy.max_attempts:
                self._sleep(policy.delay(attempt, self._rng))
        raise RetryExhausted(
            f"{policy.max_attempts} attempts to {url} failed: {last_error}")

    # -- operations -----------------------------------------------------

    def call(self, request: ChatRequest) -> ChatResponse:
        """One chat completion; retries transient failures."""
        payload = {
            "model": self.config.model_name,
            "messages": list(request.messages),
            "temperature": self.config.temperature,
            "top_p": self.config.top_p,
            "max_tokens": self.config.max_tokens,
        }
        if self.config.seed is not None:
            payload["seed"] = self.config.seed
        body, latency, attempts = self._post_with_retry("/chat/completions", payload)
        try:
            choice = body["choices"][0]
            text = choice["message"]["content"]
            finish = choice.get("finish_reason", "")
            usage = body.get("usage", {})
        except (KeyError, IndexError, TypeError) as exc:
            raise MalformedResponse(f"unexpected completion shape: {exc}") from exc
        if not isinstance(text, str):
            raise MalformedResponse("completion content is not a string")
        return ChatResponse(
            text=text,
            finish_reason=finish,
            prompt_tokens=int(usage.get("prompt_tokens", 0)),
            completion_tokens=int(usage.get("completion_tokens", 0)),
            latency_s=latency,
            attempts=attempts,
        )

    def tag_image(self, image: bytes, mime: str = "image/png") -> set[tuple[str, float]]:
        """Open-vocabulary tags for one image, with confidences in [0, 1].

        The tagging service replies with a delimited list; entries may
        carry an optional ":confidence" suffix (default 1.0). Tags are
        lowercased and trimmed; duplicates collapse to one entry.
        """
        template = load_prompt("image_tagging")
        response = self.call(ChatRequest.user(template.body, images=[image], mime=mime))
        return parse_tag_list(response.text)

    def score_loss(self, record) -> LossScore:
        """Mean per-token NLL of a record's answers from the /score route."""
        payload = {
            "record_id": record.record_id,
            "image_id": record.image.image_id if record.image else None,
            "turns": [{"question": t.question, "answer": t.answer}
                      for t in record.turns],
        }
        body, _, _ = self._post_with_retry("/score", payload)
        try:
            loss = float(body["loss"])
        except (KeyError, TypeError, ValueError) as exc:
            raise MalformedResponse(f"bad /score body: {body!r}") from exc
        if not math.isfinite(loss):
            raise GatewayError(f"non-finite loss for {record.record_id!r}")
        return LossScore(record.record_id, loss)
