"""Chat-completion gateway shared by every LLM stage.

All calls go through :meth:`Gateway.complete`, which applies the rate limit,
retries transient failures with jittered exponential backoff and appends one
record per call to the transcript log.
"""
from __future__ import annotations

import copy
import json
import logging
import random
import threading
import time
from collections import defaultdict, deque
from dataclasses import dataclass
from datetime import datetime, timezone
from pathlib import Path
from typing import Callable, Iterable, Protocol, Sequence

import httpx

logger = logging.getLogger(__name__)

ROLES = ("system", "user", "assistant")

# extraction stages run at zero temperature so replies stay parseable
STAGE_TEMPERATURES = {
    "au2des": 0.7,
    "des2exp": 0.0,
    "verify": 0.0,
    "feedback": 0.7,
    "refine": 0.7,
    "judge": 0.0,
}


class GatewayError(RuntimeError):
    retryable = False

    def __init__(self, message: str, sample_id: str | None = None, stage: str | None = None):
        super().__init__(message)
        self.sample_id = sample_id
        self.stage = stage

    def __str__(self) -> str:
        where = ", ".join(f"{k}={v}" for k, v in (("sample_id", self.sample_id), ("stage", self.stage)) if v)
        base = super().__str__()
        return f"{base} ({where})" if where else base


class TransportError(GatewayError):
    def __init__(self, message, sample_id=None, stage=None, retryable=True):
        super().__init__(message, sample_id, stage)
        self.retryable = retryable


class GatewayTimeout(GatewayError):
    retryable = True


class MalformedResponseError(GatewayError):
    pass


class ScriptExhaustedError(GatewayError):
    pass


@dataclass(frozen=True)
class ChatMessage:
    role: str
    content: str

    def __post_init__(self):
        if self.role not in ROLES:
            raise ValueError(f"role must be one of {ROLES}, got {self.role!r}")
        if not isinstance(self.content, str) or not self.content:
            raise ValueError("message content must be a non-empty string")

    def to_dict(self) -> dict:
        return {"role": self.role, "content": self.content}


class DialogueMemory:
    """Append-only conversation for one sample.

    After an optional leading system message, roles must alternate
    user/assistant starting with user.
    """

    def __init__(self, sample_id: str, messages: Iterable[ChatMessage] = ()):
        self.sample_id = sample_id
        self._messages: list[ChatMessage] = []
        for m in messages:
            self.append(m)

    @property
    def messages(self) -> tuple[ChatMessage, ...]:
        return tuple(self._messages)

    def __len__(self) -> int:
        return len(self._messages)

    def append(self, message: ChatMessage) -> None:
        body = [m for m in self._messages if m.role != "system"]
        if message.role == "system":
            if self._messages:
                raise ValueError("a system message may only lead the conversation")
        else:
            expected = "user" if len(body) % 2 == 0 else "assistant"
            if message.role != expected:
                raise ValueError(f"expected a {expected} message next, got {message.role}")
        self._messages.append(message)

    def add_user(self, content: str) -> None:
        self.append(ChatMessage("user", content))

    def add_assistant(self, content: str) -> None:
        self.append(ChatMessage("assistant", content))

    def fork(self) -> "DialogueMemory":
        return DialogueMemory(self.sample_id, copy.deepcopy(self._messages))

    def to_list(self) -> list[dict]:
        return [m.to_dict() for m in self._messages]

    def last(self) -> ChatMessage | None:
        return self._messages[-1] if self._messages else None


@dataclass(frozen=True)
class GenerationConfig:
    temperature: float = 0.7
    max_output_tokens: int = 1024
    retry_limit: int = 3
    timeout: float = 60.0

    def __post_init__(self):
        if self.temperature < 0:
            raise ValueError("temperature must be >= 0")
        if self.max_output_tokens <= 0:
            raise ValueError("max_output_tokens must be positive")
        if not 0 <= self.retry_limit <= 10:
            raise ValueError("retry_limit must be within [0, 10]")
        if self.timeout <= 0:
            raise ValueError("timeout must be positive")

    def for_stage(self, stage: str) -> "GenerationConfig":
        base = stage.split("_")[0]
        if base not in STAGE_TEMPERATURES:
            return self
        return GenerationConfig(STAGE_TEMPERATURES[base], self.max_output_tokens, self.retry_limit, self.timeout)


@dataclass(frozen=True)
class CallContext:
    sample_id: str
    stage: str
    round: int = 1


class ChatBackend(Protocol):
    def send(self, messages: list[dict], cfg: GenerationConfig, ctx: CallContext) -> str: ...


class HttpChatBackend:
    """OpenAI-style ``/chat/completions`` endpoint."""

    def __init__(self, endpoint: str, model: str, api_key: str | None = None,
                 client: httpx.Client | None = None):
        self.endpoint = endpoint
        self.model = model
        self.api_key = api_key
        self.client = client or httpx.Client()

    def send(self, messages, cfg, ctx):
        headers = {"Content-Type": "application/json"}
        if self.api_key:
            headers["Authorization"] = f"Bearer {self.api_key}"
        payload = {
            "model": self.model,
            "messages": messages,
            "temperature": cfg.temperature,
            "max_tokens": cfg.max_output_tokens,
        }
        try:
            resp = self.client.post(self.endpoint, json=payload, headers=headers, timeout=cfg.timeout)
        except httpx.TimeoutException as e:
            raise GatewayTimeout(f"request timed out: {e}", ctx.sample_id, ctx.stage) from e
        except httpx.HTTPError as e:
            raise TransportError(f"transport failure: {e}", ctx.sample_id, ctx.stage) from e
        if resp.status_code == 429 or resp.status_code >= 500:
            raise TransportError(f"HTTP {resp.status_code}", ctx.sample_id, ctx.stage)
        if resp.status_code >= 400:
            raise TransportError(f"HTTP {resp.status_code}: {resp.text[:200]}", ctx.sample_id, ctx.stage,
                                 retryable=False)
        try:
            content = resp.json()["choices"][0]["message"]["content"]
        except (ValueError, KeyError, IndexError, TypeError) as e:
            raise MalformedResponseError(f"unexpected response body: {resp.text[:200]}",
                                         ctx.sample_id, ctx.stage) from e
        if not isinstance(content, str) or not content.strip():
            raise MalformedResponseError("empty completion content", ctx.sample_id, ctx.stage)
        return content


Responder = Callable[[CallContext, list], str]


class ScriptedBackend:
    """Deterministic mock serving canned replies.

    ``script`` is either a list (served in call order) or a dict keyed by
    ``(sample_id, stage, round)``, ``(stage, round)`` or ``stage``; the most
    specific key wins. A dict value that is a list is consumed one reply per
    call. ``responder`` is consulted when no scripted reply matches.
    """

    def __init__(self, script: Sequence[str] | dict | None = None, responder: Responder | None = None):
        self._lock = threading.Lock()
        self._queue: deque[str] | None = None
        self._keyed: dict = {}
        if isinstance(script, dict):
            for key, value in script.items():
                self._keyed[key] = deque(value) if isinstance(value, (list, tuple)) else value
        elif script is not None:
            self._queue = deque(script)
        self.responder = responder
        self.calls = 0

    def send(self, messages, cfg, ctx):
        with self._lock:
            self.calls += 1
            if self._queue is not None:
                if self._queue:
                    return self._queue.popleft()
            else:
                for key in ((ctx.sample_id, ctx.stage, ctx.round), (ctx.stage, ctx.round), ctx.stage):
                    if key in self._keyed:
                        value = self._keyed[key]
                        if isinstance(value, deque):
                            if not value:
                                continue
                            return value.popleft()
                        return value
        if self.responder is not None:
            return self.responder(ctx, messages)
        raise ScriptExhaustedError("mock script has no reply for this call", ctx.sample_id, ctx.stage)

    @classmethod
    def from_transcript(cls, path: str | Path) -> "ScriptedBackend":
        """Replay mode: serve the responses recorded in a transcript log."""
        script: dict = defaultdict(list)
        for rec in read_transcript(path):
            if rec.get("response") is not None:
                script[(rec["sample_id"], rec["stage"], rec["round"])].append(rec["response"])
        return cls(dict(script))

    @classmethod
    def from_json(cls, path: str | Path, responder: Responder | None = None) -> "ScriptedBackend":
        """Load a script file: ``{"entries": [{sample_id?, stage, round?, response}]}``."""
        data = json.loads(Path(path).read_text(encoding="utf-8"))
        if isinstance(data, list):
            return cls(data, responder)
        script: dict = defaultdict(list)
        for e in data.get("entries", []):
            if "sample_id" in e:
                key = (e["sample_id"], e["stage"], e.get("round", 1))
            elif "round" in e:
                key = (e["stage"], e["round"])
            else:
                key = e["stage"]
            script[key].append(e["response"])
        return cls({k: v[0] if len(v) == 1 else v for k, v in script.items()}, responder)


class TokenBucket:
    """Thread-safe token bucket; ``acquire`` blocks until a token is free."""

    def __init__(self, rate: float, capacity: float | None = None, clock=time.monotonic, sleep=time.sleep):
        if rate <= 0:
            raise ValueError("rate must be positive")
        self.rate = rate
        self.capacity = capacity if capacity is not None else max(1.0, rate)
        self._tokens = self.capacity
        self._clock = clock
        self._sleep = sleep
        self._last = clock()
        self._lock = threading.Lock()

    def acquire(self, tokens: float = 1.0) -> None:
        while True:
            with self._lock:
                now = self._clock()
                self._tokens = min(self.capacity, self._tokens + (now - self._last) * self.rate)
                self._last = now
                if self._tokens >= tokens:
                    self._tokens -= tokens
                    return
                wait = (tokens - self._tokens) / self.rate
            self._sleep(wait)


class TranscriptLog:
    """Append-only JSON-lines log of every request/response pair."""

    def __init__(self, path: str | Path | None = None):
        self.path = Path(path) if path is not None else None
        self.records: list[dict] = []
        self._lock = threading.Lock()
        if self.path is not None:
            self.path.parent.mkdir(parents=True, exist_ok=True)
            self.path.touch()

    def write(self, record: dict) -> None:
        line = json.dumps(record, ensure_ascii=False)
        with self._lock:
            self.records.append(record)
            if self.path is not None:
                with self.path.open("a", encoding="utf-8") as f:
                    f.write(line + "\n")

    def for_sample(self, sample_id: str) -> list[dict]:
        with self._lock:
            return [r for r in self.records if r["sample_id"] == sample_id]


def read_transcript(path: str | Path) -> list[dict]:
    with open(path, encoding="utf-8") as f:
        return [json.loads(line) for line in f if line.strip()]


class Gateway:
    def __init__(
        self,
        backend: ChatBackend,
        transcript: TranscriptLog | None = None,
        rate_limiter: TokenBucket | None = None,
        backoff_base: float = 0.5,
        backoff_max: float = 8.0,
        sleep: Callable[[float], None] = time.sleep,
        rng: random.Random | None = None,
    ):
        self.backend = backend
        self.transcript = transcript if transcript is not None else TranscriptLog()
        self.rate_limiter = rate_limiter
        self.backoff_base = backoff_base
        self.backoff_max = backoff_max
        self._sleep = sleep
        self._rng = rng or random.Random()
        self._rng_lock = threading.Lock()

    def _backoff(self, attempt: int) -> float:
        with self._rng_lock:
            jitter = self._rng.uniform(0, 1)
        return min(self.backoff_max, self.backoff_base * 2 ** (attempt - 1)) * (0.5 + 0.5 * jitter)

    def complete(self, memory: DialogueMemory, cfg: GenerationConfig, stage: str, round: int = 1) -> ChatMessage:
        last = memory.last()
        if last is None or last.role != "user":
            raise ValueError("memory must end with a user message")
        ctx = CallContext(memory.sample_id, stage, round)
        request = memory.to_list()
        attempts = 0
        error: GatewayError | None = None
        content = None
        while attempts <= cfg.retry_limit:
            attempts += 1
            if self.rate_limiter is not None:
                self.rate_limiter.acquire()
            try:
                content = self.backend.send(request, cfg, ctx)
                error = None
                break
            except GatewayError as e:
                e.sample_id = e.sample_id or ctx.sample_id
                e.stage = e.stage or ctx.stage
                error = e
                if not e.retryable or attempts > cfg.retry_limit:
                    break
                delay = self._backoff(attempts)
                logger.warning("retrying %s/%s after %s (attempt %d)", ctx.sample_id, stage, e, attempts)
                self._sleep(delay)
        if error is None and (not isinstance(content, str) or not content.strip()):
            error = MalformedResponseError("backend returned empty content", ctx.sample_id, stage)
        self.transcript.write({
            "sample_id": ctx.sample_id,
            "stage": stage,
            "round": round,
            "request_messages": request,
            "response": None if error else content,
            "timestamp": datetime.now(timezone.utc).isoformat(),
            "attempt_count": attempts,
            **({"error": str(error)} if error else {}),
        })
        if error is not None:
            raise error
        return ChatMessage("assistant", content)
