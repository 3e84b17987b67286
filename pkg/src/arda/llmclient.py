"""Chat-completion backends.

Two interchangeable backends expose ``complete(request) -> str``:

* :class:`ScriptedBackend` answers from an ordered :class:`Script` of
  (matcher, canned response) entries. It is bit-deterministic and is what the
  tests and the offline demo use.
* :class:`RemoteBackend` speaks the chat-completions JSON protocol of the
  common hosted APIs, with bounded exponential-backoff retries, a hard
  per-request timeout and a process-wide token-bucket rate limiter.

Both keep a session log of :class:`ChatExchange` objects which can be
written as JSON lines and turned back into a replay script.
"""

from __future__ import annotations

import hashlib
import json
import logging
import os
import re
import string
import threading
import time
from dataclasses import dataclass, field
from importlib import resources
from pathlib import Path
from typing import Any, Callable, Iterable, Mapping, Sequence

import httpx

log = logging.getLogger(__name__)

ROLES = ("system", "user", "assistant")


class LLMError(RuntimeError):
    retryable = False


class LLMTimeout(LLMError):
    pass


class LLMProtocolError(LLMError):
    pass


class LLMRetryExhausted(LLMError):
    pass


class ScriptExhausted(LLMError):
    pass


@dataclass(frozen=True)
class Message:
    role: str
    content: str

    def to_dict(self) -> dict:
        return {"role": self.role, "content": self.content}


@dataclass(frozen=True)
class ChatRequest:
    messages: tuple[Message, ...]
    temperature: float = 0.0
    max_tokens: int | None = None
    model: str | None = None

    def __post_init__(self):
        if not self.messages:
            raise ValueError("a chat request needs at least one message")
        for i, m in enumerate(self.messages):
            if m.role not in ROLES:
                raise ValueError(f"message {i}: unknown role {m.role!r}")
        convo = [m.role for m in self.messages if m.role != "system"]
        if any(m.role == "system" for m in self.messages[1:]):
            raise ValueError("system message must come first")
        for a, b in zip(convo, convo[1:]):
            if a == b:
                raise ValueError("user and assistant turns must alternate")

    @classmethod
    def of(cls, *pairs: tuple[str, str], **params: Any) -> ChatRequest:
        return cls(tuple(Message(r, c) for r, c in pairs), **params)

    @classmethod
    def user(cls, content: str, system: str | None = None, **params: Any) -> ChatRequest:
        msgs = ([("system", system)] if system else []) + [("user", content)]
        return cls.of(*msgs, **params)

    @property
    def text(self) -> str:
        return "\n".join(m.content for m in self.messages)

    @property
    def last_user(self) -> str:
        for m in reversed(self.messages):
            if m.role == "user":
                return m.content
        return ""

    def followup(self, response: str, content: str) -> ChatRequest:
        msgs = self.messages + (Message("assistant", response), Message("user", content))
        return ChatRequest(msgs, self.temperature, self.max_tokens, self.model)


@dataclass
class ChatExchange:
    request: ChatRequest
    response: str | None = None
    usage: dict[str, int] = field(default_factory=dict)
    latency: float = 0.0
    attempts: int = 1
    backend: str = ""

    def to_dict(self) -> dict:
        return {
            "messages": [m.to_dict() for m in self.request.messages],
            "parameters": {"temperature": self.request.temperature,
                           "max_tokens": self.request.max_tokens,
                           "model": self.request.model},
            "response": self.response,
            "usage": dict(self.usage),
            "latency": self.latency,
            "attempts": self.attempts,
            "backend": self.backend,
        }

    @classmethod
    def from_dict(cls, d: Mapping[str, Any]) -> ChatExchange:
        p = d.get("parameters") or {}
        req = ChatRequest(tuple(Message(m["role"], m["content"]) for m in d["messages"]),
                          p.get("temperature", 0.0), p.get("max_tokens"), p.get("model"))
        return cls(req, d.get("response"), dict(d.get("usage") or {}),
                   d.get("latency", 0.0), d.get("attempts", 1), d.get("backend", ""))


def approx_tokens(text: str) -> int:
    return len(text.split())


# -- scripted backend --------------------------------------------------------


Matcher = Callable[[ChatRequest], bool]


def match_any() -> Matcher:
    return lambda req: True


def match_contains(*needles: str) -> Matcher:
    return lambda req: all(n in req.text for n in needles)


def match_regex(pattern: str) -> Matcher:
    rx = re.compile(pattern, re.S)
    return lambda req: rx.search(req.text) is not None


def matcher_from_spec(spec: Mapping[str, Any] | None) -> Matcher:
    """Build a matcher from a script-file spec.

    Supported keys (all must hold): ``contains`` (string or list),
    ``regex``, ``last_user_contains``. An empty spec matches everything.
    """
    if not spec:
        return match_any()
    checks: list[Matcher] = []
    if "contains" in spec:
        needles = spec["contains"]
        checks.append(match_contains(*([needles] if isinstance(needles, str) else needles)))
    if "regex" in spec:
        checks.append(match_regex(spec["regex"]))
    if "last_user_contains" in spec:
        needle = spec["last_user_contains"]
        checks.append(lambda req: needle in req.last_user)
    return lambda req: all(c(req) for c in checks)


@dataclass
class ScriptEntry:
    matcher: Matcher
    response: str
    times: int | None = 1  # None: unlimited
    spec: Mapping[str, Any] | None = None


@dataclass
class Script:
    entries: list[ScriptEntry]
    exhaustion: str = "error"  # or "echo"

    def __post_init__(self):
        if self.exhaustion not in ("error", "echo"):
            raise ValueError(f"unknown exhaustion policy {self.exhaustion!r}")

    @classmethod
    def from_dict(cls, d: Mapping[str, Any]) -> Script:
        entries = []
        for e in d.get("entries", []):
            resp = e["response"]
            if not isinstance(resp, str):
                resp = json.dumps(resp, sort_keys=True)
            entries.append(ScriptEntry(matcher_from_spec(e.get("match")), resp,
                                       e.get("times", 1), e.get("match")))
        return cls(entries, d.get("exhaustion", "error"))

    @classmethod
    def load(cls, path: str | Path) -> Script:
        with open(path, encoding="utf-8") as fh:
            return cls.from_dict(json.load(fh))

    def to_dict(self) -> dict:
        return {"exhaustion": self.exhaustion,
                "entries": [{"match": e.spec or {}, "response": e.response, "times": e.times}
                            for e in self.entries]}


class ScriptedBackend:
    """Answers requests from a script; first unexhausted matching entry wins."""

    name = "scripted"

    def __init__(self, script: Script | Sequence[str]):
        if not isinstance(script, Script):
            script = Script([ScriptEntry(match_any(), r) for r in script])
        self.script = script
        self._used = [0] * len(script.entries)
        self._lock = threading.Lock()
        self.session: list[ChatExchange] = []

    def complete(self, request: ChatRequest) -> str:
        with self._lock:
            response = None
            for i, entry in enumerate(self.script.entries):
                if entry.times is not None and self._used[i] >= entry.times:
                    continue
                if entry.matcher(request):
                    self._used[i] += 1
                    response = entry.response
                    break
            if response is None:
                if self.script.exhaustion == "echo":
                    response = request.last_user
                else:
                    raise ScriptExhausted(
                        f"script exhausted after {len(self.session)} exchanges")
            self.session.append(ChatExchange(
                request, response,
                {"prompt_tokens": approx_tokens(request.text),
                 "completion_tokens": approx_tokens(response)},
                0.0, 1, self.name))
            return response


# -- remote backend ----------------------------------------------------------


class TokenBucket:
    """Token-bucket rate limiter; ``acquire`` blocks until a token is free."""

    def __init__(self, rate: float, capacity: float | None = None,
                 clock: Callable[[], float] = time.monotonic,
                 sleep: Callable[[float], None] = time.sleep):
        if rate <= 0:
            raise ValueError("rate must be positive")
        self.rate = rate
        self.capacity = capacity if capacity is not None else max(1.0, rate)
        self._tokens = self.capacity
        self._clock = clock
        self._sleep = sleep
        self._last = clock()
        self._lock = threading.Lock()

    def acquire(self) -> None:
        while True:
            with self._lock:
                now = self._clock()
                self._tokens = min(self.capacity, self._tokens + (now - self._last) * self.rate)
                self._last = now
                if self._tokens >= 1:
                    self._tokens -= 1
                    return
                wait = (1 - self._tokens) / self.rate
            self._sleep(wait)


_shared_limiter: TokenBucket | None = None
_shared_lock = threading.Lock()


def shared_rate_limiter(rate: float = 5.0) -> TokenBucket:
    global _shared_limiter
    with _shared_lock:
        if _shared_limiter is None:
            _shared_limiter = TokenBucket(rate)
        return _shared_limiter


RETRYABLE_STATUS = {408, 409, 429, 500, 502, 503, 504}


@dataclass
class RemoteConfig:
    endpoint: str = ""
    model: str = "gpt-4-32k"
    timeout: float = 60.0
    max_attempts: int = 3
    backoff_base: float = 1.0
    backoff_max: float = 30.0
    temperature: float = 0.0
    max_tokens: int | None = None
    api_key_env: str = "ARDA_API_KEY"

    @classmethod
    def from_env(cls, **overrides: Any) -> RemoteConfig:
        cfg = cls(endpoint=os.environ.get("ARDA_ENDPOINT", ""),
                  model=os.environ.get("ARDA_MODEL", cls.model))
        for k, v in overrides.items():
            if v is not None:
                setattr(cfg, k, v)
        return cfg


class RemoteBackend:
    """OpenAI-compatible chat-completions client.

    Retries on HTTP 408/409/429/5xx, timeouts and connection errors, with
    exponential backoff ``backoff_base * 2**n`` capped at ``backoff_max``.
    Other 4xx responses raise :class:`LLMProtocolError` immediately. After
    ``max_attempts`` failures the last error is raised (a timeout stays a
    :class:`LLMTimeout`).
    """

    name = "remote"

    def __init__(self, config: RemoteConfig | None = None, limiter: TokenBucket | None = None,
                 sleep: Callable[[float], None] = time.sleep, transport=None):
        self.config = config or RemoteConfig.from_env()
        if not self.config.endpoint:
            raise LLMProtocolError("no endpoint configured (set ARDA_ENDPOINT)")
        if self.config.max_attempts < 1:
            raise ValueError("max_attempts must be at least 1")
        self.limiter = limiter
        self.sleep = sleep
        self.session: list[ChatExchange] = []
        self.attempt_log: list[dict[str, Any]] = []
        self._client = httpx.Client(timeout=self.config.timeout, transport=transport)
        self._lock = threading.Lock()

    def _headers(self) -> dict[str, str]:
        headers = {"Content-Type": "application/json"}
        key = os.environ.get(self.config.api_key_env)
        if key:
            headers["Authorization"] = f"Bearer {key}"
            headers["api-key"] = key
        return headers

    def payload(self, request: ChatRequest) -> dict:
        body: dict[str, Any] = {
            "model": request.model or self.config.model,
            "messages": [m.to_dict() for m in request.messages],
            "temperature": request.temperature,
        }
        max_tokens = request.max_tokens or self.config.max_tokens
        if max_tokens:
            body["max_tokens"] = max_tokens
        return body

    def backoff(self, attempt: int) -> float:
        return min(self.config.backoff_max, self.config.backoff_base * 2 ** (attempt - 1))

    def complete(self, request: ChatRequest) -> str:
        body = json.dumps(self.payload(request), ensure_ascii=False).encode("utf-8")
        started = time.monotonic()
        last_error: LLMError | None = None
        for attempt in range(1, self.config.max_attempts + 1):
            if self.limiter is not None:
                self.limiter.acquire()
            try:
                resp = self._client.post(self.config.endpoint, content=body, headers=self._headers())
            except httpx.TimeoutException as exc:
                last_error = LLMTimeout(f"request timed out after {self.config.timeout}s: {exc}")
                status = None
            except httpx.TransportError as exc:
                last_error = LLMError(f"transport error: {exc}")
                status = None
            else:
                status = resp.status_code
                if status == 200:
                    text, usage = self._parse(resp)
                    self._log(attempt, status, None)
                    with self._lock:
                        self.session.append(ChatExchange(request, text, usage,
                                                         time.monotonic() - started, attempt, self.name))
                    return text
                if status not in RETRYABLE_STATUS:
                    self._log(attempt, status, None)
                    raise LLMProtocolError(f"HTTP {status}: {resp.text[:200]}")
                last_error = LLMError(f"HTTP {status}")
            if attempt < self.config.max_attempts:
                delay = self.backoff(attempt)
                self._log(attempt, status, delay)
                log.warning("chat request attempt %d failed (%s); retrying in %.2fs",
                            attempt, last_error, delay)
                self.sleep(delay)
            else:
                self._log(attempt, status, None)
        if isinstance(last_error, LLMTimeout):
            raise last_error
        raise LLMRetryExhausted(f"gave up after {self.config.max_attempts} attempts: {last_error}")

    def _log(self, attempt: int, status: int | None, backoff: float | None) -> None:
        with self._lock:
            self.attempt_log.append({"attempt": attempt, "status": status, "backoff": backoff})

    @staticmethod
    def _parse(resp: httpx.Response) -> tuple[str, dict[str, int]]:
        try:
            data = resp.json()
            text = data["choices"][0]["message"]["content"]
        except (ValueError, KeyError, IndexError, TypeError) as exc:
            raise LLMProtocolError(f"malformed completion response: {exc}") from exc
        usage = {k: int(v) for k, v in (data.get("usage") or {}).items() if isinstance(v, (int, float))}
        return text, usage

    def close(self) -> None:
        self._client.close()


# -- session logs and replay --------------------------------------------------


def write_session(session: Iterable[ChatExchange], path: str | Path) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        for ex in session:
            fh.write(json.dumps(ex.to_dict(), sort_keys=True) + "\n")


def read_session(path: str | Path) -> list[ChatExchange]:
    with open(path, encoding="utf-8") as fh:
        return [ChatExchange.from_dict(json.loads(ln)) for ln in fh if ln.strip()]


def session_hash(session: Iterable[ChatExchange]) -> str:
    h = hashlib.sha256()
    for ex in session:
        d = ex.to_dict()
        d.pop("latency", None)
        h.update(json.dumps(d, sort_keys=True).encode("utf-8"))
    return h.hexdigest()


def record_replay(session: Sequence[ChatExchange], exhaustion: str = "error") -> Script:
    """A script that answers the recorded requests with the recorded responses, in order."""
    done = [ex for ex in session if ex.response is not None]
    if not done:
        raise ValueError("cannot build a replay script from an empty session")
    return Script([ScriptEntry(match_any(), ex.response, 1, {}) for ex in done], exhaustion)


# -- prompt registry -----------------------------------------------------------


class PromptRegistry:
    """Named, versioned prompt templates using ``$placeholder`` substitution."""

    def __init__(self, templates: Mapping[str, str], version: int = 1, system: str = ""):
        self.templates = dict(templates)
        self.version = version
        self.system = system

    @classmethod
    def load(cls, path: str | Path | None = None) -> PromptRegistry:
        if path is None:
            text = resources.files("arda.data").joinpath("prompts.json").read_text(encoding="utf-8")
        else:
            text = Path(path).read_text(encoding="utf-8")
        d = json.loads(text)
        return cls(d["templates"], d.get("version", 1), d.get("system", ""))

    def render(self, name: str, **fields: Any) -> str:
        try:
            tmpl = self.templates[name]
        except KeyError:
            raise KeyError(f"no prompt template named {name!r}") from None
        header = f"### task: {name} (prompt v{self.version})\n"
        return header + string.Template(tmpl).substitute(
            {k: v if isinstance(v, str) else json.dumps(v, sort_keys=True) for k, v in fields.items()})

    def request(self, name: str, temperature: float = 0.0, **fields: Any) -> ChatRequest:
        return ChatRequest.user(self.render(name, **fields), system=self.system or None,
                                temperature=temperature)
