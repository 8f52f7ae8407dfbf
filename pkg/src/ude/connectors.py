"""Model connectors with an explicit per-dialog lifecycle.

Every connector exposes ``begin_dialog`` / ``generate`` / ``end_dialog``.  A
:class:`ConnectorSession` owns all dialog-scoped state, so closing it is
enough to guarantee nothing leaks into the next dialog.  Connector handles
are shared across worker threads; a single session is used by one worker.
"""
from __future__ import annotations

import hashlib
import json
import logging
import os
import threading
import time
import uuid
from dataclasses import dataclass, field
from typing import Any, Callable, Iterable, Mapping, Sequence

import httpx

from .schema import Role

log = logging.getLogger(__name__)


class ConnectorError(RuntimeError):
    pass


class SessionAlreadyOpenError(ConnectorError):
    pass


class SessionClosedError(ConnectorError):
    pass


class ContextError(ConnectorError, ValueError):
    pass


class TransportError(ConnectorError):
    pass


class ConnectorTimeoutError(ConnectorError, TimeoutError):
    pass


class ProviderError(ConnectorError):
    def __init__(self, status: int, body: str):
        super().__init__(f"provider returned HTTP {status}: {body[:500]}")
        self.status = status
        self.body = body


@dataclass(frozen=True)
class Message:
    role: Role
    content: str

    def __post_init__(self):
        if not isinstance(self.role, Role):
            object.__setattr__(self, "role", Role(self.role))
        # a model may legitimately answer with empty text
        if not self.content and self.role is Role.USER:
            raise ValueError(f"empty content for {self.role.value} message")

    def to_wire(self) -> dict[str, str]:
        return {"role": self.role.value, "content": self.content}


@dataclass(frozen=True)
class GenerationParams:
    max_new_tokens: int = 1024
    temperature: float = 0.0
    timeout_seconds: float = 120.0
    max_retries: int = 3

    def __post_init__(self):
        if self.max_new_tokens < 1:
            raise ValueError("max_new_tokens must be >= 1")
        if self.temperature < 0:
            raise ValueError("temperature must be >= 0")
        if self.timeout_seconds <= 0:
            raise ValueError("timeout_seconds must be > 0")
        if self.max_retries < 0:
            raise ValueError("max_retries must be >= 0")


@dataclass
class ConnectorSession:
    session_id: str
    dialog_id: str
    turn_count: int | None = None
    state: dict[str, Any] = field(default_factory=dict)
    request_count: int = 0
    closed: bool = False


class Connector:
    """Base class: lifecycle bookkeeping plus a ``_generate`` hook for subclasses."""

    def __init__(self):
        self._lock = threading.Lock()
        self._open: dict[str, ConnectorSession] = {}
        self.n_begin = 0
        self.n_end = 0
        self.n_generate = 0

    # lifecycle -----------------------------------------------------------

    def begin_dialog(self, dialog_id: str, *, turn_count: int | None = None) -> ConnectorSession:
        with self._lock:
            if dialog_id in self._open:
                raise SessionAlreadyOpenError(f"session already open for dialog {dialog_id!r}")
            session = ConnectorSession(uuid.uuid4().hex, dialog_id, turn_count)
            self._open[dialog_id] = session
            self.n_begin += 1
        self._on_begin(session)
        return session

    def end_dialog(self, session: ConnectorSession) -> None:
        with self._lock:
            if session.closed or self._open.get(session.dialog_id) is not session:
                raise SessionClosedError(f"session for dialog {session.dialog_id!r} is not open")
            session.closed = True
            del self._open[session.dialog_id]
            self.n_end += 1
        try:
            self._on_end(session)
        finally:
            session.state.clear()

    @property
    def open_sessions(self) -> int:
        with self._lock:
            return len(self._open)

    def generate(self, session: ConnectorSession, context: Sequence[Message], params: GenerationParams) -> str:
        if session.closed:
            raise SessionClosedError(f"session for dialog {session.dialog_id!r} is closed")
        if not context or context[-1].role is not Role.USER:
            raise ContextError("context must end with a user message")
        with self._lock:
            self.n_generate += 1
        return self._generate(session, list(context), params)

    # hooks -----------------------------------------------------------------

    def _on_begin(self, session: ConnectorSession) -> None:
        pass

    def _on_end(self, session: ConnectorSession) -> None:
        pass

    def _generate(self, session: ConnectorSession, context: list[Message], params: GenerationParams) -> str:
        raise NotImplementedError

    def close(self) -> None:
        pass


class ScriptedConnector(Connector):
    """Deterministic in-process connector for tests and dry runs.

    Modes: ``echo`` (prefix + last user content), ``table`` (exact lookup of the
    last user content, ``fallback`` otherwise) and ``hash`` (digest of the
    whole context and params).  ``latency_s`` adds a fixed sleep per call.
    """

    def __init__(
        self,
        mode: str = "echo",
        *,
        prefix: str = "ECHO: ",
        table: Mapping[str, str] | None = None,
        fallback: str = "",
        latency_s: float = 0.0,
    ):
        super().__init__()
        if mode not in ("echo", "table", "hash"):
            raise ValueError(f"unknown scripted mode {mode!r}")
        self.mode = mode
        self.prefix = prefix
        self.table = dict(table or {})
        self.fallback = fallback
        self.latency_s = latency_s

    def _generate(self, session, context, params):
        session.request_count += 1
        if self.latency_s:
            time.sleep(self.latency_s)
        last = context[-1].content
        if self.mode == "echo":
            return f"{self.prefix}{last}"
        if self.mode == "table":
            return self.table.get(last, self.fallback)
        payload = json.dumps(
            {"messages": [m.to_wire() for m in context], "max_tokens": params.max_new_tokens,
             "temperature": params.temperature},
            sort_keys=True, ensure_ascii=False,
        )
        return hashlib.sha256(payload.encode()).hexdigest()[:16]


_RETRYABLE_STATUS = {429}


class OpenAICompatibleConnector(Connector):
    """Chat-completions client; stateless, the full context is sent every turn."""

    def __init__(
        self,
        base_url: str,
        model: str,
        *,
        api_key_env: str | None = "OPENAI_API_KEY",
        backoff_base: float = 1.0,
        backoff_factor: float = 2.0,
        transport: httpx.BaseTransport | None = None,
        sleep: Callable[[float], None] = time.sleep,
    ):
        super().__init__()
        self.url = base_url.rstrip("/") + "/chat/completions"
        self.model = model
        self.api_key_env = api_key_env
        self.backoff_base = backoff_base
        self.backoff_factor = backoff_factor
        self._sleep = sleep
        self._client = httpx.Client(transport=transport)

    def _headers(self) -> dict[str, str]:
        headers = {"Content-Type": "application/json"}
        key = os.environ.get(self.api_key_env) if self.api_key_env else None
        if key:
            headers["Authorization"] = f"Bearer {key}"
        return headers

    def request_body(self, context: Iterable[Message], params: GenerationParams) -> dict[str, Any]:
        return {
            "model": self.model,
            "messages": [m.to_wire() for m in context],
            "max_tokens": params.max_new_tokens,
            "temperature": params.temperature,
        }

    def _generate(self, session, context, params):
        body = self.request_body(context, params)
        attempts = params.max_retries + 1
        last_exc: Exception | None = None
        for attempt in range(attempts):
            if attempt:
                self._sleep(self.backoff_base * self.backoff_factor ** (attempt - 1))
            session.request_count += 1
            try:
                resp = self._client.post(self.url, json=body, headers=self._headers(),
                                         timeout=params.timeout_seconds)
            except httpx.TimeoutException as exc:
                last_exc = ConnectorTimeoutError(f"request timed out after {params.timeout_seconds}s: {exc}")
                log.warning("dialog %s attempt %d timed out", session.dialog_id, attempt + 1)
                continue
            except httpx.TransportError as exc:
                last_exc = TransportError(f"{type(exc).__name__}: {exc}")
                log.warning("dialog %s attempt %d transport error: %s", session.dialog_id, attempt + 1, exc)
                continue
            if resp.status_code >= 500 or resp.status_code in _RETRYABLE_STATUS:
                last_exc = ProviderError(resp.status_code, resp.text)
                log.warning("dialog %s attempt %d got HTTP %d", session.dialog_id, attempt + 1, resp.status_code)
                continue
            if not 200 <= resp.status_code < 300:
                raise ProviderError(resp.status_code, resp.text)
            try:
                return resp.json()["choices"][0]["message"]["content"] or ""
            except (ValueError, KeyError, IndexError, TypeError):
                raise ProviderError(resp.status_code, resp.text) from None
        assert last_exc is not None
        raise last_exc

    def close(self) -> None:
        self._client.close()


CONNECTOR_TYPES: dict[str, Callable[..., Connector]] = {}


def build_connector(config: Mapping[str, Any]) -> Connector:
    """Construct a connector from a config mapping with a ``type`` key."""
    cfg = dict(config)
    kind = cfg.pop("type", None)
    if kind == "scripted":
        return ScriptedConnector(**cfg)
    if kind == "openai_compatible":
        for key in ("base_url", "model"):
            if key not in cfg:
                raise ValueError(f"openai_compatible connector needs {key!r}")
        return OpenAICompatibleConnector(**cfg)
    if kind == "memory_agent":
        from .memory import MemoryAgentConnector, RetrievalPolicy

        inner = build_connector(cfg.pop("inner"))
        policy = RetrievalPolicy(**{k: cfg.pop(k) for k in ("k_short", "k_long", "turn_threshold", "scorer")
                                    if k in cfg})
        return MemoryAgentConnector(inner, policy, **cfg)
    if kind in CONNECTOR_TYPES:
        return CONNECTOR_TYPES[kind](**cfg)
    raise ValueError(f"unknown connector type {kind!r}")
