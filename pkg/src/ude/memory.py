"""Baseline memory-augmented agent wrapping any inner connector.

Each completed user/assistant exchange becomes one :class:`MemoryUnit`.  On
every turn the agent retrieves the top-k units by lexical overlap with the
current user message (k depends on the dialog length) and sends only those
units plus the current message to the inner model.
"""
from __future__ import annotations

from dataclasses import dataclass

from .connectors import Connector, ConnectorSession, GenerationParams, Message, SessionClosedError
from .schema import Role


@dataclass(frozen=True)
class MemoryUnit:
    unit_id: int
    user_text: str
    assistant_text: str
    turn_index: int

    @property
    def text(self) -> str:
        return f"{self.user_text} {self.assistant_text}"


@dataclass(frozen=True)
class RetrievalPolicy:
    k_short: int = 3
    k_long: int = 10
    turn_threshold: int = 10
    scorer: str = "lexical_overlap"

    def __post_init__(self):
        if not 0 <= self.k_short <= self.k_long:
            raise ValueError("need 0 <= k_short <= k_long")
        if self.turn_threshold < 1:
            raise ValueError("turn_threshold must be >= 1")
        if self.scorer != "lexical_overlap":
            raise ValueError(f"unknown scorer {self.scorer!r}")

    def k_for(self, dialog_turn_count: int) -> int:
        # exactly turn_threshold turns counts as long
        return self.k_short if dialog_turn_count < self.turn_threshold else self.k_long


def _tokens(text: str) -> set[str]:
    return set(text.casefold().split())


def lexical_overlap(query: str, text: str) -> float:
    q = _tokens(query)
    if not q:
        return 0.0
    return len(q & _tokens(text)) / len(q)


def _store(session: ConnectorSession) -> list[MemoryUnit]:
    if session.closed:
        raise SessionClosedError(f"session for dialog {session.dialog_id!r} is closed")
    return session.state.setdefault("memory", [])


def store_unit(session: ConnectorSession, unit: MemoryUnit) -> None:
    _store(session).append(unit)


def retrieve(
    session: ConnectorSession, query: str, policy: RetrievalPolicy, dialog_turn_count: int
) -> list[MemoryUnit]:
    """Top-k units by overlap score, ties resolved towards the lower unit_id."""
    units = _store(session)
    k = policy.k_for(dialog_turn_count)
    ranked = sorted(units, key=lambda u: (-lexical_overlap(query, u.text), u.unit_id))
    return ranked[:k]


class MemoryAgentConnector(Connector):
    """Agent connector: turn-level memory store + top-k retrieval over an inner model.

    ``render_mode="pairs"`` replays retrieved exchanges as user/assistant
    messages; ``"system_block"`` folds them into a single system message.
    Exchanges that appear in the incoming context but were never generated by
    this agent (reference-history dialogs) are ingested before retrieval.
    """

    def __init__(
        self,
        inner: Connector,
        policy: RetrievalPolicy | None = None,
        *,
        system_prompt: str | None = None,
        render_mode: str = "pairs",
    ):
        super().__init__()
        if render_mode not in ("pairs", "system_block"):
            raise ValueError(f"unknown render_mode {render_mode!r}")
        self.inner = inner
        self.policy = policy or RetrievalPolicy()
        self.system_prompt = system_prompt
        self.render_mode = render_mode

    def _on_begin(self, session):
        session.state["memory"] = []
        session.state["inner"] = self.inner.begin_dialog(f"{session.dialog_id}#{session.session_id}",
                                                         turn_count=session.turn_count)

    def _on_end(self, session):
        inner = session.state.get("inner")
        if inner is not None:
            self.inner.end_dialog(inner)

    def _ingest_context(self, session: ConnectorSession, context: list[Message]) -> None:
        memory = _store(session)
        body = [m for m in context[:-1] if m.role is not Role.SYSTEM]
        exchanges = []
        for i in range(0, len(body) - 1, 2):
            user, assistant = body[i], body[i + 1]
            if user.role is Role.USER and assistant.role is Role.ASSISTANT:
                exchanges.append((user.content, assistant.content))
        for n, (user, assistant) in enumerate(exchanges[len(memory):], start=len(memory)):
            memory.append(MemoryUnit(n, user, assistant, 2 * n))

    def _render(self, system: str | None, units: list[MemoryUnit], current: Message) -> list[Message]:
        units = sorted(units, key=lambda u: u.unit_id)
        if self.render_mode == "system_block":
            if units:
                block = "\n\n".join(f"User: {u.user_text}\nAssistant: {u.assistant_text}" for u in units)
                memo = f"Relevant earlier exchanges:\n{block}"
                system = f"{system}\n\n{memo}" if system else memo
            out = [Message(Role.SYSTEM, system)] if system else []
            return out + [current]
        out = [Message(Role.SYSTEM, system)] if system else []
        for u in units:
            out.append(Message(Role.USER, u.user_text))
            out.append(Message(Role.ASSISTANT, u.assistant_text))
        return out + [current]

    def _generate(self, session, context, params: GenerationParams) -> str:
        self._ingest_context(session, context)
        current = context[-1]
        system = self.system_prompt
        if system is None and context[0].role is Role.SYSTEM:
            system = context[0].content
        turn_count = session.turn_count if session.turn_count is not None else len(context) + 1
        units = retrieve(session, current.content, self.policy, turn_count)
        inner_session = session.state["inner"]
        before = inner_session.request_count
        reply = self.inner.generate(inner_session, self._render(system, units, current), params)
        session.request_count += inner_session.request_count - before
        memory = _store(session)
        memory.append(MemoryUnit(len(memory), current.content, reply, len(context)))
        return reply

    def close(self) -> None:
        self.inner.close()
