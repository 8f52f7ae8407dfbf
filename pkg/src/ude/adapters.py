"""Dataset adapters: raw benchmark files -> validated lists of Dialog.

An adapter is a function ``(record, index, adapter_id, options) -> Dialog``
registered under a string id.  :func:`load_dataset` reads JSON or JSON Lines
input, runs the adapter over every record, validates the output and collects
per-record failures.

Built-in adapters and their expected record layouts:

``unified_jsonl``
    a canonical dialog object per line.
``chat_transcript``
    ``{"id", "messages": [{"role", "content"}]}`` or MT-Bench-101 style
    ``{"id", "task", "history": [{"user", "bot"}]}``; optional ``system``,
    ``references`` (one per assistant turn).  Every assistant turn is judged.
``final_question``
    ``{"id", "context": [{"role", "content"}], "question", "answer"}`` or a
    ``"qa": [{"question", "answer", "evidence"?}]`` list; optional
    ``evidence``, ``metrics`` (default ``["exact_match"]``).
``onpolicy_instructions``
    ``{"id", "turns": [{"prompt", "instructions": [{"type", "args"}]}]}``.
``rule_code``
    ``{"id", "turns": [{"user", "assistant"?, "new_rules"?, "evaluate"?}]}``;
    rules accumulate across turns, only ``evaluate`` turns (default: last) are scored.
"""
from __future__ import annotations

import json
import logging
from dataclasses import dataclass
from pathlib import Path
from typing import Any, Callable, Iterable, Mapping

from .schema import (
    Dialog,
    DialogEvalConfig,
    MetricSpec,
    Role,
    SchemaError,
    Turn,
    TurnEvalConfig,
    auto_turn_id,
    dialog_from_dict,
    validate_dialog,
)

log = logging.getLogger(__name__)

Adapter = Callable[[Mapping[str, Any], int, str, Mapping[str, Any]], Dialog]


class DuplicateAdapterError(KeyError):
    pass


class UnknownAdapterError(KeyError):
    pass


class AdapterError(ValueError):
    def __init__(self, index: int, reason: str):
        super().__init__(f"record {index}: {reason}")
        self.index = index
        self.reason = reason


class AdapterErrors(ValueError):
    """Summary raised at the end of a non-strict load with bad records."""

    def __init__(self, errors: list[AdapterError]):
        head = "; ".join(str(e) for e in errors[:5])
        more = f" (+{len(errors) - 5} more)" if len(errors) > 5 else ""
        super().__init__(f"{len(errors)} unmappable record(s): {head}{more}")
        self.errors = errors


class ValidationError(ValueError):
    """An adapter emitted a dialog that fails schema validation (adapter bug)."""

    def __init__(self, dialog_id: str, violations):
        super().__init__(f"{dialog_id}: " + "; ".join(str(v) for v in violations))
        self.dialog_id = dialog_id
        self.violations = list(violations)


ADAPTER_REGISTRY: dict[str, Adapter] = {}


def register_adapter(adapter_id: str, loader: Adapter | None = None):
    """Register ``loader`` under ``adapter_id``; usable as a decorator."""
    if not adapter_id:
        raise ValueError("adapter id must be non-empty")

    def _register(fn: Adapter) -> Adapter:
        if adapter_id in ADAPTER_REGISTRY:
            raise DuplicateAdapterError(adapter_id)
        ADAPTER_REGISTRY[adapter_id] = fn
        return fn

    return _register(loader) if loader is not None else _register


def read_records(path: str | Path) -> list[Any]:
    """Read a JSON array, a single JSON object, or JSON Lines."""
    text = Path(path).read_text(encoding="utf-8")
    stripped = text.lstrip()
    if stripped.startswith("["):
        return json.loads(text)
    records = []
    for lineno, line in enumerate(text.splitlines(), 1):
        if not line.strip():
            continue
        try:
            records.append(json.loads(line))
        except json.JSONDecodeError:
            if lineno == 1 and stripped.startswith("{"):
                # single pretty-printed object
                return [json.loads(text)]
            records.append(_Unparsable(lineno))
    return records


@dataclass(frozen=True)
class _Unparsable:
    lineno: int


def load_dataset(adapter_id: str, source_path: str | Path, options: Mapping[str, Any] | None = None) -> list[Dialog]:
    options = dict(options or {})
    strict = bool(options.get("strict", False))
    try:
        adapter = ADAPTER_REGISTRY[adapter_id]
    except KeyError:
        raise UnknownAdapterError(adapter_id) from None

    records = read_records(source_path)
    dialogs: list[Dialog] = []
    errors: list[AdapterError] = []
    seen: set[str] = set()
    for index, record in enumerate(records):
        try:
            if isinstance(record, _Unparsable):
                raise AdapterError(index, f"line {record.lineno} is not valid JSON")
            if not isinstance(record, Mapping):
                raise AdapterError(index, f"expected an object, got {type(record).__name__}")
            try:
                dialog = adapter(record, index, adapter_id, options)
            except AdapterError:
                raise
            except (KeyError, TypeError, ValueError) as exc:
                raise AdapterError(index, f"{type(exc).__name__}: {exc}") from exc
            if dialog.dialog_id in seen:
                raise AdapterError(index, f"duplicate dialog_id {dialog.dialog_id!r}")
        except AdapterError as err:
            if strict:
                raise
            log.warning("skipping %s", err)
            errors.append(err)
            continue
        violations = validate_dialog(dialog)
        if violations:
            raise ValidationError(dialog.dialog_id, violations)
        seen.add(dialog.dialog_id)
        dialogs.append(dialog)
    if errors:
        raise AdapterErrors(errors)
    return dialogs


@dataclass(frozen=True)
class DatasetStats:
    n_dialogs: int
    mean_turns_per_dialog: float
    n_eval_turns: int
    any_multi_metric: bool
    any_on_policy: bool


def compute_stats(dialogs: Iterable[Dialog]) -> DatasetStats:
    dialogs = list(dialogs)
    total_turns = sum(len(d.dialog_turns) for d in dialogs)
    eval_turns = [t for d in dialogs for t in d.eval_turns()]
    return DatasetStats(
        n_dialogs=len(dialogs),
        mean_turns_per_dialog=total_turns / len(dialogs) if dialogs else 0.0,
        n_eval_turns=len(eval_turns),
        any_multi_metric=any(len(t.eval_config.metrics) >= 2 for t in eval_turns),
        any_on_policy=any(not d.dialog_eval_config.use_reference_history for d in dialogs),
    )


# --------------------------------------------------------------------------
# helpers shared by the built-in adapters
# --------------------------------------------------------------------------


def synth_dialog_id(record: Mapping[str, Any], index: int, adapter_id: str) -> str:
    for key in ("dialog_id", "id"):
        value = record.get(key)
        if value is not None and value != "":
            return str(value)
    return f"{adapter_id}-{index:06d}"


@dataclass
class _Msg:
    role: Role
    content: str
    eval_config: TurnEvalConfig = TurnEvalConfig()
    reference: str | None = None
    reference_document: str | None = None
    labels: dict[str, Any] | None = None


def _merge_messages(messages: list[_Msg]) -> list[_Msg]:
    """Join consecutive same-role raw messages with a blank line.

    Eval settings of a merged run come from its last message.
    """
    out: list[_Msg] = []
    for m in messages:
        if out and out[-1].role is m.role and m.role is not Role.SYSTEM:
            prev = out[-1]
            prev.content = f"{prev.content}\n\n{m.content}" if prev.content else m.content
            if m.eval_config.do_eval or m.reference is not None or m.labels:
                prev.eval_config = m.eval_config
                prev.reference = m.reference
                prev.reference_document = m.reference_document
                prev.labels = m.labels
        else:
            out.append(_Msg(m.role, m.content, m.eval_config, m.reference, m.reference_document, m.labels))
    return out


def _build_dialog(
    dialog_id: str,
    messages: list[_Msg],
    *,
    record: Mapping[str, Any],
    labels: dict[str, Any],
    use_reference_history: bool,
    adapter_id: str,
    index: int,
) -> Dialog:
    merged = _merge_messages(messages)
    first = next((m for m in merged if m.role is not Role.SYSTEM), None)
    if first is None or first.role is not Role.USER:
        raise AdapterError(index, "conversation must open with a user message")
    turns = tuple(
        Turn(
            turn_id=auto_turn_id(i),
            role=m.role,
            content=m.content,
            reference=m.reference,
            reference_document=m.reference_document,
            eval_config=m.eval_config,
            turn_labels=dict(m.labels or {}),
        )
        for i, m in enumerate(merged)
    )
    return Dialog(
        dialog_id=dialog_id,
        dialog_turns=turns,
        dialog_raw_info={"adapter": adapter_id, "source_index": index},
        dialog_labels=labels,
        dialog_eval_config=DialogEvalConfig(use_reference_history),
    )


def _role(value: Any, index: int) -> Role:
    try:
        return Role(str(value).lower())
    except ValueError:
        raise AdapterError(index, f"unknown role {value!r}") from None


def _raw_messages(items: Any, index: int, key: str) -> list[_Msg]:
    if not isinstance(items, list):
        raise AdapterError(index, f"{key!r} must be a list")
    out = []
    for m in items:
        if not isinstance(m, Mapping) or "content" not in m:
            raise AdapterError(index, f"{key!r} entries need role and content")
        out.append(_Msg(_role(m.get("role"), index), str(m["content"])))
    return out


def _metric_specs(names: Any, default: list[str], extra_args: Mapping[str, Any] | None = None) -> tuple[MetricSpec, ...]:
    names = names or default
    if isinstance(names, str):
        names = [names]
    specs = []
    for n in names:
        if isinstance(n, Mapping):
            specs.append(MetricSpec(str(n["class_name"]), dict(n.get("args") or {})))
        else:
            specs.append(MetricSpec(str(n), dict(extra_args or {})))
    return tuple(specs)


# --------------------------------------------------------------------------
# built-in adapters
# --------------------------------------------------------------------------


@register_adapter("unified_jsonl")
def _unified(record, index, adapter_id, options):
    try:
        dialog = dialog_from_dict(record)
    except SchemaError as exc:
        raise AdapterError(index, str(exc)) from None
    # input claims to be canonical already, so violations are data errors
    violations = validate_dialog(dialog)
    if violations:
        raise AdapterError(index, "; ".join(str(v) for v in violations))
    return dialog


@register_adapter("chat_transcript")
def _chat_transcript(record, index, adapter_id, options):
    judge = _metric_specs(options.get("metrics"), ["llm_judge"], {"reference_free": True})
    if "messages" in record:
        raw = _raw_messages(record["messages"], index, "messages")
    elif "history" in record:
        raw = []
        for h in record["history"]:
            raw.append(_Msg(Role.USER, str(h["user"])))
            raw.append(_Msg(Role.ASSISTANT, str(h["bot"])))
    else:
        raise AdapterError(index, "record needs 'messages' or 'history'")
    if record.get("system"):
        raw.insert(0, _Msg(Role.SYSTEM, str(record["system"])))

    merged = _merge_messages(raw)
    references = list(record.get("references") or [])
    k = 0
    for m in merged:
        if m.role is Role.ASSISTANT:
            m.eval_config = TurnEvalConfig(True, judge)
            if k < len(references) and references[k] is not None:
                m.reference = str(references[k])
            k += 1
    labels = {key: record[key] for key in ("task", "category") if key in record}
    dialog_id = synth_dialog_id(record, index, adapter_id)
    if "dialog_id" not in record and record.get("task") and record.get("id") is not None:
        # ids restart per task in multi-task releases
        dialog_id = f"{record['task']}-{record['id']}"
    return _build_dialog(
        dialog_id, merged, record=record, labels=labels,
        use_reference_history=True, adapter_id=adapter_id, index=index,
    )


@register_adapter("final_question")
def _final_question(record, index, adapter_id, options):
    msgs = _raw_messages(record.get("context") or [], index, "context")
    if "qa" in record:
        qas = list(record["qa"])
    elif "question" in record:
        qas = [{"question": record["question"], "answer": record.get("answer"), "evidence": record.get("evidence")}]
    else:
        raise AdapterError(index, "record needs 'question' or 'qa'")
    metrics = _metric_specs(record.get("metrics") or options.get("metrics"), ["exact_match"])
    for qa in qas:
        if qa.get("answer") is None:
            raise AdapterError(index, "question without answer")
        answer = str(qa["answer"])
        evidence = qa.get("evidence")
        if isinstance(evidence, list):
            evidence = "\n".join(str(e) for e in evidence)
        msgs.append(_Msg(Role.USER, str(qa["question"])))
        msgs.append(_Msg(
            Role.ASSISTANT, answer, TurnEvalConfig(True, metrics), reference=answer,
            reference_document=None if evidence is None else str(evidence),
            labels={"category": qa["category"]} if "category" in qa else None,
        ))
    labels = {key: record[key] for key in ("category", "persona") if key in record}
    return _build_dialog(
        synth_dialog_id(record, index, adapter_id), msgs, record=record, labels=labels,
        use_reference_history=True, adapter_id=adapter_id, index=index,
    )


@register_adapter("onpolicy_instructions")
def _onpolicy_instructions(record, index, adapter_id, options):
    turns = record.get("turns")
    if not isinstance(turns, list) or not turns:
        raise AdapterError(index, "'turns' must be a non-empty list")
    spec = (MetricSpec("instruction_adherence", {"reference_free": True}),)
    msgs: list[_Msg] = []
    if record.get("system"):
        msgs.append(_Msg(Role.SYSTEM, str(record["system"])))
    for t in turns:
        instructions = list(t.get("instructions") or [])
        msgs.append(_Msg(Role.USER, str(t["prompt"])))
        msgs.append(_Msg(
            Role.ASSISTANT, str(t.get("response") or ""),
            TurnEvalConfig(bool(instructions), spec if instructions else ()),
            labels={"instructions": instructions},
        ))
    labels = {key: record[key] for key in ("language",) if key in record}
    return _build_dialog(
        synth_dialog_id(record, index, adapter_id), msgs, record=record, labels=labels,
        use_reference_history=False, adapter_id=adapter_id, index=index,
    )


@register_adapter("rule_code")
def _rule_code(record, index, adapter_id, options):
    turns = record.get("turns")
    if not isinstance(turns, list) or not turns:
        raise AdapterError(index, "'turns' must be a non-empty list")
    flagged = any("evaluate" in t for t in turns)
    spec = (MetricSpec("code_rule", {"reference_free": True}),)
    rules: list[dict[str, Any]] = []
    msgs: list[_Msg] = []
    for i, t in enumerate(turns):
        for r in t.get("new_rules") or []:
            rules.append({"pattern": str(r["pattern"]), "polarity": str(r.get("polarity", "must_match"))})
        evaluate = bool(t.get("evaluate")) if flagged else i == len(turns) - 1
        if evaluate and not rules:
            raise AdapterError(index, f"turn {i} is evaluated but no rules were introduced")
        msgs.append(_Msg(Role.USER, str(t["user"])))
        msgs.append(_Msg(
            Role.ASSISTANT, str(t.get("assistant") or ""),
            TurnEvalConfig(evaluate, spec if evaluate else ()),
            labels={"code_rules": [dict(r) for r in rules]},
        ))
    # without gold assistant code the model's own answers have to serve as history
    use_ref = all(t.get("assistant") for t in turns[:-1])
    return _build_dialog(
        synth_dialog_id(record, index, adapter_id), msgs, record=record, labels={},
        use_reference_history=use_ref, adapter_id=adapter_id, index=index,
    )
