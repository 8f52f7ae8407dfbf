"""Unified dialog schema: types, validation and canonical JSON serialization.

Every benchmark is normalized into a list of :class:`Dialog` objects.  A dialog
carries session metadata and an ordered list of :class:`Turn` objects; each
assistant turn may request one or more metrics through its ``eval_config``.
"""
from __future__ import annotations

import json
import math
from dataclasses import dataclass, field
from enum import Enum
from typing import Any, Mapping


class Role(str, Enum):
    SYSTEM = "system"
    USER = "user"
    ASSISTANT = "assistant"


class SchemaError(ValueError):
    """A required key is missing or a value has the wrong type."""

    def __init__(self, path: str, message: str):
        super().__init__(f"{path}: {message}")
        self.path = path
        self.message = message


class ParseError(ValueError):
    def __init__(self, path: str, message: str):
        super().__init__(f"{path}: {message}")
        self.path = path
        self.message = message


class SerializationError(ValueError):
    pass


@dataclass(frozen=True)
class MetricSpec:
    class_name: str
    args: dict[str, Any] = field(default_factory=dict)


@dataclass(frozen=True)
class TurnEvalConfig:
    do_eval: bool = False
    metrics: tuple[MetricSpec, ...] = ()

    def __post_init__(self):
        object.__setattr__(self, "metrics", tuple(self.metrics))


@dataclass(frozen=True)
class Turn:
    turn_id: str
    role: Role
    content: str
    reference: str | None = None
    reference_document: str | None = None
    eval_config: TurnEvalConfig = field(default_factory=TurnEvalConfig)
    turn_labels: dict[str, Any] = field(default_factory=dict)


@dataclass(frozen=True)
class DialogEvalConfig:
    use_reference_history: bool = True


@dataclass(frozen=True)
class Dialog:
    dialog_id: str
    dialog_turns: tuple[Turn, ...]
    dialog_raw_info: dict[str, Any] = field(default_factory=dict)
    dialog_labels: dict[str, Any] = field(default_factory=dict)
    dialog_eval_config: DialogEvalConfig = field(default_factory=DialogEvalConfig)

    def __post_init__(self):
        object.__setattr__(self, "dialog_turns", tuple(self.dialog_turns))

    def assistant_indices(self) -> list[int]:
        return [i for i, t in enumerate(self.dialog_turns) if t.role is Role.ASSISTANT]

    def eval_turns(self) -> list[Turn]:
        return [t for t in self.dialog_turns if t.eval_config.do_eval]


@dataclass(frozen=True)
class Violation:
    path: str
    message: str

    def __str__(self) -> str:
        return f"{self.path}: {self.message}"


def auto_turn_id(index: int) -> str:
    return f"t{index:03d}"


# --------------------------------------------------------------------------
# validation
# --------------------------------------------------------------------------


def _is_reference_free(spec: MetricSpec) -> bool:
    return spec.args.get("reference_free") is True


def validate_dialog(d: Dialog, *, for_evaluation: bool = True) -> list[Violation]:
    """Return every schema invariant violated by ``d`` (empty list means valid).

    ``for_evaluation`` additionally requires at least one assistant turn.
    """
    out: list[Violation] = []
    if not isinstance(d.dialog_id, str) or not d.dialog_id:
        out.append(Violation("dialog_id", "must be a non-empty string"))
    turns = d.dialog_turns
    if not turns:
        out.append(Violation("dialog_turns", "must be non-empty"))
        return out

    seen_ids: set[str] = set()
    prev: Role | None = None
    for i, turn in enumerate(turns):
        base = f"dialog_turns[{i}]"
        if turn.turn_id in seen_ids:
            out.append(Violation(f"{base}.turn_id", f"duplicate turn_id {turn.turn_id!r}"))
        seen_ids.add(turn.turn_id)

        role = turn.role
        if role is Role.SYSTEM:
            if i != 0:
                out.append(Violation(f"{base}.role", "system turn allowed only at position 0"))
        elif prev is None or prev is Role.SYSTEM:
            if role is not Role.USER:
                out.append(Violation(f"{base}.role", "first non-system turn must be user"))
        elif role is prev:
            out.append(Violation(f"{base}.role", f"consecutive {role.value} turns"))
        prev = role

        cfg = turn.eval_config
        for j, spec in enumerate(cfg.metrics):
            if not spec.class_name:
                out.append(Violation(f"{base}.eval_config.metrics[{j}].class_name", "must be non-empty"))
        if cfg.do_eval:
            if role is not Role.ASSISTANT:
                out.append(Violation(f"{base}.eval_config.do_eval", "only assistant turns can be evaluated"))
            if not cfg.metrics:
                out.append(Violation(f"{base}.eval_config.metrics", "do_eval=true requires at least one metric"))
            elif (
                turn.reference is None
                and turn.reference_document is None
                and not any(_is_reference_free(s) for s in cfg.metrics)
            ):
                out.append(Violation(
                    f"{base}.reference",
                    "evaluated turn needs a reference, a reference_document or a reference_free metric",
                ))

    if for_evaluation and not any(t.role is Role.ASSISTANT for t in turns):
        out.append(Violation("dialog_turns", "no assistant turn to evaluate"))
    return out


# --------------------------------------------------------------------------
# serialization
# --------------------------------------------------------------------------


def _canonical_value(value: Any, path: str) -> Any:
    if value is None or isinstance(value, (bool, str, int)):
        return value
    if isinstance(value, float):
        if not math.isfinite(value):
            raise SerializationError(f"{path}: non-finite float {value!r}")
        return value
    if isinstance(value, (list, tuple)):
        return [_canonical_value(v, f"{path}[{i}]") for i, v in enumerate(value)]
    if isinstance(value, Mapping):
        out = {}
        for k in sorted(value, key=lambda k: (not isinstance(k, str), str(k))):
            if not isinstance(k, str):
                raise SerializationError(f"{path}: non-string key {k!r}")
            out[k] = _canonical_value(value[k], f"{path}.{k}")
        return out
    raise SerializationError(f"{path}: {type(value).__name__} is not JSON-representable")


def turn_to_dict(turn: Turn, path: str = "turn") -> dict[str, Any]:
    return {
        "turn_id": turn.turn_id,
        "role": turn.role.value,
        "content": turn.content,
        "reference": turn.reference,
        "reference_document": turn.reference_document,
        "eval_config": {
            "do_eval": turn.eval_config.do_eval,
            "metrics": [
                {"class_name": m.class_name, "args": _canonical_value(m.args, f"{path}.eval_config.metrics[{j}].args")}
                for j, m in enumerate(turn.eval_config.metrics)
            ],
        },
        "turn_labels": _canonical_value(turn.turn_labels, f"{path}.turn_labels"),
    }


def dialog_to_dict(d: Dialog) -> dict[str, Any]:
    return {
        "dialog_id": d.dialog_id,
        "dialog_raw_info": _canonical_value(d.dialog_raw_info, "dialog_raw_info"),
        "dialog_labels": _canonical_value(d.dialog_labels, "dialog_labels"),
        "dialog_eval_config": {"use_reference_history": d.dialog_eval_config.use_reference_history},
        "dialog_turns": [turn_to_dict(t, f"dialog_turns[{i}]") for i, t in enumerate(d.dialog_turns)],
    }


def serialize_dialog(d: Dialog) -> str:
    """Canonical single-line JSON for ``d``; byte-stable across round trips."""
    return json.dumps(dialog_to_dict(d), ensure_ascii=False, allow_nan=False, separators=(", ", ": "))


# --------------------------------------------------------------------------
# parsing
# --------------------------------------------------------------------------

_DIALOG_KEYS = {"dialog_id", "dialog_raw_info", "dialog_labels", "dialog_eval_config", "dialog_turns"}
_TURN_KEYS = {"turn_id", "role", "content", "reference", "reference_document", "eval_config", "turn_labels"}


def _expect(value: Any, typ: type | tuple[type, ...], path: str, what: str) -> Any:
    if not isinstance(value, typ):
        raise SchemaError(path, f"expected {what}, got {type(value).__name__}")
    return value


def _optional_str(obj: Mapping[str, Any], key: str, path: str) -> str | None:
    value = obj.get(key)
    if value is None:
        return None
    return _expect(value, str, f"{path}.{key}", "string or null")


def _parse_metric(obj: Any, path: str) -> MetricSpec:
    _expect(obj, dict, path, "object")
    if "class_name" not in obj:
        raise SchemaError(f"{path}.class_name", "missing required key")
    name = _expect(obj["class_name"], str, f"{path}.class_name", "string")
    args = _expect(obj.get("args") or {}, dict, f"{path}.args", "object")
    return MetricSpec(name, dict(args))


def _parse_turn(obj: Any, index: int, extra: dict[str, Any]) -> Turn:
    path = f"dialog_turns[{index}]"
    _expect(obj, dict, path, "object")
    for key in ("role", "content"):
        if key not in obj:
            raise SchemaError(f"{path}.{key}", "missing required key")
    raw_role = _expect(obj["role"], str, f"{path}.role", "string")
    try:
        role = Role(raw_role)
    except ValueError:
        raise SchemaError(f"{path}.role", f"unknown role {raw_role!r}") from None
    turn_id = obj.get("turn_id")
    turn_id = auto_turn_id(index) if turn_id is None else _expect(turn_id, str, f"{path}.turn_id", "string")

    cfg_obj = _expect(obj.get("eval_config") or {}, dict, f"{path}.eval_config", "object")
    do_eval = _expect(cfg_obj.get("do_eval", False), bool, f"{path}.eval_config.do_eval", "boolean")
    metrics_obj = _expect(cfg_obj.get("metrics") or [], list, f"{path}.eval_config.metrics", "list")
    metrics = tuple(_parse_metric(m, f"{path}.eval_config.metrics[{j}]") for j, m in enumerate(metrics_obj))

    labels = _expect(obj.get("turn_labels") or {}, dict, f"{path}.turn_labels", "object")
    for key in obj.keys() - _TURN_KEYS:
        extra[f"{path}.{key}"] = obj[key]
    return Turn(
        turn_id=turn_id,
        role=role,
        content=_expect(obj["content"], str, f"{path}.content", "string"),
        reference=_optional_str(obj, "reference", path),
        reference_document=_optional_str(obj, "reference_document", path),
        eval_config=TurnEvalConfig(do_eval, metrics),
        turn_labels=dict(labels),
    )


def dialog_from_dict(obj: Any) -> Dialog:
    """Build a Dialog from decoded JSON; unknown keys land in ``dialog_raw_info['_extra']``."""
    _expect(obj, dict, "$", "object")
    for key in ("dialog_id", "dialog_turns"):
        if key not in obj:
            raise SchemaError(key, "missing required key")
    dialog_id = obj["dialog_id"]
    if isinstance(dialog_id, int) and not isinstance(dialog_id, bool):
        dialog_id = str(dialog_id)
    _expect(dialog_id, str, "dialog_id", "string")
    turns_obj = _expect(obj["dialog_turns"], list, "dialog_turns", "list")

    extra: dict[str, Any] = {}
    turns = tuple(_parse_turn(t, i, extra) for i, t in enumerate(turns_obj))
    for key in obj.keys() - _DIALOG_KEYS:
        extra[key] = obj[key]

    raw_info = dict(_expect(obj.get("dialog_raw_info") or {}, dict, "dialog_raw_info", "object"))
    if extra:
        merged = dict(raw_info.get("_extra") or {})
        merged.update(extra)
        raw_info["_extra"] = merged
    labels = _expect(obj.get("dialog_labels") or {}, dict, "dialog_labels", "object")
    cfg = _expect(obj.get("dialog_eval_config") or {}, dict, "dialog_eval_config", "object")
    use_ref = _expect(
        cfg.get("use_reference_history", True), bool, "dialog_eval_config.use_reference_history", "boolean"
    )
    return Dialog(
        dialog_id=dialog_id,
        dialog_turns=turns,
        dialog_raw_info=raw_info,
        dialog_labels=dict(labels),
        dialog_eval_config=DialogEvalConfig(use_ref),
    )


def parse_dialog(text: str) -> Dialog:
    try:
        obj = json.loads(text)
    except json.JSONDecodeError as exc:
        raise ParseError(f"line {exc.lineno} col {exc.colno}", exc.msg) from None
    return dialog_from_dict(obj)
