"""Metric registry, built-in turn metrics and the evaluation phase.

Every metric maps a :class:`TurnContext` to a :class:`ScoreRecord` whose score
lies in [0, 1].  Metrics are requested per turn by ``MetricSpec.class_name``
and constructed through :func:`resolve`, which checks ``args`` against the
metric's declared parameters.
"""
from __future__ import annotations

import json
import logging
import math
import re
import uuid
from dataclasses import dataclass, field
from fractions import Fraction
from pathlib import Path
from typing import Any, Callable, ClassVar, Iterable, Mapping, Sequence

from . import checkpoint
from .connectors import Connector, ConnectorError, GenerationParams, Message
from .events import emit
from .generation import GenerationRecord, build_context, run_pool
from .schema import Dialog, MetricSpec, Role

log = logging.getLogger(__name__)

SCORES_DIR = "scores"


class MetricError(ValueError):
    pass


class UnknownMetricError(MetricError, KeyError):
    def __str__(self):
        return f"unknown metric {self.args[0]!r}"


class BadMetricArgsError(MetricError):
    def __init__(self, metric: str, arg: str, reason: str):
        super().__init__(f"{metric}: bad arg {arg!r}: {reason}")
        self.metric = metric
        self.arg = arg


class MissingReferenceError(MetricError):
    pass


class JudgeTransportError(RuntimeError):
    pass


class JudgeParseError(ValueError):
    pass


class NoInstructionsError(MetricError):
    pass


class UnknownInstructionTypeError(MetricError):
    pass


class NoRulesError(MetricError):
    pass


class BadPatternError(MetricError):
    pass


@dataclass(frozen=True)
class TurnContext:
    dialog: Dialog
    turn_id: str
    prediction: str
    history: tuple[Message, ...] = ()
    reference: str | None = None
    reference_document: str | None = None
    turn_labels: Mapping[str, Any] = field(default_factory=dict)


@dataclass(frozen=True)
class ScoreRecord:
    dialog_id: str
    turn_id: str
    metric_name: str
    score: float
    detail: dict[str, Any] = field(default_factory=dict)

    def __post_init__(self):
        if not (isinstance(self.score, (int, float)) and 0.0 <= self.score <= 1.0):
            raise ValueError(f"score {self.score!r} outside [0, 1]")

    def to_dict(self) -> dict[str, Any]:
        return {"dialog_id": self.dialog_id, "turn_id": self.turn_id, "metric_name": self.metric_name,
                "score": self.score, "detail": self.detail}

    @classmethod
    def from_dict(cls, obj: Mapping[str, Any]) -> ScoreRecord:
        return cls(str(obj["dialog_id"]), str(obj["turn_id"]), str(obj["metric_name"]),
                   float(obj["score"]), dict(obj.get("detail") or {}))


# --------------------------------------------------------------------------
# registry
# --------------------------------------------------------------------------

_NO_DEFAULT = object()


class Metric:
    """Base class.  ``params`` maps arg name -> (accepted types, default, allowed values)."""

    name: ClassVar[str] = ""
    params: ClassVar[dict[str, tuple]] = {}
    needs_judge: ClassVar[bool] = False

    def __init__(self, **args: Any):
        for key, value in args.items():
            setattr(self, key, value)

    def score(self, ctx: TurnContext) -> ScoreRecord | None:
        raise NotImplementedError

    def record(self, ctx: TurnContext, score: float, **detail: Any) -> ScoreRecord:
        return ScoreRecord(ctx.dialog.dialog_id, ctx.turn_id, self.name, float(score), detail)


METRIC_REGISTRY: dict[str, type[Metric]] = {}


def register_metric(name: str, constructor: type[Metric] | None = None):
    def _register(cls):
        if name in METRIC_REGISTRY:
            raise ValueError(f"metric {name!r} already registered")
        cls.name = name
        METRIC_REGISTRY[name] = cls
        return cls

    return _register(constructor) if constructor is not None else _register


_COMMON_PARAMS = {"reference_free": (bool, False, None)}


def _type_ok(value: Any, types: tuple[type, ...]) -> bool:
    if value is None:
        return type(None) in types
    if isinstance(value, bool):
        return bool in types
    if isinstance(value, int) and float in types:
        return True
    return isinstance(value, types)


def validate_args(cls: type[Metric], args: Mapping[str, Any]) -> dict[str, Any]:
    declared = {**_COMMON_PARAMS, **cls.params}
    out = {}
    for key in args:
        if key not in declared:
            raise BadMetricArgsError(cls.name, key, "unknown parameter")
    for key, (types, default, choices) in declared.items():
        types = types if isinstance(types, tuple) else (types,)
        if key in args:
            value = args[key]
            if not _type_ok(value, types):
                names = "/".join("null" if t is type(None) else t.__name__ for t in types)
                raise BadMetricArgsError(cls.name, key, f"expected {names}, got {value!r}")
            if choices is not None and value not in choices:
                raise BadMetricArgsError(cls.name, key, f"must be one of {sorted(choices)}")
        elif default is _NO_DEFAULT:
            raise BadMetricArgsError(cls.name, key, "required")
        else:
            value = default
        out[key] = value
    return out


def resolve(spec: MetricSpec, *, judge: Connector | None = None,
            judge_defaults: Mapping[str, Any] | None = None) -> Metric:
    try:
        cls = METRIC_REGISTRY[spec.class_name]
    except KeyError:
        raise UnknownMetricError(spec.class_name) from None
    args = dict(spec.args)
    if cls.needs_judge and judge_defaults:
        for key, value in judge_defaults.items():
            args.setdefault(key, value)
    args = validate_args(cls, args)
    if cls.needs_judge:
        return cls(judge=judge, **args)
    return cls(**args)


# --------------------------------------------------------------------------
# exact match
# --------------------------------------------------------------------------


def normalize_text(text: str) -> str:
    text = " ".join(text.casefold().split())
    return text.rstrip(".?!").rstrip()


@register_metric("exact_match")
class ExactMatch(Metric):
    params = {"mode": (str, "strict", {"strict", "contains"}), "normalize": (bool, True, None)}

    def score(self, ctx):
        if ctx.reference is None:
            raise MissingReferenceError("exact_match needs a reference")
        norm = normalize_text if self.normalize else (lambda s: s)
        pred, ref = norm(ctx.prediction), norm(ctx.reference)
        hit = pred == ref if self.mode == "strict" else ref in pred
        return self.record(ctx, 1.0 if hit else 0.0, mode=self.mode, normalized_prediction=pred,
                           normalized_reference=ref)


# --------------------------------------------------------------------------
# LLM judge
# --------------------------------------------------------------------------

DEFAULT_JUDGE_TEMPLATE = """You are grading one reply from an AI assistant in a multi-turn conversation.

Conversation so far:
{history}

Latest user message:
{question}

Reference answer (may be empty):
{reference}

Assistant reply to grade:
{response}

Judge the reply for correctness, helpfulness and consistency with the conversation, \
using the reference where one is given. Explain briefly, then finish with a line of the \
form "Rating: [[x]]" where x is an integer from 1 (worst) to 10 (best)."""

REASK_MESSAGE = ("Your answer did not end with a rating in the required format. "
                 "Reply with only the line \"Rating: [[x]]\" where x is an integer from 1 to 10.")

_RATING = re.compile(r"\[\[\s*(-?\d+)\s*\]\]")


def parse_rating(text: str) -> int | None:
    """Integer inside the last ``[[...]]`` group, or None."""
    found = _RATING.findall(text)
    return int(found[-1]) if found else None


def render_history(messages: Sequence[Message]) -> str:
    if not messages:
        return "(no earlier turns)"
    return "\n".join(f"{m.role.value.upper()}: {m.content}" for m in messages)


def fill_template(template: str, **values: str) -> str:
    out = template
    for key, value in values.items():
        out = out.replace("{" + key + "}", value)
    return out


@register_metric("llm_judge")
class LLMJudge(Metric):
    params = {
        "template": ((str, type(None)), None, None),
        "template_path": ((str, type(None)), None, None),
        "scale_max": (int, 10, None),
        "parse_retries": (int, 2, None),
        "on_parse_failure": (str, "zero", {"zero", "skip", "error"}),
        "max_new_tokens": (int, 1024, None),
    }
    needs_judge = True

    def __init__(self, judge: Connector | None = None, **args):
        super().__init__(**args)
        if self.scale_max < 2:
            raise BadMetricArgsError("llm_judge", "scale_max", "must be >= 2")
        if self.parse_retries < 0:
            raise BadMetricArgsError("llm_judge", "parse_retries", "must be >= 0")
        if self.template is None and self.template_path is not None:
            try:
                self.template = Path(self.template_path).read_text(encoding="utf-8")
            except OSError as exc:
                raise BadMetricArgsError("llm_judge", "template_path", str(exc)) from None
        if self.template is None:
            self.template = DEFAULT_JUDGE_TEMPLATE
        self.judge = judge
        self.gen_params = GenerationParams(max_new_tokens=self.max_new_tokens)

    def rating_to_score(self, x: int) -> float:
        return (x - 1) / (self.scale_max - 1)

    def build_prompt(self, ctx: TurnContext) -> str:
        history = list(ctx.history)
        question = ""
        if history and history[-1].role is Role.USER:
            question = history.pop().content
        reference = ctx.reference if ctx.reference is not None else (ctx.reference_document or "")
        return fill_template(self.template, history=render_history(history), question=question,
                             reference=reference, response=ctx.prediction)

    def score(self, ctx):
        if self.judge is None:
            raise MetricError("llm_judge needs a judge connector")
        prompt = self.build_prompt(ctx)
        conversation = [Message(Role.USER, prompt)]
        session = self.judge.begin_dialog(f"judge:{ctx.dialog.dialog_id}:{ctx.turn_id}:{uuid.uuid4().hex}")
        raw: list[str] = []
        try:
            for attempt in range(self.parse_retries + 1):
                try:
                    reply = self.judge.generate(session, conversation, self.gen_params)
                except ConnectorError as exc:
                    raise JudgeTransportError(str(exc)) from exc
                raw.append(reply)
                x = parse_rating(reply)
                if x is not None and 1 <= x <= self.scale_max:
                    return self.record(ctx, self.rating_to_score(x), rating=x, judge_text=reply,
                                       attempts=attempt + 1)
                conversation += [Message(Role.ASSISTANT, reply), Message(Role.USER, REASK_MESSAGE)]
        finally:
            self.judge.end_dialog(session)
        if self.on_parse_failure == "error":
            raise JudgeParseError(f"no rating in {len(raw)} judge replies")
        if self.on_parse_failure == "skip":
            return None
        return self.record(ctx, 0.0, parse_failed=True, judge_text=raw[-1] if raw else "", attempts=len(raw))


# --------------------------------------------------------------------------
# instruction adherence
# --------------------------------------------------------------------------


def _arg(args: Any, *keys: str) -> Any:
    if isinstance(args, Mapping):
        for k in keys:
            if k in args:
                return args[k]
        raise MetricError(f"instruction args need one of {keys}")
    return args


def _strip_fence(text: str) -> str:
    m = re.fullmatch(r"\s*```[a-zA-Z]*\n(.*?)\n?```\s*", text, re.S)
    return m.group(1) if m else text


def _is_json(text: str) -> bool:
    try:
        json.loads(_strip_fence(text).strip())
    except ValueError:
        return False
    return True


INSTRUCTION_CHECKS: dict[str, Callable[[str, Any], bool]] = {
    "max_words": lambda p, a: len(p.split()) <= int(_arg(a, "n", "max", "value")),
    "min_words": lambda p, a: len(p.split()) >= int(_arg(a, "n", "min", "value")),
    "contains": lambda p, a: str(_arg(a, "text", "value", "keyword")) in p,
    "not_contains": lambda p, a: str(_arg(a, "text", "value", "keyword")) not in p,
    "starts_with": lambda p, a: p.lstrip().startswith(str(_arg(a, "text", "value"))),
    "ends_with": lambda p, a: p.rstrip().endswith(str(_arg(a, "text", "value"))),
    "json_format": lambda p, a: _is_json(p),
    "bullet_count": lambda p, a: sum(line.startswith("- ") for line in p.splitlines()) == int(_arg(a, "n", "value")),
}


@register_metric("instruction_adherence")
class InstructionAdherence(Metric):
    def score(self, ctx):
        instructions = list(ctx.turn_labels.get("instructions") or [])
        if not instructions:
            raise NoInstructionsError(f"turn {ctx.turn_id} has no instructions")
        results = []
        for ins in instructions:
            kind = ins.get("type")
            check = INSTRUCTION_CHECKS.get(kind)
            if check is None:
                raise UnknownInstructionTypeError(f"unknown instruction type {kind!r}")
            results.append({"type": kind, "passed": bool(check(ctx.prediction, ins.get("args")))})
        passed = sum(r["passed"] for r in results)
        return self.record(ctx, passed / len(results), instructions=results)


# --------------------------------------------------------------------------
# math answer
# --------------------------------------------------------------------------

_NUMBER = re.compile(r"-?(?:\d[\d,]*(?:\.\d+)?|\.\d+)(?:[eE][-+]?\d+)?")
_FRAC = re.compile(r"\\[dt]?frac\{([^{}]+)\}\{([^{}]+)\}")


def last_boxed(text: str) -> str | None:
    """Contents of the last ``\\boxed{...}``, honouring nested braces."""
    start = text.rfind("\\boxed{")
    if start < 0:
        return None
    i = start + len("\\boxed{")
    depth = 1
    for j in range(i, len(text)):
        if text[j] == "{":
            depth += 1
        elif text[j] == "}":
            depth -= 1
            if depth == 0:
                return text[i:j]
    return None


def _clean(s: str) -> str:
    return s.replace(",", "").replace("$", "").replace("%", "").strip()


def to_number(s: str) -> float | None:
    s = _clean(s)
    m = _FRAC.fullmatch(s)
    if m:
        try:
            return float(Fraction(_clean(m.group(1))) / Fraction(_clean(m.group(2))))
        except (ValueError, ZeroDivisionError):
            return None
    try:
        return float(Fraction(s)) if "/" in s else float(s)
    except (ValueError, ZeroDivisionError):
        pass
    found = _NUMBER.findall(s)
    if found:
        try:
            return float(_clean(found[-1]))
        except ValueError:
            return None
    return None


def extract_answer(text: str) -> tuple[str | None, float | None]:
    boxed = last_boxed(text)
    if boxed is not None:
        return boxed, to_number(boxed)
    found = _NUMBER.findall(text)
    if not found:
        return None, None
    return found[-1], to_number(found[-1])


def numbers_match(pred: float, ref: float, rel_tol: float = 1e-4, abs_tol: float = 1e-9) -> bool:
    if ref == 0:
        return abs(pred) <= abs_tol
    return abs(pred - ref) / abs(ref) <= rel_tol


@register_metric("math_answer")
class MathAnswer(Metric):
    params = {"rel_tol": (float, 1e-4, None), "abs_tol": (float, 1e-9, None)}

    def score(self, ctx):
        if ctx.reference is None:
            raise MissingReferenceError("math_answer needs a reference")
        ref_str, ref = extract_answer(ctx.reference)
        if ref is None:
            raise MetricError(f"reference {ctx.reference!r} has no number")
        pred_str, pred = extract_answer(ctx.prediction)
        if pred is None or not math.isfinite(pred):
            return self.record(ctx, 0.0, extraction_failed=True, extracted=pred_str, reference=ref_str)
        ok = numbers_match(pred, ref, self.rel_tol, self.abs_tol)
        return self.record(ctx, 1.0 if ok else 0.0, extracted=pred_str, reference=ref_str)


# --------------------------------------------------------------------------
# code rules
# --------------------------------------------------------------------------

_FENCE = re.compile(r"```[^\n`]*\n(.*?)```", re.S)


def code_blocks(text: str) -> str:
    blocks = _FENCE.findall(text)
    return "\n".join(blocks) if blocks else text


@register_metric("code_rule")
class CodeRule(Metric):
    def score(self, ctx):
        rules = list(ctx.turn_labels.get("code_rules") or [])
        if not rules:
            raise NoRulesError(f"turn {ctx.turn_id} has no code_rules")
        code = code_blocks(ctx.prediction)
        results = []
        for rule in rules:
            try:
                pattern = re.compile(rule["pattern"], re.M)
            except re.error as exc:
                raise BadPatternError(f"{rule['pattern']!r}: {exc}") from None
            polarity = rule.get("polarity", "must_match")
            if polarity not in ("must_match", "must_not_match"):
                raise BadPatternError(f"unknown polarity {polarity!r}")
            found = pattern.search(code) is not None
            results.append({"pattern": rule["pattern"], "polarity": polarity,
                            "passed": found if polarity == "must_match" else not found})
        return self.record(ctx, sum(r["passed"] for r in results) / len(results), rules=results)


# --------------------------------------------------------------------------
# evaluation phase
# --------------------------------------------------------------------------


def scores_path(output_dir: Path, dialog_id: str) -> Path:
    return Path(output_dir) / SCORES_DIR / checkpoint.checkpoint_name(dialog_id)


def load_scores(output_dir: Path, dialog_id: str) -> list[ScoreRecord] | None:
    obj = checkpoint.read_json(scores_path(output_dir, dialog_id))
    if not isinstance(obj, list):
        return None
    try:
        return [ScoreRecord.from_dict(r) for r in obj]
    except (KeyError, TypeError, ValueError):
        return None


def load_all_scores(output_dir: Path) -> dict[str, list[ScoreRecord]]:
    out = {}
    for path in checkpoint.iter_checkpoints(Path(output_dir) / SCORES_DIR):
        dialog_id = checkpoint.dialog_id_from_name(path.name)
        recs = load_scores(output_dir, dialog_id)
        if recs is not None:
            out[dialog_id] = recs
    return out


def _spec_key(spec: MetricSpec) -> str:
    return spec.class_name + json.dumps(spec.args, sort_keys=True, default=str)


def resolve_all(dialogs: Iterable[Dialog], judge: Connector | None,
                judge_defaults: Mapping[str, Any] | None = None) -> dict[str, Metric]:
    """Construct every metric requested by ``dialogs`` up front (config errors surface here)."""
    cache: dict[str, Metric] = {}
    for d in dialogs:
        for turn in d.eval_turns():
            for spec in turn.eval_config.metrics:
                key = _spec_key(spec)
                if key not in cache:
                    metric = resolve(spec, judge=judge, judge_defaults=judge_defaults)
                    if metric.needs_judge and judge is None:
                        raise MetricError(f"{spec.class_name} needs a judge connector but none is configured")
                    cache[key] = metric
    return cache


def score_dialog(d: Dialog, rec: GenerationRecord, metrics: Mapping[str, Metric]) -> list[ScoreRecord]:
    predictions = rec.predictions
    out: list[ScoreRecord] = []
    for idx, turn in enumerate(d.dialog_turns):
        if not turn.eval_config.do_eval:
            continue
        for spec in turn.eval_config.metrics:
            metric = metrics[_spec_key(spec)]
            try:
                if turn.turn_id not in predictions:
                    raise MetricError(f"no prediction for turn {turn.turn_id}")
                ctx = TurnContext(
                    dialog=d, turn_id=turn.turn_id, prediction=predictions[turn.turn_id],
                    history=tuple(build_context(d, idx, predictions)), reference=turn.reference,
                    reference_document=turn.reference_document, turn_labels=turn.turn_labels,
                )
                result = metric.score(ctx)
            except Exception as exc:
                log.warning("%s/%s %s failed: %s", d.dialog_id, turn.turn_id, spec.class_name, exc)
                result = ScoreRecord(d.dialog_id, turn.turn_id, spec.class_name, 0.0,
                                     {"error": f"{type(exc).__name__}: {exc}"})
            if result is not None:
                out.append(result)
    return out


def run_evaluation(
    dialogs: Sequence[Dialog],
    records: Mapping[str, GenerationRecord],
    *,
    output_dir: Path,
    judge: Connector | None = None,
    judge_defaults: Mapping[str, Any] | None = None,
    workers: int = 1,
    resume: bool = False,
) -> dict[str, list[ScoreRecord]]:
    """Score every complete dialog; writes ``scores/<dialog_id>.json`` atomically per dialog."""
    if workers < 1:
        raise ValueError("workers must be >= 1")
    output_dir = Path(output_dir)
    (output_dir / SCORES_DIR).mkdir(parents=True, exist_ok=True)

    ready = []
    for d in dialogs:
        rec = records.get(d.dialog_id)
        if rec is None or rec.status != "complete":
            emit("evaluation", "skipped", d.dialog_id, level=logging.WARNING,
                 reason="no generation" if rec is None else "generation failed")
            continue
        ready.append(d)

    metrics = resolve_all(ready, judge, judge_defaults)
    cached: dict[str, list[ScoreRecord]] = {}
    todo = []
    for d in ready:
        prior = load_scores(output_dir, d.dialog_id) if resume else None
        if prior is None:
            todo.append(d)
        else:
            cached[d.dialog_id] = prior
    emit("evaluation", "start", n_ready=len(ready), n_pending=len(todo), workers=workers)

    def work(d: Dialog) -> tuple[str, list[ScoreRecord]]:
        scores = score_dialog(d, records[d.dialog_id], metrics)
        checkpoint.atomic_write_json(scores_path(output_dir, d.dialog_id), [s.to_dict() for s in scores])
        emit("evaluation", "scored", d.dialog_id, n_records=len(scores))
        return d.dialog_id, scores

    fresh = dict(run_pool(todo, work, workers))
    out = {}
    for d in ready:
        if d.dialog_id in fresh:
            out[d.dialog_id] = fresh[d.dialog_id]
        else:
            emit("evaluation", "cached", d.dialog_id)
            out[d.dialog_id] = cached[d.dialog_id]
    emit("evaluation", "done", n_scored=len(fresh), n_cached=len(cached))
    return out
