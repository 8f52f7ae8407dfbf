"""Generation phase: per-dialog multi-turn generation with a worker pool and resume."""
from __future__ import annotations

import logging
import time
from concurrent.futures import FIRST_EXCEPTION, ThreadPoolExecutor, wait
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any, Iterable, Mapping, Sequence

from . import checkpoint
from .connectors import Connector, GenerationParams, Message
from .events import emit
from .schema import Dialog, Role

log = logging.getLogger(__name__)

GENERATIONS_DIR = "generations"


class MissingPredictionError(RuntimeError):
    pass


@dataclass(frozen=True)
class TurnPrediction:
    turn_id: str
    prediction: str
    latency_ms: float
    request_count: int


@dataclass(frozen=True)
class GenerationRecord:
    dialog_id: str
    status: str  # "complete" | "failed"
    turns: tuple[TurnPrediction, ...] = ()
    failure_reason: str | None = None

    @property
    def predictions(self) -> dict[str, str]:
        return {t.turn_id: t.prediction for t in self.turns}

    def to_dict(self) -> dict[str, Any]:
        return {
            "dialog_id": self.dialog_id,
            "status": self.status,
            "failure_reason": self.failure_reason,
            "turns": [
                {"turn_id": t.turn_id, "prediction": t.prediction, "latency_ms": t.latency_ms,
                 "request_count": t.request_count}
                for t in self.turns
            ],
        }

    @classmethod
    def from_dict(cls, obj: Mapping[str, Any]) -> GenerationRecord:
        if obj.get("status") not in ("complete", "failed"):
            raise ValueError(f"bad status {obj.get('status')!r}")
        return cls(
            dialog_id=str(obj["dialog_id"]),
            status=obj["status"],
            failure_reason=obj.get("failure_reason"),
            turns=tuple(
                TurnPrediction(str(t["turn_id"]), str(t["prediction"]), float(t["latency_ms"]),
                               int(t["request_count"]))
                for t in obj.get("turns", [])
            ),
        )


@dataclass
class RunPlan:
    dialogs: Sequence[Dialog]
    connector: Connector
    output_dir: Path
    params: GenerationParams = field(default_factory=GenerationParams)
    workers: int = 1
    resume: bool = False
    retry_failed: bool = True
    # reference-history dialogs only need their evaluated turns generated
    generate_context_turns: bool = False

    def __post_init__(self):
        if self.workers < 1:
            raise ValueError("workers must be >= 1")
        self.output_dir = Path(self.output_dir)


def build_context(d: Dialog, upto_turn_index: int, predictions_so_far: Mapping[str, str]) -> list[Message]:
    """Messages the model sees when producing ``d.dialog_turns[upto_turn_index]``.

    Earlier assistant turns carry the model's own predictions for on-policy
    dialogs (``use_reference_history=False``) and the dataset text otherwise.
    """
    turns = d.dialog_turns
    if not 0 <= upto_turn_index < len(turns) or turns[upto_turn_index].role is not Role.ASSISTANT:
        raise ValueError(f"turn {upto_turn_index} of {d.dialog_id} is not an assistant turn")
    on_policy = not d.dialog_eval_config.use_reference_history
    context = []
    for turn in turns[:upto_turn_index]:
        content = turn.content
        if turn.role is Role.ASSISTANT and on_policy:
            if turn.turn_id not in predictions_so_far:
                raise MissingPredictionError(f"{d.dialog_id}: no prediction for earlier turn {turn.turn_id}")
            content = predictions_so_far[turn.turn_id]
        context.append(Message(turn.role, content))
    return context


def target_turn_indices(d: Dialog, generate_context_turns: bool = False) -> list[int]:
    if generate_context_turns or not d.dialog_eval_config.use_reference_history:
        return d.assistant_indices()
    return [i for i in d.assistant_indices() if d.dialog_turns[i].eval_config.do_eval]


def generate_dialog(
    d: Dialog, connector: Connector, params: GenerationParams, generate_context_turns: bool = False
) -> GenerationRecord:
    """Generate every target assistant turn of ``d`` in order; failures become a failed record."""
    entries: list[TurnPrediction] = []
    predictions: dict[str, str] = {}
    try:
        session = connector.begin_dialog(d.dialog_id, turn_count=len(d.dialog_turns))
    except Exception as exc:
        log.warning("dialog %s could not start: %s", d.dialog_id, exc)
        return GenerationRecord(d.dialog_id, "failed", (), f"{type(exc).__name__}: {exc}")
    try:
        for idx in target_turn_indices(d, generate_context_turns):
            turn = d.dialog_turns[idx]
            context = build_context(d, idx, predictions)
            before = session.request_count
            t0 = time.perf_counter()
            text = connector.generate(session, context, params)
            latency_ms = (time.perf_counter() - t0) * 1000.0
            predictions[turn.turn_id] = text
            entries.append(TurnPrediction(turn.turn_id, text, latency_ms, session.request_count - before))
    except Exception as exc:  # per-dialog failures are data, not fatal
        log.warning("dialog %s failed: %s", d.dialog_id, exc)
        return GenerationRecord(d.dialog_id, "failed", tuple(entries), f"{type(exc).__name__}: {exc}")
    finally:
        connector.end_dialog(session)
    return GenerationRecord(d.dialog_id, "complete", tuple(entries))


def record_path(output_dir: Path, dialog_id: str) -> Path:
    return Path(output_dir) / GENERATIONS_DIR / checkpoint.checkpoint_name(dialog_id)


def load_record(output_dir: Path, dialog_id: str) -> GenerationRecord | None:
    obj = checkpoint.read_json(record_path(output_dir, dialog_id))
    if obj is None:
        return None
    try:
        rec = GenerationRecord.from_dict(obj)
    except (KeyError, TypeError, ValueError):
        return None
    return rec if rec.dialog_id == dialog_id else None


def scan_resume(output_dir: Path, dialogs: Iterable[Dialog | str], *, retry_failed: bool = True) -> list[str]:
    """Dialog ids whose generation checkpoint is missing, unreadable or (optionally) failed."""
    pending = []
    for d in dialogs:
        dialog_id = d if isinstance(d, str) else d.dialog_id
        rec = load_record(output_dir, dialog_id)
        if rec is None or (rec.status == "failed" and retry_failed):
            pending.append(dialog_id)
    return pending


def load_records(output_dir: Path) -> dict[str, GenerationRecord]:
    out = {}
    for path in checkpoint.iter_checkpoints(Path(output_dir) / GENERATIONS_DIR):
        obj = checkpoint.read_json(path)
        try:
            rec = GenerationRecord.from_dict(obj)
        except (KeyError, TypeError, ValueError, AttributeError):
            continue
        out[rec.dialog_id] = rec
    return out


def run_pool(items: Sequence[Any], fn, workers: int) -> list[Any]:
    """Run ``fn`` over ``items`` on a bounded thread pool, results in input order.

    The first exception escaping ``fn`` cancels all queued work and is re-raised.
    """
    if not items:
        return []
    with ThreadPoolExecutor(max_workers=workers, thread_name_prefix="ude") as pool:
        futures = [pool.submit(fn, item) for item in items]
        wait(futures, return_when=FIRST_EXCEPTION)
        for fut in futures:
            if fut.done() and not fut.cancelled() and fut.exception() is not None:
                for other in futures:
                    other.cancel()
                raise fut.exception()
    return [f.result() for f in futures]


def run_generation(plan: RunPlan) -> dict[str, GenerationRecord]:
    out_dir = plan.output_dir
    (out_dir / GENERATIONS_DIR).mkdir(parents=True, exist_ok=True)
    by_id = {d.dialog_id: d for d in plan.dialogs}
    if plan.resume:
        pending = set(scan_resume(out_dir, plan.dialogs, retry_failed=plan.retry_failed))
    else:
        pending = set(by_id)
    todo = [d for d in plan.dialogs if d.dialog_id in pending]
    emit("generation", "start", n_dialogs=len(plan.dialogs), n_pending=len(todo), workers=plan.workers)

    def work(d: Dialog) -> GenerationRecord:
        rec = generate_dialog(d, plan.connector, plan.params, plan.generate_context_turns)
        checkpoint.atomic_write_json(record_path(out_dir, d.dialog_id), rec.to_dict())
        if rec.status == "complete":
            emit("generation", "generated", d.dialog_id, n_turns=len(rec.turns))
        else:
            emit("generation", "failed", d.dialog_id, level=logging.WARNING, reason=rec.failure_reason)
        return rec

    fresh = {rec.dialog_id: rec for rec in run_pool(todo, work, plan.workers)}
    results: dict[str, GenerationRecord] = {}
    for d in plan.dialogs:
        if d.dialog_id in fresh:
            results[d.dialog_id] = fresh[d.dialog_id]
        else:
            rec = load_record(out_dir, d.dialog_id)
            if rec is not None:
                emit("generation", "cached", d.dialog_id, status=rec.status)
                results[d.dialog_id] = rec
    emit("generation", "done", n_generated=len(fresh),
         n_failed=sum(r.status == "failed" for r in results.values()))
    return results
