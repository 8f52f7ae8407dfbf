"""Three-layer score pooling: metric scores -> turn -> dialog -> dataset."""
from __future__ import annotations

import json
import math
from collections import defaultdict
from dataclasses import asdict, dataclass, field
from decimal import ROUND_HALF_UP, Decimal
from typing import Any, Iterable, Mapping, Sequence

from .metrics import ScoreRecord

POOL_METHODS = ("mean", "min", "max")
DATASET_MODES = ("dialog_mean", "global_flatten")


class EmptyPoolError(ValueError):
    pass


@dataclass(frozen=True)
class AggregationPolicy:
    turn_pool: str = "mean"
    dialog_pool: str = "min"
    dataset_mode: str = "dialog_mean"
    agg_by_metric: bool = False

    def __post_init__(self):
        if self.turn_pool not in POOL_METHODS:
            raise ValueError(f"turn_pool must be one of {POOL_METHODS}")
        if self.dialog_pool not in POOL_METHODS:
            raise ValueError(f"dialog_pool must be one of {POOL_METHODS}")
        if self.dataset_mode not in DATASET_MODES:
            raise ValueError(f"dataset_mode must be one of {DATASET_MODES}")


def pool(values: Sequence[float], method: str) -> float:
    if not values:
        raise EmptyPoolError("cannot pool an empty list")
    if method == "mean":
        # fsum keeps the result independent of input order
        return math.fsum(values) / len(values)
    if method == "min":
        return min(values)
    if method == "max":
        return max(values)
    raise ValueError(f"unknown pool method {method!r}")


@dataclass
class PartitionScores:
    dataset_score: float | None
    per_dialog: dict[str, float]


@dataclass
class AggregateReport:
    dataset_score: float | None
    per_dialog: dict[str, float]
    n_dialogs_scored: int
    n_dialogs_skipped: int
    policy: AggregationPolicy
    per_metric: dict[str, PartitionScores] | None = None
    skipped_dialogs: list[str] = field(default_factory=list)

    def to_dict(self) -> dict[str, Any]:
        out = {
            "dataset_score": self.dataset_score,
            "n_dialogs_scored": self.n_dialogs_scored,
            "n_dialogs_skipped": self.n_dialogs_skipped,
            "policy": asdict(self.policy),
            "per_dialog": dict(sorted(self.per_dialog.items())),
            "per_metric": None,
            "skipped_dialogs": sorted(self.skipped_dialogs),
        }
        if self.per_metric is not None:
            out["per_metric"] = {
                name: {"dataset_score": p.dataset_score, "per_dialog": dict(sorted(p.per_dialog.items()))}
                for name, p in sorted(self.per_metric.items())
            }
        return out

    @classmethod
    def from_dict(cls, obj: Mapping[str, Any]) -> AggregateReport:
        per_metric = obj.get("per_metric")
        return cls(
            dataset_score=obj["dataset_score"],
            per_dialog=dict(obj["per_dialog"]),
            n_dialogs_scored=obj["n_dialogs_scored"],
            n_dialogs_skipped=obj["n_dialogs_skipped"],
            policy=AggregationPolicy(**obj["policy"]),
            per_metric=None if per_metric is None else {
                k: PartitionScores(v["dataset_score"], dict(v["per_dialog"])) for k, v in per_metric.items()
            },
            skipped_dialogs=list(obj.get("skipped_dialogs", [])),
        )


def _group(records: Iterable[ScoreRecord]) -> dict[str, dict[str, list[float]]]:
    grouped: dict[str, dict[str, list[float]]] = defaultdict(lambda: defaultdict(list))
    for r in records:
        grouped[r.dialog_id][r.turn_id].append(r.score)
    return grouped


def _three_layer(records: Iterable[ScoreRecord], policy: AggregationPolicy) -> PartitionScores:
    grouped = _group(records)
    per_dialog: dict[str, float] = {}
    all_turns: list[float] = []
    for dialog_id, turns in grouped.items():
        summaries = [pool(scores, policy.turn_pool) for scores in turns.values()]
        all_turns.extend(summaries)
        per_dialog[dialog_id] = pool(summaries, policy.dialog_pool)
    if not per_dialog:
        return PartitionScores(None, {})
    if policy.dataset_mode == "dialog_mean":
        dataset = pool(list(per_dialog.values()), "mean")
    else:
        dataset = pool(all_turns, "mean")
    return PartitionScores(dataset, per_dialog)


def aggregate(
    records: Iterable[ScoreRecord],
    policy: AggregationPolicy | None = None,
    *,
    dialog_ids: Iterable[str] | None = None,
) -> AggregateReport:
    """Pool score records hierarchically.

    ``dialog_ids`` lists every dialog that was supposed to be scored; those
    without any record are reported as skipped rather than counted as zero.
    """
    policy = policy or AggregationPolicy()
    records = list(records)
    main = _three_layer(records, policy)
    expected = set(dialog_ids) if dialog_ids is not None else set(main.per_dialog)
    skipped = sorted(expected - set(main.per_dialog))
    per_metric = None
    if policy.agg_by_metric:
        by_name: dict[str, list[ScoreRecord]] = defaultdict(list)
        for r in records:
            by_name[r.metric_name].append(r)
        per_metric = {name: _three_layer(recs, policy) for name, recs in by_name.items()}
    return AggregateReport(
        dataset_score=main.dataset_score,
        per_dialog=main.per_dialog,
        n_dialogs_scored=len(main.per_dialog),
        n_dialogs_skipped=len(skipped),
        policy=policy,
        per_metric=per_metric,
        skipped_dialogs=skipped,
    )


def format_score(value: float | None, scale: str = "percent") -> str:
    if value is None:
        return "-"
    if scale == "unit":
        return repr(value)
    pct = (Decimal(repr(value)) * 100).quantize(Decimal("0.01"), rounding=ROUND_HALF_UP)
    return f"{pct}"


def _scaled(value: float | None, scale: str) -> float | None:
    if value is None or scale == "unit":
        return value
    return float(format_score(value, scale))


def render_report(report: AggregateReport, scale: str = "percent") -> tuple[str, str]:
    """Return ``(json_text, table_text)``; percent scale is x100 rounded half-up to 2 dp."""
    if scale not in ("unit", "percent"):
        raise ValueError("scale must be 'unit' or 'percent'")
    obj = report.to_dict()
    obj["scale"] = scale
    obj["dataset_score"] = _scaled(obj["dataset_score"], scale)
    obj["per_dialog"] = {k: _scaled(v, scale) for k, v in obj["per_dialog"].items()}
    if obj["per_metric"] is not None:
        for part in obj["per_metric"].values():
            part["dataset_score"] = _scaled(part["dataset_score"], scale)
            part["per_dialog"] = {k: _scaled(v, scale) for k, v in part["per_dialog"].items()}
    json_text = json.dumps(obj, ensure_ascii=False, indent=2) + "\n"

    p = report.policy
    lines = [
        f"policy: turn={p.turn_pool} dialog={p.dialog_pool} dataset={p.dataset_mode}"
        f" by_metric={str(p.agg_by_metric).lower()}",
        f"dialogs scored: {report.n_dialogs_scored}  skipped: {report.n_dialogs_skipped}",
        "",
        _table("overall", report.dataset_score, report.per_dialog, scale),
    ]
    for name, part in sorted((report.per_metric or {}).items()):
        lines += ["", _table(f"metric: {name}", part.dataset_score, part.per_dialog, scale)]
    return json_text, "\n".join(lines) + "\n"


def _table(title: str, dataset: float | None, per_dialog: Mapping[str, float], scale: str) -> str:
    rows = [("dataset", format_score(dataset, scale))]
    rows += [(k, format_score(v, scale)) for k, v in sorted(per_dialog.items())]
    width = max(len(r[0]) for r in rows)
    out = [f"== {title} ==", f"{'dialog_id':<{width}}\tscore"]
    out += [f"{k:<{width}}\t{v}" for k, v in rows]
    return "\n".join(out)
