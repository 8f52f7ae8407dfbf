"""End-to-end evaluation pipeline: data -> generation -> evaluation -> aggregation."""
from __future__ import annotations

import copy
import json
import logging
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any, Mapping

from . import checkpoint
from .adapters import ADAPTER_REGISTRY, load_dataset
from .aggregation import DATASET_MODES, POOL_METHODS, AggregateReport, AggregationPolicy, aggregate, render_report
from .connectors import Connector, GenerationParams, build_connector
from .events import attach_file_handler, detach_handler, emit
from .generation import GENERATIONS_DIR, GenerationRecord, RunPlan, load_records, run_generation
from .metrics import SCORES_DIR, MetricError, ScoreRecord, load_all_scores, run_evaluation
from .schema import Dialog

log = logging.getLogger(__name__)

RUN_CONFIG_FILE = "run_config.json"
AGGREGATE_FILE = "aggregate.json"
LOG_FILE = Path("logs") / "run.log"
FIGURES_DIR = "figures"

JUDGE_METRIC_KEYS = ("template", "template_path", "scale_max", "parse_retries", "on_parse_failure",
                     "max_new_tokens")


class ConfigError(ValueError):
    def __init__(self, problems: list[str]):
        super().__init__("invalid run config: " + "; ".join(problems))
        self.problems = problems


class PhaseError(RuntimeError):
    def __init__(self, phase: str, cause: BaseException):
        super().__init__(f"{phase} phase failed: {type(cause).__name__}: {cause}")
        self.phase = phase
        self.cause = cause


@dataclass
class RunConfig:
    dataset: dict[str, Any] = field(default_factory=dict)
    model: dict[str, Any] = field(default_factory=dict)
    judge: dict[str, Any] | None = None
    generation: dict[str, Any] = field(default_factory=dict)
    aggregation: dict[str, Any] = field(default_factory=dict)
    workers: int = 1
    output_dir: str = ""
    resume: bool = False
    retry_failed: bool = True
    seed: int = 0
    figures: bool = False

    @classmethod
    def from_dict(cls, obj: Mapping[str, Any]) -> RunConfig:
        known = set(cls.__dataclass_fields__)
        unknown = sorted(set(obj) - known)
        if unknown:
            raise ConfigError([f"unknown config key {k!r}" for k in unknown])
        return cls(**copy.deepcopy(dict(obj)))

    @classmethod
    def load(cls, path: str | Path) -> RunConfig:
        try:
            obj = json.loads(Path(path).read_text(encoding="utf-8"))
        except OSError as exc:
            raise ConfigError([f"config: cannot read {path}: {exc}"]) from None
        except json.JSONDecodeError as exc:
            raise ConfigError([f"config: {path} is not valid JSON: {exc}"]) from None
        if not isinstance(obj, dict):
            raise ConfigError(["config: top level must be an object"])
        return cls.from_dict(obj)

    def to_dict(self) -> dict[str, Any]:
        return {k: copy.deepcopy(getattr(self, k)) for k in self.__dataclass_fields__}

    def generation_params(self) -> GenerationParams:
        g = {k: v for k, v in self.generation.items() if k != "generate_context_turns"}
        return GenerationParams(**g)

    def policy(self) -> AggregationPolicy:
        return AggregationPolicy(**self.aggregation)

    def judge_parts(self) -> tuple[dict[str, Any] | None, dict[str, Any]]:
        """Split the judge section into connector config and llm_judge metric defaults."""
        if not self.judge:
            return None, {}
        conn = {k: v for k, v in self.judge.items() if k not in JUDGE_METRIC_KEYS}
        defaults = {k: v for k, v in self.judge.items() if k in JUDGE_METRIC_KEYS}
        return conn, defaults

    def validate(self, *, need_model: bool = True, need_dataset: bool = True) -> None:
        problems: list[str] = []
        if not isinstance(self.workers, int) or isinstance(self.workers, bool) or self.workers < 1:
            problems.append("workers: must be an integer >= 1")
        if not self.output_dir:
            problems.append("output_dir: must be non-empty")
        if need_dataset:
            adapter = self.dataset.get("adapter")
            if adapter not in ADAPTER_REGISTRY:
                problems.append(f"dataset.adapter: unknown adapter {adapter!r}")
            path = self.dataset.get("path")
            if not path:
                problems.append("dataset.path: required")
            elif not Path(path).is_file():
                problems.append(f"dataset.path: file not found: {path}")
        if need_model and not self.model.get("type"):
            problems.append("model.type: required")
        try:
            self.generation_params()
        except (TypeError, ValueError) as exc:
            problems.append(f"generation: {exc}")
        try:
            self.policy()
        except (TypeError, ValueError) as exc:
            problems.append(f"aggregation: {exc}")
        if self.judge:
            if not self.judge.get("type"):
                problems.append("judge.type: required")
            tp = self.judge.get("template_path")
            if tp and not Path(tp).is_file():
                problems.append(f"judge.template_path: file not found: {tp}")
        if problems:
            raise ConfigError(problems)


class EvalPipeline:
    """Programmatic entry point.  Connector instances may be injected for tests."""

    def __init__(self, config: RunConfig, *, connector: Connector | None = None, judge: Connector | None = None):
        self.config = config
        self.output_dir = Path(config.output_dir) if config.output_dir else Path()
        self._connector = connector
        self._judge = judge

    # connectors ------------------------------------------------------------

    @property
    def connector(self) -> Connector:
        if self._connector is None:
            try:
                self._connector = build_connector(self.config.model)
            except (TypeError, ValueError, KeyError) as exc:
                raise ConfigError([f"model: {exc}"]) from None
        return self._connector

    @property
    def judge(self) -> Connector | None:
        if self._judge is None:
            conn_cfg, _ = self.config.judge_parts()
            if conn_cfg is None:
                return None
            try:
                self._judge = build_connector(conn_cfg)
            except (TypeError, ValueError, KeyError) as exc:
                raise ConfigError([f"judge: {exc}"]) from None
        return self._judge

    # phases ------------------------------------------------------------------

    def load_data(self) -> list[Dialog]:
        ds = self.config.dataset
        try:
            dialogs = load_dataset(ds["adapter"], ds["path"], ds.get("options") or {})
        except Exception as exc:
            raise PhaseError("data", exc) from exc
        for d in dialogs:
            emit("data", "loaded", d.dialog_id, n_turns=len(d.dialog_turns))
        return dialogs

    def generate(self, dialogs: list[Dialog]) -> dict[str, GenerationRecord]:
        plan = RunPlan(
            dialogs=dialogs,
            connector=self.connector,
            output_dir=self.output_dir,
            params=self.config.generation_params(),
            workers=self.config.workers,
            resume=self.config.resume,
            retry_failed=self.config.retry_failed,
            generate_context_turns=bool(self.config.generation.get("generate_context_turns", False)),
        )
        try:
            return run_generation(plan)
        except Exception as exc:
            raise PhaseError("generation", exc) from exc

    def evaluate(self, dialogs: list[Dialog], records: Mapping[str, GenerationRecord]) -> dict[str, list[ScoreRecord]]:
        _, judge_defaults = self.config.judge_parts()
        try:
            return run_evaluation(
                dialogs, records, output_dir=self.output_dir, judge=self.judge,
                judge_defaults=judge_defaults, workers=self.config.workers, resume=self.config.resume,
            )
        except MetricError as exc:
            raise ConfigError([f"metrics: {exc}"]) from None
        except Exception as exc:
            raise PhaseError("evaluation", exc) from exc

    def aggregate(self, scores: Mapping[str, list[ScoreRecord]], dialog_ids) -> AggregateReport:
        report = aggregate([r for recs in scores.values() for r in recs], self.config.policy(),
                           dialog_ids=dialog_ids)
        json_text, _ = render_report(report, scale="unit")
        checkpoint.atomic_write_text(self.output_dir / AGGREGATE_FILE, json_text)
        emit("aggregation", "done", dataset_score=report.dataset_score,
             n_scored=report.n_dialogs_scored, n_skipped=report.n_dialogs_skipped)
        if self.config.figures:
            from .plotting import plot_report

            plot_report(report, self.output_dir / FIGURES_DIR)
        return report

    # orchestration -------------------------------------------------------------

    def _prepare_output(self) -> logging.Handler:
        try:
            self.output_dir.mkdir(parents=True, exist_ok=True)
            (self.output_dir / LOG_FILE).parent.mkdir(parents=True, exist_ok=True)
        except OSError as exc:
            raise PhaseError("setup", exc) from exc
        return attach_file_handler(self.output_dir / LOG_FILE)

    def run(self) -> AggregateReport:
        self.config.validate()
        handler = self._prepare_output()
        try:
            checkpoint.atomic_write_json(self.output_dir / RUN_CONFIG_FILE, self.config.to_dict())
            emit("pipeline", "start", resume=self.config.resume, workers=self.config.workers)
            dialogs = self.load_data()
            records = self.generate(dialogs)
            scores = self.evaluate(dialogs, records)
            report = self.aggregate(scores, [d.dialog_id for d in dialogs])
            emit("pipeline", "done")
            return report
        except PhaseError as exc:
            emit("pipeline", "fatal", level=logging.ERROR, phase_name=exc.phase, error=str(exc.cause))
            raise
        finally:
            detach_handler(handler)

    def run_evaluate_only(self) -> AggregateReport:
        """Score generations already present in the output directory, then aggregate."""
        self.config.validate(need_model=False)
        handler = self._prepare_output()
        try:
            dialogs = self.load_data()
            records = load_records(self.output_dir)
            scores = self.evaluate(dialogs, records)
            return self.aggregate(scores, [d.dialog_id for d in dialogs])
        finally:
            detach_handler(handler)

    def reaggregate(self) -> AggregateReport:
        """Re-pool existing ``scores/`` with the configured policy; touches no connector."""
        self.config.validate(need_model=False, need_dataset=False)
        if not (self.output_dir / SCORES_DIR).is_dir():
            raise PhaseError("aggregation", FileNotFoundError(str(self.output_dir / SCORES_DIR)))
        handler = self._prepare_output()
        try:
            scores = load_all_scores(self.output_dir)
            expected = set(scores) | set(load_records(self.output_dir))
            return self.aggregate(scores, sorted(expected))
        finally:
            detach_handler(handler)


def run_pipeline(config: RunConfig | Mapping[str, Any], **connectors: Connector) -> AggregateReport:
    if not isinstance(config, RunConfig):
        config = RunConfig.from_dict(config)
    return EvalPipeline(config, **connectors).run()


__all__ = [
    "AGGREGATE_FILE", "ConfigError", "DATASET_MODES", "EvalPipeline", "GENERATIONS_DIR", "PhaseError",
    "POOL_METHODS", "RUN_CONFIG_FILE", "RunConfig", "run_pipeline",
]
