"""Unified multi-turn dialogue evaluation toolkit."""
from .adapters import DatasetStats, compute_stats, load_dataset, register_adapter
from .aggregation import AggregateReport, AggregationPolicy, aggregate, pool, render_report
from .connectors import (
    Connector,
    GenerationParams,
    Message,
    OpenAICompatibleConnector,
    ScriptedConnector,
    build_connector,
)
from .generation import GenerationRecord, RunPlan, build_context, run_generation, scan_resume
from .memory import MemoryAgentConnector, MemoryUnit, RetrievalPolicy
from .metrics import METRIC_REGISTRY, ScoreRecord, TurnContext, register_metric, resolve, run_evaluation
from .pipeline import ConfigError, EvalPipeline, PhaseError, RunConfig, run_pipeline
from .schema import (
    Dialog,
    DialogEvalConfig,
    MetricSpec,
    Role,
    Turn,
    TurnEvalConfig,
    parse_dialog,
    serialize_dialog,
    validate_dialog,
)

__version__ = "0.1.0"

__all__ = [
    "AggregateReport", "AggregationPolicy", "ConfigError", "Connector", "DatasetStats", "Dialog",
    "DialogEvalConfig", "EvalPipeline", "GenerationParams", "GenerationRecord", "METRIC_REGISTRY",
    "MemoryAgentConnector", "MemoryUnit", "Message", "MetricSpec", "OpenAICompatibleConnector", "PhaseError",
    "RetrievalPolicy", "Role", "RunConfig", "RunPlan", "ScoreRecord", "ScriptedConnector", "Turn",
    "TurnContext", "TurnEvalConfig", "aggregate", "build_connector", "build_context", "compute_stats",
    "load_dataset", "parse_dialog", "pool", "register_adapter", "register_metric", "render_report", "resolve",
    "run_evaluation", "run_generation", "run_pipeline", "scan_resume", "serialize_dialog", "validate_dialog",
]
