"""``ude`` command line: run, normalize, evaluate, aggregate, validate.

Exit codes: 0 success, 1 config or validation error, 2 phase-fatal error,
64 usage error.  Command-line flags override values from ``--config``.
"""
from __future__ import annotations

import argparse
import json
import logging
import sys
from pathlib import Path
from typing import Sequence

from .adapters import ADAPTER_REGISTRY, AdapterError, AdapterErrors, compute_stats, load_dataset, read_records
from .aggregation import DATASET_MODES, POOL_METHODS, render_report
from .pipeline import ConfigError, EvalPipeline, PhaseError, RunConfig
from .schema import SchemaError, dialog_from_dict, serialize_dialog, validate_dialog

EXIT_OK, EXIT_CONFIG, EXIT_PHASE, EXIT_USAGE = 0, 1, 2, 64


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        print(f"{self.prog}: error: {message}", file=sys.stderr)
        sys.exit(EXIT_USAGE)


def _common(p: argparse.ArgumentParser) -> None:
    p.add_argument("--config", help="run config JSON file")
    p.add_argument("--dataset", help="adapter id (e.g. unified_jsonl)")
    p.add_argument("--data-path", help="dataset file")
    p.add_argument("--model", help="model name passed to the connector")
    p.add_argument("--output-dir")
    p.add_argument("--workers", type=int)
    p.add_argument("--max-new-tokens", type=int)
    p.add_argument("--resume", action="store_true", default=None)
    p.add_argument("--retry-failed", choices=("true", "false"))
    p.add_argument("--agg-turn", choices=POOL_METHODS)
    p.add_argument("--agg-dialog", choices=POOL_METHODS)
    p.add_argument("--agg-dataset", choices=DATASET_MODES)
    p.add_argument("--agg-by-metric", action="store_true", default=None)
    p.add_argument("--figures", action="store_true", default=None, help="also write PNG figures")
    p.add_argument("--scale", choices=("percent", "unit"), default="percent", help="table scale on stdout")


def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="ude", description="multi-turn dialogue evaluation")
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True, parser_class=_Parser)
    for name, help_text in [
        ("run", "full pipeline"),
        ("evaluate", "score existing generations"),
        ("aggregate", "re-pool existing scores"),
    ]:
        _common(sub.add_parser(name, help=help_text))
    norm = sub.add_parser("normalize", help="convert a raw dataset to canonical JSONL")
    _common(norm)
    norm.add_argument("--out", help="output JSONL path (default: stdout)")
    val = sub.add_parser("validate", help="schema-check a dataset file")
    _common(val)
    return parser


def resolve_config(args: argparse.Namespace) -> RunConfig:
    cfg = RunConfig.load(args.config) if args.config else RunConfig()
    if args.dataset is not None:
        cfg.dataset["adapter"] = args.dataset
    if args.data_path is not None:
        cfg.dataset["path"] = args.data_path
    if args.model is not None:
        cfg.model["model"] = args.model
    if args.output_dir is not None:
        cfg.output_dir = args.output_dir
    if args.workers is not None:
        cfg.workers = args.workers
    if args.max_new_tokens is not None:
        cfg.generation["max_new_tokens"] = args.max_new_tokens
    if args.resume:
        cfg.resume = True
    if args.retry_failed is not None:
        cfg.retry_failed = args.retry_failed == "true"
    for flag, key in (("agg_turn", "turn_pool"), ("agg_dialog", "dialog_pool"), ("agg_dataset", "dataset_mode")):
        if getattr(args, flag) is not None:
            cfg.aggregation[key] = getattr(args, flag)
    if args.agg_by_metric:
        cfg.aggregation["agg_by_metric"] = True
    if args.figures:
        cfg.figures = True
    return cfg


def _print_report(report, scale: str) -> None:
    _, table = render_report(report, scale=scale)
    sys.stdout.write(table)


def _cmd_run(args, cfg: RunConfig) -> int:
    _print_report(EvalPipeline(cfg).run(), args.scale)
    return EXIT_OK


def _cmd_evaluate(args, cfg: RunConfig) -> int:
    _print_report(EvalPipeline(cfg).run_evaluate_only(), args.scale)
    return EXIT_OK


def _cmd_aggregate(args, cfg: RunConfig) -> int:
    _print_report(EvalPipeline(cfg).reaggregate(), args.scale)
    return EXIT_OK


def _cmd_normalize(args, cfg: RunConfig) -> int:
    adapter = cfg.dataset.get("adapter")
    path = cfg.dataset.get("path")
    problems = []
    if adapter not in ADAPTER_REGISTRY:
        problems.append(f"dataset.adapter: unknown adapter {adapter!r}")
    if not path or not Path(path).is_file():
        problems.append(f"dataset.path: file not found: {path}")
    if problems:
        raise ConfigError(problems)
    try:
        dialogs = load_dataset(adapter, path, cfg.dataset.get("options") or {})
    except Exception as exc:
        raise PhaseError("data", exc) from exc
    text = "".join(serialize_dialog(d) + "\n" for d in dialogs)
    if args.out:
        Path(args.out).write_text(text, encoding="utf-8")
    else:
        sys.stdout.write(text)
    stats = compute_stats(dialogs)
    print(json.dumps(stats.__dict__), file=sys.stderr)
    return EXIT_OK


def _cmd_validate(args, cfg: RunConfig) -> int:
    adapter = cfg.dataset.get("adapter") or "unified_jsonl"
    path = cfg.dataset.get("path")
    if not path or not Path(path).is_file():
        raise ConfigError([f"dataset.path: file not found: {path}"])
    problems: list[str] = []
    if adapter == "unified_jsonl":
        for i, rec in enumerate(read_records(path)):
            try:
                d = dialog_from_dict(rec)
            except (SchemaError, AttributeError, TypeError) as exc:
                problems.append(f"record {i}: {exc}")
                continue
            problems += [f"record {i} ({d.dialog_id}): {v}" for v in validate_dialog(d)]
    else:
        try:
            load_dataset(adapter, path, cfg.dataset.get("options") or {})
        except AdapterErrors as exc:
            problems += [str(e) for e in exc.errors]
        except (AdapterError, ValueError, KeyError) as exc:
            problems.append(str(exc))
    for p in problems:
        print(p, file=sys.stderr)
    if problems:
        return EXIT_CONFIG
    print(f"ok: {path}", file=sys.stderr)
    return EXIT_OK


COMMANDS = {
    "run": _cmd_run,
    "evaluate": _cmd_evaluate,
    "aggregate": _cmd_aggregate,
    "normalize": _cmd_normalize,
    "validate": _cmd_validate,
}


def main(argv: Sequence[str] | None = None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        cfg = resolve_config(args)
        return COMMANDS[args.command](args, cfg)
    except ConfigError as exc:
        for p in exc.problems:
            print(f"config error: {p}", file=sys.stderr)
        return EXIT_CONFIG
    except PhaseError as exc:
        print(f"fatal: {exc}", file=sys.stderr)
        return EXIT_PHASE


if __name__ == "__main__":
    sys.exit(main())
