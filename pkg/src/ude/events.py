"""Structured run log: one JSON object per line."""
from __future__ import annotations

import json
import logging
from datetime import datetime, timezone
from typing import Any

logger = logging.getLogger("ude.run")


def emit(phase: str, event: str, dialog_id: str | None = None, *, level: int = logging.INFO, **detail: Any) -> None:
    logger.log(level, "%s %s %s", phase, event, dialog_id or "",
               extra={"phase": phase, "event": event, "dialog_id": dialog_id, "detail": detail})


class JsonLineFormatter(logging.Formatter):
    def format(self, record: logging.LogRecord) -> str:
        out = {
            "ts": datetime.fromtimestamp(record.created, timezone.utc).isoformat(),
            "level": record.levelname,
            "phase": getattr(record, "phase", None),
            "dialog_id": getattr(record, "dialog_id", None),
            "event": getattr(record, "event", record.getMessage()),
            "detail": getattr(record, "detail", {}),
        }
        if out["dialog_id"] is None:
            del out["dialog_id"]
        return json.dumps(out, ensure_ascii=False, default=str)


def attach_file_handler(path) -> logging.Handler:
    handler = logging.FileHandler(path, encoding="utf-8")
    handler.setFormatter(JsonLineFormatter())
    logger.addHandler(handler)
    logger.setLevel(logging.INFO)
    return handler


def detach_handler(handler: logging.Handler) -> None:
    logger.removeHandler(handler)
    handler.close()
