from __future__ import annotations

import json
import re
import random
import string
import threading
from http.server import BaseHTTPRequestHandler, ThreadingHTTPServer
from pathlib import Path

from ude.connectors import ScriptedConnector
from ude.schema import Dialog, DialogEvalConfig, MetricSpec, Role, Turn, TurnEvalConfig, serialize_dialog

EM = MetricSpec("exact_match", {})


def make_dialog(dialog_id, exchanges, *, system=None, use_reference_history=True, metrics=(EM,), eval_all=True):
    """exchanges: list of (user_text, assistant_text, reference)."""
    turns = []
    if system is not None:
        turns.append(Turn("t000", Role.SYSTEM, system))
    for user, assistant, ref in exchanges:
        turns.append(Turn(f"t{len(turns):03d}", Role.USER, user))
        turns.append(Turn(
            f"t{len(turns):03d}", Role.ASSISTANT, assistant, reference=ref,
            eval_config=TurnEvalConfig(eval_all, tuple(metrics) if eval_all else ()),
        ))
    return Dialog(dialog_id, tuple(turns), dialog_eval_config=DialogEvalConfig(use_reference_history))


def write_jsonl(path: Path, dialogs) -> Path:
    path.write_text("".join(serialize_dialog(d) + "\n" for d in dialogs), encoding="utf-8")
    return path


def echo_dataset(n, n_exchanges=1, prefix="d"):
    """Dialogs whose reference equals the echo connector's answer for even ids."""
    out = []
    for i in range(n):
        ex = []
        for j in range(n_exchanges):
            q = f"question {i} {j}"
            ref = f"ECHO: {q}" if (i + j) % 2 == 0 else "something else"
            ex.append((q, f"gold {i} {j}", ref))
        out.append(make_dialog(f"{prefix}{i:03d}", ex))
    return out


# --------------------------------------------------------------------------
# random valid dialogs
# --------------------------------------------------------------------------

_ALPHABET = string.ascii_letters + string.digits + " .,!?-_\n\"'{}[]éß中"


def _text(rng, lo=0, hi=30):
    return "".join(rng.choice(_ALPHABET) for _ in range(rng.randint(lo, hi)))


def _json_value(rng, depth=0):
    kinds = ["str", "int", "float", "bool", "none"] + (["list", "dict"] if depth < 2 else [])
    kind = rng.choice(kinds)
    if kind == "str":
        return _text(rng, 0, 10)
    if kind == "int":
        return rng.randint(-10**6, 10**6)
    if kind == "float":
        return rng.uniform(-1e3, 1e3)
    if kind == "bool":
        return rng.random() < 0.5
    if kind == "none":
        return None
    if kind == "list":
        return [_json_value(rng, depth + 1) for _ in range(rng.randint(0, 3))]
    return {_text(rng, 1, 6): _json_value(rng, depth + 1) for _ in range(rng.randint(0, 3))}


def _labels(rng):
    return {_text(rng, 1, 8): _json_value(rng) for _ in range(rng.randint(0, 3))}


def random_dialog(rng: random.Random, dialog_id: str | None = None) -> Dialog:
    turns = []
    if rng.random() < 0.4:
        turns.append(Turn(f"t{len(turns):03d}", Role.SYSTEM, _text(rng), turn_labels=_labels(rng)))
    for _ in range(rng.randint(1, 6)):
        turns.append(Turn(f"t{len(turns):03d}", Role.USER, _text(rng, 1), turn_labels=_labels(rng)))
        do_eval = rng.random() < 0.7
        metrics = ()
        ref = _text(rng) if rng.random() < 0.6 else None
        doc = _text(rng) if rng.random() < 0.3 else None
        if do_eval:
            metrics = tuple(
                MetricSpec(rng.choice(["exact_match", "llm_judge", "math_answer"]), _labels(rng))
                for _ in range(rng.randint(1, 3))
            )
            if ref is None and doc is None:
                metrics = metrics + (MetricSpec("llm_judge", {"reference_free": True}),)
        elif rng.random() < 0.3:
            metrics = (MetricSpec("exact_match", {}),)
        turns.append(Turn(
            f"t{len(turns):03d}", Role.ASSISTANT, _text(rng), reference=ref, reference_document=doc,
            eval_config=TurnEvalConfig(do_eval, metrics), turn_labels=_labels(rng),
        ))
    if rng.random() < 0.2:
        turns.append(Turn(f"t{len(turns):03d}", Role.USER, _text(rng, 1)))
    return Dialog(
        dialog_id or _text(rng, 1, 12),
        tuple(turns),
        dialog_raw_info=_labels(rng),
        dialog_labels=_labels(rng),
        dialog_eval_config=DialogEvalConfig(rng.random() < 0.5),
    )


# --------------------------------------------------------------------------
# instrumented connectors
# --------------------------------------------------------------------------


class RecordingConnector(ScriptedConnector):
    """Scripted connector that keeps every context it receives, per dialog."""

    def __init__(self, *args, fail_on=(), **kwargs):
        super().__init__(*args, **kwargs)
        self.fail_on = set(fail_on)
        self.contexts: dict[str, list] = {}
        self._ctx_lock = threading.Lock()

    def _generate(self, session, context, params):
        with self._ctx_lock:
            self.contexts.setdefault(session.dialog_id, []).append(list(context))
        if session.dialog_id in self.fail_on:
            raise RuntimeError(f"injected failure for {session.dialog_id}")
        return super()._generate(session, context, params)


class Killed(BaseException):
    """Simulates the process dying mid-run; escapes per-dialog error handling."""


class KillAfter(ScriptedConnector):
    """Completes ``n`` dialogs, then every further dialog start kills the run."""

    def __init__(self, n, *args, **kwargs):
        super().__init__(*args, **kwargs)
        self.n = n

    def begin_dialog(self, dialog_id, **kw):
        if self.n_end >= self.n:
            raise Killed()
        return super().begin_dialog(dialog_id, **kw)


# --------------------------------------------------------------------------
# mock chat-completions server
# --------------------------------------------------------------------------


class MockChatServer:
    """Threaded HTTP server; ``script`` is a list of (status, reply_text) consumed per request."""

    def __init__(self, script=None, default=(200, "ok"), responder=None):
        self.script = list(script or [])
        self.default = default
        self.responder = responder
        self.requests: list[dict] = []
        self.headers: list[dict] = []
        self.lock = threading.Lock()
        server = self

        class Handler(BaseHTTPRequestHandler):
            def log_message(self, *a):
                pass

            def do_POST(self):
                body = json.loads(self.rfile.read(int(self.headers["Content-Length"])))
                with server.lock:
                    server.requests.append(body)
                    server.headers.append(dict(self.headers))
                    if server.responder is not None:
                        status, text = server.responder(body)
                    else:
                        status, text = server.script.pop(0) if server.script else server.default
                payload = (json.dumps({"choices": [{"message": {"role": "assistant", "content": text}}]})
                           if status == 200 else json.dumps({"error": text}))
                data = payload.encode()
                self.send_response(status)
                self.send_header("Content-Type", "application/json")
                self.send_header("Content-Length", str(len(data)))
                self.end_headers()
                self.wfile.write(data)

        self.httpd = ThreadingHTTPServer(("127.0.0.1", 0), Handler)
        self.thread = threading.Thread(target=self.httpd.serve_forever, daemon=True)

    @property
    def base_url(self):
        host, port = self.httpd.server_address
        return f"http://{host}:{port}/v1"

    def __enter__(self):
        self.thread.start()
        return self

    def __exit__(self, *exc):
        self.httpd.shutdown()
        self.httpd.server_close()


def masked_tree(directory: Path) -> dict[str, object]:
    """Decoded JSON of every file under ``directory`` with latency fields removed."""
    out = {}
    for path in sorted(Path(directory).rglob("*.json")):
        obj = json.loads(path.read_text())
        if isinstance(obj, dict) and "turns" in obj:
            for t in obj["turns"]:
                t.pop("latency_ms", None)
        out[str(path.relative_to(directory))] = json.dumps(obj, sort_keys=True)
    return out


_LATENCY = re.compile(rb'"latency_ms": [-+0-9.eE]+')


def masked_bytes(directory: Path) -> dict[str, bytes]:
    """Raw file bytes under ``directory`` with latency values blanked; everything else compared byte-for-byte."""
    return {
        str(p.relative_to(directory)): _LATENCY.sub(b'"latency_ms": 0', p.read_bytes())
        for p in sorted(Path(directory).rglob("*")) if p.is_file()
    }


# acceptance verdict lines, printed again in the terminal summary
VERDICTS: list[str] = []


def verdict(number: int, title: str, ok: bool | None, detail: str = "") -> None:
    """``ok=None`` records a skip."""
    status = "SKIP" if ok is None else "PASS" if ok else "FAIL"
    line = f"criterion {number:2d} {status}: {title}" + (f" ({detail})" if detail else "")
    VERDICTS.append(line)
    print(line)
