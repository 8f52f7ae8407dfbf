"""Acceptance criteria; each test prints one PASS/FAIL line (repeated in the terminal summary)."""
import itertools
import os
import random
import time

import pytest

from helpers import (
    KillAfter,
    Killed,
    RecordingConnector,
    echo_dataset,
    make_dialog,
    masked_bytes,
    random_dialog,
    verdict,
    write_jsonl,
)
from oracles import brute_force, random_tensor, tensor_records
from ude.adapters import compute_stats, load_dataset
from ude.aggregation import AggregationPolicy, aggregate
from ude.connectors import GenerationParams, Message, ScriptedConnector
from ude.generation import RunPlan, run_generation
from ude.memory import MemoryAgentConnector, MemoryUnit, RetrievalPolicy, lexical_overlap, retrieve, store_unit
from ude.metrics import ScoreRecord, TurnContext, resolve
from ude.pipeline import EvalPipeline, RunConfig
from ude.schema import MetricSpec, Role, parse_dialog, serialize_dialog

MIXED = (MetricSpec("exact_match", {}), MetricSpec("llm_judge", {}))


def judge():
    return ScriptedConnector("table", fallback="Rating: [[8]]")


def pipeline(tmp_path, name, dialogs, *, workers=1, resume=False, connector=None, judge_conn=None):
    data = tmp_path / "data.jsonl"
    if not data.exists():
        write_jsonl(data, dialogs)
    cfg = RunConfig.from_dict({
        "dataset": {"adapter": "unified_jsonl", "path": str(data)},
        "model": {"type": "scripted"},
        "judge": {"type": "scripted"},
        "output_dir": str(tmp_path / name),
        "workers": workers,
        "resume": resume,
    })
    return EvalPipeline(cfg, connector=connector or ScriptedConnector("echo"), judge=judge_conn or judge())


def test_criterion_01_schema_round_trip():
    rng = random.Random(2024)
    dialogs = [random_dialog(rng, f"rt{i:04d}") for i in range(1000)]
    failures = 0
    start = time.perf_counter()
    for d in dialogs:
        text = serialize_dialog(d)
        back = parse_dialog(text)
        if back != d or serialize_dialog(back) != text:
            failures += 1
    elapsed = time.perf_counter() - start
    ok = failures == 0 and elapsed < 10.0
    verdict(1, "schema round trip", ok, f"1000 dialogs, {failures} failures, {elapsed:.2f}s")
    assert ok


def test_criterion_02_aggregation_oracle():
    rng = random.Random(7)
    policies = list(itertools.product(("mean", "min", "max"), ("mean", "min", "max"), ("dialog_mean", "global_flatten")))
    worst = 0.0
    for _ in range(500):
        tensor = random_tensor(rng)
        records = tensor_records(tensor)
        for t, d, m in policies:
            report = aggregate(records, AggregationPolicy(t, d, m))
            want, per_dialog = brute_force(tensor, t, d, m)
            worst = max(worst, abs(report.dataset_score - want))
            worst = max([worst] + [abs(report.per_dialog[k] - v) for k, v in per_dialog.items()])
    fixture = [ScoreRecord("A", f"t{i}", "m", s) for i, s in enumerate([1.0, 1.0, 1.0, 0.0])]
    fixture.append(ScoreRecord("B", "t0", "m", 1.0))
    dm = aggregate(fixture, AggregationPolicy(dialog_pool="mean")).dataset_score
    gf = aggregate(fixture, AggregationPolicy(dialog_pool="mean", dataset_mode="global_flatten")).dataset_score
    ok = worst <= 1e-12 and abs(dm - 0.875) <= 1e-12 and abs(gf - 0.8) <= 1e-12
    verdict(2, "aggregation oracle", ok, f"500 tensors x 18 policies, max err {worst:.1e}; fixture {dm} vs {gf}")
    assert ok


def test_criterion_03_default_policy():
    records = [ScoreRecord("d", "t0", "m", 1.0), ScoreRecord("d", "t1", "m", 0.0)]
    report = aggregate(records)
    ok = report.per_dialog["d"] == 0.0 and report.policy == AggregationPolicy("mean", "min", "dialog_mean", False)
    verdict(3, "default-policy conformance", ok, f"dialog score {report.per_dialog['d']!r}")
    assert ok


def test_criterion_04_resume_idempotence(tmp_path):
    dialogs = [make_dialog(f"r{i:02d}", [(f"q{i}", "a", f"ECHO: q{i}" if i % 3 else "x")], metrics=MIXED)
               for i in range(20)]
    full = pipeline(tmp_path, "full", dialogs)
    full.run()

    killer = KillAfter(7, "echo")
    try:
        pipeline(tmp_path, "resumed", dialogs, connector=killer).run()
        killed = False
    except Killed:
        killed = True
    model, judge_conn = ScriptedConnector("echo"), judge()
    pipeline(tmp_path, "resumed", dialogs, resume=True, connector=model, judge_conn=judge_conn).run()

    same = all(
        masked_bytes(tmp_path / "full" / sub) == masked_bytes(tmp_path / "resumed" / sub)
        for sub in ("generations", "scores")
    )
    rerun_judge = judge()
    pipeline(tmp_path, "resumed", dialogs, resume=True, judge_conn=rerun_judge).run_evaluate_only()
    ok = killed and same and model.n_generate == 13 and rerun_judge.n_generate == 0
    verdict(4, "resume idempotence", ok,
            f"killed={killed}, identical={same}, post-resume calls={model.n_generate}, "
            f"cached-evaluate judge calls={rerun_judge.n_generate}")
    assert ok


def test_criterion_05_concurrency_determinism(tmp_path):
    dialogs = echo_dataset(50, 3)
    results = []
    for fail in ((), ("d017",)):
        outs, lifecycle = [], []
        for workers in (1, 8):
            name = f"w{workers}-{len(fail)}"
            conn, judge_conn = RecordingConnector("hash", fail_on=fail), judge()
            pipeline(tmp_path, name, dialogs, workers=workers, connector=conn, judge_conn=judge_conn).run()
            outs.append(tmp_path / name)
            lifecycle.append(conn.n_begin == conn.n_end == 50 and judge_conn.n_begin == judge_conn.n_end)
        a, b = outs
        results.append((
            (a / "aggregate.json").read_bytes() == (b / "aggregate.json").read_bytes()
            and masked_bytes(a / "generations") == masked_bytes(b / "generations")
            and masked_bytes(a / "scores") == masked_bytes(b / "scores"),
            all(lifecycle),
        ))
    ok = all(same and life for same, life in results)
    verdict(5, "concurrency determinism", ok, f"(identical, begin==end) clean={results[0]}, injected={results[1]}")
    assert ok


def test_criterion_06_context_modes(tmp_path):
    ex = [("first question", "DATASET ANSWER ONE", "r"), ("second question", "DATASET ANSWER TWO", "r"),
          ("third question", "DATASET ANSWER THREE", "r")]
    seen = {}
    for mode in (True, False):
        conn = RecordingConnector("echo")
        run_generation(RunPlan([make_dialog("d", ex, use_reference_history=mode)], conn, tmp_path / str(mode)))
        seen[mode] = conn.contexts["d"]
    ref_second = seen[True][1]
    onp_second = seen[False][1]
    ok = (
        seen[True][0] == seen[False][0] == [Message(Role.USER, "first question")]
        and ref_second[1] == Message(Role.ASSISTANT, "DATASET ANSWER ONE")
        and onp_second[1] == Message(Role.ASSISTANT, "ECHO: first question")
    )
    verdict(6, "on-policy vs reference history", ok,
            f"ref={ref_second[1].content!r}, on-policy={onp_second[1].content!r}")
    assert ok


class _Judge(ScriptedConnector):
    def __init__(self, reply):
        super().__init__("table", fallback=reply)


def _score(name, prediction, reference=None, labels=None, judge_reply=None, **args):
    metric = resolve(MetricSpec(name, args), judge=_Judge(judge_reply) if judge_reply else None)
    d = make_dialog("m", [("q", "a", "a")])
    rec = metric.score(TurnContext(d, "t001", prediction, reference=reference, turn_labels=labels or {}))
    return rec.score


def _ins(*items):
    return {"instructions": list(items)}


def _rules(*items):
    return {"code_rules": list(items)}


METRIC_ROWS = [
    ("exact_match strict Paris./paris", lambda: _score("exact_match", "Paris.", "paris"), 1.0),
    ("exact_match contains", lambda: _score("exact_match", "The answer is Paris", "Paris", mode="contains"), 1.0),
    ("exact_match strict substring", lambda: _score("exact_match", "The answer is Paris", "Paris"), 0.0),
    ("exact_match London", lambda: _score("exact_match", "London", "Paris"), 0.0),
    ("judge [[10]]", lambda: _score("llm_judge", "x", "y", judge_reply="Good. Rating: [[10]]"), 1.0),
    ("judge [[1]]", lambda: _score("llm_judge", "x", "y", judge_reply="Rating: [[1]]"), 0.0),
    ("judge last match", lambda: _score("llm_judge", "x", "y",
                                        judge_reply="I think [[3]] maybe [[7]]... Rating: [[7]]"), 6 / 9),
    ("instruction max_words", lambda: _score("instruction_adherence", "one two three",
                                             labels=_ins({"type": "max_words", "args": {"n": 5}})), 1.0),
    ("instruction half", lambda: _score("instruction_adherence", "BEGIN middle",
                                        labels=_ins({"type": "contains", "args": {"text": "BEGIN"}},
                                                    {"type": "ends_with", "args": {"text": "END"}})), 0.5),
    ("instruction json", lambda: _score("instruction_adherence", '{"k": [1, 2]}',
                                        labels=_ins({"type": "json_format"})), 1.0),
    ("math boxed", lambda: _score("math_answer", "so \\boxed{42}", "42"), 1.0),
    ("math thousands", lambda: _score("math_answer", "the total is 1,000", "1000"), 1.0),
    ("math rel tol", lambda: _score("math_answer", "about 3.14159", "3.1416"), 1.0),
    ("code def", lambda: _score("code_rule", "```\ndef add(a,b): ...\n```",
                                labels=_rules({"pattern": "def [a-z_]+\\(", "polarity": "must_match"})), 1.0),
    ("code snake", lambda: _score("code_rule", "```python\ndef snake_case_fn():\n    pass\n```",
                                  labels=_rules({"pattern": "camelCase", "polarity": "must_not_match"},
                                                {"pattern": "snake_case", "polarity": "must_match"})), 1.0),
    ("code unfenced", lambda: _score("code_rule", "def f(): pass",
                                     labels=_rules({"pattern": "def f", "polarity": "must_match"})), 1.0),
]


def test_criterion_07_metric_suite():
    failed = []
    for label, fn, want in METRIC_ROWS:
        got = fn()
        if abs(got - want) > 1e-12:
            failed.append(f"{label}: {got} != {want}")
    ok = not failed
    verdict(7, "metric unit suite", ok, f"{len(METRIC_ROWS) - len(failed)}/{len(METRIC_ROWS)} rows" +
            (f"; {failed}" if failed else ""))
    assert ok


def test_criterion_08_memory_agent():
    agent = MemoryAgentConnector(ScriptedConnector("echo"))
    policy = RetrievalPolicy()
    s = agent.begin_dialog("first", turn_count=40)
    for i in range(25):
        store_unit(s, MemoryUnit(i, f"topic {i} shared", f"reply {i}", 2 * i))
    n_short = len(retrieve(s, "shared topic", policy, 8))
    n_long = len(retrieve(s, "shared topic", policy, 40))
    agent.end_dialog(s)
    s2 = agent.begin_dialog("second", turn_count=8)
    empty = len(s2.state["memory"]) == 0

    texts = ["red apple", "blue sky", "apple pie"]
    for i, t in enumerate(texts):
        store_unit(s2, MemoryUnit(i, t, "", 2 * i))
    scores = [lexical_overlap("apple", t) for t in texts]
    ranked = [u.unit_id for u in retrieve(s2, "apple", RetrievalPolicy(k_short=2), 8)]
    ok = n_short <= 3 and n_long <= 10 and n_short == 3 and n_long == 10 and empty \
        and scores == [1.0, 0.0, 1.0] and ranked == [0, 2]
    verdict(8, "memory-agent protocol", ok,
            f"k(8)={n_short}, k(40)={n_long}, empty after begin={empty}, scores={scores}, ranked={ranked}")
    assert ok


@pytest.mark.slow
def test_criterion_09_throughput(tmp_path):
    dialogs = echo_dataset(100, 4)
    times = {}
    for workers in (1, 16):
        conn = ScriptedConnector("echo", latency_s=0.05)
        start = time.perf_counter()
        run_generation(RunPlan(dialogs, conn, tmp_path / str(workers), GenerationParams(), workers=workers))
        times[workers] = time.perf_counter() - start
        assert conn.n_generate == 400
    ratio = times[16] / times[1]
    ok = ratio < 0.25
    verdict(9, "throughput sanity", ok, f"workers=1 {times[1]:.2f}s, workers=16 {times[16]:.2f}s, ratio {ratio:.3f}")
    assert ok


def test_criterion_10_mtbench101_stats():
    path = os.environ.get("UDE_MTBENCH101_PATH")
    if not path or not os.path.isfile(path):
        verdict(10, "MT-Bench-101 dataset check", None, "set UDE_MTBENCH101_PATH to the release jsonl to run")
        pytest.skip("UDE_MTBENCH101_PATH not set")
    stats = compute_stats(load_dataset("chat_transcript", path))
    ok = stats.n_dialogs == 1388 and abs(stats.mean_turns_per_dialog - 6.06) <= 0.05
    verdict(10, "MT-Bench-101 dataset check", ok,
            f"n_dialogs={stats.n_dialogs}, mean_turns={stats.mean_turns_per_dialog:.3f}")
    assert ok
