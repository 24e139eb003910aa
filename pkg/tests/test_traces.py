from __future__ import annotations

import json

import pytest

from fewtrace.errors import CorpusParseError, ValidationError
from fewtrace.synthgen import builtin_profile, default_injectors, generate
from fewtrace.traces import (
    FaultCategory,
    LogRecord,
    SpanRecord,
    corpus_stats,
    load_corpus,
    make_trace,
    save_corpus,
)

from conftest import tiny_trace


def _write_lines(tmp_path, lines, name="corpus.jsonl"):
    path = tmp_path / name
    path.write_text("\n".join(lines) + "\n", encoding="utf-8")
    return path


def _trace_line(**overrides):
    obj = {
        "trace_id": "t1",
        "label": None,
        "system": "sys",
        "spans": [
            {
                "span_id": "ab12cd.0",
                "parent_id": None,
                "start_time_us": 100,
                "end_time_us": 200,
                "service": "svc-a",
                "url": "/get/x",
            }
        ],
        "logs": [],
    }
    obj.update(overrides)
    return json.dumps(obj)


def test_minimal_trace_loads(tmp_path):
    path = _write_lines(tmp_path, [_trace_line()])
    corpus = load_corpus(path, "sys")
    assert len(corpus.traces) == 1
    assert corpus.categories == frozenset()
    assert corpus.traces[0].spans[0].duration == 100


def test_end_before_start_is_rejected_with_trace_id(tmp_path):
    bad = json.loads(_trace_line())
    bad["spans"][0]["end_time_us"] = 50
    path = _write_lines(tmp_path, [json.dumps(bad)])
    with pytest.raises(ValidationError, match="t1"):
        load_corpus(path, "sys")


def test_malformed_line_error_carries_line_number(tmp_path):
    path = _write_lines(tmp_path, [_trace_line(), "{not json"])
    with pytest.raises(CorpusParseError, match="line 2"):
        load_corpus(path, "sys")


def test_missing_key_is_parse_error(tmp_path):
    obj = json.loads(_trace_line())
    del obj["spans"]
    path = _write_lines(tmp_path, [json.dumps(obj)])
    with pytest.raises(CorpusParseError, match="spans"):
        load_corpus(path, "sys")


def test_system_mismatch_rejected(tmp_path):
    path = _write_lines(tmp_path, [_trace_line(system="other")])
    with pytest.raises(ValidationError, match="other"):
        load_corpus(path, "sys")


def test_spans_and_logs_resorted_on_load(tmp_path):
    obj = json.loads(_trace_line())
    obj["spans"] = [
        {"span_id": "b.0", "parent_id": "a.0", "start_time_us": 300, "end_time_us": 400,
         "service": "s", "url": "/u"},
        {"span_id": "a.0", "parent_id": None, "start_time_us": 100, "end_time_us": 500,
         "service": "s", "url": "/u"},
    ]
    obj["logs"] = [
        {"timestamp_us": 9, "severity": "INFO", "component": "c", "message": "later", "span_id": None},
        {"timestamp_us": 3, "severity": "INFO", "component": "c", "message": "earlier", "span_id": None},
    ]
    path = _write_lines(tmp_path, [json.dumps(obj)])
    trace = load_corpus(path, "sys").traces[0]
    assert [s.span_id for s in trace.spans] == ["a.0", "b.0"]
    assert [l.message for l in trace.logs] == ["earlier", "later"]


def test_two_parentless_spans_rejected_when_links_present():
    spans = [
        SpanRecord("a.0", None, 0, 10, "s", "/u"),
        SpanRecord("b.0", None, 1, 11, "s", "/u"),
        SpanRecord("a.1", "a.0", 2, 9, "s", "/u"),
    ]
    with pytest.raises(ValidationError, match="parentless"):
        make_trace("t", spans, [])


def test_all_parentless_without_links_is_legal():
    spans = [
        SpanRecord("a.0", None, 0, 10, "s", "/u"),
        SpanRecord("b.0", None, 1, 11, "s", "/u"),
    ]
    trace = make_trace("t", spans, [])
    assert len(trace.spans) == 2


def test_empty_message_needs_severity_and_component():
    with pytest.raises(ValidationError):
        make_trace(
            "t",
            [SpanRecord("a.0", None, 0, 1, "s", "/u")],
            [LogRecord(0, "", "comp", "")],
        )
    ok = make_trace(
        "t",
        [SpanRecord("a.0", None, 0, 1, "s", "/u")],
        [LogRecord(0, "INFO", "comp", "")],
    )
    assert ok.logs[0].severity == "INFO"


def test_fault_category_split_does_not_affect_equality():
    a = FaultCategory("cat", "sys")
    b = FaultCategory("cat", "sys", split="novel")
    assert a == b
    assert hash(a) == hash(b)
    assert FaultCategory("cat", "other") != a


def test_round_trip_synthetic_corpus(tmp_path):
    profile = builtin_profile("shop-small")
    corpus = generate(profile, default_injectors(profile, 6), 10, 3, seed=5)
    path = tmp_path / "c.jsonl"
    save_corpus(corpus, path)
    reloaded = load_corpus(path, corpus.system)
    assert reloaded == corpus


def test_loading_twice_gives_identical_order(tmp_path):
    profile = builtin_profile("shop-small")
    corpus = generate(profile, default_injectors(profile, 4), 8, 2, seed=9)
    path = tmp_path / "c.jsonl"
    save_corpus(corpus, path)
    first = load_corpus(path, corpus.system)
    second = load_corpus(path, corpus.system)
    assert first == second
    assert [t.trace_id for t in first.traces] == [t.trace_id for t in second.traces]


def test_stats_single_trace():
    trace = tiny_trace(n_spans=3, n_logs=2)
    from fewtrace.traces import TraceCorpus

    stats = corpus_stats(TraceCorpus("sys", (trace,), frozenset()))
    assert (stats.spans_per_trace.mean, stats.spans_per_trace.min, stats.spans_per_trace.max) == (3, 3, 3)
    assert (stats.logs_per_trace.mean, stats.logs_per_trace.min, stats.logs_per_trace.max) == (2, 2, 2)


def test_stats_mean_rounds_half_up():
    from fewtrace.traces import TraceCorpus

    t1 = tiny_trace("a", n_spans=1, n_logs=1)
    t2 = tiny_trace("b", n_spans=3, n_logs=2)
    stats = corpus_stats(TraceCorpus("sys", (t1, t2), frozenset()))
    assert stats.spans_per_trace.mean == 2
    assert stats.spans_per_trace.min == 1
    assert stats.spans_per_trace.max == 3
    # 1.5 logs rounds half-up to 2
    assert stats.logs_per_trace.mean == 2


def test_stats_against_generator_bounds(small_corpus):
    profile = builtin_profile("booking-small")
    stats = corpus_stats(small_corpus)
    assert 1 <= stats.spans_per_trace.min
    assert stats.spans_per_trace.max <= 64
    # Poisson mean 14: the corpus mean should be in a generous band around it
    assert profile.mean_spans_per_trace - 5 <= stats.spans_per_trace.mean <= profile.mean_spans_per_trace + 5
    assert stats.unique_traces_per_category.min == 6
    assert stats.unique_traces_per_category.max == 6
