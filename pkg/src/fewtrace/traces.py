"""Domain model for traces, spans, logs, and labeled corpora.

A trace is the recorded path of one request: a tree of spans (one per
service operation, linked by parent ids) plus the log lines emitted while
it ran. Corpora are read from and written to a newline-delimited JSON
format, one trace per line:

    {"trace_id": str, "label": str|null, "system": str,
     "spans": [{"span_id": str, "parent_id": str|null,
                "start_time_us": int, "end_time_us": int,
                "service": str, "url": str}],
     "logs":  [{"timestamp_us": int, "severity": str, "component": str,
                "message": str, "span_id": str|null}]}

Timestamps are integer microseconds relative to a per-corpus epoch.
Corpus objects are immutable after load and safe to share across workers.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field, replace
from decimal import ROUND_HALF_UP, Decimal
from pathlib import Path
from typing import Iterable, Sequence

from .errors import CorpusParseError, ValidationError

__all__ = [
    "SpanRecord",
    "LogRecord",
    "FaultCategory",
    "Trace",
    "TraceCorpus",
    "StatTriple",
    "CorpusStats",
    "load_corpus",
    "save_corpus",
    "corpus_stats",
]


@dataclass(frozen=True)
class SpanRecord:
    """One service operation inside a trace."""

    span_id: str
    parent_id: str | None
    start_time: int
    end_time: int
    service_name: str
    url: str

    @property
    def duration(self) -> int:
        return self.end_time - self.start_time


@dataclass(frozen=True)
class LogRecord:
    """One log line, optionally linked to the span that emitted it."""

    timestamp: int
    severity: str
    component: str
    message: str
    span_id: str | None = None


@dataclass(frozen=True)
class FaultCategory:
    """A labeled class of faulty behavior within one system.

    ``split`` records whether the category was assigned to the base
    (meta-training) or novel (meta-testing) side; it is metadata and does
    not participate in equality, so interned labels stay equal to split
    assignments of the same category.
    """

    id: str
    system: str
    split: str | None = field(default=None, compare=False)


@dataclass(frozen=True)
class Trace:
    """One request: spans sorted by start time, logs by timestamp."""

    trace_id: str
    spans: tuple[SpanRecord, ...]
    logs: tuple[LogRecord, ...]
    label: FaultCategory | None = None


@dataclass(frozen=True)
class TraceCorpus:
    """An immutable collection of traces from one system."""

    system: str
    traces: tuple[Trace, ...]
    categories: frozenset[FaultCategory]

    def labeled(self) -> list[Trace]:
        return [t for t in self.traces if t.label is not None]

    def normals(self) -> list[Trace]:
        return [t for t in self.traces if t.label is None]


def _sorted_spans(spans: Iterable[SpanRecord]) -> tuple[SpanRecord, ...]:
    return tuple(sorted(spans, key=lambda s: (s.start_time, s.span_id)))


def _sorted_logs(logs: Iterable[LogRecord]) -> tuple[LogRecord, ...]:
    return tuple(sorted(logs, key=lambda l: (l.timestamp, l.span_id or "")))


def validate_trace(trace: Trace) -> None:
    """Check the trace invariants; raises ValidationError on violation."""
    if not trace.spans:
        raise ValidationError(f"trace {trace.trace_id!r} has no spans")
    for span in trace.spans:
        if not span.span_id:
            raise ValidationError(f"trace {trace.trace_id!r} has a span with an empty span_id")
        if span.end_time < span.start_time:
            raise ValidationError(
                f"trace {trace.trace_id!r}: span {span.span_id!r} ends before it starts"
            )
    for log in trace.logs:
        if not log.message and (not log.severity or not log.component):
            raise ValidationError(
                f"trace {trace.trace_id!r}: log at {log.timestamp} has no message and "
                "no severity/component to stand in for it"
            )
    # Root uniqueness only applies when parent links are present at all.
    if any(s.parent_id is not None for s in trace.spans):
        roots = [s for s in trace.spans if s.parent_id is None]
        if len(roots) != 1:
            raise ValidationError(
                f"trace {trace.trace_id!r} has {len(roots)} parentless spans; expected exactly 1"
            )


def make_trace(
    trace_id: str,
    spans: Iterable[SpanRecord],
    logs: Iterable[LogRecord],
    label: FaultCategory | None = None,
) -> Trace:
    """Build a trace with the canonical span/log ordering, validated."""
    trace = Trace(trace_id, _sorted_spans(spans), _sorted_logs(logs), label)
    validate_trace(trace)
    return trace


def _require(obj: dict, key: str, kind: type | tuple[type, ...], lineno: int) -> object:
    if key not in obj:
        raise CorpusParseError(f"missing key {key!r}", lineno)
    value = obj[key]
    if not isinstance(value, kind):
        raise CorpusParseError(f"key {key!r} has unexpected type {type(value).__name__}", lineno)
    return value


def _parse_trace_line(obj: dict, system: str, lineno: int) -> Trace:
    trace_id = str(_require(obj, "trace_id", str, lineno))
    line_system = str(_require(obj, "system", str, lineno))
    if line_system != system:
        raise ValidationError(
            f"trace {trace_id!r} belongs to system {line_system!r}, expected {system!r}"
        )
    label_raw = obj.get("label")
    if label_raw is not None and not isinstance(label_raw, str):
        raise CorpusParseError("key 'label' must be a string or null", lineno)

    spans = []
    for sp in _require(obj, "spans", list, lineno):
        if not isinstance(sp, dict):
            raise CorpusParseError("span entries must be objects", lineno)
        parent = sp.get("parent_id")
        if parent is not None and not isinstance(parent, str):
            raise CorpusParseError("span 'parent_id' must be a string or null", lineno)
        spans.append(
            SpanRecord(
                span_id=str(_require(sp, "span_id", str, lineno)),
                parent_id=parent,
                start_time=int(_require(sp, "start_time_us", int, lineno)),
                end_time=int(_require(sp, "end_time_us", int, lineno)),
                service_name=str(_require(sp, "service", str, lineno)),
                url=str(_require(sp, "url", str, lineno)),
            )
        )
    logs = []
    for lg in _require(obj, "logs", list, lineno):
        if not isinstance(lg, dict):
            raise CorpusParseError("log entries must be objects", lineno)
        span_ref = lg.get("span_id")
        if span_ref is not None and not isinstance(span_ref, str):
            raise CorpusParseError("log 'span_id' must be a string or null", lineno)
        logs.append(
            LogRecord(
                timestamp=int(_require(lg, "timestamp_us", int, lineno)),
                severity=str(_require(lg, "severity", str, lineno)),
                component=str(_require(lg, "component", str, lineno)),
                message=str(_require(lg, "message", str, lineno)),
                span_id=span_ref,
            )
        )
    label = FaultCategory(id=label_raw, system=system) if label_raw is not None else None
    return make_trace(trace_id, spans, logs, label)


def load_corpus(path: str | Path, system: str) -> TraceCorpus:
    """Load a JSONL corpus, re-sorting spans/logs and interning labels."""
    path = Path(path)
    traces: list[Trace] = []
    categories: dict[str, FaultCategory] = {}
    with path.open("r", encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, start=1):
            if not line.strip():
                continue
            try:
                obj = json.loads(line)
            except json.JSONDecodeError as exc:
                raise CorpusParseError(f"invalid JSON ({exc.msg})", lineno) from exc
            if not isinstance(obj, dict):
                raise CorpusParseError("trace line is not a JSON object", lineno)
            trace = _parse_trace_line(obj, system, lineno)
            if trace.label is not None:
                # Intern so equal labels share one category instance.
                cat = categories.setdefault(trace.label.id, trace.label)
                trace = replace(trace, label=cat)
            traces.append(trace)
    return TraceCorpus(
        system=system, traces=tuple(traces), categories=frozenset(categories.values())
    )


def trace_to_dict(trace: Trace, system: str) -> dict:
    """The JSONL wire form of one trace (key order fixed for stable bytes)."""
    return {
        "trace_id": trace.trace_id,
        "label": trace.label.id if trace.label is not None else None,
        "system": system,
        "spans": [
            {
                "span_id": s.span_id,
                "parent_id": s.parent_id,
                "start_time_us": s.start_time,
                "end_time_us": s.end_time,
                "service": s.service_name,
                "url": s.url,
            }
            for s in trace.spans
        ],
        "logs": [
            {
                "timestamp_us": l.timestamp,
                "severity": l.severity,
                "component": l.component,
                "message": l.message,
                "span_id": l.span_id,
            }
            for l in trace.logs
        ],
    }


def save_corpus(corpus: TraceCorpus, path: str | Path) -> None:
    """Write the corpus in the JSONL schema; output bytes are deterministic."""
    path = Path(path)
    with path.open("w", encoding="utf-8", newline="\n") as fh:
        for trace in corpus.traces:
            fh.write(json.dumps(trace_to_dict(trace, corpus.system), separators=(",", ":")))
            fh.write("\n")


@dataclass(frozen=True)
class StatTriple:
    """Mean (rounded half-up to an integer), exact min and max."""

    mean: int
    min: int
    max: int


@dataclass(frozen=True)
class CorpusStats:
    unique_traces_per_category: StatTriple
    spans_per_trace: StatTriple
    logs_per_trace: StatTriple


def _triple(values: Sequence[int]) -> StatTriple:
    if not values:
        return StatTriple(0, 0, 0)
    mean = int(
        (Decimal(sum(values)) / Decimal(len(values))).quantize(Decimal(1), rounding=ROUND_HALF_UP)
    )
    return StatTriple(mean=mean, min=min(values), max=max(values))


def corpus_stats(corpus: TraceCorpus) -> CorpusStats:
    """Summary statistics in the style of a descriptive-statistics table."""
    if not corpus.traces:
        raise ValidationError("corpus has no traces")
    per_category: dict[str, int] = {}
    for trace in corpus.traces:
        if trace.label is not None:
            per_category[trace.label.id] = per_category.get(trace.label.id, 0) + 1
    return CorpusStats(
        unique_traces_per_category=_triple(list(per_category.values())),
        spans_per_trace=_triple([len(t.spans) for t in corpus.traces]),
        logs_per_trace=_triple([len(t.logs) for t in corpus.traces]),
    )
