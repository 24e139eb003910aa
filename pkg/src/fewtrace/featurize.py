"""Trace featurization: per-trace span and log feature matrices.

Each span row concatenates four trace-normalized numeric features
(start, end, duration, abstracted span id) with a text embedding of the
span's "service operation" (service name + URL). Each log row is a text
embedding of the "log event" (severity + component + message), with no
template mining. All operations here are pure; featurizing traces in
parallel is safe.
"""

from __future__ import annotations

import hashlib
import json
import math
import re
from dataclasses import dataclass
from pathlib import Path
from typing import Protocol, Sequence, runtime_checkable

import numpy as np

from .errors import FeaturizationError
from .traces import LogRecord, SpanRecord, Trace

__all__ = [
    "TextEmbedder",
    "HashingEmbedder",
    "SidecarEmbedder",
    "SpanFeatureMatrix",
    "LogFeatureMatrix",
    "preprocess_text",
    "abstract_span_ids",
    "span_id_scalars",
    "numeric_span_features",
    "service_operation_text",
    "log_event_text",
    "featurize_trace",
    "write_sidecar",
]

DEFAULT_MAX_SPANS = 64
DEFAULT_MAX_LOGS = 64


@runtime_checkable
class TextEmbedder(Protocol):
    """Deterministic text-to-vector map; embed("") must be the zero vector."""

    dim: int

    def embed(self, text: str) -> np.ndarray: ...


@dataclass(frozen=True)
class SpanFeatureMatrix:
    """[n_spans x (4 + embed_dim)] matrix; first four columns lie in [0, 1]."""

    values: np.ndarray


@dataclass(frozen=True)
class LogFeatureMatrix:
    """[n_logs x embed_dim] matrix; a zero-log trace yields one all-zero row."""

    values: np.ndarray


# --- text preprocessing -------------------------------------------------

_UUID_RE = re.compile(r"[0-9a-f]{8}-[0-9a-f]{4}-[0-9a-f]{4}-[0-9a-f]{4}-[0-9a-f]{12}")
_ALNUM_RUN_RE = re.compile(r"[a-z0-9]+")
_HEX_ID_RE = re.compile(r"[0-9a-f]{4,}")
_TRAILING_DIGITS_RE = re.compile(r"([a-z]+)[0-9]+")
_NON_ALPHA_RE = re.compile(r"[^a-z]+")


def _normalize_token(token: str) -> str:
    if not any(c.isdigit() for c in token):
        return token
    if _HEX_ID_RE.fullmatch(token) and any(c.isalpha() for c in token):
        return "id"
    m = _TRAILING_DIGITS_RE.fullmatch(token)
    if m:
        return m.group(1) + "id"
    return token


def preprocess_text(text: str) -> str:
    """Lowercase, replace variable-looking tokens with "id", keep letters only.

    Variable-looking means UUIDs, hex identifiers (>= 4 hex chars containing a
    digit), and alphabetic tokens with a trailing digit run ("prod1234" ->
    "prodid"). Remaining digits and punctuation become spaces, whitespace is
    collapsed.
    """
    text = text.lower()
    text = _UUID_RE.sub("id", text)
    text = _ALNUM_RUN_RE.sub(lambda m: _normalize_token(m.group(0)), text)
    text = _NON_ALPHA_RE.sub(" ", text)
    return " ".join(text.split())


def service_operation_text(span: SpanRecord) -> str:
    """Preprocessed concatenation of the span's service name and URL."""
    return preprocess_text(span.service_name + " " + span.url)


def log_event_text(log: LogRecord) -> str:
    """Preprocessed concatenation of severity, component, and message."""
    return preprocess_text(" ".join((log.severity, log.component, log.message)))


# --- embedders ----------------------------------------------------------


class HashingEmbedder:
    """Signed feature hashing over whitespace tokens, averaged per token.

    Each token adds +-1/sqrt(n_hashes) into n_hashes hashed buckets; the final
    vector is the mean over tokens, so its L2 norm never exceeds
    sqrt(token_count * n_hashes). Purely local, no model files, stable across
    processes and platforms.
    """

    def __init__(self, dim: int = 64, n_hashes: int = 2):
        if dim < 1 or n_hashes < 1:
            raise FeaturizationError("embedder dim and n_hashes must be >= 1")
        self.dim = dim
        self.n_hashes = n_hashes
        self._cache: dict[str, np.ndarray] = {}

    def embed(self, text: str) -> np.ndarray:
        cached = self._cache.get(text)
        if cached is not None:
            return cached.copy()
        vec = np.zeros(self.dim, dtype=np.float64)
        tokens = text.split()
        weight = 1.0 / math.sqrt(self.n_hashes)
        for token in tokens:
            for i in range(self.n_hashes):
                digest = hashlib.blake2b(
                    token.encode("utf-8"), digest_size=8, salt=b"h%d" % i
                ).digest()
                value = int.from_bytes(digest, "little")
                bucket = value % self.dim
                sign = 1.0 if (value >> 40) & 1 else -1.0
                vec[bucket] += sign * weight
        if tokens:
            vec /= len(tokens)
        self._cache[text] = vec
        return vec.copy()


class SidecarEmbedder:
    """Adapter over precomputed embeddings produced by an external encoder.

    The sidecar is JSONL, one ``{"text": str, "vec": [float, ...]}`` object per
    line keyed by preprocessed text. Texts absent from the sidecar raise a
    FeaturizationError listing the missing keys.
    """

    def __init__(self, path: str | Path):
        self._table: dict[str, np.ndarray] = {}
        path = Path(path)
        with path.open("r", encoding="utf-8") as fh:
            for lineno, line in enumerate(fh, start=1):
                if not line.strip():
                    continue
                try:
                    obj = json.loads(line)
                    text, vec = obj["text"], obj["vec"]
                except (json.JSONDecodeError, KeyError, TypeError) as exc:
                    raise FeaturizationError(
                        f"{path}: line {lineno}: expected {{'text', 'vec'}} object"
                    ) from exc
                self._table[text] = np.asarray(vec, dtype=np.float64)
        if not self._table:
            raise FeaturizationError(f"{path}: sidecar contains no embeddings")
        dims = {v.shape for v in self._table.values()}
        if len(dims) != 1 or len(next(iter(dims))) != 1:
            raise FeaturizationError(f"{path}: sidecar vectors have inconsistent shapes {dims}")
        self.dim = next(iter(dims))[0]

    def embed(self, text: str) -> np.ndarray:
        if not text:
            return np.zeros(self.dim, dtype=np.float64)
        try:
            return self._table[text]
        except KeyError:
            raise FeaturizationError(f"sidecar is missing embeddings for: {text!r}") from None

    def missing(self, texts: Sequence[str]) -> list[str]:
        """Texts not covered by the sidecar (empty string never counts)."""
        return sorted({t for t in texts if t and t not in self._table})


def write_sidecar(texts: Sequence[str], embedder: TextEmbedder, path: str | Path) -> None:
    """Precompute a sidecar file for the given texts with any embedder."""
    with Path(path).open("w", encoding="utf-8", newline="\n") as fh:
        for text in sorted(set(texts)):
            row = {"text": text, "vec": [float(x) for x in embedder.embed(text)]}
            fh.write(json.dumps(row, separators=(",", ":")) + "\n")


# --- numeric span features ----------------------------------------------


def abstract_span_ids(raw_ids: Sequence[str]) -> list[str]:
    """Strip span-id prefixes down to first-appearance ordinals.

    ``["a480f2.0", "a480f2.1", "a343mc.0"]`` becomes ``["1.0", "1.1", "2.0"]``:
    prefixes are renumbered 1, 2, ... in order of first appearance and the
    hierarchical-level digit after the last dot is preserved.
    """
    order: dict[str, int] = {}
    out: list[str] = []
    for raw in raw_ids:
        prefix, sep, level = raw.rpartition(".")
        if not sep:
            raise FeaturizationError(f"span id {raw!r} has no '.' level separator")
        try:
            level_num = int(level)
        except ValueError:
            raise FeaturizationError(f"span id {raw!r} has a non-integer level {level!r}") from None
        if level_num < 0:
            raise FeaturizationError(f"span id {raw!r} has a negative level")
        if prefix not in order:
            order[prefix] = len(order) + 1
        out.append(f"{order[prefix]}.{level_num}")
    return out


def span_id_scalars(raw_ids: Sequence[str]) -> np.ndarray:
    """Abstracted ids as floats: major + minor/100 (fewer than 100 sub-spans)."""
    scalars = []
    for abstracted in abstract_span_ids(raw_ids):
        major, _, minor = abstracted.partition(".")
        scalars.append(float(major) + float(minor) / 100.0)
    return np.asarray(scalars, dtype=np.float64)


def _min_max(column: np.ndarray) -> np.ndarray:
    lo, hi = column.min(), column.max()
    if hi == lo:
        return np.zeros_like(column)
    return (column - lo) / (hi - lo)


def _numeric_features(spans: Sequence[SpanRecord]) -> np.ndarray:
    starts = np.asarray([s.start_time for s in spans], dtype=np.float64)
    ends = np.asarray([s.end_time for s in spans], dtype=np.float64)
    durations = ends - starts
    ids = span_id_scalars([s.span_id for s in spans])
    return np.column_stack(
        [_min_max(starts), _min_max(ends), _min_max(durations), _min_max(ids)]
    )


def numeric_span_features(trace: Trace) -> np.ndarray:
    """[n_spans x 4] matrix of trace-normalized numeric span features.

    Columns are min-max normalizations (within this trace) of start time,
    end time, duration, and the abstracted span-id scalar; a single-span
    trace degenerates to all zeros.
    """
    return _numeric_features(trace.spans)


def featurize_trace(
    trace: Trace,
    embedder: TextEmbedder,
    max_spans: int = DEFAULT_MAX_SPANS,
    max_logs: int = DEFAULT_MAX_LOGS,
) -> tuple[SpanFeatureMatrix, LogFeatureMatrix]:
    """Build the per-trace span and log feature matrices.

    Spans and logs beyond the caps are dropped (in canonical order) before
    normalization so attention cost stays bounded on very long traces.
    """
    spans = trace.spans[:max_spans]
    logs = trace.logs[:max_logs]
    numeric = _numeric_features(spans)
    ops = np.stack([embedder.embed(service_operation_text(s)) for s in spans])
    span_matrix = np.concatenate([numeric, ops], axis=1)
    if logs:
        log_matrix = np.stack([embedder.embed(log_event_text(l)) for l in logs])
    else:
        # Keep attention over K=V well-defined for traces with no logs.
        log_matrix = np.zeros((1, embedder.dim), dtype=np.float64)
    return SpanFeatureMatrix(span_matrix), LogFeatureMatrix(log_matrix)


def corpus_texts(traces: Sequence[Trace]) -> list[str]:
    """All preprocessed texts a featurization pass would embed."""
    texts: set[str] = set()
    for trace in traces:
        for span in trace.spans:
            texts.add(service_operation_text(span))
        for log in trace.logs:
            texts.add(log_event_text(log))
    texts.discard("")
    return sorted(texts)
