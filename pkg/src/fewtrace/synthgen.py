"""Deterministic synthetic trace generation with injectable fault categories.

Stands in for real benchmark-system datasets at desk scale: a profile
describes a small service topology and log vocabulary, and each fault
injector stamps one labeled category onto otherwise-normal traces. The
effect taxonomy mirrors common microservice fault dimensions: latency
shifts, CPU contention, service exceptions, malformed message returns,
and configuration faults. Two of them (latency_shift / cpu_contention)
both inflate durations and are deliberately confusable; the other pairs
are separable through their log artifacts.

Generation is a pure function of (profile, injectors, counts, seed).
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Sequence

import numpy as np

from .errors import ValidationError
from .seeding import substream
from .traces import FaultCategory, LogRecord, SpanRecord, Trace, TraceCorpus, make_trace

__all__ = [
    "SystemProfile",
    "FaultInjector",
    "EFFECTS",
    "LOG_VISIBLE_EFFECTS",
    "generate",
    "builtin_profile",
    "default_injectors",
    "BUILTIN_PROFILES",
]

EFFECTS = (
    "latency_shift",
    "cpu_contention",
    "service_exception",
    "message_return",
    "config_fault",
)

# Effects whose artifacts are visible in the log stream (separable by design);
# latency_shift is span-only and intentionally confusable with cpu_contention.
LOG_VISIBLE_EFFECTS = (
    "cpu_contention",
    "service_exception",
    "message_return",
    "config_fault",
)

_SERVICE_WORDS = (
    "auth", "basket", "cart", "catalog", "checkout", "contacts", "currency",
    "email", "food", "gateway", "inventory", "notice", "order", "payment",
    "price", "profile", "recommend", "route", "search", "seat", "security",
    "shipping", "station", "ticket", "travel", "user", "verify", "wallet",
)
_VERBS = ("get", "create", "update", "query", "cancel", "submit", "fetch", "book", "release", "list")
_NOUNS = (
    "order", "ticket", "seat", "route", "payment", "basket", "profile",
    "station", "price", "contact", "food", "assurance", "notice", "account",
    "session", "voucher", "refund", "invoice",
)
_ITEMS = (
    "voucher", "invoice", "receipt", "booking", "schedule", "timetable",
    "manifest", "quota", "balance", "ledger", "coupon", "itinerary",
)

# Normal templates deliberately cover the lexicon the fault messages draw
# from (cpu, contention, configuration, payload, ...), the way healthy
# systems also log those words in benign contexts. Without that overlap an
# autoencoder trained on normal traces alone would be free to collapse the
# directions fault messages live in.
DEFAULT_VOCAB = (
    "handled {verb} {noun} request for {item} token {sid}",
    "dispatching {item} lookup downstream batch {num}",
    "session {sid} established for {item} channel",
    "completed {item} update in {num} ms status ok",
    "cache refreshed for {item} entries {num}",
    "forwarding {noun} call to upstream {item} pool",
    "cpu usage nominal while serving {item} worker queue",
    "no contention observed on {item} pool threads idle {num}",
    "configuration loaded for {item} settings without drift",
    "response payload accepted from {item} upstream call",
    "operation {verb} {noun} returned within deadline",
    "throttling disabled for {item} worker pool",
    "exception handler registered for {verb} {noun} path",
    "drift check passed for {item} settings detected none",
    "unexpected spikes absent on {item} channel",
    "unhandled queue empty for {item} batch {num}",
    "raised capacity for {item} pool saturated none",
    "rejected zero requests while serving {item}",
)

_HARD_SPAN_CAP = 64


@dataclass(frozen=True)
class SystemProfile:
    """Reduced-scale description of one microservice system."""

    name: str
    n_services: int = 12
    operations_per_service: int = 3
    mean_spans_per_trace: int = 12
    mean_logs_per_trace: int = 10
    vocab: tuple[str, ...] = DEFAULT_VOCAB

    def __post_init__(self):
        for fname in ("n_services", "operations_per_service", "mean_spans_per_trace", "mean_logs_per_trace"):
            if getattr(self, fname) < 1:
                raise ValidationError(f"profile {self.name!r}: {fname} must be >= 1")
        if self.mean_spans_per_trace > _HARD_SPAN_CAP:
            raise ValidationError(
                f"profile {self.name!r}: mean_spans_per_trace exceeds the desk-scale cap {_HARD_SPAN_CAP}"
            )
        if self.n_services > len(_SERVICE_WORDS):
            raise ValidationError(
                f"profile {self.name!r}: at most {len(_SERVICE_WORDS)} services supported"
            )
        if not self.vocab:
            raise ValidationError(f"profile {self.name!r}: vocab must not be empty")

    def service_word(self, index: int) -> str:
        return _SERVICE_WORDS[index % len(_SERVICE_WORDS)]

    def service_name(self, index: int) -> str:
        return f"{self.name}-{self.service_word(index)}-service"

    def operation_url(self, service: int, op: int) -> str:
        verb = _VERBS[(service + op) % len(_VERBS)]
        noun = _NOUNS[(service * self.operations_per_service + op) % len(_NOUNS)]
        return f"/{verb}/{noun}"


@dataclass(frozen=True)
class FaultInjector:
    """One fault category: an effect applied to a target service."""

    category_id: str
    effect: str
    magnitude: float
    target_service: int

    def __post_init__(self):
        if self.effect not in EFFECTS:
            raise ValidationError(f"unknown fault effect {self.effect!r}")
        if self.magnitude <= 0:
            raise ValidationError(f"injector {self.category_id!r}: magnitude must be > 0")


@dataclass
class _SpanDraft:
    span_id: str
    parent_id: str | None
    start: int
    end: int
    service: int
    url: str


def _hex_prefix(rng: np.random.Generator, used: set[str]) -> str:
    while True:
        prefix = "".join(rng.choice(list("0123456789abcdef"), size=6))
        if prefix not in used:
            used.add(prefix)
            return prefix


def _service_base_duration(service: int) -> int:
    # Distinct per-service scales so duration features carry topology signal.
    return 1500 + 700 * (service % 9)


def _draw_spans(profile: SystemProfile, rng: np.random.Generator) -> list[_SpanDraft]:
    n_spans = int(np.clip(rng.poisson(profile.mean_spans_per_trace), 1, _HARD_SPAN_CAP))
    spans: list[_SpanDraft] = []
    used_prefixes: set[str] = set()
    group_roots: list[str] = []
    cursor = int(rng.integers(1_000_000, 2_000_000))
    remaining = n_spans
    while remaining > 0:
        size = int(min(remaining, 1 + rng.geometric(0.5)))
        size = min(size, 6)
        prefix = _hex_prefix(rng, used_prefixes)
        service = int(rng.integers(profile.n_services))
        group_start = cursor + int(rng.integers(50, 500))
        active_id = f"{prefix}.0"
        parent = None if not group_roots else group_roots[int(rng.integers(len(group_roots)))]
        child_cursor = group_start + int(rng.integers(20, 120))
        children: list[_SpanDraft] = []
        for level in range(1, size):
            dur = int(_service_base_duration(service) * rng.lognormal(0.0, 0.3))
            children.append(
                _SpanDraft(
                    span_id=f"{prefix}.{level}",
                    parent_id=active_id,
                    start=child_cursor,
                    end=child_cursor + dur,
                    service=service,
                    url=profile.operation_url(service, int(rng.integers(profile.operations_per_service))),
                )
            )
            child_cursor = children[-1].end + int(rng.integers(20, 200))
        own = int(_service_base_duration(service) * rng.lognormal(0.0, 0.3))
        active_end = (children[-1].end if children else group_start + own) + int(rng.integers(30, 300))
        spans.append(
            _SpanDraft(
                span_id=active_id,
                parent_id=parent,
                start=group_start,
                end=active_end,
                service=service,
                url=profile.operation_url(service, int(rng.integers(profile.operations_per_service))),
            )
        )
        spans.extend(children)
        group_roots.append(active_id)
        cursor = active_end
        remaining -= size
    return spans


def _draw_logs(
    profile: SystemProfile, spans: Sequence[_SpanDraft], rng: np.random.Generator
) -> list[LogRecord]:
    n_logs = int(rng.poisson(profile.mean_logs_per_trace))
    logs: list[LogRecord] = []
    for _ in range(n_logs):
        span = spans[int(rng.integers(len(spans)))]
        template = profile.vocab[int(rng.integers(len(profile.vocab)))]
        message = template.format(
            verb=_VERBS[int(rng.integers(len(_VERBS)))],
            noun=_NOUNS[int(rng.integers(len(_NOUNS)))],
            item=_ITEMS[int(rng.integers(len(_ITEMS)))],
            sid="".join(rng.choice(list("0123456789abcdef"), size=6)),
            num=str(int(rng.integers(1, 5000))),
        )
        roll = rng.random()
        severity = "INFO" if roll < 0.8 else ("DEBUG" if roll < 0.9 else "WARN")
        logs.append(
            LogRecord(
                timestamp=int(rng.integers(span.start, span.end + 1)),
                severity=severity,
                component=profile.service_word(span.service),
                message=message,
                span_id=span.span_id if rng.random() < 0.8 else None,
            )
        )
    return logs


def _fault_log_count(magnitude: float) -> int:
    # Failing services spam their logs; the dose scales with severity so the
    # injected signal stays separable at the magnitudes the profiles use.
    return max(2, int(round(3.0 * magnitude)))


def _ensure_target_present(
    profile: SystemProfile, spans: list[_SpanDraft], target: int, rng: np.random.Generator
) -> None:
    if any(s.service == target for s in spans):
        return
    # Reassign one whole group (shared prefix) to the target service.
    prefixes = sorted({s.span_id.rsplit(".", 1)[0] for s in spans})
    chosen = prefixes[int(rng.integers(len(prefixes)))]
    for s in spans:
        if s.span_id.rsplit(".", 1)[0] == chosen:
            s.service = target
            s.url = profile.operation_url(target, 0)


def _apply_span_effect(
    profile: SystemProfile,
    spans: list[_SpanDraft],
    injector: FaultInjector,
    rng: np.random.Generator,
) -> list[_SpanDraft]:
    effect, mag, target = injector.effect, injector.magnitude, injector.target_service
    if effect == "latency_shift":
        # A system-wide slowdown: every span's duration stretches.
        for s in spans:
            s.end = s.start + int(round((s.end - s.start) * mag))
    elif effect == "cpu_contention":
        for s in spans:
            if s.service == target:
                s.end = s.start + int(round((s.end - s.start) * mag))
    elif effect == "service_exception":
        # Drop the nested sub-spans of one target-service group: the call
        # chain below the failing operation never happens.
        groups: dict[str, list[_SpanDraft]] = {}
        for s in spans:
            groups.setdefault(s.span_id.rsplit(".", 1)[0], []).append(s)
        candidates = [p for p, members in sorted(groups.items()) if members[0].service == target]
        victims = [p for p in candidates if len(groups[p]) > 1] or candidates
        victim = victims[int(rng.integers(len(victims)))]
        spans = [s for s in spans if s.span_id.rsplit(".", 1)[0] != victim or s.span_id.endswith(".0")]
    elif effect == "message_return":
        for s in spans:
            if s.service == target:
                s.url = "/error/messagereturn"
    return spans


def _fault_logs(
    profile: SystemProfile,
    spans: Sequence[_SpanDraft],
    injector: FaultInjector,
    rng: np.random.Generator,
) -> list[LogRecord]:
    target_spans = [s for s in spans if s.service == injector.target_service]
    if not target_spans:
        target_spans = list(spans)
    word = profile.service_word(injector.target_service)
    messages = {
        "cpu_contention": ("WARN", f"cpu contention throttling worker pool on {word}"),
        "service_exception": ("ERROR", f"unhandled exception raised while serving {word} operation"),
        "message_return": ("ERROR", f"unexpected response payload returned by {word} call"),
        "config_fault": ("WARN", f"configuration drift detected for {word} settings"),
    }
    if injector.effect not in messages:
        return []
    severity, message = messages[injector.effect]
    component = f"{word}-drift" if injector.effect == "config_fault" else word
    out = []
    for _ in range(_fault_log_count(injector.magnitude)):
        span = target_spans[int(rng.integers(len(target_spans)))]
        out.append(
            LogRecord(
                timestamp=int(rng.integers(span.start, span.end + 1)),
                severity=severity,
                component=component,
                message=message,
                span_id=span.span_id,
            )
        )
    return out


def _apply_log_effect(
    profile: SystemProfile,
    logs: list[LogRecord],
    injector: FaultInjector,
) -> list[LogRecord]:
    if injector.effect != "config_fault":
        return logs
    word = profile.service_word(injector.target_service)
    renamed = []
    for log in logs:
        if log.component == word:
            renamed.append(
                LogRecord(log.timestamp, log.severity, f"{word}-drift", log.message, log.span_id)
            )
        else:
            renamed.append(log)
    return renamed


def _one_trace(
    profile: SystemProfile,
    trace_id: str,
    injector: FaultInjector | None,
    category: FaultCategory | None,
    rng: np.random.Generator,
) -> Trace:
    spans = _draw_spans(profile, rng)
    if injector is not None:
        # config_fault is a logs-only effect: spans must stay untouched, so
        # the target service is never forced into the span tree for it.
        if injector.effect != "config_fault":
            _ensure_target_present(profile, spans, injector.target_service, rng)
        spans = _apply_span_effect(profile, spans, injector, rng)
    logs = _draw_logs(profile, spans, rng)
    if injector is not None:
        logs = _apply_log_effect(profile, logs, injector)
        logs.extend(_fault_logs(profile, spans, injector, rng))
    records = [
        SpanRecord(
            span_id=s.span_id,
            parent_id=s.parent_id,
            start_time=s.start,
            end_time=s.end,
            service_name=profile.service_name(s.service),
            url=s.url,
        )
        for s in spans
    ]
    return make_trace(trace_id, records, logs, label=category)


def generate(
    profile: SystemProfile,
    injectors: Sequence[FaultInjector],
    n_normal: int,
    n_per_fault: int,
    seed: int,
) -> TraceCorpus:
    """Generate a corpus: unlabeled normal traces plus labeled faulty ones."""
    if n_normal < 0 or n_per_fault < 0:
        raise ValidationError("trace counts must be >= 0")
    seen = set()
    for inj in injectors:
        if inj.category_id in seen:
            raise ValidationError(f"duplicate injector category {inj.category_id!r}")
        seen.add(inj.category_id)
        if inj.target_service >= profile.n_services:
            raise ValidationError(
                f"injector {inj.category_id!r} targets service {inj.target_service}, "
                f"but profile has only {profile.n_services}"
            )
    traces: list[Trace] = []
    categories: list[FaultCategory] = []
    index = 0
    for _ in range(n_normal):
        rng = substream(seed, "trace", profile.name, index)
        traces.append(_one_trace(profile, f"{profile.name}-{index:06d}", None, None, rng))
        index += 1
    for inj in injectors:
        category = FaultCategory(id=inj.category_id, system=profile.name)
        if n_per_fault > 0:
            categories.append(category)
        for _ in range(n_per_fault):
            rng = substream(seed, "trace", profile.name, index)
            traces.append(_one_trace(profile, f"{profile.name}-{index:06d}", inj, category, rng))
            index += 1
    return TraceCorpus(system=profile.name, traces=tuple(traces), categories=frozenset(categories))


BUILTIN_PROFILES = {
    # Desk-scale stand-ins for a mid-size booking system and a small shop.
    "booking-small": SystemProfile(
        name="booking", n_services=12, operations_per_service=3,
        mean_spans_per_trace=14, mean_logs_per_trace=11,
    ),
    "shop-small": SystemProfile(
        name="shop", n_services=8, operations_per_service=2,
        mean_spans_per_trace=8, mean_logs_per_trace=7,
        vocab=DEFAULT_VOCAB[4:],
    ),
}


def builtin_profile(name: str) -> SystemProfile:
    try:
        return BUILTIN_PROFILES[name]
    except KeyError:
        raise ValidationError(
            f"unknown profile {name!r}; built-ins: {sorted(BUILTIN_PROFILES)}"
        ) from None


def default_injectors(
    profile: SystemProfile,
    n_categories: int,
    effects: Sequence[str] = LOG_VISIBLE_EFFECTS,
    base_magnitude: float = 3.0,
) -> list[FaultInjector]:
    """A deterministic (effect x target-service) taxonomy of fault categories.

    Categories cycle through the requested effects across distinct target
    services, with mildly varied magnitudes. With the default log-visible
    effects every pair of categories differs in its log artifacts.
    """
    if n_categories > len(effects) * profile.n_services:
        raise ValidationError(
            f"profile {profile.name!r} supports at most "
            f"{len(effects) * profile.n_services} categories for {len(effects)} effects"
        )
    injectors = []
    for i in range(n_categories):
        effect = effects[i % len(effects)]
        target = (i // len(effects) + i % len(effects)) % profile.n_services
        magnitude = base_magnitude + 0.5 * (i % 4)
        injectors.append(
            FaultInjector(
                category_id=f"{effect}-{profile.service_word(target)}",
                effect=effect,
                magnitude=magnitude,
                target_service=target,
            )
        )
    ids = [inj.category_id for inj in injectors]
    if len(set(ids)) != len(ids):
        raise ValidationError("category taxonomy collision; reduce n_categories or effects")
    return injectors
