"""Base/novel category splits and N-way K-shot episode sampling.

Episodes are drawn over latent trace representations so the trained
encoder runs once per trace. Every episode pairs a support set (K labeled
latents per category) with a disjoint query set (M per category, M
typically greater than K); class indices 0..N-1 follow the sampled
category order. Meta-test suites draw their category combinations without
replacement from all C(pool, N) possibilities, so the tasks are pairwise
distinct. All sampling is a pure function of (seed, task index).
"""

from __future__ import annotations

import itertools
import json
import math
import statistics
from dataclasses import dataclass, replace
from pathlib import Path
from typing import Iterable, Mapping, Sequence

import numpy as np

from .errors import SamplingError, ValidationError
from .fusion import LatentTrace
from .seeding import substream
from .traces import FaultCategory, TraceCorpus

__all__ = [
    "SupportSet",
    "QuerySet",
    "Episode",
    "split_categories",
    "split_by_median_spans",
    "sample_episode",
    "meta_training_tasks",
    "meta_test_suite",
    "group_by_category",
    "episode_manifest",
    "write_episode_manifests",
]


def _check_shot_set(items, n_way: int, shots: int, kind: str) -> None:
    if len(items) != n_way * shots:
        raise ValidationError(
            f"{kind} set has {len(items)} items; expected n_way*shots = {n_way * shots}"
        )
    counts: dict[int, int] = {}
    for _, label in items:
        counts[label] = counts.get(label, 0) + 1
    if sorted(counts) != list(range(n_way)) or any(c != shots for c in counts.values()):
        raise ValidationError(
            f"{kind} set labels must cover 0..{n_way - 1} with exactly {shots} items each"
        )


@dataclass(frozen=True)
class SupportSet:
    """The labeled adaptation examples of one episode."""

    items: tuple[tuple[LatentTrace, int], ...]
    n_way: int
    shots: int

    def __post_init__(self):
        _check_shot_set(self.items, self.n_way, self.shots, "support")


@dataclass(frozen=True)
class QuerySet:
    """The held-out evaluation examples of one episode."""

    items: tuple[tuple[LatentTrace, int], ...]
    n_way: int
    shots: int

    def __post_init__(self):
        _check_shot_set(self.items, self.n_way, self.shots, "query")


@dataclass(frozen=True)
class Episode:
    """One N-way K-shot classification task."""

    task_id: str
    categories: tuple[FaultCategory, ...]
    support: SupportSet
    query: QuerySet
    system: str

    def __post_init__(self):
        if len({c.id for c in self.categories}) != len(self.categories):
            raise ValidationError(f"episode {self.task_id!r} repeats a category")
        sup = {l.trace_id for l, _ in self.support.items}
        qry = {l.trace_id for l, _ in self.query.items}
        if sup & qry:
            raise ValidationError(
                f"episode {self.task_id!r}: support and query share traces {sorted(sup & qry)[:3]}"
            )


# --- category splitting -----------------------------------------------------


def split_by_median_spans(
    categories: Sequence[FaultCategory],
    span_counts: Mapping[str, Sequence[int]],
    n_novel: int,
    seed: int,
) -> tuple[tuple[FaultCategory, ...], tuple[FaultCategory, ...]]:
    """Seeded base/novel partition stratified by trace length.

    Categories are bucketed as "short" or "long" by their median span count
    relative to the overall median; the novel quota is spread across both
    buckets so each split keeps a mix of trace lengths whenever the bucket
    sizes allow it.
    """
    cats = sorted(categories, key=lambda c: c.id)
    if n_novel < 1:
        raise ValidationError("n_novel must be >= 1")
    if n_novel >= len(cats):
        raise ValidationError(
            f"cannot reserve {n_novel} novel categories out of {len(cats)} total"
        )
    all_counts = [c for cat in cats for c in span_counts.get(cat.id, [])]
    overall = statistics.median(all_counts) if all_counts else 0
    long_cats = [c for c in cats if statistics.median(span_counts.get(c.id, [0])) > overall]
    short_cats = [c for c in cats if c not in long_cats]

    lo = max(0, n_novel - len(short_cats))
    hi = min(len(long_cats), n_novel)
    proportional = n_novel * len(long_cats) / len(cats)

    def desirability(q: int) -> int:
        score = 0
        if long_cats:
            score += int(q >= 1) + int(len(long_cats) - q >= 1)
        if short_cats:
            score += int(n_novel - q >= 1) + int(len(short_cats) - (n_novel - q) >= 1)
        return score

    q_long = max(
        range(lo, hi + 1),
        key=lambda q: (desirability(q), -abs(q - proportional), -q),
    )

    rng = substream(seed, "category-split")
    novel: list[FaultCategory] = []
    for bucket, quota in ((long_cats, q_long), (short_cats, n_novel - q_long)):
        if quota:
            picks = rng.choice(len(bucket), size=quota, replace=False)
            novel.extend(bucket[i] for i in sorted(picks))
    novel_ids = {c.id for c in novel}
    base = [c for c in cats if c.id not in novel_ids]
    return (
        tuple(replace(c, split="base") for c in base),
        tuple(sorted((replace(c, split="novel") for c in novel), key=lambda c: c.id)),
    )


def split_categories(
    corpus: TraceCorpus, n_novel: int, seed: int
) -> tuple[tuple[FaultCategory, ...], tuple[FaultCategory, ...]]:
    """Partition the corpus's fault categories into base and novel sets."""
    span_counts: dict[str, list[int]] = {}
    for trace in corpus.labeled():
        span_counts.setdefault(trace.label.id, []).append(len(trace.spans))
    return split_by_median_spans(sorted(corpus.categories, key=lambda c: c.id),
                                 span_counts, n_novel, seed)


# --- episode sampling --------------------------------------------------------


def group_by_category(
    records: Iterable[tuple[LatentTrace, str | None]],
) -> dict[str, list[LatentTrace]]:
    """Group labeled latents by category id, ordered by trace id."""
    groups: dict[str, list[LatentTrace]] = {}
    for latent, label in records:
        if label is not None:
            groups.setdefault(label, []).append(latent)
    return {k: sorted(v, key=lambda l: l.trace_id) for k, v in groups.items()}


def _draw_items(
    latents_by_category: Mapping[str, Sequence[LatentTrace]],
    categories: Sequence[FaultCategory],
    k_shot: int,
    m_query: int,
    rng: np.random.Generator,
) -> tuple[list[tuple[LatentTrace, int]], list[tuple[LatentTrace, int]]]:
    support: list[tuple[LatentTrace, int]] = []
    query: list[tuple[LatentTrace, int]] = []
    for class_index, cat in enumerate(categories):
        pool = latents_by_category.get(cat.id, ())
        if len(pool) < k_shot + m_query:
            raise SamplingError(
                f"category {cat.id!r} has {len(pool)} traces; "
                f"needs {k_shot + m_query} for K={k_shot}, M={m_query}"
            )
        picks = rng.choice(len(pool), size=k_shot + m_query, replace=False)
        support.extend((pool[i], class_index) for i in picks[:k_shot])
        query.extend((pool[i], class_index) for i in picks[k_shot:])
    return support, query


def _build_episode(
    latents_by_category: Mapping[str, Sequence[LatentTrace]],
    categories: Sequence[FaultCategory],
    k_shot: int,
    m_query: int,
    rng: np.random.Generator,
    task_id: str,
) -> Episode:
    support, query = _draw_items(latents_by_category, categories, k_shot, m_query, rng)
    n_way = len(categories)
    return Episode(
        task_id=task_id,
        categories=tuple(categories),
        support=SupportSet(tuple(support), n_way, k_shot),
        query=QuerySet(tuple(query), n_way, m_query),
        system=categories[0].system if categories else "",
    )


def sample_episode(
    latents_by_category: Mapping[str, Sequence[LatentTrace]],
    pool: Sequence[FaultCategory],
    n_way: int,
    k_shot: int,
    m_query: int,
    seed: int,
    task_index: int,
) -> Episode:
    """Draw one episode: N pool categories, then K+M traces per category."""
    ordered = sorted(pool, key=lambda c: c.id)
    if len(ordered) < n_way:
        raise SamplingError(f"pool has {len(ordered)} categories; need {n_way}")
    rng = substream(seed, "episode", task_index)
    picks = rng.choice(len(ordered), size=n_way, replace=False)
    categories = [ordered[i] for i in picks]
    return _build_episode(
        latents_by_category, categories, k_shot, m_query, rng, f"task-{task_index:03d}"
    )


def _distinct_combination_suite(
    latents_by_category: Mapping[str, Sequence[LatentTrace]],
    pool: Sequence[FaultCategory],
    n_way: int,
    k_shot: int,
    m_query: int,
    n_tasks: int,
    seed: int,
    label: str,
) -> list[Episode]:
    ordered = sorted(pool, key=lambda c: c.id)
    if len(ordered) < n_way:
        raise SamplingError(f"pool has {len(ordered)} categories; need {n_way}")
    combos = list(itertools.combinations(range(len(ordered)), n_way))
    available = math.comb(len(ordered), n_way)
    if n_tasks > available:
        raise SamplingError(
            f"requested {n_tasks} distinct tasks, but only C({len(ordered)},{n_way})="
            f"{available} category combinations exist"
        )
    rng = substream(seed, label, "combinations")
    chosen = rng.choice(available, size=n_tasks, replace=False)
    episodes = []
    for task_index, combo_index in enumerate(chosen):
        categories = [ordered[i] for i in combos[combo_index]]
        task_rng = substream(seed, label, "shots", task_index)
        episodes.append(
            _build_episode(
                latents_by_category, categories, k_shot, m_query, task_rng,
                f"{label}-{task_index:03d}",
            )
        )
    return episodes


def meta_training_tasks(
    latents_by_category: Mapping[str, Sequence[LatentTrace]],
    pool: Sequence[FaultCategory],
    n_way: int,
    k_shot: int,
    m_query: int,
    n_tasks: int,
    seed: int,
) -> list[Episode]:
    """The fixed set of distinct meta-training tasks over base categories."""
    return _distinct_combination_suite(
        latents_by_category, pool, n_way, k_shot, m_query, n_tasks, seed, "metatrain"
    )


def meta_test_suite(
    latents_by_category: Mapping[str, Sequence[LatentTrace]],
    pool: Sequence[FaultCategory],
    n_way: int,
    k_shot: int,
    m_query: int,
    n_tasks: int,
    seed: int,
) -> list[Episode]:
    """Distinct meta-testing tasks drawn uniformly from all C(pool, N) combos."""
    return _distinct_combination_suite(
        latents_by_category, pool, n_way, k_shot, m_query, n_tasks, seed, "metatest"
    )


# --- manifests ---------------------------------------------------------------


def episode_manifest(episode: Episode) -> dict:
    return {
        "task_id": episode.task_id,
        "system": episode.system,
        "categories": [c.id for c in episode.categories],
        "support_trace_ids": [l.trace_id for l, _ in episode.support.items],
        "query_trace_ids": [l.trace_id for l, _ in episode.query.items],
        "n_way": episode.support.n_way,
        "k_shot": episode.support.shots,
        "m_query": episode.query.shots,
    }


def write_episode_manifests(episodes: Sequence[Episode], path: str | Path) -> None:
    with Path(path).open("w", encoding="utf-8", newline="\n") as fh:
        for ep in episodes:
            fh.write(json.dumps(episode_manifest(ep), separators=(",", ":")) + "\n")
