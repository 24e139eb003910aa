"""Accuracy aggregation and wall-clock timing for the episodic protocol.

Each meta-testing task is run several times (default 5) and scored by its
best run; the report aggregates the per-task accuracies into a mean with a
normal-approximation 95% confidence interval plus the min-max range, and
renders cells as ``mean±ci (min-max)`` in percent with two decimals. Raw
per-task accuracies are kept in the report so any other interval method
can be recomputed later.
"""

from __future__ import annotations

import dataclasses
import json
import math
import time
from dataclasses import dataclass
from typing import Callable, Sequence

from .errors import ValidationError

__all__ = [
    "TaskResult",
    "TimingSummary",
    "EvalReport",
    "aggregate",
    "format_cell",
    "render_table",
    "time_phase",
    "PhaseTiming",
]


@dataclass(frozen=True)
class TaskResult:
    """Per-task accuracies across repeated runs; the task scores its best run."""

    task_id: str
    runs: tuple[float, ...]
    adapt_seconds: float = 0.0

    def __post_init__(self):
        if not self.runs:
            raise ValidationError(f"task {self.task_id!r} has no runs")
        if any(not 0.0 <= r <= 1.0 for r in self.runs):
            raise ValidationError(f"task {self.task_id!r} has an accuracy outside [0, 1]")

    @property
    def accuracy(self) -> float:
        return max(self.runs)

    @property
    def n_runs(self) -> int:
        return len(self.runs)


@dataclass(frozen=True)
class TimingSummary:
    adapt_seconds_mean: float = 0.0
    representation_seconds_per_task: float = 0.0
    ae_epoch_seconds_mean: float = 0.0


@dataclass(frozen=True)
class EvalReport:
    """Aggregated view of one experiment's meta-testing phase."""

    experiment_id: str
    n_way: int
    k_shot: int
    m_query: int
    mean_accuracy: float
    ci95_halfwidth: float
    min_accuracy: float
    max_accuracy: float
    tasks: tuple[TaskResult, ...]
    timing: TimingSummary | None = None
    method: str = "transformer-maml"

    def summary_cell(self) -> str:
        return format_cell(
            self.mean_accuracy, self.ci95_halfwidth, self.min_accuracy, self.max_accuracy
        )

    def to_dict(self, include_timing: bool = True) -> dict:
        # Wall-clock fields (per-task adapt seconds, the timing summary) are
        # optional so reports can stay byte-reproducible across runs.
        tasks = []
        for t in self.tasks:
            entry = {"task_id": t.task_id, "runs": list(t.runs), "accuracy": t.accuracy}
            if include_timing:
                entry["adapt_seconds"] = t.adapt_seconds
            tasks.append(entry)
        out = {
            "experiment_id": self.experiment_id,
            "method": self.method,
            "setup": {"n_way": self.n_way, "k_shot": self.k_shot, "m_query": self.m_query},
            "mean_accuracy": self.mean_accuracy,
            "ci95_halfwidth": self.ci95_halfwidth,
            "min_accuracy": self.min_accuracy,
            "max_accuracy": self.max_accuracy,
            "cell": self.summary_cell(),
            "tasks": tasks,
        }
        if include_timing and self.timing is not None:
            out["timing"] = dataclasses.asdict(self.timing)
        return out

    def to_json(self, include_timing: bool = True) -> str:
        return json.dumps(self.to_dict(include_timing), indent=2, sort_keys=True)

    @classmethod
    def from_dict(cls, obj: dict) -> "EvalReport":
        timing = TimingSummary(**obj["timing"]) if "timing" in obj else None
        tasks = tuple(
            TaskResult(
                task_id=t["task_id"],
                runs=tuple(t["runs"]),
                adapt_seconds=t.get("adapt_seconds", 0.0),
            )
            for t in obj["tasks"]
        )
        return cls(
            experiment_id=obj["experiment_id"],
            n_way=obj["setup"]["n_way"],
            k_shot=obj["setup"]["k_shot"],
            m_query=obj["setup"]["m_query"],
            mean_accuracy=obj["mean_accuracy"],
            ci95_halfwidth=obj["ci95_halfwidth"],
            min_accuracy=obj["min_accuracy"],
            max_accuracy=obj["max_accuracy"],
            tasks=tasks,
            timing=timing,
            method=obj.get("method", "transformer-maml"),
        )

    @classmethod
    def from_json(cls, text: str) -> "EvalReport":
        return cls.from_dict(json.loads(text))


def format_cell(mean: float, halfwidth: float, lo: float, hi: float) -> str:
    """Percent rendering with two decimals: ``93.26±1.40 (76.00-100.00)``."""
    return f"{mean * 100:.2f}±{halfwidth * 100:.2f} ({lo * 100:.2f}-{hi * 100:.2f})"


def aggregate(
    results: Sequence[TaskResult],
    experiment_id: str = "",
    n_way: int = 5,
    k_shot: int = 5,
    m_query: int = 15,
    timing: TimingSummary | None = None,
    method: str = "transformer-maml",
) -> EvalReport:
    """Mean, normal-approximation 95% CI halfwidth, and range of task accuracies."""
    if not results:
        raise ValidationError("aggregate requires at least one task result")
    accs = [r.accuracy for r in results]
    n = len(accs)
    mean = sum(accs) / n
    if n > 1:
        var = sum((a - mean) ** 2 for a in accs) / (n - 1)
        halfwidth = 1.96 * math.sqrt(var) / math.sqrt(n)
    else:
        halfwidth = 0.0
    return EvalReport(
        experiment_id=experiment_id,
        n_way=n_way,
        k_shot=k_shot,
        m_query=m_query,
        mean_accuracy=mean,
        ci95_halfwidth=halfwidth,
        min_accuracy=min(accs),
        max_accuracy=max(accs),
        tasks=tuple(results),
        timing=timing,
        method=method,
    )


def render_table(reports: Sequence[EvalReport]) -> str:
    """Aligned plain-text table, one row per report."""
    header = ("experiment", "method", "setup", "accuracy")
    rows = [header]
    for r in reports:
        rows.append(
            (
                r.experiment_id,
                r.method,
                f"{r.n_way}-way {r.k_shot}-shot",
                r.summary_cell(),
            )
        )
    widths = [max(len(row[i]) for row in rows) for i in range(len(header))]
    lines = []
    for i, row in enumerate(rows):
        lines.append("  ".join(cell.ljust(w) for cell, w in zip(row, widths)).rstrip())
        if i == 0:
            lines.append("  ".join("-" * w for w in widths))
    return "\n".join(lines) + "\n"


@dataclass(frozen=True)
class PhaseTiming:
    label: str
    seconds: float
    value: object = None


def time_phase(label: str, fn: Callable[[], object]) -> PhaseTiming:
    """Run the closure on the calling thread and measure monotonic wall time."""
    start = time.perf_counter()
    value = fn()
    return PhaseTiming(label=label, seconds=time.perf_counter() - start, value=value)
