from __future__ import annotations

import math
import time

import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from fewtrace.errors import ValidationError
from fewtrace.report import (
    EvalReport,
    TaskResult,
    TimingSummary,
    aggregate,
    format_cell,
    render_table,
    time_phase,
)


def _task(task_id, *runs):
    return TaskResult(task_id=task_id, runs=tuple(runs))


def test_single_perfect_task():
    report = aggregate([_task("t0", 1.0)])
    assert report.summary_cell() == "100.00±0.00 (100.00-100.00)"
    assert report.mean_accuracy == 1.0
    assert report.ci95_halfwidth == 0.0


def test_two_task_hand_case():
    report = aggregate([_task("a", 0.8), _task("b", 1.0)])
    # sample stddev of {0.8, 1.0} = 0.1414..., halfwidth = 1.96 * s / sqrt(2)
    assert report.summary_cell() == "90.00±19.60 (80.00-100.00)"
    expected = 1.96 * math.sqrt(0.02) / math.sqrt(2)
    assert report.ci95_halfwidth == pytest.approx(expected)


def test_fifty_identical_tasks_zero_ci():
    report = aggregate([_task(f"t{i}", 0.72) for i in range(50)])
    assert report.ci95_halfwidth < 1e-12
    assert "±0.00" in report.summary_cell()
    assert report.min_accuracy == report.max_accuracy == 0.72


def test_task_accuracy_is_max_of_runs_order_invariant():
    a = TaskResult("t", runs=(0.4, 0.9, 0.6))
    b = TaskResult("t", runs=(0.9, 0.6, 0.4))
    assert a.accuracy == b.accuracy == 0.9
    assert a.n_runs == 3


def test_task_validation():
    with pytest.raises(ValidationError):
        TaskResult("t", runs=())
    with pytest.raises(ValidationError):
        TaskResult("t", runs=(1.2,))


def test_aggregate_requires_results():
    with pytest.raises(ValidationError):
        aggregate([])


@settings(max_examples=25, deadline=None)
@given(st.lists(st.floats(min_value=0, max_value=1), min_size=2, max_size=10),
       st.randoms(use_true_random=False))
def test_aggregate_permutation_invariant(accs, rnd):
    tasks = [_task(f"t{i}", a) for i, a in enumerate(accs)]
    shuffled = tasks[:]
    rnd.shuffle(shuffled)
    a = aggregate(tasks)
    b = aggregate(shuffled)
    assert a.mean_accuracy == pytest.approx(b.mean_accuracy)
    assert a.ci95_halfwidth == pytest.approx(b.ci95_halfwidth)
    assert (a.min_accuracy, a.max_accuracy) == (b.min_accuracy, b.max_accuracy)


def test_report_invariants():
    report = aggregate([_task("a", 0.5), _task("b", 0.75), _task("c", 1.0)])
    assert report.min_accuracy <= report.mean_accuracy <= report.max_accuracy
    assert report.ci95_halfwidth >= 0


def test_report_json_round_trip():
    timing = TimingSummary(adapt_seconds_mean=0.01, representation_seconds_per_task=0.2,
                           ae_epoch_seconds_mean=1.5)
    report = aggregate(
        [_task("a", 0.8, 0.85), _task("b", 1.0)],
        experiment_id="sys->sys", n_way=5, k_shot=10, m_query=15,
        timing=timing, method="transformer-maml",
    )
    clone = EvalReport.from_json(report.to_json())
    assert clone == report
    without_timing = EvalReport.from_json(report.to_json(include_timing=False))
    assert without_timing.timing is None
    assert without_timing.mean_accuracy == report.mean_accuracy


def test_render_table_contains_cells():
    reports = [
        aggregate([_task("a", 0.8), _task("b", 1.0)], experiment_id="E1", method="transformer-maml"),
        aggregate([_task("c", 0.5)], experiment_id="E2", method="nearneighbor"),
    ]
    text = render_table(reports)
    assert "90.00±19.60 (80.00-100.00)" in text
    assert "E2" in text and "nearneighbor" in text


def test_format_cell():
    assert format_cell(0.9326, 0.014, 0.76, 1.0) == "93.26±1.40 (76.00-100.00)"


def test_time_phase_noop_is_fast():
    timing = time_phase("noop", lambda: None)
    assert timing.label == "noop"
    assert timing.seconds < 0.01


def test_time_phase_sleep_fixture():
    timing = time_phase("sleep", lambda: time.sleep(0.05))
    assert 0.03 <= timing.seconds <= 0.07 + 0.02


def test_time_phase_monotonic_in_work():
    def work(n):
        total = 0
        for i in range(n):
            total += i * i
        return total

    single = time_phase("x1", lambda: work(200_000)).seconds
    double = time_phase("x2", lambda: work(400_000)).seconds
    assert double >= single * 0.8


def test_time_phase_returns_value():
    timing = time_phase("value", lambda: 41 + 1)
    assert timing.value == 42
