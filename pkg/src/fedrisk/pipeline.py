"""Glue between ingestion, featurization, models, and evaluation.

These helpers own the conversions the commands need: assembling a
:class:`ClientDataset` from raw logs and grades, producing per-student risk
scores from a trained model (differential or not), and running the
early-prediction sweep over truncated logs.
"""

from __future__ import annotations

from dataclasses import dataclass
from datetime import datetime
from typing import Mapping, Sequence

import numpy as np

from fedrisk.course_data import (
    DEFAULT_MAX_SCORE,
    ClientDataset,
    EventRecord,
    GradeRecord,
    GradeScoring,
    truncate_events,
)
from fedrisk.features import FeatureSpec, featurize
from fedrisk.mlp import ModelParams, predict_batch
from fedrisk.pairs import individual_scores, ordered_pair_indices
from fedrisk.ranking import MetricsReport, RiskRanking, evaluate, make_ranking, mean_metrics


@dataclass
class AssemblyReport:
    """Students flagged while assembling a dataset from logs and grades."""

    zero_activity_students: list[str]
    ungraded_students: list[str]


def course_span_for(events: Sequence[EventRecord], schedule: Sequence[datetime]) -> tuple[datetime, datetime]:
    """Feature bucketing span: first observed event through the last lecture window end."""
    if not events:
        raise ValueError("cannot derive a course span without events")
    if not schedule:
        raise ValueError("cannot derive a course span without a schedule")
    return min(event.event_time for event in events), schedule[-1]


def build_client_dataset(
    course_id: str,
    events: Sequence[EventRecord],
    grades: Sequence[GradeRecord],
    spec: FeatureSpec,
    course_span: tuple[datetime, datetime],
    lecture_count: int,
    max_score: float = DEFAULT_MAX_SCORE,
) -> tuple[ClientDataset, AssemblyReport]:
    """Featurize logs and attach scored grades for every graded student.

    Graded students without any log activity are kept with zero vectors and
    flagged in the report; logged students without a grade cannot carry a
    training target and are flagged and excluded.
    """
    if not grades:
        raise ValueError(f"course {course_id}: no grade records")
    graded = [record.student_id for record in grades]
    vectors = featurize(events, spec, course_span, students=graded)
    scoring = GradeScoring.from_records(grades, max_score=max_score)
    scored = {record.student_id: scoring.score_of(record.grade) for record in grades}
    active = {event.student_id for event in events}
    report = AssemblyReport(
        zero_activity_students=sorted(set(graded) - active),
        ungraded_students=sorted(active - set(graded)),
    )
    dataset = ClientDataset(
        client_id=course_id,
        students=graded,
        features=np.stack([vectors[student] for student in graded]),
        scored_grades=np.array([scored[student] for student in graded]),
        lecture_count=lecture_count,
    )
    return dataset, report


def predict_risk_scores(
    params: ModelParams,
    students: Sequence[str],
    features: np.ndarray,
    use_differential: bool,
) -> dict[str, float]:
    """Per-student prediction values q_i used for the risk ranking.

    In differential mode the model scores every ordered pair of students and
    q_i is the sum of that student's row of pairwise scores; otherwise the
    model output on the student's own features is used directly.
    """
    if len(students) != len(features):
        raise ValueError("students and feature rows must align")
    if not use_differential:
        predictions = predict_batch(params, features)
        return {student: float(value) for student, value in zip(students, predictions)}
    n = len(students)
    if n < 2:
        raise ValueError("differential prediction needs at least 2 students")
    index_pairs = ordered_pair_indices(n)
    differences = features[index_pairs[:, 0]] - features[index_pairs[:, 1]]
    pairwise = predict_batch(params, differences)
    matrix = {
        (students[i], students[j]): float(pairwise[row]) for row, (i, j) in enumerate(index_pairs)
    }
    return individual_scores(matrix, students)


def label_at_risk_from_scores(
    scored_grades: Mapping[str, float], threshold_rank: int
) -> dict[str, bool]:
    """At-risk labels computed on scored grades; equivalent to the ordinal rule.

    Grade scoring is strictly monotone over grades present in a cohort, so the
    boundary-with-ties rule gives identical labels whether applied to letters
    or to their scores.
    """
    if threshold_rank < 1:
        raise ValueError(f"threshold_rank must be >= 1, got {threshold_rank}")
    if not scored_grades:
        raise ValueError("cannot label an empty cohort")
    if threshold_rank > len(scored_grades):
        return {student: True for student in scored_grades}
    boundary = sorted(scored_grades.values())[threshold_rank - 1]
    return {student: value <= boundary for student, value in scored_grades.items()}


def rank_dataset(
    params: ModelParams,
    dataset: ClientDataset,
    threshold_rank: int,
    use_differential: bool,
) -> RiskRanking:
    """Risk ranking of one course against its own ground truth."""
    scores = predict_risk_scores(params, dataset.students, dataset.features, use_differential)
    grades = {student: float(g) for student, g in zip(dataset.students, dataset.scored_grades)}
    labels = label_at_risk_from_scores(grades, threshold_rank)
    return make_ranking(scores, labels, grades)


def evaluate_dataset(
    params: ModelParams,
    dataset: ClientDataset,
    threshold_rank: int,
    use_differential: bool,
) -> MetricsReport:
    return evaluate(rank_dataset(params, dataset, threshold_rank, use_differential))


def random_baseline_metrics(
    labels: Mapping[str, bool],
    grades: Mapping[str, float],
    n_shuffles: int,
    seed: int,
) -> MetricsReport:
    """Mean metrics over randomly ordered rankings: the no-skill reference."""
    if n_shuffles < 1:
        raise ValueError("n_shuffles must be >= 1")
    rng = np.random.default_rng(seed)
    students = sorted(labels)
    reports = []
    for _ in range(n_shuffles):
        order = rng.permutation(len(students))
        scores = {student: float(position) for student, position in zip(students, order)}
        reports.append(evaluate(make_ranking(scores, labels, grades)))
    return mean_metrics(reports)


@dataclass
class SweepRow:
    """One early-prediction point: metrics after truncating logs at lecture k."""

    k: int
    method: str
    metrics: MetricsReport


def early_prediction_sweep(
    params: ModelParams,
    events: Sequence[EventRecord],
    schedule: Sequence[datetime],
    grades: Sequence[GradeRecord],
    spec: FeatureSpec,
    threshold_rank: int,
    use_differential: bool,
    k_range: Sequence[int] | None = None,
    baseline_shuffles: int = 1000,
    baseline_seed: int = 0,
    max_score: float = DEFAULT_MAX_SCORE,
) -> list[SweepRow]:
    """Truncate logs at each lecture k, featurize, predict, and evaluate.

    Features at every k are bucketed over the full course span, so a model
    trained on complete courses can be applied unchanged. Each k also gets a
    random-order baseline row averaged over ``baseline_shuffles`` shuffles.
    """
    ks = list(k_range) if k_range is not None else list(range(1, len(schedule) + 1))
    if any(not 1 <= k <= len(schedule) for k in ks):
        raise ValueError(f"k values must be in 1..{len(schedule)}")
    full = truncate_events(events, schedule, len(schedule))
    span = course_span_for(full, schedule)
    rows: list[SweepRow] = []
    for k in ks:
        dataset, _ = build_client_dataset(
            course_id=f"sweep-k{k}",
            events=truncate_events(full, schedule, k),
            grades=grades,
            spec=spec,
            course_span=span,
            lecture_count=len(schedule),
            max_score=max_score,
        )
        rows.append(SweepRow(k, "model", evaluate_dataset(params, dataset, threshold_rank, use_differential)))
        grade_map = {student: float(g) for student, g in zip(dataset.students, dataset.scored_grades)}
        labels = label_at_risk_from_scores(grade_map, threshold_rank)
        rows.append(
            SweepRow(
                k,
                "random",
                random_baseline_metrics(labels, grade_map, baseline_shuffles, baseline_seed),
            )
        )
    return rows
