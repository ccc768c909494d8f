"""Risk rankings and their evaluation: Top-n precision, nDCG, and PR-AUC.

Students are sorted ascending by predicted value, so the lowest predictions
(highest risk) come first. All metrics depend only on the order, never on the
score magnitudes, and are pure functions of the ranking.
"""

from __future__ import annotations

import logging
import math
from dataclasses import dataclass
from typing import Mapping, Sequence

import numpy as np

logger = logging.getLogger(__name__)


@dataclass(frozen=True)
class RankedStudent:
    student_id: str
    score: float
    at_risk: bool
    grade_score: float


@dataclass
class RiskRanking:
    """Students ordered ascending by predicted value, ties broken by student id."""

    entries: list[RankedStudent]

    def __post_init__(self) -> None:
        if not self.entries:
            raise ValueError("a risk ranking must contain at least one student")
        ids = [entry.student_id for entry in self.entries]
        if len(set(ids)) != len(ids):
            raise ValueError("risk ranking contains duplicate students")
        keys = [(entry.score, entry.student_id) for entry in self.entries]
        if keys != sorted(keys):
            raise ValueError("risk ranking entries are not sorted by (score, student_id)")

    def __len__(self) -> int:
        return len(self.entries)

    @property
    def at_risk_count(self) -> int:
        return sum(entry.at_risk for entry in self.entries)


def make_ranking(
    scores: Mapping[str, float],
    labels: Mapping[str, bool],
    grades: Mapping[str, float],
) -> RiskRanking:
    """Sort students ascending by predicted value and attach ground truth."""
    if not scores:
        raise ValueError("cannot rank an empty score map")
    for name, other in (("labels", labels), ("grades", grades)):
        if set(other) != set(scores):
            missing = sorted(set(scores) - set(other))
            extra = sorted(set(other) - set(scores))
            raise ValueError(f"{name} keys differ from scores: missing {missing}, unexpected {extra}")
    entries = [
        RankedStudent(student, float(scores[student]), bool(labels[student]), float(grades[student]))
        for student in sorted(scores, key=lambda s: (scores[s], s))
    ]
    return RiskRanking(entries)


def top_n_precision(ranking: RiskRanking, n: int) -> float:
    """Fraction of truly at-risk students among the n highest-risk predictions."""
    if not 1 <= n <= len(ranking):
        raise ValueError(f"n must be in 1..{len(ranking)}, got {n}")
    return sum(entry.at_risk for entry in ranking.entries[:n]) / n


def ndcg(ranking: RiskRanking) -> float:
    """Ranking quality against the ideal order, with relevance 1 - scored grade.

    DCG discounts position pos by log2(pos + 1); the ideal ordering sorts
    relevance descending. A cohort where every relevance is zero has nothing
    to rank, and scores 1.0 with a warning.
    """
    relevance = np.array([1.0 - entry.grade_score for entry in ranking.entries], dtype=np.float64)
    discounts = np.log2(np.arange(2, len(relevance) + 2, dtype=np.float64))
    dcg = float(np.sum(relevance / discounts))
    ideal = float(np.sum(np.sort(relevance)[::-1] / discounts))
    if ideal == 0.0:
        logger.warning("all relevances are zero; nDCG is degenerate and defined as 1.0")
        return 1.0
    return dcg / ideal


def pr_auc(ranking: RiskRanking) -> float:
    """Area under the precision-recall curve traced by the full top-n sweep.

    For n = 1..N the curve point is (recall_n, precision_n); the point
    (0, precision_1) is prepended and the area is the trapezoid sum between
    consecutive distinct recall values, each represented by the first sweep
    point that reaches it.
    """
    positives = ranking.at_risk_count
    if positives == 0:
        raise ValueError("PR-AUC is undefined with zero at-risk students")
    flags = np.array([entry.at_risk for entry in ranking.entries], dtype=bool)
    hit_positions = np.flatnonzero(flags) + 1
    recalls = np.arange(1, positives + 1, dtype=np.float64) / positives
    precisions = np.arange(1, positives + 1, dtype=np.float64) / hit_positions
    anchor_precision = 1.0 if flags[0] else 0.0
    recall_points = np.concatenate(([0.0], recalls))
    precision_points = np.concatenate(([anchor_precision], precisions))
    widths = recall_points[1:] - recall_points[:-1]
    heights = (precision_points[1:] + precision_points[:-1]) / 2.0
    return float(np.sum(widths * heights))


def pr_curve(ranking: RiskRanking) -> list[tuple[int, float, float]]:
    """The raw (n, recall, precision) sweep underlying the PR-AUC integral."""
    positives = ranking.at_risk_count
    if positives == 0:
        raise ValueError("PR curve is undefined with zero at-risk students")
    points = []
    hits = 0
    for n, entry in enumerate(ranking.entries, start=1):
        hits += entry.at_risk
        points.append((n, hits / positives, hits / n))
    return points


METRIC_COLUMNS = (
    "top_5",
    "top_10",
    "top_15",
    "top_at_risk",
    "ndcg",
    "pr_auc",
    "at_risk_count",
    "n_students",
)


@dataclass(frozen=True)
class MetricsReport:
    """The evaluation row reported per test course: four Top-n values, nDCG, PR-AUC."""

    top_5: float
    top_10: float
    top_15: float
    top_at_risk: float
    ndcg: float
    pr_auc: float
    at_risk_count: int
    n_students: int

    def to_json_dict(self) -> dict:
        return {column: getattr(self, column) for column in METRIC_COLUMNS}

    def csv_values(self) -> list[str]:
        return [repr(getattr(self, column)) for column in METRIC_COLUMNS[:6]] + [
            str(self.at_risk_count),
            str(self.n_students),
        ]


def evaluate(ranking: RiskRanking) -> MetricsReport:
    """Top-n precision at n in {5, 10, 15, at-risk count}, nDCG, and PR-AUC."""
    at_risk = ranking.at_risk_count
    return MetricsReport(
        top_5=top_n_precision(ranking, 5),
        top_10=top_n_precision(ranking, 10),
        top_15=top_n_precision(ranking, 15),
        top_at_risk=top_n_precision(ranking, at_risk),
        ndcg=ndcg(ranking),
        pr_auc=pr_auc(ranking),
        at_risk_count=at_risk,
        n_students=len(ranking),
    )


def mean_metrics(reports: Sequence[MetricsReport]) -> MetricsReport:
    """Per-metric arithmetic mean across repeated training runs."""
    if not reports:
        raise ValueError("cannot average zero metric reports")
    counts = {(report.at_risk_count, report.n_students) for report in reports}
    if len(counts) != 1:
        raise ValueError("cannot average reports over different cohorts")
    return MetricsReport(
        top_5=_mean(reports, "top_5"),
        top_10=_mean(reports, "top_10"),
        top_15=_mean(reports, "top_15"),
        top_at_risk=_mean(reports, "top_at_risk"),
        ndcg=_mean(reports, "ndcg"),
        pr_auc=_mean(reports, "pr_auc"),
        at_risk_count=reports[0].at_risk_count,
        n_students=reports[0].n_students,
    )


def _mean(reports: Sequence[MetricsReport], column: str) -> float:
    return math.fsum(getattr(report, column) for report in reports) / len(reports)
