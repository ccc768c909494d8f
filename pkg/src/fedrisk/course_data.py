"""Course-level domain data: interaction logs, grades, grade scoring, and at-risk labels.

Everything here is a pure function over immutable records, so it is safe to
call concurrently. File formats are plain CSV with a required header row (see
README for the column contracts).
"""

from __future__ import annotations

import csv
import logging
from collections import Counter
from dataclasses import dataclass, field
from datetime import datetime, timezone
from pathlib import Path
from typing import Iterable, Mapping, Sequence

import numpy as np

logger = logging.getLogger(__name__)

# Letter grades in ascending order; index + 1 is the ordinal used for scoring.
GRADE_LETTERS: tuple[str, ...] = ("F", "D", "C", "B", "A")
_GRADE_ORDINAL: dict[str, int] = {letter: m for m, letter in enumerate(GRADE_LETTERS, start=1)}

DEFAULT_MAX_SCORE = 0.95
DEFAULT_THRESHOLD_RANK = 15

# Default e-book operation vocabulary. Operations outside the configured
# vocabulary are mapped to OTHER at ingestion, never dropped.
OTHER_OPERATION = "OTHER"
DEFAULT_OPERATIONS: tuple[str, ...] = (
    "OPEN",
    "CLOSE",
    "NEXT",
    "PREV",
    "ADD_MARKER",
    "DELETE_MARKER",
    "ADD_MEMO",
    "DELETE_MEMO",
    "PAGE_JUMP",
)

EVENTS_CSV_COLUMNS = ("student_id", "material_id", "operation", "event_time")
GRADES_CSV_COLUMNS = ("student_id", "grade")
SCHEDULE_CSV_COLUMNS = ("lecture_index", "window_end")


class IngestError(ValueError):
    """A malformed input file; the message names the offending line when known."""


class EmptyInputError(IngestError):
    """An input file with no data rows."""


@dataclass(frozen=True, order=True)
class EventRecord:
    """One learner interaction: who touched which material, how, and when."""

    student_id: str
    event_time: datetime
    material_id: str
    operation: str


@dataclass(frozen=True)
class GradeRecord:
    """A student's final letter grade, stored as ordinal m in 1..5 (F..A)."""

    student_id: str
    grade: int

    def __post_init__(self) -> None:
        if not 1 <= self.grade <= 5:
            raise ValueError(f"grade ordinal must be in 1..5, got {self.grade}")

    @property
    def letter(self) -> str:
        return GRADE_LETTERS[self.grade - 1]

    @classmethod
    def from_letter(cls, student_id: str, letter: str) -> "GradeRecord":
        try:
            return cls(student_id, _GRADE_ORDINAL[letter.strip().upper()])
        except KeyError:
            raise ValueError(f"unknown grade letter {letter!r} (expected one of {GRADE_LETTERS})") from None


def parse_rfc3339(text: str) -> datetime:
    """Parse an RFC 3339 timestamp to an aware UTC datetime at second resolution."""
    raw = text.strip()
    if raw.endswith(("Z", "z")):
        raw = raw[:-1] + "+00:00"
    try:
        parsed = datetime.fromisoformat(raw)
    except ValueError:
        raise ValueError(f"invalid RFC 3339 timestamp {text!r}") from None
    if parsed.tzinfo is None:
        parsed = parsed.replace(tzinfo=timezone.utc)
    return parsed.astimezone(timezone.utc).replace(microsecond=0)


def format_rfc3339(moment: datetime) -> str:
    if moment.tzinfo is None:
        moment = moment.replace(tzinfo=timezone.utc)
    return moment.astimezone(timezone.utc).strftime("%Y-%m-%dT%H:%M:%SZ")


@dataclass
class IngestResult:
    """Ingested event records plus a tally of operations mapped to OTHER."""

    records: list[EventRecord]
    unknown_operations: Counter = field(default_factory=Counter)

    @property
    def unknown_operation_count(self) -> int:
        return sum(self.unknown_operations.values())


def _check_header(header: Sequence[str] | None, expected: Sequence[str], path: Path) -> None:
    if header is None:
        raise EmptyInputError(f"{path}: file is empty")
    got = [column.strip() for column in header]
    if got != list(expected):
        raise IngestError(f"{path}: expected header {','.join(expected)!r}, got {','.join(got)!r}")


def ingest_events(path: str | Path, vocab: Sequence[str] = DEFAULT_OPERATIONS) -> IngestResult:
    """Read an events CSV and return records sorted by (student_id, event_time).

    Operations outside ``vocab`` are kept, mapped to ``OTHER`` and counted in
    the result. A malformed timestamp raises :class:`IngestError` naming the
    line; a file without data rows raises :class:`EmptyInputError`.
    """
    path = Path(path)
    known = set(vocab) | {OTHER_OPERATION}
    records: list[EventRecord] = []
    unknown: Counter = Counter()
    with path.open(newline="", encoding="utf-8") as handle:
        reader = csv.reader(handle)
        _check_header(next(reader, None), EVENTS_CSV_COLUMNS, path)
        for line_number, row in enumerate(reader, start=2):
            if not row or all(not cell.strip() for cell in row):
                continue
            if len(row) != len(EVENTS_CSV_COLUMNS):
                raise IngestError(f"{path}: line {line_number}: expected {len(EVENTS_CSV_COLUMNS)} columns, got {len(row)}")
            student_id, material_id, operation, event_time = (cell.strip() for cell in row)
            try:
                moment = parse_rfc3339(event_time)
            except ValueError as exc:
                raise IngestError(f"{path}: line {line_number}: {exc}") from None
            if operation not in known:
                unknown[operation] += 1
                operation = OTHER_OPERATION
            records.append(EventRecord(student_id, moment, material_id, operation))
    if not records:
        raise EmptyInputError(f"{path}: no event rows")
    if unknown:
        logger.warning(
            "%s: %d events with operations outside the vocabulary mapped to %s: %s",
            path,
            sum(unknown.values()),
            OTHER_OPERATION,
            dict(unknown),
        )
    records.sort(key=lambda record: (record.student_id, record.event_time))
    return IngestResult(records=records, unknown_operations=unknown)


def write_events_csv(records: Iterable[EventRecord], path: str | Path) -> None:
    with Path(path).open("w", newline="", encoding="utf-8") as handle:
        writer = csv.writer(handle)
        writer.writerow(EVENTS_CSV_COLUMNS)
        for record in records:
            writer.writerow(
                (record.student_id, record.material_id, record.operation, format_rfc3339(record.event_time))
            )


def read_grades_csv(path: str | Path) -> list[GradeRecord]:
    path = Path(path)
    records: list[GradeRecord] = []
    seen: set[str] = set()
    with path.open(newline="", encoding="utf-8") as handle:
        reader = csv.reader(handle)
        _check_header(next(reader, None), GRADES_CSV_COLUMNS, path)
        for line_number, row in enumerate(reader, start=2):
            if not row or all(not cell.strip() for cell in row):
                continue
            if len(row) != 2:
                raise IngestError(f"{path}: line {line_number}: expected 2 columns, got {len(row)}")
            student_id, letter = row[0].strip(), row[1].strip()
            if student_id in seen:
                raise IngestError(f"{path}: line {line_number}: duplicate grade for student {student_id!r}")
            seen.add(student_id)
            try:
                records.append(GradeRecord.from_letter(student_id, letter))
            except ValueError as exc:
                raise IngestError(f"{path}: line {line_number}: {exc}") from None
    if not records:
        raise EmptyInputError(f"{path}: no grade rows")
    return records


def write_grades_csv(records: Iterable[GradeRecord], path: str | Path) -> None:
    with Path(path).open("w", newline="", encoding="utf-8") as handle:
        writer = csv.writer(handle)
        writer.writerow(GRADES_CSV_COLUMNS)
        for record in records:
            writer.writerow((record.student_id, record.letter))


def read_schedule_csv(path: str | Path) -> list[datetime]:
    """Read lecture window ends; indices must run 1..L and ends must strictly increase."""
    path = Path(path)
    ends: list[datetime] = []
    with path.open(newline="", encoding="utf-8") as handle:
        reader = csv.reader(handle)
        _check_header(next(reader, None), SCHEDULE_CSV_COLUMNS, path)
        for line_number, row in enumerate(reader, start=2):
            if not row or all(not cell.strip() for cell in row):
                continue
            try:
                index = int(row[0])
                end = parse_rfc3339(row[1])
            except (ValueError, IndexError) as exc:
                raise IngestError(f"{path}: line {line_number}: {exc}") from None
            if index != len(ends) + 1:
                raise IngestError(f"{path}: line {line_number}: lecture_index {index} out of order (expected {len(ends) + 1})")
            if ends and end <= ends[-1]:
                raise IngestError(f"{path}: line {line_number}: window_end not strictly increasing")
            ends.append(end)
    if not ends:
        raise EmptyInputError(f"{path}: no schedule rows")
    return ends


def write_schedule_csv(window_ends: Sequence[datetime], path: str | Path) -> None:
    with Path(path).open("w", newline="", encoding="utf-8") as handle:
        writer = csv.writer(handle)
        writer.writerow(SCHEDULE_CSV_COLUMNS)
        for index, end in enumerate(window_ends, start=1):
            writer.writerow((index, format_rfc3339(end)))


@dataclass(frozen=True)
class GradeScoring:
    """Conversion of the five-level grade scale to regression scores.

    ``counts`` are the per-grade student counts in ascending grade order
    (F, D, C, B, A) and ``total`` is the client's student headcount. The score
    for grade m is ``max_score * cumulative_count(m) / total``. When every
    student is graded (``sum(counts) == total``) the top grade scores exactly
    ``max_score``; a larger ``total`` is accepted because published cohort
    tables may include ungraded students.
    """

    counts: tuple[int, int, int, int, int]
    total: int
    max_score: float = DEFAULT_MAX_SCORE

    def __post_init__(self) -> None:
        if len(self.counts) != 5 or any(count < 0 for count in self.counts):
            raise ValueError("counts must be five non-negative integers (F, D, C, B, A)")
        if self.total <= 0:
            raise ValueError("total student count must be positive")
        if sum(self.counts) > self.total:
            raise ValueError("grade counts exceed the total student count")
        if self.max_score <= 0:
            raise ValueError("max_score must be positive")

    @classmethod
    def from_records(cls, records: Sequence[GradeRecord], max_score: float = DEFAULT_MAX_SCORE) -> "GradeScoring":
        if not records:
            raise ValueError("cannot build a grade scoring from zero records")
        tally = Counter(record.grade for record in records)
        counts = tuple(tally.get(m, 0) for m in range(1, 6))
        return cls(counts=counts, total=len(records), max_score=max_score)

    def score_of(self, grade: int) -> float:
        if not 1 <= grade <= 5:
            raise ValueError(f"grade ordinal must be in 1..5, got {grade}")
        return self.max_score * (sum(self.counts[:grade]) / self.total)

    @property
    def scores(self) -> tuple[float, float, float, float, float]:
        return tuple(self.score_of(m) for m in range(1, 6))


def score_grades(records: Sequence[GradeRecord], max_score: float = DEFAULT_MAX_SCORE) -> dict[str, float]:
    """Score each student's grade against the cohort's own grade distribution.

    The cumulative-count rule makes scores depend on the client's distribution
    alone, so the same letter can score differently in different cohorts.
    """
    scoring = GradeScoring.from_records(records, max_score=max_score)
    return {record.student_id: scoring.score_of(record.grade) for record in records}


def label_at_risk(
    records: Sequence[GradeRecord], threshold_rank: int = DEFAULT_THRESHOLD_RANK
) -> dict[str, bool]:
    """Label every student whose grade is <= the grade at ``threshold_rank`` from the bottom.

    All students tied with the boundary grade are included, so the at-risk
    count can exceed ``threshold_rank``. If the cohort is smaller than the
    threshold everyone is labeled at-risk and a warning is logged.
    """
    if threshold_rank < 1:
        raise ValueError(f"threshold_rank must be >= 1, got {threshold_rank}")
    if not records:
        raise ValueError("cannot label an empty cohort")
    if threshold_rank > len(records):
        logger.warning(
            "threshold rank %d exceeds cohort size %d; labeling everyone at-risk",
            threshold_rank,
            len(records),
        )
        return {record.student_id: True for record in records}
    ascending = sorted(record.grade for record in records)
    boundary = ascending[threshold_rank - 1]
    return {record.student_id: record.grade <= boundary for record in records}


def truncate_events(
    records: Sequence[EventRecord], schedule: Sequence[datetime], k: int
) -> list[EventRecord]:
    """Keep only events up to the end of lecture window ``k`` (1-based)."""
    if not schedule:
        raise ValueError("schedule must contain at least one window end")
    if any(later <= earlier for earlier, later in zip(schedule, schedule[1:])):
        raise ValueError("schedule window ends must be strictly increasing")
    if not 1 <= k <= len(schedule):
        raise ValueError(f"k must be in 1..{len(schedule)}, got {k}")
    cutoff = schedule[k - 1]
    return [record for record in records if record.event_time <= cutoff]


@dataclass
class ClientDataset:
    """One course's students, feature matrix, and scored grades: the unit of federation."""

    client_id: str
    students: list[str]
    features: np.ndarray
    scored_grades: np.ndarray
    lecture_count: int

    def __post_init__(self) -> None:
        self.features = np.ascontiguousarray(self.features, dtype=np.float64)
        self.scored_grades = np.ascontiguousarray(self.scored_grades, dtype=np.float64)
        n = len(self.students)
        if len(set(self.students)) != n:
            raise ValueError(f"client {self.client_id}: duplicate student ids")
        if self.features.ndim != 2 or self.features.shape[0] != n:
            raise ValueError(
                f"client {self.client_id}: features must be an (n_students, D) matrix, got {self.features.shape}"
            )
        if self.scored_grades.shape != (n,):
            raise ValueError(f"client {self.client_id}: scored_grades must have one entry per student")
        if not np.all(np.isfinite(self.features)):
            raise ValueError(f"client {self.client_id}: features contain non-finite values")
        if not np.all(np.isfinite(self.scored_grades)) or np.any(self.scored_grades <= 0):
            raise ValueError(f"client {self.client_id}: scored grades must be finite and positive")
        if self.lecture_count < 1:
            raise ValueError(f"client {self.client_id}: lecture_count must be >= 1")

    @property
    def n_students(self) -> int:
        return len(self.students)

    @property
    def feature_dim(self) -> int:
        return int(self.features.shape[1])

    def grade_of(self, student_id: str) -> float:
        return float(self.scored_grades[self.students.index(student_id)])


def grades_by_student(records: Sequence[GradeRecord]) -> Mapping[str, int]:
    return {record.student_id: record.grade for record in records}
