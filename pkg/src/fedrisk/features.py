"""Count-based activity features: operation-by-time-bucket histograms per student.

Vectors are intentionally NOT normalized, so total activity volume stays in
the representation. The layout is operation-major: entry ``op_index *
n_buckets + bucket`` counts events of that operation inside that bucket.
Externally computed representations with the same dimension can be swapped in
via the feature CSV interface.
"""

from __future__ import annotations

import csv
import hashlib
import json
from dataclasses import dataclass
from datetime import datetime
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np

from fedrisk.course_data import EmptyInputError, EventRecord, IngestError


@dataclass(frozen=True)
class FeatureSpec:
    """Fixed operation vocabulary and time bucketing that define the feature layout."""

    vocab: tuple[str, ...]
    n_buckets: int = 4

    def __post_init__(self) -> None:
        if not self.vocab:
            raise ValueError("feature vocabulary must not be empty")
        if len(set(self.vocab)) != len(self.vocab):
            raise ValueError("feature vocabulary contains duplicates")
        if self.n_buckets < 1:
            raise ValueError("n_buckets must be >= 1")

    @property
    def dimension(self) -> int:
        return len(self.vocab) * self.n_buckets

    def index_of(self, operation: str, bucket: int) -> int:
        return self.vocab.index(operation) * self.n_buckets + bucket

    def content_hash(self) -> str:
        payload = json.dumps({"vocab": list(self.vocab), "n_buckets": self.n_buckets}, separators=(",", ":"))
        return hashlib.sha256(payload.encode("utf-8")).hexdigest()[:16]


def external_feature_hash(dimension: int) -> str:
    """Compatibility tag for models trained on features not built by this module."""
    return f"external-{dimension}"


def featurize(
    events: Sequence[EventRecord],
    spec: FeatureSpec,
    course_span: tuple[datetime, datetime],
    students: Iterable[str] | None = None,
) -> dict[str, np.ndarray]:
    """Count each student's events per (operation, time bucket) over ``course_span``.

    Buckets are equal subdivisions of the span; the final bucket includes the
    span end. Students passed via ``students`` appear in the output even with
    zero events. Events outside the span or with operations missing from the
    vocabulary are contract violations and raise ``ValueError``.
    """
    start, end = course_span
    if end <= start:
        raise ValueError("course_span end must be after its start")
    op_index = {operation: i for i, operation in enumerate(spec.vocab)}
    width = (end - start) / spec.n_buckets
    vectors: dict[str, np.ndarray] = {
        student: np.zeros(spec.dimension, dtype=np.float64) for student in (students or ())
    }
    for event in events:
        if not start <= event.event_time <= end:
            raise ValueError(
                f"event at {event.event_time.isoformat()} falls outside the course span"
            )
        try:
            op = op_index[event.operation]
        except KeyError:
            raise ValueError(f"operation {event.operation!r} is not in the feature vocabulary") from None
        bucket = min(int((event.event_time - start) / width), spec.n_buckets - 1)
        vector = vectors.get(event.student_id)
        if vector is None:
            vector = np.zeros(spec.dimension, dtype=np.float64)
            vectors[event.student_id] = vector
        vector[op * spec.n_buckets + bucket] += 1.0
    return vectors


FEATURE_ID_COLUMN = "student_id"


def write_features_csv(features: dict[str, np.ndarray], path: str | Path) -> None:
    """Write per-student vectors as ``student_id, f_0 .. f_{D-1}`` rows."""
    if not features:
        raise ValueError("no feature vectors to write")
    dimension = len(next(iter(features.values())))
    with Path(path).open("w", newline="", encoding="utf-8") as handle:
        writer = csv.writer(handle)
        writer.writerow([FEATURE_ID_COLUMN] + [f"f_{i}" for i in range(dimension)])
        for student in sorted(features):
            vector = features[student]
            if len(vector) != dimension:
                raise ValueError(f"inconsistent feature dimension for student {student!r}")
            writer.writerow([student] + [repr(float(value)) for value in vector])


def read_features_csv(path: str | Path) -> dict[str, np.ndarray]:
    path = Path(path)
    features: dict[str, np.ndarray] = {}
    with path.open(newline="", encoding="utf-8") as handle:
        reader = csv.reader(handle)
        header = next(reader, None)
        if header is None:
            raise EmptyInputError(f"{path}: file is empty")
        if header[0].strip() != FEATURE_ID_COLUMN or len(header) < 2:
            raise IngestError(f"{path}: expected header '{FEATURE_ID_COLUMN},f_0,...'")
        dimension = len(header) - 1
        for line_number, row in enumerate(reader, start=2):
            if not row or all(not cell.strip() for cell in row):
                continue
            if len(row) != dimension + 1:
                raise IngestError(f"{path}: line {line_number}: expected {dimension + 1} columns, got {len(row)}")
            student = row[0].strip()
            if student in features:
                raise IngestError(f"{path}: line {line_number}: duplicate student {student!r}")
            try:
                features[student] = np.array([float(cell) for cell in row[1:]], dtype=np.float64)
            except ValueError:
                raise IngestError(f"{path}: line {line_number}: non-numeric feature value") from None
    if not features:
        raise EmptyInputError(f"{path}: no feature rows")
    return features
