"""Synthetic multi-course cohorts with controllable grade signal and client shift.

The generator exists because the real dataset is private: it produces clients
whose feature distributions can be shifted apart (additive offset plus
multiplicative scale per client) while the within-client structure stays
informative, which is exactly the regime differential features target.

Feature values are snapped to a 2^-26 grid before the per-client offset is
added, so offset additions are exact in float64 and within-client differences
v_i - v_j are bit-independent of the offset.
"""

from __future__ import annotations

from dataclasses import dataclass
from datetime import datetime, timedelta, timezone
from typing import Sequence

import numpy as np

from fedrisk.course_data import (
    DEFAULT_MAX_SCORE,
    DEFAULT_OPERATIONS,
    ClientDataset,
    EventRecord,
    GradeRecord,
    GradeScoring,
)

_GRID = float(2**26)


def _snap(values: np.ndarray) -> np.ndarray:
    """Round onto the 2^-26 grid so later additions of grid values are exact."""
    return np.round(values * _GRID) / _GRID


@dataclass(frozen=True)
class SynthSpec:
    """Knobs for cohort generation; everything is deterministic given the seed."""

    n_clients: int = 12
    students_min: int = 35
    students_max: int = 175
    feature_dim: int = 100
    grade_probs: tuple = (0.15, 0.10, 0.15, 0.30, 0.30)
    signal_strength: float = 1.0
    client_shift: float = 0.0
    noise_std: float = 0.1
    max_score: float = DEFAULT_MAX_SCORE
    seed: int = 0

    def __post_init__(self) -> None:
        if self.n_clients < 1:
            raise ValueError("n_clients must be >= 1")
        if self.students_min < 1 or self.students_max < self.students_min:
            raise ValueError("students_per_client range is degenerate")
        if self.feature_dim < 1:
            raise ValueError("feature_dim must be >= 1")
        if self.signal_strength < 0 or self.client_shift < 0 or self.noise_std < 0:
            raise ValueError("signal_strength, client_shift, and noise_std must be >= 0")
        for row in self._per_client_probs():
            if len(row) != 5 or any(p < 0 for p in row):
                raise ValueError("grade probabilities must be five non-negative values per client")
            if abs(sum(row) - 1.0) > 1e-9:
                raise ValueError(f"grade probabilities must sum to 1, got {sum(row)!r}")

    def _per_client_probs(self) -> list[tuple[float, ...]]:
        first = self.grade_probs[0]
        if isinstance(first, (tuple, list)):
            rows = [tuple(float(p) for p in row) for row in self.grade_probs]
            if len(rows) != self.n_clients:
                raise ValueError(f"need grade probabilities for all {self.n_clients} clients, got {len(rows)}")
            return rows
        return [tuple(float(p) for p in self.grade_probs)] * self.n_clients


def _client_rng(seed: int, slot: int) -> np.random.Generator:
    return np.random.default_rng(np.random.SeedSequence(entropy=seed, spawn_key=(slot,)))


def _shared_structure(spec: SynthSpec) -> tuple[np.ndarray, np.ndarray]:
    rng = np.random.default_rng(np.random.SeedSequence(entropy=spec.seed, spawn_key=(10_000,)))
    base = rng.uniform(1.0, 2.0, spec.feature_dim)
    direction = rng.uniform(0.5, 1.5, spec.feature_dim)
    return base, direction


def _draw_client(
    spec: SynthSpec, slot: int, probs: tuple[float, ...], base: np.ndarray, direction: np.ndarray
) -> tuple[list[GradeRecord], np.ndarray, int]:
    rng = _client_rng(spec.seed, slot)
    n = int(rng.integers(spec.students_min, spec.students_max + 1))
    grades = rng.choice(np.arange(1, 6), size=n, p=np.asarray(probs))
    scale = float(np.exp(spec.client_shift * rng.normal()))
    offset = _snap(spec.client_shift * rng.normal(size=spec.feature_dim) * np.mean(base))
    ability = (grades - 1) / 4.0
    core = base[None, :] + spec.signal_strength * ability[:, None] * direction[None, :]
    noise = spec.noise_std * rng.normal(size=(n, spec.feature_dim))
    features = _snap(scale * core + noise) + offset[None, :]
    records = [GradeRecord(f"client-{slot:02d}-s{i:03d}", int(m)) for i, m in enumerate(grades)]
    lectures = int(rng.integers(7, 17))
    return records, features, lectures


@dataclass
class SyntheticClient:
    """A generated client dataset together with the letter grades behind it."""

    dataset: ClientDataset
    grades: list[GradeRecord]


def generate_clients(spec: SynthSpec) -> list[SyntheticClient]:
    """Generate one cohort with per-client grade scoring applied."""
    base, direction = _shared_structure(spec)
    clients: list[SyntheticClient] = []
    for slot, probs in enumerate(spec._per_client_probs()):
        records, features, lectures = _draw_client(spec, slot, probs, base, direction)
        scoring = GradeScoring.from_records(records, max_score=spec.max_score)
        dataset = ClientDataset(
            client_id=f"client-{slot:02d}",
            students=[record.student_id for record in records],
            features=features,
            scored_grades=np.array([scoring.score_of(record.grade) for record in records]),
            lecture_count=lectures,
        )
        clients.append(SyntheticClient(dataset=dataset, grades=records))
    return clients


def generate(spec: SynthSpec) -> list[ClientDataset]:
    """Generate one cohort of client datasets (see :func:`generate_clients`)."""
    return [client.dataset for client in generate_clients(spec)]


@dataclass(frozen=True)
class EventLogSpec:
    """Shape of synthetic event logs: weekly lecture windows with stationary activity."""

    lectures: int = 8
    window_days: int = 7
    start: datetime = datetime(2024, 4, 1, tzinfo=timezone.utc)
    events_per_lecture: float = 30.0
    vocab: tuple[str, ...] = DEFAULT_OPERATIONS
    n_materials: int = 5

    def __post_init__(self) -> None:
        if self.lectures < 1 or self.window_days < 1 or self.n_materials < 1:
            raise ValueError("lectures, window_days, and n_materials must be >= 1")
        if self.events_per_lecture <= 0:
            raise ValueError("events_per_lecture must be positive")
        if self.start.tzinfo is None:
            raise ValueError("start must be timezone-aware")

    def schedule(self) -> list[datetime]:
        window = timedelta(days=self.window_days)
        return [self.start + window * i for i in range(1, self.lectures + 1)]


@dataclass
class SyntheticCourse:
    """One synthetic course as raw material: logs, schedule, and grades."""

    course_id: str
    events: list[EventRecord]
    schedule: list[datetime]
    grades: list[GradeRecord]


def generate_event_cohort(spec: SynthSpec, log_spec: EventLogSpec) -> list[SyntheticCourse]:
    """Generate courses as event logs so the full ingestion/featurizer path is exercised.

    Per-student activity volume grows with the grade-linked ability and is
    scaled per client by the shift knob, but each lecture week draws from the
    same rate: activity is stationary across the course.
    """
    schedule = log_spec.schedule()
    window_seconds = log_spec.window_days * 86_400
    courses: list[SyntheticCourse] = []
    for slot, probs in enumerate(spec._per_client_probs()):
        rng = _client_rng(spec.seed, slot)
        n = int(rng.integers(spec.students_min, spec.students_max + 1))
        grades = rng.choice(np.arange(1, 6), size=n, p=np.asarray(probs))
        scale = float(np.exp(spec.client_shift * rng.normal()))
        course_id = f"course-{slot:02d}"
        records = [GradeRecord(f"{course_id}-s{i:03d}", int(m)) for i, m in enumerate(grades)]
        events: list[EventRecord] = []
        for student, grade in zip(records, grades):
            ability = (grade - 1) / 4.0
            rate = log_spec.events_per_lecture * scale * (0.25 + spec.signal_strength * ability)
            for lecture in range(log_spec.lectures):
                window_start = log_spec.start + timedelta(days=log_spec.window_days * lecture)
                count = int(rng.poisson(rate))
                seconds = rng.integers(0, window_seconds, size=count)
                operations = rng.integers(0, len(log_spec.vocab), size=count)
                materials = rng.integers(1, log_spec.n_materials + 1, size=count)
                for offset, op, material in zip(seconds, operations, materials):
                    events.append(
                        EventRecord(
                            student_id=student.student_id,
                            event_time=window_start + timedelta(seconds=int(offset)),
                            material_id=f"M{material}",
                            operation=log_spec.vocab[op],
                        )
                    )
        events.sort(key=lambda record: (record.student_id, record.event_time))
        courses.append(SyntheticCourse(course_id, events, list(schedule), records))
    return courses


def train_test_split(clients: Sequence, held_out: int = 1) -> tuple[list, list]:
    """Split a generated cohort into training clients and held-out test clients."""
    if not 0 < held_out < len(clients):
        raise ValueError(f"held_out must be in 1..{len(clients) - 1}")
    return list(clients[:-held_out]), list(clients[-held_out:])
