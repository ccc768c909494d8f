"""Differential feature pairs within a client and per-student score reconstruction.

A client with n students yields all n(n-1) ordered pairs (i, j) with feature
difference v_i - v_j and target g_i - g_j. The regressor's pairwise outputs
p_ij are folded back into one value per student, q_i = sum over j of p_ij,
which drives the risk ranking. Pairs never cross the client boundary.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Mapping, Sequence

import numpy as np

from fedrisk.course_data import ClientDataset


class MissingPairError(KeyError):
    """A pairwise score matrix lacks an entry required by the reconstruction sum."""


@dataclass(frozen=True)
class PairSample:
    """Ordered student pair with differential features d = v_i - v_j and target e = g_i - g_j."""

    i: str
    j: str
    d: np.ndarray
    e: float


@dataclass
class PairwiseScoreMatrix:
    """Predicted difference scores p_ij for every ordered pair of a client's students."""

    scores: dict[tuple[str, str], float]

    def __getitem__(self, pair: tuple[str, str]) -> float:
        return self.scores[pair]


def ordered_pair_indices(n: int) -> np.ndarray:
    """All ordered index pairs (i, j), i != j, in row-major (i, j) order."""
    grid_i = np.repeat(np.arange(n), n)
    grid_j = np.tile(np.arange(n), n)
    keep = grid_i != grid_j
    return np.stack([grid_i[keep], grid_j[keep]], axis=1)


def make_pairs(client: ClientDataset) -> list[PairSample]:
    """Build all n(n-1) ordered differential pairs of a client.

    Pairs are emitted in row-major (i, j) order over the client's student list,
    which fixes the reduction order downstream.
    """
    n = client.n_students
    if n < 2:
        raise ValueError(f"client {client.client_id}: need at least 2 students to form pairs, have {n}")
    index_pairs = ordered_pair_indices(n)
    d, e = _differences(client, index_pairs)
    return [
        PairSample(client.students[i], client.students[j], d[row], float(e[row]))
        for row, (i, j) in enumerate(index_pairs)
    ]


def _differences(client: ClientDataset, index_pairs: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    left, right = index_pairs[:, 0], index_pairs[:, 1]
    d = client.features[left] - client.features[right]
    e = client.scored_grades[left] - client.scored_grades[right]
    return d, e


def differential_training_set(
    client: ClientDataset,
    max_pairs: int | None = None,
    seed: int | None = None,
) -> tuple[np.ndarray, np.ndarray]:
    """Stacked (X, y) arrays of differential pairs, optionally capped by sampling.

    Row order matches :func:`make_pairs` (and :func:`pair_cap` when capped), so
    training runs are reproducible.
    """
    n = client.n_students
    if n < 2:
        raise ValueError(f"client {client.client_id}: need at least 2 students to form pairs, have {n}")
    index_pairs = ordered_pair_indices(n)
    if max_pairs is not None and len(index_pairs) > max_pairs:
        if seed is None:
            raise ValueError("capping pairs requires a seed for reproducibility")
        index_pairs = _sample_pairs(n, max_pairs, seed)
    d, e = _differences(client, index_pairs)
    return d, e


def _sample_pairs(n: int, max_pairs: int, seed: int) -> np.ndarray:
    if max_pairs < n:
        raise ValueError(f"max_pairs must be >= n ({n}), got {max_pairs}")
    rng = np.random.default_rng(seed)
    flat = rng.choice(n * (n - 1), size=max_pairs, replace=False)
    flat.sort()
    left = flat // (n - 1)
    offset = flat % (n - 1)
    right = offset + (offset >= left)
    return np.stack([left, right], axis=1)


def pair_cap(client: ClientDataset, max_pairs: int, seed: int) -> list[PairSample]:
    """Uniformly sample at most ``max_pairs`` ordered pairs, deterministically by seed.

    Falls back to the complete :func:`make_pairs` output when the cap is not
    binding. Applies to training only; prediction always uses the full matrix.
    """
    n = client.n_students
    if n < 2:
        raise ValueError(f"client {client.client_id}: need at least 2 students to form pairs, have {n}")
    if max_pairs < n:
        raise ValueError(f"max_pairs must be >= n ({n}), got {max_pairs}")
    if n * (n - 1) <= max_pairs:
        return make_pairs(client)
    index_pairs = _sample_pairs(n, max_pairs, seed)
    d, e = _differences(client, index_pairs)
    return [
        PairSample(client.students[i], client.students[j], d[row], float(e[row]))
        for row, (i, j) in enumerate(index_pairs)
    ]


def individual_scores(
    scores: PairwiseScoreMatrix | Mapping[tuple[str, str], float],
    students: Sequence[str],
) -> dict[str, float]:
    """Reconstruct per-student values q_i = sum over j != i of p_ij.

    Summation runs in (i, j) lexicographic order over the given student list so
    results are bit-reproducible. A missing ordered pair raises
    :class:`MissingPairError` naming the pair.
    """
    table = scores.scores if isinstance(scores, PairwiseScoreMatrix) else scores
    result: dict[str, float] = {}
    for i in students:
        total = 0.0
        for j in students:
            if i == j:
                continue
            try:
                total += table[(i, j)]
            except KeyError:
                raise MissingPairError(f"no pairwise score for ordered pair ({i!r}, {j!r})") from None
        result[i] = total
    return result
