"""Simulated server/client federation rounds with FedAvg, plus the centralized baseline.

The server side only ever sees opaque training endpoints: objects exposing a
client id and ``train_round(params) -> ClientUpdate``. Raw features and grades
stay inside :class:`LocalTrainingClient`, which mimics a remote boundary
in-process. Aggregation weights are sample counts, which in differential mode
are pair counts n(n-1), not student counts.
"""

from __future__ import annotations

import time
from dataclasses import asdict, dataclass, field, replace
from typing import Callable, Mapping, Protocol, Sequence, runtime_checkable

import numpy as np

from fedrisk.course_data import ClientDataset
from fedrisk.mlp import MlpConfig, ModelParams, init_params, train_epoch
from fedrisk.pairs import differential_training_set

FEDERATED = "federated"
CENTRALIZED = "centralized"

# MlpConfig fields a per-client override may change; layout fields are fixed
# by the shared model and cannot vary across clients.
_OVERRIDABLE = {"dropout_rate", "learning_rate", "batch_size", "local_epochs_per_round", "seed"}


class LayoutMismatchError(ValueError):
    """Client updates whose parameter layouts disagree; names the clients."""


@dataclass(frozen=True)
class FederationConfig:
    """Settings for one training run (federated or centralized)."""

    rounds: int = 100
    mode: str = FEDERATED
    use_differential: bool = True
    seed: int = 0
    mlp: MlpConfig | None = None
    max_pairs_per_client: int | None = None
    client_overrides: Mapping[str, Mapping[str, object]] = field(default_factory=dict)

    def __post_init__(self) -> None:
        if self.rounds < 1:
            raise ValueError("rounds must be >= 1")
        if self.mode not in (FEDERATED, CENTRALIZED):
            raise ValueError(f"mode must be '{FEDERATED}' or '{CENTRALIZED}', got {self.mode!r}")
        for client_id, overrides in self.client_overrides.items():
            unknown = set(overrides) - _OVERRIDABLE
            if unknown:
                raise ValueError(f"client {client_id!r}: cannot override {sorted(unknown)}")


@dataclass(frozen=True)
class ClientUpdate:
    """What a client sends back after local training: parameters, sample count, loss."""

    client_id: str
    params: ModelParams
    sample_count: int
    train_loss: float


@dataclass(frozen=True)
class FederationRound:
    """One aggregation step: broadcast params, collected updates, aggregated result."""

    round_index: int
    incoming: ModelParams
    client_updates: tuple[ClientUpdate, ...]
    outgoing: ModelParams


@runtime_checkable
class TrainingClient(Protocol):
    """The only surface the server may touch: an id and a train-round call."""

    @property
    def client_id(self) -> str: ...

    def train_round(self, params: ModelParams) -> ClientUpdate: ...


class LocalTrainingClient:
    """In-process stand-in for a remote client; owns its data privately.

    The training set (differential pairs or raw feature/score rows) is built
    once at construction. Only :class:`ClientUpdate` values leave this object.
    """

    def __init__(
        self,
        dataset: ClientDataset,
        mlp_config: MlpConfig,
        use_differential: bool,
        rng: np.random.Generator,
        max_pairs: int | None = None,
        pair_seed: int | None = None,
    ):
        self._client_id = dataset.client_id
        self._config = mlp_config
        self._rng = rng
        if use_differential:
            self._x, self._y = differential_training_set(dataset, max_pairs, pair_seed)
        else:
            self._x, self._y = dataset.features, dataset.scored_grades

    @property
    def client_id(self) -> str:
        return self._client_id

    def train_round(self, params: ModelParams) -> ClientUpdate:
        losses = []
        for _ in range(self._config.local_epochs_per_round):
            params, loss = train_epoch(params, self._x, self._y, self._config, self._rng)
            losses.append(loss)
        return ClientUpdate(
            client_id=self._client_id,
            params=params,
            sample_count=len(self._y),
            train_loss=float(np.mean(losses)),
        )


@dataclass
class TrainingRunReport:
    """Outcome of one run: per-round weighted loss, final params, timing, config echo."""

    mode: str
    losses: list[float]
    final_params: ModelParams
    wall_clock_seconds: float
    sample_counts: dict[str, int]
    config_echo: dict

    def to_json_dict(self) -> dict:
        return {
            "mode": self.mode,
            "config": self.config_echo,
            "sample_counts": self.sample_counts,
            "round_losses": self.losses,
        }


def fedavg(
    updates: Sequence[ClientUpdate] | Sequence[tuple[ModelParams, int]],
) -> ModelParams:
    """Sample-count-weighted average of client parameter vectors, in client order."""
    if not updates:
        raise ValueError("fedavg needs at least one client update")
    normalized: list[tuple[str, ModelParams, int]] = []
    for position, update in enumerate(updates):
        if isinstance(update, ClientUpdate):
            normalized.append((update.client_id, update.params, update.sample_count))
        else:
            params, count = update
            normalized.append((f"client[{position}]", params, count))
    reference = normalized[0][1].config.layout
    mismatched = [name for name, params, _ in normalized if params.config.layout != reference]
    if mismatched:
        raise LayoutMismatchError(f"parameter layouts differ from {reference} for clients: {mismatched}")
    for name, _, count in normalized:
        if count < 1:
            raise ValueError(f"client {name!r} reported a non-positive sample count {count}")
    if len(normalized) == 1:
        return normalized[0][1]
    total = sum(count for _, _, count in normalized)
    merged = np.zeros_like(normalized[0][1].values)
    for _, params, count in normalized:
        merged += (count / total) * params.values
    return ModelParams(merged, normalized[0][1].config)


def _stream_rng(seed: int, *key: int) -> np.random.Generator:
    return np.random.default_rng(np.random.SeedSequence(entropy=seed, spawn_key=key))


def _derived_int(seed: int, *key: int) -> int:
    return int(np.random.SeedSequence(entropy=seed, spawn_key=key).generate_state(1)[0])


def _client_mlp_config(base: MlpConfig, overrides: Mapping[str, object]) -> MlpConfig:
    filtered = {key: value for key, value in overrides.items() if key != "seed"}
    return replace(base, **filtered) if filtered else base


def _client_rng(config: FederationConfig, client_id: str, slot: int) -> np.random.Generator:
    overrides = config.client_overrides.get(client_id, {})
    if "seed" in overrides:
        return np.random.default_rng(int(overrides["seed"]))
    return _stream_rng(config.seed, 1, slot)


def _resolve_mlp(clients: Sequence[ClientDataset], config: FederationConfig) -> MlpConfig:
    dims = {client.feature_dim for client in clients}
    if len(dims) != 1:
        raise ValueError(f"clients disagree on feature dimension: {sorted(dims)}")
    (dim,) = dims
    mlp = config.mlp or MlpConfig(input_dim=dim)
    if mlp.input_dim != dim:
        raise ValueError(f"model input_dim {mlp.input_dim} does not match data dimension {dim}")
    return mlp


def _validate_clients(clients: Sequence[ClientDataset], config: FederationConfig) -> None:
    if not clients:
        raise ValueError("need at least one client")
    ids = [client.client_id for client in clients]
    if len(set(ids)) != len(ids):
        raise ValueError("client ids must be unique")
    if config.use_differential:
        small = [client.client_id for client in clients if client.n_students < 2]
        if small:
            raise ValueError(f"differential features need >= 2 students; too small: {small}")


def _config_echo(config: FederationConfig, mlp: MlpConfig) -> dict:
    echo = asdict(replace(config, mlp=None))
    echo.pop("mlp")
    echo["client_overrides"] = {k: dict(v) for k, v in config.client_overrides.items()}
    echo["mlp"] = asdict(mlp)
    echo["mlp"]["hidden"] = list(mlp.hidden)
    return echo


def run_federated_endpoints(
    endpoints: Sequence[TrainingClient],
    config: FederationConfig,
    mlp: MlpConfig,
    round_hook: Callable[[FederationRound], None] | None = None,
) -> TrainingRunReport:
    """Drive the round protocol against opaque endpoints: broadcast, train, aggregate.

    This is the privacy seam: the loop body only calls ``train_round`` and
    reads the returned updates, so nothing here can reach raw client data.
    """
    if not endpoints:
        raise ValueError("need at least one training endpoint")
    started = time.perf_counter()
    params = init_params(replace(mlp, seed=config.seed))
    losses: list[float] = []
    sample_counts: dict[str, int] = {}
    for round_index in range(1, config.rounds + 1):
        updates = []
        for endpoint in endpoints:
            try:
                updates.append(endpoint.train_round(params))
            except Exception as exc:
                raise RuntimeError(f"client {endpoint.client_id!r} failed in round {round_index}: {exc}") from exc
        merged = fedavg(updates)
        if round_hook is not None:
            round_hook(FederationRound(round_index, params, tuple(updates), merged))
        params = merged
        total = sum(update.sample_count for update in updates)
        losses.append(sum(update.sample_count / total * update.train_loss for update in updates))
        sample_counts = {update.client_id: update.sample_count for update in updates}
    return TrainingRunReport(
        mode=FEDERATED,
        losses=losses,
        final_params=params,
        wall_clock_seconds=time.perf_counter() - started,
        sample_counts=sample_counts,
        config_echo=_config_echo(config, mlp),
    )


def local_endpoints(
    clients: Sequence[ClientDataset], config: FederationConfig, mlp: MlpConfig
) -> list[LocalTrainingClient]:
    endpoints = []
    for slot, dataset in enumerate(clients):
        endpoints.append(
            LocalTrainingClient(
                dataset=dataset,
                mlp_config=_client_mlp_config(mlp, config.client_overrides.get(dataset.client_id, {})),
                use_differential=config.use_differential,
                rng=_client_rng(config, dataset.client_id, slot),
                max_pairs=config.max_pairs_per_client,
                pair_seed=_derived_int(config.seed, 2, slot),
            )
        )
    return endpoints


def run_federated(
    clients: Sequence[ClientDataset],
    config: FederationConfig,
    round_hook: Callable[[FederationRound], None] | None = None,
) -> TrainingRunReport:
    """FedAvg training over in-process clients built from the given datasets."""
    _validate_clients(clients, config)
    mlp = _resolve_mlp(clients, config)
    return run_federated_endpoints(local_endpoints(clients, config, mlp), config, mlp, round_hook)


def run_centralized(clients: Sequence[ClientDataset], config: FederationConfig) -> TrainingRunReport:
    """Baseline: pool every client's training samples and train in one place.

    Differential pairs are still built within each source client before
    pooling; pairs never cross clients. The batch-shuffle stream matches
    client slot 0's, which makes a single-client federated run bit-identical
    to this baseline under the same seed.
    """
    _validate_clients(clients, config)
    mlp = _resolve_mlp(clients, config)
    started = time.perf_counter()
    blocks_x, blocks_y, sample_counts = [], [], {}
    for slot, dataset in enumerate(clients):
        if config.use_differential:
            x, y = differential_training_set(
                dataset, config.max_pairs_per_client, _derived_int(config.seed, 2, slot)
            )
        else:
            x, y = dataset.features, dataset.scored_grades
        blocks_x.append(x)
        blocks_y.append(y)
        sample_counts[dataset.client_id] = len(y)
    pooled_x = np.concatenate(blocks_x, axis=0)
    pooled_y = np.concatenate(blocks_y, axis=0)
    rng = _stream_rng(config.seed, 1, 0)
    params = init_params(replace(mlp, seed=config.seed))
    losses: list[float] = []
    for _ in range(config.rounds):
        epoch_losses = []
        for _ in range(mlp.local_epochs_per_round):
            params, loss = train_epoch(params, pooled_x, pooled_y, mlp, rng)
            epoch_losses.append(loss)
        losses.append(float(np.mean(epoch_losses)))
    return TrainingRunReport(
        mode=CENTRALIZED,
        losses=losses,
        final_params=params,
        wall_clock_seconds=time.perf_counter() - started,
        sample_counts=sample_counts,
        config_echo=_config_echo(config, mlp),
    )


def run_training(clients: Sequence[ClientDataset], config: FederationConfig) -> TrainingRunReport:
    """Dispatch on ``config.mode``."""
    if config.mode == CENTRALIZED:
        return run_centralized(clients, config)
    return run_federated(clients, config)
