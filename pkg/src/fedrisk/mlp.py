"""Two-hidden-layer MLP regressor trained by mini-batch SGD on squared error.

Parameters live in one flat float64 vector in a fixed order (W1, b1, W2, b2,
W3, b3), which is the only object exchanged with the federation server.
Dropout is inverted (kept units scaled by 1/(1-rate) at train time), so
evaluation is deterministic with no rescaling.
"""

from __future__ import annotations

from dataclasses import dataclass, replace
from pathlib import Path
from typing import Mapping, Sequence

import numpy as np

from fedrisk.features import FeatureSpec, external_feature_hash

MODEL_FILE_MAGIC = "fedrisk-model v1"


class NonFiniteLossError(FloatingPointError):
    """Training produced a non-finite loss; carries the offending batch index."""

    def __init__(self, batch_index: int, loss: float):
        super().__init__(f"non-finite loss {loss!r} in batch {batch_index}")
        self.batch_index = batch_index


@dataclass(frozen=True)
class MlpConfig:
    """Architecture and training hyperparameters of the regressor."""

    input_dim: int
    hidden: tuple[int, int] = (50, 10)
    dropout_rate: float = 0.20
    learning_rate: float = 0.01
    batch_size: int = 64
    local_epochs_per_round: int = 1
    seed: int = 0

    def __post_init__(self) -> None:
        if self.input_dim < 1:
            raise ValueError("input_dim must be >= 1")
        if len(self.hidden) != 2 or any(size < 1 for size in self.hidden):
            raise ValueError("hidden must be two layer sizes >= 1")
        if not 0.0 <= self.dropout_rate < 1.0:
            raise ValueError("dropout_rate must be in [0, 1)")
        if self.learning_rate < 0:
            raise ValueError("learning_rate must be >= 0")
        if self.batch_size < 1 or self.local_epochs_per_round < 1:
            raise ValueError("batch_size and local_epochs_per_round must be >= 1")

    @property
    def layout(self) -> tuple[int, int, int]:
        return (self.input_dim, self.hidden[0], self.hidden[1])

    def param_count(self) -> int:
        d, h1, h2 = self.layout
        return d * h1 + h1 + h1 * h2 + h2 + h2 + 1


@dataclass(frozen=True)
class ModelParams:
    """Flat parameter vector plus the config that defines its layout."""

    values: np.ndarray
    config: MlpConfig

    def __post_init__(self) -> None:
        values = np.ascontiguousarray(self.values, dtype=np.float64)
        if values.shape != (self.config.param_count(),):
            raise ValueError(
                f"expected {self.config.param_count()} parameters for layout {self.config.layout}, "
                f"got {values.shape}"
            )
        if not np.all(np.isfinite(values)):
            raise ValueError("parameter vector contains non-finite values")
        values.flags.writeable = False
        object.__setattr__(self, "values", values)

    def unpack(self) -> tuple[np.ndarray, ...]:
        """Read-only (W1, b1, W2, b2, W3, b3) views into the flat vector."""
        return _unpack(self.values, self.config)


def _unpack(values: np.ndarray, config: MlpConfig) -> tuple[np.ndarray, ...]:
    d, h1, h2 = config.layout
    sizes = (d * h1, h1, h1 * h2, h2, h2, 1)
    shapes = ((h1, d), (h1,), (h2, h1), (h2,), (1, h2), (1,))
    parts = []
    offset = 0
    for size, shape in zip(sizes, shapes):
        parts.append(values[offset : offset + size].reshape(shape))
        offset += size
    return tuple(parts)


def init_params(config: MlpConfig) -> ModelParams:
    """He-style initialization: weights ~ N(0, 2/fan_in), biases zero, seeded."""
    rng = np.random.default_rng(config.seed)
    d, h1, h2 = config.layout
    values = np.zeros(config.param_count(), dtype=np.float64)
    w1, b1, w2, b2, w3, b3 = _unpack(values, config)
    w1[:] = rng.normal(0.0, np.sqrt(2.0 / d), size=w1.shape)
    w2[:] = rng.normal(0.0, np.sqrt(2.0 / h1), size=w2.shape)
    w3[:] = rng.normal(0.0, np.sqrt(2.0 / h2), size=w3.shape)
    return ModelParams(values, config)


def _inverted_dropout(pre_activation: np.ndarray, rate: float, rng: np.random.Generator) -> np.ndarray:
    """Zero units with probability ``rate`` and scale survivors by 1/(1-rate)."""
    if rate == 0.0:
        return pre_activation
    keep = 1.0 - rate
    mask = (rng.random(pre_activation.shape) >= rate) / keep
    return pre_activation * mask


def forward(
    params: ModelParams,
    x: np.ndarray | Sequence[float],
    mode: str = "eval",
    rng: np.random.Generator | None = None,
) -> float:
    """Run one input through the network; train mode applies inverted dropout."""
    if mode not in ("train", "eval"):
        raise ValueError(f"mode must be 'train' or 'eval', got {mode!r}")
    x = np.asarray(x, dtype=np.float64)
    if x.shape != (params.config.input_dim,):
        raise ValueError(f"input must have shape ({params.config.input_dim},), got {x.shape}")
    train = mode == "train"
    if train and params.config.dropout_rate > 0 and rng is None:
        raise ValueError("train-mode forward with dropout requires an rng")
    w1, b1, w2, b2, w3, b3 = params.unpack()
    z1 = w1 @ x + b1
    if train:
        z1 = _inverted_dropout(z1, params.config.dropout_rate, rng)
    a1 = np.maximum(z1, 0.0)
    z2 = w2 @ a1 + b2
    if train:
        z2 = _inverted_dropout(z2, params.config.dropout_rate, rng)
    a2 = np.maximum(z2, 0.0)
    return float(w3 @ a2 + b3)


def predict_batch(params: ModelParams, inputs: Sequence[np.ndarray] | np.ndarray) -> np.ndarray:
    """Deterministic eval-mode prediction, one forward pass per row."""
    return np.array([forward(params, row) for row in inputs], dtype=np.float64)


def _batch_forward(
    values: np.ndarray,
    x: np.ndarray,
    config: MlpConfig,
    masks: tuple[np.ndarray, np.ndarray] | None,
) -> tuple[np.ndarray, tuple]:
    w1, b1, w2, b2, w3, b3 = _unpack(values, config)
    z1 = x @ w1.T + b1
    d1 = z1 * masks[0] if masks else z1
    a1 = np.maximum(d1, 0.0)
    z2 = a1 @ w2.T + b2
    d2 = z2 * masks[1] if masks else z2
    a2 = np.maximum(d2, 0.0)
    predicted = (a2 @ w3.T + b3)[:, 0]
    return predicted, (x, d1, a1, d2, a2, w2, w3)


def _loss_and_gradient(
    values: np.ndarray,
    x: np.ndarray,
    y: np.ndarray,
    config: MlpConfig,
    masks: tuple[np.ndarray, np.ndarray] | None,
) -> tuple[float, np.ndarray]:
    """Mean squared error over the batch and its gradient as a flat vector."""
    predicted, cache = _batch_forward(values, x, config, masks)
    xb, d1, a1, d2, a2, w2, w3 = cache
    residual = predicted - y
    loss = float(np.mean(residual**2))

    batch = len(y)
    g_pred = (2.0 / batch) * residual
    grad = np.zeros_like(values)
    g_w1, g_b1, g_w2, g_b2, g_w3, g_b3 = _unpack(grad, config)

    g_w3[:] = g_pred @ a2
    g_b3[:] = g_pred.sum()
    g_a2 = np.outer(g_pred, w3[0])
    g_d2 = g_a2 * (d2 > 0.0)
    g_z2 = g_d2 * masks[1] if masks else g_d2
    g_w2[:] = g_z2.T @ a1
    g_b2[:] = g_z2.sum(axis=0)
    g_a1 = g_z2 @ w2
    g_d1 = g_a1 * (d1 > 0.0)
    g_z1 = g_d1 * masks[0] if masks else g_d1
    g_w1[:] = g_z1.T @ xb
    g_b1[:] = g_z1.sum(axis=0)
    return loss, grad


def mse_loss(params: ModelParams, inputs: np.ndarray, targets: np.ndarray) -> float:
    """Eval-mode mean squared error of the model on a dataset."""
    x = np.asarray(inputs, dtype=np.float64)
    y = np.asarray(targets, dtype=np.float64)
    predicted, _ = _batch_forward(params.values, x, params.config, masks=None)
    return float(np.mean((predicted - y) ** 2))


def _draw_masks(
    rng: np.random.Generator, batch: int, config: MlpConfig
) -> tuple[np.ndarray, np.ndarray] | None:
    if config.dropout_rate == 0.0:
        return None
    keep = 1.0 - config.dropout_rate
    mask1 = (rng.random((batch, config.hidden[0])) >= config.dropout_rate) / keep
    mask2 = (rng.random((batch, config.hidden[1])) >= config.dropout_rate) / keep
    return mask1, mask2


def train_epoch(
    params: ModelParams,
    inputs: np.ndarray,
    targets: np.ndarray,
    config: MlpConfig | None = None,
    rng: np.random.Generator | int | None = None,
) -> tuple[ModelParams, float]:
    """One pass of mini-batch SGD on mean squared error.

    Batches come from a seeded shuffle; the final short batch is kept. The
    input params are untouched; returns the updated params and the mean
    per-sample squared error observed over the epoch. Raises
    :class:`NonFiniteLossError` (with the batch index) if the loss diverges.
    """
    config = config or params.config
    if config.layout != params.config.layout:
        raise ValueError(f"config layout {config.layout} does not match params layout {params.config.layout}")
    if isinstance(rng, int) or rng is None:
        rng = np.random.default_rng(config.seed if rng is None else rng)
    x = np.asarray(inputs, dtype=np.float64)
    y = np.asarray(targets, dtype=np.float64)
    if x.ndim != 2 or x.shape[1] != config.input_dim:
        raise ValueError(f"inputs must be (n, {config.input_dim}), got {x.shape}")
    if y.shape != (x.shape[0],):
        raise ValueError("targets must be a vector with one entry per input row")
    if len(y) == 0:
        raise ValueError("cannot train on an empty sample set")

    values = params.values.copy()
    order = rng.permutation(len(y))
    squared_error_total = 0.0
    for batch_index, start in enumerate(range(0, len(y), config.batch_size)):
        chosen = order[start : start + config.batch_size]
        masks = _draw_masks(rng, len(chosen), config)
        loss, grad = _loss_and_gradient(values, x[chosen], y[chosen], config, masks)
        if not np.isfinite(loss):
            raise NonFiniteLossError(batch_index, loss)
        values -= config.learning_rate * grad
        squared_error_total += loss * len(chosen)
    return ModelParams(values, params.config), squared_error_total / len(y)


@dataclass(frozen=True)
class LoadedModel:
    params: ModelParams
    feature_hash: str
    feature_spec: FeatureSpec | None
    extras: dict[str, str]


def save_model(
    params: ModelParams,
    path: str | Path,
    feature_spec: FeatureSpec | None = None,
    feature_hash: str | None = None,
    extras: Mapping[str, str] | None = None,
) -> None:
    """Write the flat parameter vector with a header that pins its input contract.

    The header records the layout and a hash of the feature source, so a
    loaded model can refuse incompatible inputs. ``repr`` round-trips floats
    exactly.
    """
    if feature_spec is not None:
        if any("|" in op or "," in op for op in feature_spec.vocab):
            raise ValueError("vocabulary operations must not contain '|' or ','")
        if feature_spec.dimension != params.config.input_dim:
            raise ValueError(
                f"feature spec dimension {feature_spec.dimension} does not match "
                f"model input_dim {params.config.input_dim}"
            )
        feature_hash = feature_spec.content_hash()
    elif feature_hash is None:
        feature_hash = external_feature_hash(params.config.input_dim)
    config = params.config
    lines = [
        MODEL_FILE_MAGIC,
        f"input_dim,{config.input_dim}",
        f"hidden,{config.hidden[0]},{config.hidden[1]}",
        f"dropout_rate,{config.dropout_rate!r}",
        f"learning_rate,{config.learning_rate!r}",
        f"batch_size,{config.batch_size}",
        f"local_epochs_per_round,{config.local_epochs_per_round}",
        f"seed,{config.seed}",
        f"feature_hash,{feature_hash}",
    ]
    if feature_spec is not None:
        lines.append("feature_vocab," + "|".join(feature_spec.vocab))
        lines.append(f"feature_n_buckets,{feature_spec.n_buckets}")
    for key in sorted(extras or {}):
        if "," in key:
            raise ValueError(f"extra header key must not contain commas: {key!r}")
        lines.append(f"x_{key},{extras[key]}")
    lines.append(f"n_values,{len(params.values)}")
    lines.extend(repr(float(value)) for value in params.values)
    Path(path).write_text("\n".join(lines) + "\n", encoding="utf-8")


def load_model(path: str | Path) -> LoadedModel:
    path = Path(path)
    lines = path.read_text(encoding="utf-8").splitlines()
    if not lines or lines[0] != MODEL_FILE_MAGIC:
        raise ValueError(f"{path}: not a {MODEL_FILE_MAGIC!r} file")
    header: dict[str, str] = {}
    cursor = 1
    while cursor < len(lines):
        key, _, value = lines[cursor].partition(",")
        header[key] = value
        cursor += 1
        if key == "n_values":
            break
    try:
        hidden_parts = header["hidden"].split(",")
        config = MlpConfig(
            input_dim=int(header["input_dim"]),
            hidden=(int(hidden_parts[0]), int(hidden_parts[1])),
            dropout_rate=float(header["dropout_rate"]),
            learning_rate=float(header["learning_rate"]),
            batch_size=int(header["batch_size"]),
            local_epochs_per_round=int(header["local_epochs_per_round"]),
            seed=int(header["seed"]),
        )
        n_values = int(header["n_values"])
        feature_hash = header["feature_hash"]
    except (KeyError, ValueError, IndexError) as exc:
        raise ValueError(f"{path}: malformed model header ({exc})") from None
    value_lines = lines[cursor : cursor + n_values]
    if len(value_lines) != n_values:
        raise ValueError(f"{path}: expected {n_values} parameter lines, found {len(value_lines)}")
    values = np.array([float(line) for line in value_lines], dtype=np.float64)
    params = ModelParams(values, config)
    feature_spec = None
    if "feature_vocab" in header:
        feature_spec = FeatureSpec(
            vocab=tuple(header["feature_vocab"].split("|")),
            n_buckets=int(header.get("feature_n_buckets", "4")),
        )
    extras = {key[2:]: value for key, value in header.items() if key.startswith("x_")}
    return LoadedModel(params=params, feature_hash=feature_hash, feature_spec=feature_spec, extras=extras)


def with_seed(config: MlpConfig, seed: int) -> MlpConfig:
    return replace(config, seed=seed)
