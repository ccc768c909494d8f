"""Experiment config files: one JSON document drives a whole run matrix.

The schema is documented in the README. A config names the data source
(synthetic spec, client file list, or a manifest written by ``generate``),
the model hyperparameters, and the experiment matrix (modes x differential
flag x repeated runs).
"""

from __future__ import annotations

import json
from dataclasses import dataclass
from datetime import datetime, timezone
from pathlib import Path
from typing import Any, Sequence

from fedrisk.course_data import DEFAULT_OPERATIONS, DEFAULT_THRESHOLD_RANK, OTHER_OPERATION
from fedrisk.features import FeatureSpec
from fedrisk.federation import CENTRALIZED, FEDERATED, FederationConfig
from fedrisk.mlp import MlpConfig
from fedrisk.synth import EventLogSpec, SynthSpec


class ConfigError(ValueError):
    """A malformed or inconsistent experiment config."""


DEFAULT_FEATURE_SPEC = FeatureSpec(vocab=DEFAULT_OPERATIONS + (OTHER_OPERATION,), n_buckets=4)

_TOP_LEVEL_KEYS = {
    "seed",
    "rounds",
    "modes",
    "differential",
    "runs",
    "threshold_rank",
    "max_pairs_per_client",
    "mlp",
    "client_overrides",
    "data",
}
_MLP_KEYS = {"hidden", "dropout_rate", "learning_rate", "batch_size", "local_epochs_per_round"}
_DATA_KEYS = {"synthetic", "clients", "test", "manifest", "featurizer"}
_SYNTH_KEYS = {
    "n_clients",
    "students_min",
    "students_max",
    "feature_dim",
    "grade_probs",
    "signal_strength",
    "client_shift",
    "noise_std",
    "max_score",
    "seed",
    "held_out",
    "logs",
}
_LOG_KEYS = {"lectures", "window_days", "start", "events_per_lecture", "vocab", "n_materials"}
_CLIENT_ENTRY_KEYS = {"course", "grades", "features", "events", "schedule"}


def _reject_unknown(section: dict, allowed: set[str], where: str) -> None:
    unknown = set(section) - allowed
    if unknown:
        raise ConfigError(f"{where}: unknown keys {sorted(unknown)}")


def load_config(path: str | Path) -> dict:
    path = Path(path)
    if not path.exists():
        raise ConfigError(f"config file not found: {path}")
    try:
        config = json.loads(path.read_text(encoding="utf-8"))
    except json.JSONDecodeError as exc:
        raise ConfigError(f"{path}: invalid JSON ({exc})") from None
    if not isinstance(config, dict):
        raise ConfigError(f"{path}: config must be a JSON object")
    _reject_unknown(config, _TOP_LEVEL_KEYS, str(path))
    if "mlp" in config:
        _reject_unknown(config["mlp"], _MLP_KEYS, f"{path}: mlp")
    data = config.get("data", {})
    _reject_unknown(data, _DATA_KEYS, f"{path}: data")
    if "synthetic" in data:
        _reject_unknown(data["synthetic"], _SYNTH_KEYS, f"{path}: data.synthetic")
        if "logs" in data["synthetic"]:
            _reject_unknown(data["synthetic"]["logs"], _LOG_KEYS, f"{path}: data.synthetic.logs")
    for entry in data.get("clients", []) + data.get("test", []):
        _reject_unknown(entry, _CLIENT_ENTRY_KEYS, f"{path}: data client entry")
    return config


def modes_from(config: dict) -> list[str]:
    modes = config.get("modes", [FEDERATED])
    if isinstance(modes, str):
        modes = [modes]
    for mode in modes:
        if mode not in (FEDERATED, CENTRALIZED):
            raise ConfigError(f"unknown mode {mode!r}")
    return list(modes)


def differential_flags_from(config: dict) -> list[bool]:
    flags = config.get("differential", [True])
    if isinstance(flags, bool):
        flags = [flags]
    return [bool(flag) for flag in flags]


def mlp_config_from(config: dict, input_dim: int) -> MlpConfig:
    section = dict(config.get("mlp", {}))
    hidden = section.pop("hidden", (50, 10))
    try:
        return MlpConfig(input_dim=input_dim, hidden=tuple(int(h) for h in hidden), **section)
    except (TypeError, ValueError) as exc:
        raise ConfigError(f"bad mlp section: {exc}") from None


def federation_config_from(
    config: dict, mode: str, use_differential: bool, run_index: int, mlp: MlpConfig
) -> FederationConfig:
    try:
        return FederationConfig(
            rounds=int(config.get("rounds", 100)),
            mode=mode,
            use_differential=use_differential,
            seed=int(config.get("seed", 0)) + run_index,
            mlp=mlp,
            max_pairs_per_client=config.get("max_pairs_per_client"),
            client_overrides=config.get("client_overrides", {}),
        )
    except (TypeError, ValueError) as exc:
        raise ConfigError(f"bad federation settings: {exc}") from None


def synth_spec_from(config: dict) -> SynthSpec:
    section = config.get("data", {}).get("synthetic")
    if section is None:
        raise ConfigError("config has no data.synthetic section")
    fields = {key: value for key, value in section.items() if key not in ("held_out", "logs")}
    if "grade_probs" in fields:
        probs = fields["grade_probs"]
        fields["grade_probs"] = (
            tuple(tuple(row) for row in probs) if probs and isinstance(probs[0], list) else tuple(probs)
        )
    try:
        return SynthSpec(**fields)
    except (TypeError, ValueError) as exc:
        raise ConfigError(f"bad data.synthetic section: {exc}") from None


def log_spec_from(config: dict) -> EventLogSpec | None:
    section = config.get("data", {}).get("synthetic", {}).get("logs")
    if section is None:
        return None
    fields = dict(section)
    if "start" in fields:
        fields["start"] = datetime.fromisoformat(fields["start"].replace("Z", "+00:00"))
        if fields["start"].tzinfo is None:
            fields["start"] = fields["start"].replace(tzinfo=timezone.utc)
    if "vocab" in fields:
        fields["vocab"] = tuple(fields["vocab"])
    try:
        return EventLogSpec(**fields)
    except (TypeError, ValueError) as exc:
        raise ConfigError(f"bad data.synthetic.logs section: {exc}") from None


def feature_spec_from(config: dict) -> FeatureSpec:
    section = config.get("data", {}).get("featurizer")
    if section is None:
        return DEFAULT_FEATURE_SPEC
    try:
        return FeatureSpec(vocab=tuple(section["vocab"]), n_buckets=int(section.get("n_buckets", 4)))
    except (KeyError, TypeError, ValueError) as exc:
        raise ConfigError(f"bad data.featurizer section: {exc}") from None


def threshold_rank_from(config: dict) -> int:
    return int(config.get("threshold_rank", DEFAULT_THRESHOLD_RANK))


def client_entries_from(config: dict, config_dir: Path) -> list[dict]:
    """Training client file entries, resolved against the config's directory."""
    data = config.get("data", {})
    entries = list(data.get("clients", []))
    if "manifest" in data:
        manifest_path = _resolve(data["manifest"], config_dir)
        if not manifest_path.exists():
            raise ConfigError(f"manifest file not found: {manifest_path}")
        manifest = json.loads(manifest_path.read_text(encoding="utf-8"))
        entries.extend(manifest.get("clients", []))
        base = manifest_path.parent
        entries = [_resolve_entry(entry, base) for entry in entries]
        return entries
    return [_resolve_entry(entry, config_dir) for entry in entries]


def _resolve(path_text: str, base: Path) -> Path:
    path = Path(path_text)
    return path if path.is_absolute() else base / path


def _resolve_entry(entry: dict, base: Path) -> dict:
    resolved = dict(entry)
    if "course" not in resolved:
        raise ConfigError(f"client entry missing 'course': {entry}")
    for key in ("grades", "features", "events", "schedule"):
        if key in resolved:
            resolved[key] = str(_resolve(resolved[key], base))
    if "grades" not in resolved:
        raise ConfigError(f"client entry {resolved['course']!r} missing 'grades'")
    if ("features" in resolved) == ("events" in resolved):
        raise ConfigError(f"client entry {resolved['course']!r} needs exactly one of 'features' or 'events'")
    if "events" in resolved and "schedule" not in resolved:
        raise ConfigError(f"client entry {resolved['course']!r} with events needs a 'schedule'")
    return resolved


def runs_from(config: dict) -> int:
    runs = int(config.get("runs", 1))
    if runs < 1:
        raise ConfigError("runs must be >= 1")
    return runs
