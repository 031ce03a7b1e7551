"""Flat experiment configuration.

A config file is a flat TOML document of ``key = value`` lines; no tables.
Command-line overrides use the same keys (``--set lr=0.05``) and are applied
after the file. Every field is validated before any computation starts.
"""

from __future__ import annotations

import dataclasses
import math
from dataclasses import dataclass
from pathlib import Path
from typing import Any, Iterable, Mapping, Optional

from .errors import ConfigError

try:
    import tomllib
except ModuleNotFoundError:  # Python < 3.11
    import tomli as tomllib

REQUIRED = ("method", "dataset")
DATASETS = ("synthetic", "mnist", "fmnist", "cifar10")
NETWORKS = ("mlp", "lenet5")


@dataclass
class FederationConfig:
    method: str
    dataset: str
    data_root: str = ""
    network: str = "mlp"
    mlp_hidden: str = "128"
    cnn_width: int = 1
    classifier_layers: int = -1
    n_clients: int = 10
    train_per_client: int = 1000
    test_per_client: int = 200
    rounds: int = 60
    local_epochs: int = 5
    lr: float = 0.01
    batch_size: int = 128
    momentum: float = 0.9
    weight_decay: float = 5e-4
    p: float = 0.7
    damping: float = 1e-6
    n_major: int = 2
    iid_share: float = 0.2
    partition_mode: str = "iid_share"
    init_seed: int = 0
    data_seed: int = 0
    shuffle_seed: int = 0
    fisher_batch_size: int = 256
    synth_classes: int = 10
    synth_dims: str = "32"
    synth_per_class: int = 600
    synth_separation: float = 4.0
    output_dir: str = "runs/latest"

    def __post_init__(self):
        self.validate()

    # -- validation -----------------------------------------------------------
    def validate(self) -> None:
        from .data import PARTITION_MODES
        from .federation import METHODS

        def need(key, ok, msg):
            if not ok:
                raise ConfigError(f"{key}: {msg} (got {getattr(self, key)!r})")

        for f in dataclasses.fields(self):
            value = getattr(self, f.name)
            if f.type in ("int", "float") and isinstance(value, float) and not math.isfinite(value):
                raise ConfigError(f"{f.name}: must be finite (got {value!r})")
        need("method", self.method in METHODS, f"must be one of {list(METHODS)}")
        need("dataset", self.dataset in DATASETS, f"must be one of {list(DATASETS)}")
        need("network", self.network in NETWORKS, f"must be one of {list(NETWORKS)}")
        need("partition_mode", self.partition_mode in PARTITION_MODES, f"must be one of {list(PARTITION_MODES)}")
        need("p", 0.0 <= self.p <= 1.0, "must lie in [0, 1]")
        need("iid_share", 0.0 <= self.iid_share <= 1.0, "must lie in [0, 1]")
        need("lr", self.lr > 0, "must be > 0")
        need("batch_size", self.batch_size >= 1, "must be >= 1")
        need("local_epochs", self.local_epochs >= 1, "must be >= 1")
        need("rounds", self.rounds >= 0, "must be >= 0")
        need("momentum", 0.0 <= self.momentum < 1.0, "must lie in [0, 1)")
        need("weight_decay", self.weight_decay >= 0, "must be >= 0")
        need("damping", self.damping > 0, "must be > 0")
        need("n_clients", self.n_clients >= 1, "must be >= 1")
        need("train_per_client", self.train_per_client >= 1, "must be >= 1")
        need("test_per_client", self.test_per_client >= 0, "must be >= 0")
        need("n_major", self.n_major >= 1, "must be >= 1")
        need("cnn_width", self.cnn_width >= 1, "must be >= 1")
        need("classifier_layers", self.classifier_layers >= -1, "must be >= 0, or -1 for the default split")
        need("fisher_batch_size", self.fisher_batch_size >= 1, "must be >= 1")
        need("synth_classes", self.synth_classes >= 2, "must be >= 2")
        need("synth_per_class", self.synth_per_class >= 1, "must be >= 1")
        need("synth_separation", self.synth_separation >= 0, "must be >= 0")
        self.hidden_sizes()
        self.synth_shape()

    def hidden_sizes(self) -> list[int]:
        return _int_list("mlp_hidden", self.mlp_hidden, allow_empty=True)

    def synth_shape(self) -> tuple[int, ...]:
        return tuple(_int_list("synth_dims", self.synth_dims, allow_empty=False))

    # -- derived objects --------------------------------------------------------
    def local_training(self):
        from .federation import LocalTraining

        return LocalTraining(self.local_epochs, self.lr, self.batch_size, self.momentum, self.weight_decay)

    def network_spec(self, train):
        from .nn import lenet5, mlp

        shape = train.inputs.shape[1:]
        if self.network == "mlp":
            spec = mlp([math.prod(shape), *self.hidden_sizes(), train.num_classes])
        else:
            if len(shape) != 3 or shape[1] != shape[2]:
                raise ConfigError(f"network: lenet5 needs square (C, H, W) inputs, data has {shape}")
            spec = lenet5(shape[0], shape[1], train.num_classes, self.cnn_width)
        if self.classifier_layers >= 0:
            spec = spec.with_classifier_layers(self.classifier_layers)
        return spec

    def to_dict(self) -> dict[str, Any]:
        return dataclasses.asdict(self)

    def to_toml(self) -> str:
        lines = []
        for key, value in self.to_dict().items():
            if isinstance(value, str):
                escaped = value.replace("\\", "\\\\").replace('"', '\\"')
                lines.append(f'{key} = "{escaped}"')
            else:
                lines.append(f"{key} = {value!r}")
        return "\n".join(lines) + "\n"


def _int_list(key: str, text: str, allow_empty: bool) -> list[int]:
    parts = [t.strip() for t in str(text).split(",") if t.strip()]
    if not parts and not allow_empty:
        raise ConfigError(f"{key}: needs at least one integer")
    try:
        values = [int(t) for t in parts]
    except ValueError:
        raise ConfigError(f"{key}: expected comma-separated integers, got {text!r}") from None
    if any(v < 1 for v in values):
        raise ConfigError(f"{key}: values must be positive, got {text!r}")
    return values


_FIELDS = {f.name: f for f in dataclasses.fields(FederationConfig)}


def _coerce(key: str, value: Any) -> Any:
    kind = _FIELDS[key].type
    if kind == "str":
        if isinstance(value, (list, tuple)):
            return ",".join(str(v) for v in value)
        return str(value)
    if isinstance(value, bool):
        raise ConfigError(f"{key}: expected a number, got a boolean")
    try:
        if kind == "int":
            if isinstance(value, float) and not value.is_integer():
                raise ValueError
            return int(value)
        return float(value)
    except (TypeError, ValueError):
        raise ConfigError(f"{key}: expected {kind}, got {value!r}") from None


def _parse_override(item: str) -> tuple[str, Any]:
    if "=" not in item:
        raise ConfigError(f"override {item!r} is not of the form key=value")
    key, raw = (s.strip() for s in item.split("=", 1))
    if len(raw) >= 2 and raw[0] == raw[-1] and raw[0] in "\"'":
        raw = raw[1:-1]
    return key, raw


def config_from_mapping(values: Mapping[str, Any], overrides: Iterable[str] = ()) -> FederationConfig:
    merged: dict[str, Any] = {}
    for key, value in values.items():
        if isinstance(value, dict):
            raise ConfigError(f"{key}: nested tables are not supported; use flat keys")
        merged[key] = value
    for item in overrides:
        key, raw = _parse_override(item)
        merged[key] = raw
    unknown = sorted(set(merged) - set(_FIELDS))
    if unknown:
        raise ConfigError(f"{unknown[0]}: unknown config key" + (f" (also {unknown[1:]})" if unknown[1:] else ""))
    missing = [k for k in REQUIRED if k not in merged]
    if missing:
        raise ConfigError(f"{missing[0]}: required field is missing")
    return FederationConfig(**{k: _coerce(k, v) for k, v in merged.items()})


def parse_config(file_path: Optional[str], overrides: Iterable[str] = ()) -> FederationConfig:
    """Read a flat TOML config (may be None) and apply ``key=value`` overrides."""
    values: dict[str, Any] = {}
    if file_path is not None:
        path = Path(file_path)
        try:
            values = tomllib.loads(path.read_text())
        except OSError as exc:
            raise ConfigError(f"cannot read config {path}: {exc}") from exc
        except tomllib.TOMLDecodeError as exc:
            raise ConfigError(f"{path}: invalid TOML: {exc}") from exc
    return config_from_mapping(values, overrides)
