"""Experiment configuration: JSON files with flat dotted-key overrides.

The experiment-level seed is the single source of randomness: it is copied
into the train and evaluation sections when a config is resolved, so one knob
reruns the whole pipeline identically.
"""

from __future__ import annotations

import dataclasses
import json
from dataclasses import dataclass, field
from pathlib import Path

from .encoder import EncoderConfig
from .evaluator import EvalProtocol
from .objectives import LossWeights
from .trainer import TrainConfig


class ConfigError(ValueError):
    pass


@dataclass
class DatasetConfig:
    path: str = ""
    format: str = "tsv-triples"
    min_interactions: int = 5


@dataclass
class ExperimentConfig:
    dataset: DatasetConfig = field(default_factory=DatasetConfig)
    train: TrainConfig = field(default_factory=TrainConfig)
    protocol: EvalProtocol = field(default_factory=EvalProtocol)
    output_dir: str = "runs/default"
    seed: int = 0

    def resolved_train(self) -> TrainConfig:
        cfg = dataclasses.replace(self.train, seed=self.seed)
        cfg.validate()
        return cfg

    def resolved_protocol(self) -> EvalProtocol:
        return dataclasses.replace(self.protocol, seed=self.seed)


_SECTIONS = {
    "dataset": DatasetConfig,
    "encoder": EncoderConfig,
    "weights": LossWeights,
    "protocol": EvalProtocol,
}
_TOP_KEYS = ("dataset", "encoder", "weights", "train", "protocol", "output_dir", "seed")


def _build(cls, data: dict, where: str):
    names = {f.name for f in dataclasses.fields(cls)}
    unknown = set(data) - names
    if unknown:
        raise ConfigError(f"unknown key(s) {sorted(unknown)} in {where}")
    try:
        return cls(**data)
    except (TypeError, ValueError) as exc:
        raise ConfigError(f"invalid {where}: {exc}") from exc


def from_dict(data: dict) -> ExperimentConfig:
    unknown = set(data) - set(_TOP_KEYS)
    if unknown:
        raise ConfigError(f"unknown top-level key(s) {sorted(unknown)}")
    dataset = _build(DatasetConfig, dict(data.get("dataset", {})), "dataset")
    encoder = _build(EncoderConfig, dict(data.get("encoder", {})), "encoder")
    weights = _build(LossWeights, dict(data.get("weights", {})), "weights")
    protocol_d = dict(data.get("protocol", {}))
    if "ks" in protocol_d:
        protocol_d["ks"] = tuple(protocol_d["ks"])
    protocol = _build(EvalProtocol, protocol_d, "protocol")
    train_d = dict(data.get("train", {}))
    for nested in ("weights", "encoder"):
        if nested in train_d:
            raise ConfigError(f"put {nested!r} at the top level, not inside 'train'")
    train = _build(TrainConfig, {**train_d, "weights": weights, "encoder": encoder}, "train")
    return ExperimentConfig(
        dataset=dataset,
        train=train,
        protocol=protocol,
        output_dir=data.get("output_dir", "runs/default"),
        seed=int(data.get("seed", 0)),
    )


def to_dict(cfg: ExperimentConfig) -> dict:
    train = dataclasses.asdict(cfg.train)
    encoder = train.pop("encoder")
    weights = train.pop("weights")
    protocol = dataclasses.asdict(cfg.protocol)
    protocol["ks"] = list(protocol["ks"])
    return {
        "dataset": dataclasses.asdict(cfg.dataset),
        "encoder": encoder,
        "weights": weights,
        "train": train,
        "protocol": protocol,
        "output_dir": cfg.output_dir,
        "seed": cfg.seed,
    }


def load(path: str | Path | None, overrides: dict[str, object] | None = None) -> ExperimentConfig:
    """Config file (optional) plus dotted-key overrides like weights.alpha=2.0."""
    data = json.loads(Path(path).read_text()) if path else {}
    for key, value in (overrides or {}).items():
        node = data
        parts = key.split(".")
        for part in parts[:-1]:
            node = node.setdefault(part, {})
            if not isinstance(node, dict):
                raise ConfigError(f"cannot override through non-section key {part!r} in {key!r}")
        node[parts[-1]] = value
    return from_dict(data)


def save(cfg: ExperimentConfig, path: str | Path) -> None:
    Path(path).write_text(json.dumps(to_dict(cfg), indent=2, sort_keys=True) + "\n")


def coerce(value: str):
    """CLI value literal: JSON when it parses, bare string otherwise."""
    try:
        return json.loads(value)
    except json.JSONDecodeError:
        return value
