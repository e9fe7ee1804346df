"""Run configuration: a YAML tree with one section per concern.

Unknown keys are rejected at every level. Command-line ``--set a.b=value``
overrides are parsed with the same YAML scalar rules as the file.
"""

from __future__ import annotations

import hashlib
import json
from dataclasses import asdict, dataclass, field, fields, replace
from pathlib import Path

import yaml

from .errors import InvalidConfig
from .model import ModelConfig
from .synthetic import SynthConfig
from .trainer import TrainConfig

MANIFEST_KIND = "fdg2s-manifest"


@dataclass
class DataConfig:
    dir: str = "data"
    observations: str = "observations.csv"
    weather: str = "weather.csv"
    graph: str = "graph.csv"
    fill_limit_hours: float = 24.0
    n_weather_types: int = 0  # 0 infers W from the weather file

    def path(self, name: str) -> Path:
        return Path(self.dir) / getattr(self, name)


@dataclass
class UQConfig:
    n_copies: int = 10
    rho: float = 0.01


@dataclass
class EvalConfig:
    scenarios: tuple = ("early:1", "early:7", "failure:3", "failure:7")
    baselines: tuple = ("historical_average", "seasonal_naive")


@dataclass
class RunConfig:
    seed: int = 0
    output_dir: str = "runs/default"
    data: DataConfig = field(default_factory=DataConfig)
    synth: SynthConfig = field(default_factory=SynthConfig)
    model: ModelConfig = field(default_factory=ModelConfig)
    train: TrainConfig = field(default_factory=TrainConfig)
    uq: UQConfig = field(default_factory=UQConfig)
    evaluate: EvalConfig = field(default_factory=EvalConfig)

    def to_dict(self) -> dict:
        d = _plain(asdict(self))
        del d["train"]["seed"]  # derived from the top-level seed
        return d

    def hash(self) -> str:
        blob = json.dumps(self.to_dict(), sort_keys=True)
        return hashlib.sha256(blob.encode()).hexdigest()

    def dump(self, path) -> None:
        Path(path).write_text(yaml.safe_dump(self.to_dict(), sort_keys=True))


def _plain(obj):
    if isinstance(obj, dict):
        return {k: _plain(v) for k, v in obj.items()}
    if isinstance(obj, (list, tuple)):
        return [_plain(v) for v in obj]
    return obj


def _coerce(cls, section: str, values: dict):
    if not isinstance(values, dict):
        raise InvalidConfig(f"section {section!r} must be a mapping")
    known = {f.name: f for f in fields(cls)}
    defaults = cls()
    kwargs = {}
    for key, value in values.items():
        if key not in known:
            raise InvalidConfig(f"unknown key {section}.{key}")
        default = getattr(defaults, key)
        if isinstance(default, tuple):
            if not isinstance(value, (list, tuple)):
                raise InvalidConfig(f"{section}.{key} must be a list")
            value = tuple(tuple(v) if isinstance(v, list) else v for v in value)
        elif isinstance(default, bool):
            if not isinstance(value, bool):
                raise InvalidConfig(f"{section}.{key} must be true or false")
        elif isinstance(default, int) and not isinstance(default, bool):
            if isinstance(value, bool) or not isinstance(value, int):
                raise InvalidConfig(f"{section}.{key} must be an integer")
        elif isinstance(default, float):
            if isinstance(value, str):  # YAML 1.1 leaves "1e-3" as a string
                try:
                    value = float(value)
                except ValueError:
                    pass
            if isinstance(value, bool) or not isinstance(value, (int, float)):
                raise InvalidConfig(f"{section}.{key} must be a number")
            value = float(value)
        elif isinstance(default, str) and not isinstance(value, str):
            raise InvalidConfig(f"{section}.{key} must be a string")
        kwargs[key] = value
    return cls(**kwargs)


_SECTION_TYPES = {
    "data": DataConfig, "synth": SynthConfig, "model": ModelConfig, "train": TrainConfig,
    "uq": UQConfig, "evaluate": EvalConfig,
}


def from_dict(tree: dict | None) -> RunConfig:
    tree = dict(tree or {})
    kwargs = {}
    for key, value in tree.items():
        if key == "train" and isinstance(value, dict) and "seed" in value:
            raise InvalidConfig("train.seed is taken from the top-level seed")
        if key in _SECTION_TYPES:
            kwargs[key] = _coerce(_SECTION_TYPES[key], key, value or {})
        elif key == "seed":
            if isinstance(value, bool) or not isinstance(value, int):
                raise InvalidConfig("seed must be an integer")
            kwargs[key] = value
        elif key == "output_dir":
            kwargs[key] = str(value)
        else:
            raise InvalidConfig(f"unknown key {key}")
    cfg = RunConfig(**kwargs)
    cfg.train = replace(cfg.train, seed=cfg.seed)
    validate(cfg)
    return cfg


def validate(cfg: RunConfig) -> None:
    m, t = cfg.model, cfg.train
    if not 0.0 <= m.alpha <= 1.0:
        raise InvalidConfig("model.alpha must lie in [0, 1]")
    for name in ("horizon", "kernel_dim", "lstm_hidden", "decoder_hidden", "location_dim"):
        if getattr(m, name) <= 0:
            raise InvalidConfig(f"model.{name} must be positive")
    if t.epochs <= 0 or t.batch_size <= 0 or t.lr <= 0 or t.patience <= 0:
        raise InvalidConfig("train.epochs, batch_size, lr and patience must be positive")
    if t.epsilon < 1 or t.pi_q < 1:
        raise InvalidConfig("train.epsilon and train.pi_q must be at least 1")
    if cfg.uq.n_copies < 2 or cfg.uq.rho <= 0:
        raise InvalidConfig("uq.n_copies must be >= 2 and uq.rho positive")
    cfg.synth.validate()


def load(path=None, overrides=()) -> RunConfig:
    """Read ``path`` (if any) and apply ``section.key=value`` overrides."""
    tree: dict = {}
    if path is not None:
        text = Path(path).read_text()
        try:
            # YAML 1.1 reads "1e-08" as a string, so manifests go through json
            tree = (json.loads(text) if Path(path).suffix == ".json"
                    else yaml.safe_load(text)) or {}
        except (yaml.YAMLError, json.JSONDecodeError) as exc:
            raise InvalidConfig(f"{path}: {exc}") from None
        if not isinstance(tree, dict):
            raise InvalidConfig(f"{path}: top level must be a mapping")
        if tree.get("kind") == MANIFEST_KIND:
            tree = tree["config"]
    for item in overrides:
        if "=" not in item:
            raise InvalidConfig(f"override {item!r} is not key=value")
        dotted, raw = item.split("=", 1)
        value = yaml.safe_load(raw) if raw else ""
        node = tree
        parts = dotted.strip().split(".")
        for p in parts[:-1]:
            node = node.setdefault(p, {})
            if not isinstance(node, dict):
                raise InvalidConfig(f"override {dotted!r} descends into a scalar")
        node[parts[-1]] = value
    return from_dict(tree)
