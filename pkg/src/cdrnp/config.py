"""Run configuration: dataclasses loaded from a YAML file with strict keys."""

from __future__ import annotations

import dataclasses
import hashlib
import json
from dataclasses import dataclass, field
from pathlib import Path
from typing import Optional

import yaml


class ConfigError(ValueError):
    pass


@dataclass
class TrainingConfig:
    lambda_: float = 0.1
    learning_rate: float = 0.01
    epochs: int = 10
    tasks_per_epoch: Optional[int] = None  # None: cover the train pool once per epoch
    support_size: int = 40
    query_size: int = 40
    history_len: int = 20
    d: int = 8
    hidden: int = 64
    decoder_depth: int = 3
    aux_weight: float = 0.1
    aux_batch_size: int = 64
    ablate_prm: bool = False
    ablate_acp: bool = False
    seed: int = 0
    test_latent_mode: str = "mean"
    init_std: float = 0.1
    workers: int = 1

    def validate(self) -> None:
        if not 0.0 <= self.lambda_ <= 1.0:
            raise ConfigError(f"lambda must lie in [0, 1], got {self.lambda_}")
        if self.epochs < 1:
            raise ConfigError("epochs must be >= 1")
        for name in ("support_size", "query_size", "history_len", "d", "hidden", "decoder_depth",
                     "aux_batch_size", "workers"):
            if getattr(self, name) < 1:
                raise ConfigError(f"{name} must be positive")
        if self.tasks_per_epoch is not None and self.tasks_per_epoch < 1:
            raise ConfigError("tasks_per_epoch must be positive")
        if self.learning_rate <= 0:
            raise ConfigError("learning_rate must be positive")
        if self.aux_weight < 0:
            raise ConfigError("aux_weight must be >= 0")
        if self.test_latent_mode not in ("mean", "sample"):
            raise ConfigError(f"test_latent_mode must be 'mean' or 'sample', got {self.test_latent_mode!r}")


@dataclass
class SynthConfig:
    n_users: int = 500
    n_src_items: int = 200
    n_tgt_items: int = 200
    latent_dim: int = 4
    ratings_per_user: int = 30
    noise_std: float = 0.5
    overlap_fraction: float = 1.0
    clip_low: float = 0.0
    clip_high: float = 5.0
    seed: int = 0

    def validate(self) -> None:
        for name in ("n_users", "n_src_items", "n_tgt_items", "latent_dim", "ratings_per_user"):
            if getattr(self, name) < 1:
                raise ConfigError(f"{name} must be positive")
        if self.noise_std < 0:
            raise ConfigError("noise_std must be >= 0")
        if not 0.0 < self.overlap_fraction <= 1.0:
            raise ConfigError("overlap_fraction must lie in (0, 1]")
        if self.ratings_per_user > min(self.n_src_items, self.n_tgt_items):
            raise ConfigError("ratings_per_user exceeds the item count of a domain")
        if not 0.0 <= self.clip_low < self.clip_high <= 5.0:
            raise ConfigError("clip range must sit inside [0, 5]")


@dataclass
class DataConfig:
    source: Optional[str] = None
    target: Optional[str] = None
    min_count: int = 5
    synth: Optional[SynthConfig] = None

    def validate(self) -> None:
        if (self.source is None) != (self.target is None):
            raise ConfigError("data.source and data.target must be given together")
        if self.source is None and self.synth is None:
            raise ConfigError("either data.source/data.target or data.synth is required")
        if self.min_count < 1:
            raise ConfigError("min_count must be positive")
        if self.synth is not None:
            self.synth.validate()


@dataclass
class SplitConfig:
    alpha: float = 0.2
    seed: int = 0


@dataclass
class EvalConfig:
    repeats: int = 1


@dataclass
class RunConfig:
    data: DataConfig = field(default_factory=DataConfig)
    split: SplitConfig = field(default_factory=SplitConfig)
    train: TrainingConfig = field(default_factory=TrainingConfig)
    eval: EvalConfig = field(default_factory=EvalConfig)

    def validate(self) -> None:
        self.data.validate()
        self.train.validate()
        if not 0.0 < self.split.alpha < 1.0:
            raise ConfigError("split.alpha must lie in (0, 1)")
        if self.eval.repeats < 1:
            raise ConfigError("eval.repeats must be positive")


# yaml key -> field name, where python keywords get in the way
_ALIASES = {"lambda": "lambda_"}
_NESTED = {"data": DataConfig, "split": SplitConfig, "train": TrainingConfig, "eval": EvalConfig,
           "synth": SynthConfig}


def _build(cls, raw, where):
    if raw is None:
        return cls()
    if not isinstance(raw, dict):
        raise ConfigError(f"{where}: expected a mapping")
    names = {f.name: f for f in dataclasses.fields(cls)}
    kwargs = {}
    for key, value in raw.items():
        name = _ALIASES.get(key, key)
        if name not in names:
            raise ConfigError(f"{where}: unknown key {key!r}")
        if name in _NESTED and value is not None:
            value = _build(_NESTED[name], value, f"{where}.{key}")
        kwargs[name] = value
    return cls(**kwargs)


def _fix_types(cfg: RunConfig) -> None:
    # YAML reads 1e-3 as a string; coerce the float fields explicitly
    for section in (cfg.train, cfg.split, cfg.data.synth):
        if section is None:
            continue
        for f in dataclasses.fields(section):
            v = getattr(section, f.name)
            if f.type in ("float", float) and isinstance(v, (str, int)) and not isinstance(v, bool):
                try:
                    setattr(section, f.name, float(v))
                except ValueError:
                    raise ConfigError(f"{f.name}: expected a number, got {v!r}") from None


def config_from_dict(raw: dict) -> RunConfig:
    cfg = _build(RunConfig, raw, "config")
    _fix_types(cfg)
    cfg.validate()
    return cfg


def load_config(path) -> RunConfig:
    text = Path(path).read_text(encoding="utf-8")
    raw = yaml.safe_load(text) or {}
    return config_from_dict(raw)


def config_to_dict(cfg) -> dict:
    d = dataclasses.asdict(cfg)

    def rename(x):
        if isinstance(x, dict):
            return {("lambda" if k == "lambda_" else k): rename(v) for k, v in x.items()}
        return x

    return rename(d)


def dump_config(cfg: RunConfig, path) -> None:
    Path(path).write_text(yaml.safe_dump(config_to_dict(cfg), sort_keys=False), encoding="utf-8")


def config_hash(cfg) -> str:
    blob = json.dumps(config_to_dict(cfg), sort_keys=True, separators=(",", ":"))
    return hashlib.sha256(blob.encode()).hexdigest()[:16]
