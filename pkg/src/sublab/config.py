"""Experiment configuration: flat key-value text with three sections.

A config file looks like:

    [data]
    task = toy_translate
    n_pairs = 4000
    seed = 1

    [model]
    d_model = 32
    n_heads = 4

    [train]
    epochs = 30
    batch_size = 64

Unknown sections or keys are errors that name the offending key, as are
values that fail validation. Every key has a default, so the empty string
parses to the desk-scale defaults.
"""

from __future__ import annotations

import configparser
import dataclasses
from dataclasses import dataclass, field

from .data import generate
from .model import ComponentId, ModelConfig


class ConfigError(ValueError):
    """Invalid configuration; the message names the offending key."""


@dataclass(frozen=True)
class DataConfig:
    task: str = "toy_translate"
    n_pairs: int = 4000
    seed: int = 1
    len_min: int = 4
    len_max: int = 14
    vocab: int = 32
    valid_size: int = 128
    test_size: int = 128


@dataclass(frozen=True)
class SeedBundle:
    """Named seeds for the independent RNG streams a run consumes."""

    init: int
    shuffle: int
    dropout: int
    layerdrop: int

    @staticmethod
    def from_master(seed: int) -> "SeedBundle":
        return SeedBundle(init=seed, shuffle=seed, dropout=seed, layerdrop=seed)

    def as_dict(self) -> dict:
        return dataclasses.asdict(self)


@dataclass(frozen=True)
class TrainConfig:
    epochs: int = 30
    batch_size: int = 64
    warmup: int = 400
    lr_scale: float = 1.0
    beta1: float = 0.9
    beta2: float = 0.98
    adam_eps: float = 1e-9
    label_smoothing: float = 0.1
    seed: int = 1

    @property
    def seeds(self) -> SeedBundle:
        return SeedBundle.from_master(self.seed)

    def validate(self) -> None:
        if self.epochs < 0:
            raise ConfigError("train.epochs must be >= 0")
        if self.batch_size < 1:
            raise ConfigError("train.batch_size must be >= 1")
        if self.warmup < 1:
            raise ConfigError("train.warmup must be >= 1")
        if not (0.0 <= self.label_smoothing < 1.0):
            raise ConfigError("train.label_smoothing must be in [0, 1)")


@dataclass(frozen=True)
class ExperimentConfig:
    data: DataConfig = field(default_factory=DataConfig)
    model: ModelConfig = field(default_factory=ModelConfig)
    train: TrainConfig = field(default_factory=TrainConfig)


_SECTION_TYPES = {
    "data": DataConfig,
    "model": ModelConfig,
    "train": TrainConfig,
}

_SKIP_FIELDS = {("model", "removed")}  # parsed specially


def _coerce(section: str, name: str, kind, raw: str):
    try:
        if kind is int:
            return int(raw)
        if kind is float:
            return float(raw)
        return raw
    except ValueError as err:
        raise ConfigError(f"{section}.{name}: cannot parse '{raw}' as {kind.__name__}") from err


def parse_config(text: str) -> ExperimentConfig:
    parser = configparser.ConfigParser()
    try:
        parser.read_string(text)
    except configparser.Error as err:
        raise ConfigError(f"malformed config: {err}") from err

    out = {}
    for section in parser.sections():
        if section not in _SECTION_TYPES:
            raise ConfigError(f"unknown config section [{section}]")
    for section, cls in _SECTION_TYPES.items():
        fields = {f.name: f for f in dataclasses.fields(cls)}
        kwargs = {}
        if parser.has_section(section):
            for name, raw in parser.items(section):
                if section == "model" and name == "removed":
                    keys = [k.strip() for k in raw.split(",") if k.strip()]
                    try:
                        kwargs["removed"] = frozenset(ComponentId.parse(k) for k in keys)
                    except ValueError as err:
                        raise ConfigError(f"model.removed: {err}") from err
                    continue
                if name not in fields or (section, name) in _SKIP_FIELDS:
                    raise ConfigError(f"unknown config key {section}.{name}")
                kwargs[name] = _coerce(section, name, type(fields[name].default), raw)
        out[section] = cls(**kwargs)

    exp = ExperimentConfig(data=out["data"], model=out["model"], train=out["train"])
    validate_experiment(exp)
    return exp


def validate_experiment(exp: ExperimentConfig) -> None:
    d = exp.data
    if d.task not in ("copy", "reverse", "sort", "toy_translate"):
        raise ConfigError(f"data.task: unknown task '{d.task}'")
    if d.n_pairs < 1:
        raise ConfigError("data.n_pairs must be >= 1")
    if not (1 <= d.len_min <= d.len_max):
        raise ConfigError("data.len_min/len_max must satisfy 1 <= min <= max")
    if d.vocab <= 3:
        raise ConfigError("data.vocab must leave room for payload tokens")
    if d.len_max + 2 > exp.model.max_len:
        raise ConfigError(
            f"data.len_max ({d.len_max}) needs model.max_len >= {d.len_max + 2}"
        )
    if exp.model.src_vocab < d.vocab or exp.model.tgt_vocab < d.vocab:
        raise ConfigError("model vocabularies must cover data.vocab")
    try:
        exp.model.validate()
    except ValueError as err:
        raise ConfigError(f"model: {err}") from err
    exp.train.validate()


def render_config(exp: ExperimentConfig) -> str:
    """Canonical text form; parse(render(x)) == x."""
    lines = []
    for section, cfg in (("data", exp.data), ("model", exp.model), ("train", exp.train)):
        lines.append(f"[{section}]")
        for f in dataclasses.fields(cfg):
            value = getattr(cfg, f.name)
            if f.name == "removed":
                value = ",".join(sorted(cid.key for cid in value))
                if not value:
                    continue
            lines.append(f"{f.name} = {value}")
        lines.append("")
    return "\n".join(lines)


def corpus_for(data_cfg: DataConfig) -> dict:
    """Regenerate the (deterministic) corpus splits behind a config."""
    return generate(
        data_cfg.task,
        data_cfg.n_pairs,
        seed=data_cfg.seed,
        len_range=(data_cfg.len_min, data_cfg.len_max),
        vocab_size=data_cfg.vocab,
        valid_size=data_cfg.valid_size,
        test_size=data_cfg.test_size,
    )
