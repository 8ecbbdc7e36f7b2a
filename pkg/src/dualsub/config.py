"""Run configuration: INI sections [model], [train], [decode], [data], [metrics]."""

from __future__ import annotations

import configparser
import dataclasses
import os
import typing
from dataclasses import dataclass, field, fields
from pathlib import Path

from .model import ModelConfig
from .training import TrainConfig

CONFIG_ENV = "DUALSUB_CONFIG"


class ConfigError(ValueError):
    pass


@dataclass
class ModelSection:
    d_model: int = 512
    d_ff: int = 2048
    n_heads: int = 8
    n_enc_layers: int = 2
    n_dec_layers: int = 2
    max_len: int = 256
    dropout: float = 0.0

    def model_config(self, vocab_size: int, variant: str) -> ModelConfig:
        return ModelConfig(vocab_size=vocab_size, variant=variant, **dataclasses.asdict(self))


@dataclass
class TrainSection:
    max_lr: float = 0.0007
    warmup_steps: int = 4000
    fine_tune_lr: float = 8e-5
    batch_tokens: int = 2048
    patience_checkpoints: int = 4
    checkpoint_interval_steps: int = 100
    average_last_k: int = 5
    max_steps: int = 3000
    label_smoothing: float = 0.0
    adam_beta1: float = 0.9
    adam_beta2: float = 0.98
    adam_eps: float = 1e-9
    seed: int = 0
    precision: str = "float32"

    def train_config(self, mode: str) -> TrainConfig:
        d = dataclasses.asdict(self)
        betas = (d.pop("adam_beta1"), d.pop("adam_beta2"))
        d.pop("precision")
        return TrainConfig(mode=mode, betas=betas, **d)


@dataclass
class DecodeSection:
    strategy: str = "sync-greedy"
    beam_size: int = 4
    prefix_mode: str = "hypothesis"


@dataclass
class DataSection:
    n_merges: int = 32000
    min_frequency: int = 1
    toy_size: int = 200
    concat_mean: float = 2.0
    concat_sigma: float = 0.75
    noise: float = 0.0


@dataclass
class MetricsSection:
    metrics: str = "bleu,wer,consistency"
    ibm_iterations: int = 5


@dataclass
class RunConfig:
    model: ModelSection = field(default_factory=ModelSection)
    train: TrainSection = field(default_factory=TrainSection)
    decode: DecodeSection = field(default_factory=DecodeSection)
    data: DataSection = field(default_factory=DataSection)
    metrics: MetricsSection = field(default_factory=MetricsSection)

    def set(self, section: str, key: str, value: str) -> None:
        """Assign one value given as text, converting to the field's type."""
        if section not in _SECTIONS:
            raise ConfigError(f"unknown config section [{section}]")
        obj = getattr(self, section)
        types = typing.get_type_hints(type(obj))
        if key not in types:
            raise ConfigError(f"unknown config key {section}.{key}")
        kind = types[key]
        try:
            parsed = kind(value) if kind is not bool else value.lower() in ("1", "true", "yes", "on")
        except ValueError as exc:
            raise ConfigError(f"bad value for {section}.{key}: {value!r}") from exc
        setattr(obj, key, parsed)

    def to_ini(self) -> str:
        lines = []
        for name in _SECTIONS:
            lines.append(f"[{name}]")
            obj = getattr(self, name)
            lines += [f"{f.name} = {getattr(obj, f.name)}" for f in fields(obj)]
            lines.append("")
        return "\n".join(lines)

    def write(self, path) -> None:
        Path(path).write_text(self.to_ini(), encoding="utf-8")


_SECTIONS = tuple(f.name for f in fields(RunConfig))


def load_config(path=None, overrides: typing.Sequence[str] = ()) -> RunConfig:
    """Defaults, then the file (explicit path or $DUALSUB_CONFIG), then ``section.key=value`` overrides."""
    config = RunConfig()
    path = path or os.environ.get(CONFIG_ENV) or None
    if path is not None:
        parser = configparser.ConfigParser(interpolation=None)
        try:
            with open(path, encoding="utf-8") as f:
                parser.read_file(f)
        except configparser.Error as exc:
            raise ConfigError(f"{path}: {exc}".replace("\n", " ")) from exc
        for section in parser.sections():
            for key, value in parser.items(section):
                config.set(section, key, value)
    for item in overrides:
        name, sep, value = item.partition("=")
        section, dot, key = name.strip().partition(".")
        if not sep or not dot:
            raise ConfigError(f"override must look like section.key=value, got {item!r}")
        config.set(section, key, value.strip())
    return config
