"""Run configuration: an INI-style file whose ``section.key`` names map onto dataclasses.

    [data]
    interactions = ml/ratings.tsv
    relation_blacklist = wikiPageWikiLink, modified

    [train]
    learning_rate = 0.005

Unknown sections or keys are rejected. Values are coerced to the type of the
field's default; tuples are comma-separated.
"""

from __future__ import annotations

import configparser
import dataclasses
import math
from dataclasses import dataclass, field
from pathlib import Path

from .trainer import TrainConfig


class ConfigError(ValueError):
    pass


@dataclass
class DataConfig:
    interactions: str = ""
    triples: str = ""
    links: str = ""
    split_file: str = ""
    kg_test: str = ""
    min_user_freq: int = 1
    min_item_freq: int = 1
    min_entity_freq: int = 1
    relation_blacklist: tuple = ()
    split_ratios: tuple = (0.7, 0.1, 0.2)
    kg_test_fraction: float = 0.1


@dataclass
class EvalConfig:
    k: int = 10
    policy: str = "catalog"
    filtered: bool = False
    missing: str = "tail"


@dataclass
class RunSection:
    output_dir: str = "runs/default"
    seed: int = 0
    workers: int = 1
    fraction: float = 1.0
    ablation: str = ""
    backend: str = "tiny"


@dataclass
class RunConfig:
    run: RunSection = field(default_factory=RunSection)
    data: DataConfig = field(default_factory=DataConfig)
    train: TrainConfig = field(default_factory=TrainConfig)
    eval: EvalConfig = field(default_factory=EvalConfig)

    def validate(self):
        if self.run.ablation and self.run.ablation not in ("se", "st", "fi", "in", "cl"):
            raise ConfigError(f"unknown ablation {self.run.ablation!r}")
        if self.run.fraction not in (0.25, 0.5, 0.75, 1.0):
            raise ConfigError("cold-start fraction must be 0.25, 0.5, 0.75 or 1.0")
        if self.eval.k < 1:
            raise ConfigError("eval.k must be at least 1")
        if len(self.data.split_ratios) != 3 or not math.isclose(sum(self.data.split_ratios), 1.0):
            raise ConfigError("data.split_ratios must be three numbers summing to 1")
        try:
            self.effective_train().validate()
        except ValueError as exc:
            raise ConfigError(str(exc)) from None
        return self

    def effective_train(self):
        """Train config with the run seed and ablation applied."""
        cfg = self.train.with_ablation(self.run.ablation or None)
        cfg.seed = self.run.seed
        return cfg


def _sections(cfg):
    """``{"train": TrainConfig, "semantic": SemanticConfig, ...}``."""
    out = {"run": cfg.run, "data": cfg.data, "train": cfg.train, "eval": cfg.eval}
    out["semantic"] = cfg.train.semantic
    out["structural"] = cfg.train.structural
    return out


def _scalar_fields(obj):
    return [f.name for f in dataclasses.fields(obj) if not dataclasses.is_dataclass(getattr(obj, f.name))]


def _coerce(text, default, key):
    text = text.strip()
    try:
        if isinstance(default, bool):
            low = text.lower()
            if low not in ("true", "false", "1", "0", "yes", "no"):
                raise ValueError(text)
            return low in ("true", "1", "yes")
        if isinstance(default, int):
            return int(text)
        if isinstance(default, float):
            return float(text)
        if isinstance(default, tuple):
            items = [t.strip() for t in text.split(",") if t.strip()]
            if default and isinstance(default[0], float):
                return tuple(float(t) for t in items)
            return tuple(items)
    except ValueError:
        raise ConfigError(f"{key}: cannot parse {text!r} as {type(default).__name__}") from None
    return text


def set_value(cfg, dotted, text):
    """Assign ``section.key = text`` in place, coercing to the field's type."""
    section, _, key = dotted.partition(".")
    target = _sections(cfg).get(section)
    if target is None or key not in _scalar_fields(target):
        raise ConfigError(f"unknown config key {dotted!r}")
    setattr(target, key, _coerce(text, getattr(target, key), dotted))


def parse_config(text, overrides=()):
    cfg = RunConfig()
    parser = configparser.ConfigParser(interpolation=None)
    parser.optionxform = str
    try:
        parser.read_string(text)
    except configparser.Error as exc:
        raise ConfigError(str(exc)) from None
    for section in parser.sections():
        for key, value in parser.items(section):
            set_value(cfg, f"{section}.{key}", value)
    for dotted, value in overrides:
        set_value(cfg, dotted, value)
    return cfg.validate()


def load_config(path=None, overrides=()):
    text = ""
    if path is not None:
        try:
            text = Path(path).read_text(encoding="utf-8")
        except OSError as exc:
            raise ConfigError(f"cannot read config {path}: {exc.strerror}") from None
    return parse_config(text, overrides)


def _format(value):
    if isinstance(value, bool):
        return "true" if value else "false"
    if isinstance(value, float):
        return repr(value)
    if isinstance(value, tuple):
        return ", ".join(_format(v) for v in value)
    return str(value)


def dump_config(cfg):
    """Every field, defaults included, in a form :func:`parse_config` reads back."""
    lines = []
    for name, section in _sections(cfg).items():
        lines.append(f"[{name}]")
        lines += [f"{k} = {_format(getattr(section, k))}" for k in _scalar_fields(section)]
        lines.append("")
    return "\n".join(lines)
