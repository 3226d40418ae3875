"""INI-style run configuration.

Example::

    # glas.cfg
    [data]
    dataset = glas
    root = /data/GlaS

    [train]
    epochs = 1000

    [augment]
    crop = 416, 416

Command-line overrides use ``section.key=value``. Values are coerced to the
type of the default. Tuples are comma separated, booleans accept
true/false/yes/no/1/0.
"""
from __future__ import annotations

import configparser
import dataclasses
from dataclasses import dataclass, field
from pathlib import Path

from .data import AugmentConfig
from .network import LossConfig, ModelConfig
from .postprocess import PostprocessConfig
from .training import TrainConfig


class ConfigError(ValueError):
    pass


@dataclass
class DataConfig:
    dataset: str = "glas"
    root: str = ""
    boundary_width: int = 2
    val_fraction: float = 0.1
    train_split: str = "train"
    eval_splits: tuple = ()


@dataclass
class AblateConfig:
    variants: tuple = ("backbone", "+LD", "+LD+FFM", "+LD+FFM+BEA", "full")


@dataclass
class RunConfig:
    data: DataConfig = field(default_factory=DataConfig)
    augment: AugmentConfig = field(default_factory=AugmentConfig)
    loss: LossConfig = field(default_factory=LossConfig)
    postprocess: PostprocessConfig = field(default_factory=PostprocessConfig)
    model: ModelConfig = field(default_factory=ModelConfig)
    train: TrainConfig = field(default_factory=TrainConfig)
    ablate: AblateConfig = field(default_factory=AblateConfig)

    def set(self, key: str, raw: str):
        section, _, name = key.strip().partition(".")
        if not name or not hasattr(self, section):
            raise ConfigError(f"unknown config key {key!r} (expected section.key)")
        target = getattr(self, section)
        names = {f.name for f in dataclasses.fields(target)}
        if name not in names:
            raise ConfigError(f"unknown config key {key!r}; {section} has {sorted(names)}")
        current = getattr(target, name)
        try:
            value = _coerce(raw.strip(), current)
        except ValueError as exc:
            raise ConfigError(f"bad value for {key}: {raw!r} ({exc})") from None
        # rebuild so __post_init__ validation runs
        try:
            setattr(self, section, dataclasses.replace(target, **{name: value}))
        except ValueError as exc:
            raise ConfigError(f"{key}: {exc}") from None

    def to_text(self) -> str:
        blocks = []
        for f in dataclasses.fields(self):
            sub = getattr(self, f.name)
            lines = [f"[{f.name}]"] + [f"{g.name} = {_format(getattr(sub, g.name))}"
                                       for g in dataclasses.fields(sub)]
            blocks.append("\n".join(lines))
        return "\n\n".join(blocks) + "\n"

    def to_dict(self) -> dict:
        return dataclasses.asdict(self)


def _coerce(raw, current):
    if isinstance(current, bool):
        low = raw.lower()
        if low in ("1", "true", "yes", "on"):
            return True
        if low in ("0", "false", "no", "off"):
            return False
        raise ValueError("expected a boolean")
    if isinstance(current, int):
        return int(raw)
    if isinstance(current, float):
        return float(raw)
    if isinstance(current, tuple):
        parts = [p.strip() for p in raw.split(",") if p.strip()]
        kinds = {type(x) for x in current}
        if kinds and kinds <= {int}:
            return tuple(int(p) for p in parts)
        if kinds and kinds <= {int, float}:
            return tuple(float(p) for p in parts)
        return tuple(parts)
    return raw


def _format(value):
    if isinstance(value, tuple):
        return ", ".join(str(v) for v in value)
    if isinstance(value, bool):
        return "true" if value else "false"
    return str(value)


def parse_config(text: str, cfg: RunConfig | None = None) -> RunConfig:
    cfg = cfg or RunConfig()
    parser = configparser.ConfigParser(inline_comment_prefixes=("#", ";"), interpolation=None)
    parser.optionxform = str
    try:
        parser.read_string(text)
    except configparser.Error as exc:
        raise ConfigError(str(exc).strip()) from None
    for section in parser.sections():
        for key, value in parser.items(section):
            cfg.set(f"{section}.{key}", value)
    return cfg


def load_config(path=None, overrides=()) -> RunConfig:
    cfg = RunConfig()
    if path:
        p = Path(path)
        if not p.is_file():
            raise ConfigError(f"config file not found: {p}")
        parse_config(p.read_text(), cfg)
    for item in overrides:
        key, sep, value = item.partition("=")
        if not sep:
            raise ConfigError(f"override must be key=value, got {item!r}")
        cfg.set(key, value)
    return cfg
