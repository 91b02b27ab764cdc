"""Run configuration and its INI-style file format.

A config file has four sections whose keys mirror the dataclass fields::

    [model]
    preset = tiny          ; optional, applied before the other keys
    n_heads = 4

    [group]
    alpha = 0.5
    tau = 1, 0, 0

    [train]
    peak_lr = 0.002

    [task]
    kind = copy

Any key can be overridden with ``section.key=value`` strings.
"""

from __future__ import annotations

import configparser
import dataclasses
import io
import os
from dataclasses import dataclass, field

from ..grouping import GroupConfig, GroupConfigError
from ..model import PRESETS, ConfigError, ModelConfig

OUTPUT_DIR_ENV = "GHALAB_OUTPUT_DIR"


class ConfigKeyError(KeyError):
    """Unknown section or key."""


class ConfigValueError(ValueError):
    """A value failed to parse or validate; message starts with the field name."""


class ConfigFileError(ValueError):
    """The config file itself could not be parsed."""


@dataclass
class TaskConfig:
    kind: str = "copy"
    vocab_size: int = 16
    min_len: int = 4
    max_len: int = 10
    n_samples: int = 4000
    corpus_path: str = ""
    context: int = 32
    seed: int = 1234

    def validate(self):
        if self.kind not in ("copy", "reverse", "char-lm"):
            raise ConfigValueError(f"task.kind: {self.kind!r} not in (copy, reverse, char-lm)")
        if self.kind in ("copy", "reverse"):
            if self.vocab_size < 4:
                raise ConfigValueError("task.vocab_size: need >= 4 (pad, bos, eos + symbols)")
            if not 1 <= self.min_len <= self.max_len:
                raise ConfigValueError("task.min_len/task.max_len: need 1 <= min_len <= max_len")
            if self.n_samples < 10:
                raise ConfigValueError("task.n_samples: need >= 10 for an 8:1:1 split")
        else:
            if not self.corpus_path:
                raise ConfigValueError("task.corpus_path: required for char-lm")
            if self.context < 2:
                raise ConfigValueError("task.context: need >= 2")


@dataclass
class TrainConfig:
    peak_lr: float = 2e-3
    warmup_steps: int = 200
    beta1: float = 0.9
    beta2: float = 0.98
    adam_eps: float = 1e-8
    weight_decay: float = 1e-4
    label_smoothing: float = 0.1
    clip_norm: float | None = None
    batch_size: int = 64
    max_epochs: int = 30
    max_steps: int = 0
    patience: int = 5
    v2s: bool = True
    finetune_epochs: int = 10
    finetune_warmup: int = 50
    finetune_lr: float = 1e-3
    log_every: int = 10
    seed: int = 0
    output_dir: str = "runs/default"

    def validate(self):
        if not self.peak_lr > 0:
            raise ConfigValueError("train.peak_lr: must be > 0")
        if self.warmup_steps < 1 or self.finetune_warmup < 1:
            raise ConfigValueError("train.warmup_steps/train.finetune_warmup: must be >= 1")
        if not 0 <= self.label_smoothing < 1:
            raise ConfigValueError("train.label_smoothing: must be in [0, 1)")
        if self.batch_size < 1:
            raise ConfigValueError("train.batch_size: must be >= 1")
        if self.max_epochs < 0 or self.finetune_epochs < 0 or self.max_steps < 0:
            raise ConfigValueError("train.max_epochs/finetune_epochs/max_steps: must be >= 0")
        if self.patience < 1:
            raise ConfigValueError("train.patience: must be >= 1")
        if self.log_every < 1:
            raise ConfigValueError("train.log_every: must be >= 1")


@dataclass
class RunConfig:
    model: ModelConfig = field(default_factory=lambda: ModelConfig(**PRESETS["tiny"]))
    group: GroupConfig = field(default_factory=GroupConfig)
    train: TrainConfig = field(default_factory=TrainConfig)
    task: TaskConfig = field(default_factory=TaskConfig)

    def validate(self):
        try:
            self.model.validate()
            self.group.validate(self.model.n_heads)
        except (ConfigError, GroupConfigError) as exc:
            raise ConfigValueError(str(exc)) from exc
        self.train.validate()
        self.task.validate()
        if self.task.kind == "char-lm" and self.model.arch != "decoder-only":
            raise ConfigValueError("model.arch: char-lm needs decoder-only")
        if self.task.kind != "char-lm" and self.model.arch != "encoder-decoder":
            raise ConfigValueError("model.arch: copy/reverse need encoder-decoder")
        if self.model.arch == "decoder-only" and set(self.group.layer_types) - {"dec-self"}:
            self.group.layer_types = ("dec-self",)
        return self

    @property
    def output_dir(self):
        return os.environ.get(OUTPUT_DIR_ENV) or self.train.output_dir


SECTIONS = {"model": ModelConfig, "group": GroupConfig, "train": TrainConfig, "task": TaskConfig}


def _field_types(cls):
    return {f.name: f for f in dataclasses.fields(cls)}


def _parse(field_, raw, key):
    default = field_.default if field_.default is not dataclasses.MISSING else None
    text = raw.strip()
    try:
        if isinstance(default, bool):
            low = text.lower()
            if low in ("1", "true", "yes", "on"):
                return True
            if low in ("0", "false", "no", "off"):
                return False
            raise ValueError(text)
        if isinstance(default, int):
            return int(text)
        if isinstance(default, float) or (default is None and "float" in str(field_.type)):
            if text.lower() in ("none", ""):
                return None
            return float(text)
        if isinstance(default, tuple):
            parts = [p.strip() for p in text.split(",") if p.strip()]
            if all(_is_number(p) for p in parts):
                return tuple(float(p) for p in parts)
            return tuple(parts)
        return text
    except ValueError:
        raise ConfigValueError(f"{key}: cannot parse {raw!r}") from None


def _is_number(s):
    try:
        float(s)
        return True
    except ValueError:
        return False


def _format(value):
    if isinstance(value, bool):
        return "true" if value else "false"
    if isinstance(value, tuple):
        return ", ".join(_format(v) for v in value)
    if value is None:
        return "none"
    if isinstance(value, float):
        return repr(value)
    return str(value)


def apply_overrides(raw_sections, overrides):
    """Fold ``section.key=value`` strings into a ``{section: {key: str}}`` mapping."""
    for item in overrides or ():
        if "=" not in item:
            raise ConfigValueError(f"override {item!r}: expected section.key=value")
        dotted, value = item.split("=", 1)
        if "." not in dotted:
            raise ConfigKeyError(f"override {dotted!r}: expected section.key")
        section, key = dotted.strip().split(".", 1)
        raw_sections.setdefault(section, {})[key] = value
    return raw_sections


def build_config(raw_sections):
    """Build and validate a :class:`RunConfig` from string-valued sections."""
    unknown = set(raw_sections) - set(SECTIONS)
    if unknown:
        raise ConfigKeyError(f"unknown section(s): {sorted(unknown)}")
    values = {}
    for section, cls in SECTIONS.items():
        raw = dict(raw_sections.get(section, {}))
        fields = _field_types(cls)
        kwargs = {}
        if section == "model" and "preset" in raw:
            name = raw.pop("preset").strip()
            if name not in PRESETS:
                raise ConfigValueError(f"model.preset: unknown preset {name!r}")
            kwargs.update(PRESETS[name])
        elif section == "model":
            kwargs.update(PRESETS["tiny"])
        for key, text in raw.items():
            if key not in fields:
                raise ConfigKeyError(f"unknown key {section}.{key}")
            kwargs[key] = _parse(fields[key], text, f"{section}.{key}")
        try:
            values[section] = cls(**kwargs)
        except (ConfigError, GroupConfigError, TypeError) as exc:
            raise ConfigValueError(str(exc)) from exc
    return RunConfig(**values).validate()


def load_config(path=None, overrides=()):
    raw = {}
    if path is not None:
        if not os.path.exists(path):
            raise FileNotFoundError(path)
        parser = configparser.ConfigParser(interpolation=None, inline_comment_prefixes=(";", "#"))
        parser.optionxform = str
        try:
            parser.read(path)
        except configparser.Error as exc:
            raise ConfigFileError(f"{path}: {exc}".replace("\n", " ")) from exc
        raw = {s: dict(parser[s]) for s in parser.sections()}
    return build_config(apply_overrides(raw, overrides))


def config_to_sections(cfg: RunConfig):
    return {name: {f.name: _format(getattr(getattr(cfg, name), f.name))
                   for f in dataclasses.fields(cls)}
            for name, cls in SECTIONS.items()}


def dump_config(cfg: RunConfig):
    buf = io.StringIO()
    for section, items in config_to_sections(cfg).items():
        buf.write(f"[{section}]\n")
        for k, v in items.items():
            buf.write(f"{k} = {v}\n")
        buf.write("\n")
    return buf.getvalue()


def config_from_dict(d):
    """Rebuild from the JSON-able dict stored in checkpoint headers."""
    return build_config({s: {k: _format(tuple(v) if isinstance(v, list) else v)
                             for k, v in items.items()}
                         for s, items in d.items()})


def config_to_dict(cfg: RunConfig):
    return dataclasses.asdict(cfg)
