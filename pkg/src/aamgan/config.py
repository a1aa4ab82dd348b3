"""Run configuration: typed sections, strict parsing and snapshots.

The on-disk format is INI-style text::

    [train]
    total_iterations = 5000
    lambda_cls = 1.0

Sections map one-to-one onto the dataclasses below. Unknown sections or
keys are rejected, and every value is validated before any work starts.
"""

from __future__ import annotations

import configparser
import dataclasses
import io
import math
import typing
from dataclasses import dataclass, field, fields, replace
from typing import Optional, Tuple

from .errors import ConfigError
from .heads import AAM, HEAD_KINDS, SOFTMAX
from .losses import NON_SATURATING, SATURATING, LossWeights

LOGLOSS = "logloss"
WGAN_GP = "wgan-gp"


def _positive(section, name, value):
    if not value > 0:
        raise ConfigError(f"{section}.{name}", f"must be > 0, got {value}")


def _non_negative(section, name, value):
    if not (math.isfinite(value) and value >= 0):
        raise ConfigError(f"{section}.{name}", f"must be finite and >= 0, got {value}")


def _choice(section, name, value, options):
    if value not in options:
        raise ConfigError(f"{section}.{name}", f"must be one of {', '.join(options)}, got {value!r}")


@dataclass(frozen=True)
class ModelConfig:
    image_size: int = 32
    num_classes: int = 8
    g_conv_dim: int = 16
    g_down: int = 2
    g_res_blocks: int = 4
    d_conv_dim: int = 16
    d_strided: int = 4
    embed_dim: int = 128

    def validate(self, section="model"):
        if self.image_size not in (32, 64, 128):
            raise ConfigError(f"{section}.image_size", "must be 32, 64 or 128")
        if self.num_classes < 2:
            raise ConfigError(f"{section}.num_classes", "must be >= 2")
        for name in ("g_conv_dim", "g_down", "d_conv_dim", "d_strided", "embed_dim"):
            _positive(section, name, getattr(self, name))
        _non_negative(section, "g_res_blocks", self.g_res_blocks)
        if self.image_size >> self.d_strided < 1:
            raise ConfigError(f"{section}.d_strided", "too many stages for image_size")


@dataclass(frozen=True)
class HeadConfig:
    kind: str = AAM
    scale: float = 30.0
    margin: float = 0.35
    # margin used for the generated-image term; None means "same as margin"
    fake_margin: Optional[float] = None

    def validate(self, section="head"):
        _choice(section, "kind", self.kind, HEAD_KINDS)
        _positive(section, "scale", self.scale)
        for name in ("margin", "fake_margin"):
            v = getattr(self, name)
            if v is not None and not 0 <= v < math.pi:
                raise ConfigError(f"{section}.{name}", f"must lie in [0, pi), got {v}")


@dataclass(frozen=True)
class TrainConfig:
    total_iterations: int = 5000
    batch_size: int = 16
    lr_initial: float = 1e-4
    lr_decay_every: int = 10000
    lr_decay_factor: float = 0.5
    beta1: float = 0.5
    beta2: float = 0.999
    d_steps_per_g_step: Optional[int] = None
    adversarial: str = LOGLOSS
    g_adversarial: str = NON_SATURATING
    lambda_cls: float = 1.0
    lambda_rec: float = 10.0
    lambda_gp: float = 10.0
    seed: int = 0
    checkpoint_every: int = 1000
    log_every: int = 10

    def validate(self, section="train"):
        _non_negative(section, "total_iterations", self.total_iterations)
        for name in ("batch_size", "lr_initial", "lr_decay_every", "checkpoint_every", "log_every"):
            _positive(section, name, getattr(self, name))
        if not 0 < self.lr_decay_factor <= 1:
            raise ConfigError(f"{section}.lr_decay_factor", "must lie in (0, 1]")
        for name in ("beta1", "beta2"):
            if not 0 <= getattr(self, name) < 1:
                raise ConfigError(f"{section}.{name}", "must lie in [0, 1)")
        if self.d_steps_per_g_step is not None:
            _positive(section, "d_steps_per_g_step", self.d_steps_per_g_step)
        _choice(section, "adversarial", self.adversarial, (LOGLOSS, WGAN_GP))
        _choice(section, "g_adversarial", self.g_adversarial, (NON_SATURATING, SATURATING))
        for name in ("lambda_cls", "lambda_rec", "lambda_gp"):
            _non_negative(section, name, getattr(self, name))

    @property
    def d_steps(self):
        if self.d_steps_per_g_step is not None:
            return self.d_steps_per_g_step
        return 5 if self.adversarial == WGAN_GP else 1

    @property
    def loss_weights(self):
        return LossWeights(self.lambda_cls, self.lambda_rec)


@dataclass(frozen=True)
class DataConfig:
    manifest: str = ""
    test_manifest: str = ""
    split: str = "halves"
    split_seed: int = 0
    toy_classes: int = 8
    toy_samples_per_class: int = 500
    toy_seed: int = 0

    def validate(self, section="data"):
        _choice(section, "split", self.split, ("halves", "none"))
        if not 2 <= self.toy_classes <= 12:
            raise ConfigError(f"{section}.toy_classes", "must lie in [2, 12]")
        _positive(section, "toy_samples_per_class", self.toy_samples_per_class)
        if self.split == "none" and self.manifest and not self.test_manifest:
            raise ConfigError(f"{section}.test_manifest", "required when split = none")


@dataclass(frozen=True)
class MetricsConfig:
    classifier_epochs: int = 4
    classifier_batch_size: int = 64
    classifier_lr: float = 2e-3
    classifier_width: int = 16
    seed: int = 0
    # real source images used for synthesis fan-out; 0 means all
    max_sources: int = 0
    noise_levels: Tuple[float, ...] = (0.0, 0.2, 0.4, 0.6, 0.8)
    augment_sizes: Tuple[int, ...] = (100, 250, 500)
    sweep_lambdas: Tuple[float, ...] = (0.5, 1.0, 1.5, 2.0, 5.0, 10.0)

    def validate(self, section="metrics"):
        for name in ("classifier_epochs", "classifier_batch_size", "classifier_lr", "classifier_width"):
            _positive(section, name, getattr(self, name))
        _non_negative(section, "max_sources", self.max_sources)
        levels = self.noise_levels
        if any(not 0 <= p <= 1 for p in levels) or list(levels) != sorted(levels):
            raise ConfigError(f"{section}.noise_levels", "must be sorted values in [0, 1]")
        if any(n <= 0 for n in self.augment_sizes):
            raise ConfigError(f"{section}.augment_sizes", "must be positive")
        if any(not (math.isfinite(v) and v > 0) for v in self.sweep_lambdas):
            raise ConfigError(f"{section}.sweep_lambdas", "must be positive")


@dataclass(frozen=True)
class RunSection:
    name: str = "run"
    out: str = ""

    def validate(self, section="run"):
        if not self.name or "/" in self.name:
            raise ConfigError(f"{section}.name", "must be a non-empty name without '/'")


@dataclass(frozen=True)
class RunConfig:
    model: ModelConfig = field(default_factory=ModelConfig)
    head: HeadConfig = field(default_factory=HeadConfig)
    train: TrainConfig = field(default_factory=TrainConfig)
    data: DataConfig = field(default_factory=DataConfig)
    metrics: MetricsConfig = field(default_factory=MetricsConfig)
    run: RunSection = field(default_factory=RunSection)

    def validate(self):
        for f in fields(self):
            getattr(self, f.name).validate(f.name)
        if self.head.kind == SOFTMAX and self.head.fake_margin not in (None, 0.0):
            raise ConfigError("head.fake_margin", "must be unset for a softmax head")
        return self

    def with_overrides(self, overrides):
        """Apply ``{"section.key": value}`` overrides (values already typed)."""
        cfg = self
        for dotted, value in overrides.items():
            section, _, key = dotted.partition(".")
            if section not in SECTIONS or key not in _field_names(SECTIONS[section]):
                raise ConfigError(dotted, "unknown configuration key")
            cfg = replace(cfg, **{section: replace(getattr(cfg, section), **{key: value})})
        return cfg.validate()

    def to_text(self, sections=None):
        return dumps(self, sections)


SECTIONS = {
    "model": ModelConfig,
    "head": HeadConfig,
    "train": TrainConfig,
    "data": DataConfig,
    "metrics": MetricsConfig,
    "run": RunSection,
}


def _field_names(cls):
    return {f.name for f in fields(cls)}


def _hints(cls):
    return typing.get_type_hints(cls)


def _parse_value(where, hint, text):
    text = text.strip()
    origin = typing.get_origin(hint)
    args = typing.get_args(hint)
    try:
        if origin is typing.Union and type(None) in args:
            if text.lower() in ("", "none", "auto"):
                return None
            inner = next(a for a in args if a is not type(None))
            return _parse_value(where, inner, text)
        if origin in (tuple, Tuple):
            item = args[0]
            parts = [p for p in text.replace(";", ",").split(",") if p.strip()]
            return tuple(_parse_value(where, item, p) for p in parts)
        if hint is bool:
            low = text.lower()
            if low in ("1", "true", "yes", "on"):
                return True
            if low in ("0", "false", "no", "off"):
                return False
            raise ValueError(text)
        if hint is int:
            return int(text)
        if hint is float:
            v = float(text)
            if not math.isfinite(v):
                raise ValueError(text)
            return v
        return text
    except (ValueError, StopIteration):
        raise ConfigError(where, f"cannot parse {text!r} as {getattr(hint, '__name__', hint)}") from None


def _format_value(value):
    if value is None:
        return "none"
    if isinstance(value, tuple):
        return ", ".join(_format_value(v) for v in value)
    if isinstance(value, float):
        return repr(value)
    return str(value)


def loads(text) -> RunConfig:
    parser = configparser.ConfigParser(interpolation=None, strict=True)
    parser.optionxform = str
    try:
        parser.read_string(text)
    except configparser.Error as exc:
        raise ConfigError("config", str(exc).splitlines()[0]) from None
    values = {}
    for section in parser.sections():
        if section not in SECTIONS:
            raise ConfigError(section, "unknown section")
        cls = SECTIONS[section]
        hints = _hints(cls)
        kwargs = {}
        for key, raw in parser.items(section):
            if key not in hints:
                raise ConfigError(f"{section}.{key}", "unknown configuration key")
            kwargs[key] = _parse_value(f"{section}.{key}", hints[key], raw)
        values[section] = cls(**kwargs)
    return RunConfig(**values).validate()


def load(path) -> RunConfig:
    try:
        with open(path, encoding="utf-8") as fh:
            text = fh.read()
    except OSError as exc:
        raise ConfigError("config", f"cannot read {path}: {exc.strerror}") from None
    return loads(text)


def dumps(cfg: RunConfig, sections=None) -> str:
    out = io.StringIO()
    for name in sections or SECTIONS:
        section = getattr(cfg, name)
        out.write(f"[{name}]\n")
        for f in fields(section):
            out.write(f"{f.name} = {_format_value(getattr(section, f.name))}\n")
        out.write("\n")
    return out.getvalue()


def section_dict(section):
    return dataclasses.asdict(section)


def parse_override(assignment):
    """Parse ``"section.key=value"`` into ``("section.key", typed value)``."""
    dotted, sep, text = assignment.partition("=")
    dotted = dotted.strip()
    section, _, key = dotted.partition(".")
    if not sep or section not in SECTIONS or key not in _field_names(SECTIONS[section]):
        raise ConfigError(dotted or assignment, "unknown configuration key")
    return dotted, _parse_value(dotted, _hints(SECTIONS[section])[key], text)
