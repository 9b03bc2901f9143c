"""``key = value`` configuration files with dotted section keys.

Example::

    train.lambda1 = 1.0
    shift.fog_intensity = 0.6
    shift.fog_color = 0.8, 0.8, 0.82

Unknown keys and badly typed values are errors; absent keys keep defaults.
"""

from __future__ import annotations

import dataclasses
from dataclasses import dataclass, field
from pathlib import Path

from .domains import SceneConfig, ShiftConfig


class ConfigError(ValueError):
    pass


@dataclass(frozen=True)
class TrainConfig:
    lambda1: float = 1.0
    lambda2: float = 0.01
    batch_size: int = 2
    pretrain_iters: int = 1500
    adapt_iters: int = 2100
    psa_start_iter: int = 1500
    pretrain_lr: float = 1e-3
    detector_lr: float = 1e-3
    detector_lr_after_decay: float = 1e-4
    lr_decay_iter: int = 1500
    momentum: float = 0.9
    classifier_lr: float = 1e-3
    classifier_hidden: int = 16
    grl_coeff: float = 0.3
    pseudo_score_thresh: float = 0.8
    use_attention: bool = True
    normalize_art: bool = True
    seed: int = 0
    num_classes: int = 3

    def __post_init__(self):
        if self.batch_size <= 0 or self.batch_size % 2:
            raise ConfigError("train.batch_size must be a positive even number")
        if self.batch_size != 2:
            raise ConfigError("train.batch_size: only one image per domain (2) is supported")
        if self.psa_start_iter > self.adapt_iters:
            raise ConfigError("train.psa_start_iter must not exceed train.adapt_iters")
        if self.lambda1 < 0 or self.lambda2 < 0:
            raise ConfigError("train.lambda1 and train.lambda2 must be non-negative")


@dataclass(frozen=True)
class DataConfig:
    n_source: int = 200
    n_target: int = 200
    n_test: int = 100
    seed: int = 0


@dataclass(frozen=True)
class RunConfig:
    train: TrainConfig = field(default_factory=TrainConfig)
    data: DataConfig = field(default_factory=DataConfig)
    scene: SceneConfig = field(default_factory=SceneConfig)
    shift: ShiftConfig = field(default_factory=ShiftConfig)

    def with_train(self, **changes) -> "RunConfig":
        return dataclasses.replace(self, train=dataclasses.replace(self.train, **changes))


SECTIONS = ("train", "data", "scene", "shift")


def _format(value) -> str:
    if isinstance(value, bool):
        return "true" if value else "false"
    if isinstance(value, tuple):
        return ", ".join(_format(v) for v in value)
    if isinstance(value, float):
        return repr(value)
    return str(value)


def _parse_value(raw: str, default, where: str):
    text = raw.strip()
    try:
        if isinstance(default, bool):
            if text.lower() not in ("true", "false", "1", "0"):
                raise ValueError
            return text.lower() in ("true", "1")
        if isinstance(default, int):
            return int(text)
        if isinstance(default, float):
            return float(text)
        if isinstance(default, tuple):
            items = tuple(float(v) for v in text.split(","))
            if len(items) != len(default):
                raise ValueError
            return items
        return text
    except ValueError:
        kind = "tuple of %d numbers" % len(default) if isinstance(default, tuple) else type(default).__name__
        raise ConfigError(f"{where}: expected {kind}, got {text!r}") from None


def parse_config_text(text: str, source: str = "<config>") -> RunConfig:
    overrides: dict[str, dict] = {s: {} for s in SECTIONS}
    defaults = RunConfig()
    for lineno, line in enumerate(text.splitlines(), start=1):
        stripped = line.split("#", 1)[0].strip()
        if not stripped:
            continue
        if "=" not in stripped:
            raise ConfigError(f"{source}:{lineno}: expected 'key = value'")
        key, raw = (part.strip() for part in stripped.split("=", 1))
        section, _, name = key.partition(".")
        if section not in SECTIONS or not name:
            raise ConfigError(f"{source}:{lineno}: unknown key {key!r}")
        section_default = getattr(defaults, section)
        if name not in {f.name for f in dataclasses.fields(section_default)}:
            raise ConfigError(f"{source}:{lineno}: unknown key {key!r}")
        overrides[section][name] = _parse_value(
            raw, getattr(section_default, name), f"{source}:{lineno}: {key}"
        )
    try:
        return RunConfig(**{s: dataclasses.replace(getattr(defaults, s), **overrides[s]) for s in SECTIONS})
    except ConfigError as exc:
        raise ConfigError(f"{source}: {exc}") from None


def parse_config(path) -> RunConfig:
    path = Path(path)
    try:
        text = path.read_text()
    except OSError as exc:
        raise ConfigError(f"cannot read config {path}: {exc}") from None
    return parse_config_text(text, str(path))


def format_config(config: RunConfig) -> str:
    lines = []
    for section in SECTIONS:
        obj = getattr(config, section)
        for f in dataclasses.fields(obj):
            lines.append(f"{section}.{f.name} = {_format(getattr(obj, f.name))}")
    return "\n".join(lines) + "\n"


def write_resolved(config: RunConfig, directory) -> Path:
    path = Path(directory) / "resolved.cfg"
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(format_config(config))
    return path
