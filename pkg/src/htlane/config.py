"""key=value configuration files merged with command-line overrides.

Keys are the flat field names of :class:`TrainConfig` (``mode``,
``batch_size``, ...), ``loss.<field>`` for :class:`LossConfig` and
``scene.<field>`` for :class:`SceneConfig`. Range-valued scene fields take
``lo,hi``.
"""

from __future__ import annotations

import dataclasses
from dataclasses import dataclass, field

from .errors import ConfigError
from .losses import LossConfig
from .synth import SceneConfig
from .trainer import TrainConfig


def parse_pairs(text: str, source="config") -> dict:
    pairs = {}
    for n, line in enumerate(text.splitlines(), 1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        key, sep, value = line.partition("=")
        if not sep or not key.strip():
            raise ConfigError(f"{source}:{n}: expected key=value, got {line!r}")
        pairs[key.strip()] = value.strip()
    return pairs


def _coerce(value: str, default):
    if isinstance(default, bool):
        if value.lower() in ("1", "true", "yes", "on"):
            return True
        if value.lower() in ("0", "false", "no", "off"):
            return False
        raise ValueError(value)
    if isinstance(default, int):
        return int(value)
    if isinstance(default, float):
        return float(value)
    if isinstance(default, tuple):
        return tuple(float(v) for v in value.strip("()").split(","))
    return value


def _build(cls, prefix, pairs, used):
    kwargs = {}
    defaults = cls()
    for f in dataclasses.fields(cls):
        key = prefix + f.name
        if key not in pairs or dataclasses.is_dataclass(getattr(defaults, f.name)):
            continue
        used.add(key)
        try:
            kwargs[f.name] = _coerce(pairs[key], getattr(defaults, f.name))
        except ValueError:
            raise ConfigError(f"bad value for {key}: {pairs[key]!r}") from None
    return kwargs


@dataclass(frozen=True)
class CliConfig:
    train: TrainConfig = field(default_factory=TrainConfig)
    scene: SceneConfig = field(default_factory=SceneConfig)

    def lines(self):
        out = [f"{k}={v}" for k, v in self.train.flat().items()]
        out += [f"scene.{k}={v}" for k, v in dataclasses.asdict(self.scene).items()]
        return out


def resolve(pairs: dict) -> CliConfig:
    """Build a :class:`CliConfig`; unknown keys are rejected."""
    used = set()
    loss = LossConfig(**_build(LossConfig, "loss.", pairs, used))
    train = TrainConfig(loss=loss, **_build(TrainConfig, "", pairs, used))
    scene = SceneConfig(**_build(SceneConfig, "scene.", pairs, used))
    unknown = sorted(set(pairs) - used)
    if unknown:
        raise ConfigError(f"unknown config key(s): {', '.join(unknown)}")
    return CliConfig(train, scene)


def train_config_from_pairs(pairs: dict) -> TrainConfig:
    return resolve({k: v for k, v in pairs.items() if not k.startswith("scene.")}).train


def load(path=None, overrides=None) -> CliConfig:
    pairs = {}
    if path:
        try:
            text = open(path).read()
        except OSError as e:
            raise ConfigError(f"{path}: {e.strerror}") from None
        pairs.update(parse_pairs(text, str(path)))
    pairs.update({k: str(v) for k, v in (overrides or {}).items() if v is not None})
    return resolve(pairs)
