"""Line-based ``key = value`` run configuration with dotted section keys.

Example::

    # two-stage curriculum
    train.curriculum = 2, 3
    encoder.levels = 3
    transition.window_size = 7
"""
from __future__ import annotations

import dataclasses
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any

from .encoder import EncoderConfig
from .propagate import PropagationConfig
from .regressor import RegressorConfig
from .transition import TransitionConfig
from .walkloss import CycleConfig, SmoothnessConfig


class ConfigError(ValueError):
    """Unknown key or unparseable value; ``key`` names the offender."""

    def __init__(self, key: str, message: str):
        super().__init__(f"{key}: {message}")
        self.key = key


@dataclass
class TrainConfig:
    lr: float = 1e-4
    momentum: float = 0.9
    grad_clip: float = 10.0
    batch_size: int = 1
    steps_per_stage: int = 1000
    curriculum: list[int] = field(default_factory=lambda: [2])
    model: str = "nonparametric"          # or "regressor"
    seed: int = 0
    out: str = "run"
    # synthetic data source (used unless data_dir is set)
    data: str = "translation"             # or "occlusion"
    data_dir: str = ""
    size: int = 64
    max_shift: int = 8
    jitter_brightness: float = 0.0
    jitter_hue: float = 0.0
    checkpoint_every_stage: bool = True

    def __post_init__(self):
        if not self.curriculum or self.curriculum[0] < 2:
            raise ConfigError("train.curriculum", "first cycle length must be >= 2")
        if any(b <= a for a, b in zip(self.curriculum, self.curriculum[1:])):
            raise ConfigError("train.curriculum", "must be strictly increasing")
        if self.model not in ("nonparametric", "regressor"):
            raise ConfigError("train.model", f"unknown model {self.model!r}")
        if self.data not in ("translation", "occlusion"):
            raise ConfigError("train.data", f"unknown data source {self.data!r}")
        if self.batch_size < 1 or self.steps_per_stage < 0:
            raise ConfigError("train.batch_size", "batch_size >= 1 and steps_per_stage >= 0 required")
        if not 0 <= self.momentum < 1:
            raise ConfigError("train.momentum", "must be in [0, 1)")


SECTIONS = {
    "train": TrainConfig,
    "encoder": EncoderConfig,
    "transition": TransitionConfig,
    "cycle": CycleConfig,
    "smoothness": SmoothnessConfig,
    "regressor": RegressorConfig,
    "propagation": PropagationConfig,
}


@dataclass
class RunConfig:
    train: TrainConfig = field(default_factory=TrainConfig)
    encoder: EncoderConfig = field(default_factory=EncoderConfig)
    transition: TransitionConfig = field(default_factory=TransitionConfig)
    cycle: CycleConfig = field(default_factory=CycleConfig)
    smoothness: SmoothnessConfig = field(default_factory=SmoothnessConfig)
    regressor: RegressorConfig = field(default_factory=RegressorConfig)
    propagation: PropagationConfig = field(default_factory=PropagationConfig)

    def replace(self, **sections) -> "RunConfig":
        return dataclasses.replace(self, **sections)


def _format(value: Any) -> str:
    if value is None:
        return "none"
    if isinstance(value, bool):
        return "true" if value else "false"
    if isinstance(value, (list, tuple)):
        return ", ".join(_format(v) for v in value)
    if isinstance(value, float):
        return repr(value)
    return str(value)


def _parse_scalar(text: str, kind: str, key: str) -> Any:
    text = text.strip()
    try:
        if kind == "bool":
            low = text.lower()
            if low not in ("true", "false", "1", "0", "yes", "no"):
                raise ValueError(text)
            return low in ("true", "1", "yes")
        if kind == "int":
            return int(text)
        if kind == "float":
            return float(text)
    except ValueError:
        raise ConfigError(key, f"cannot parse {text!r} as {kind}") from None
    return text


def _field_kind(annotation: str) -> tuple[str, bool, bool]:
    """(scalar kind, is a list, may be None) from a string annotation."""
    ann = annotation.replace(" ", "")
    optional = "None" in ann
    is_list = ann.startswith("list[") or ann.startswith("tuple[")
    for kind in ("bool", "int", "float"):
        if kind in ann:
            return kind, is_list, optional
    return "str", is_list, optional


def _parse_value(text: str, annotation: str, key: str) -> Any:
    kind, is_list, optional = _field_kind(annotation)
    if optional and text.strip().lower() == "none":
        return None
    if is_list:
        parts = [p for p in text.split(",") if p.strip()]
        return [_parse_scalar(p, kind, key) for p in parts]
    return _parse_scalar(text, kind, key)


def parse_config(text: str) -> RunConfig:
    """Parse config text; unknown sections or keys raise :class:`ConfigError`."""
    values: dict[str, dict[str, Any]] = {name: {} for name in SECTIONS}
    for lineno, raw in enumerate(text.splitlines(), 1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError(f"line {lineno}", f"expected 'key = value', got {raw.strip()!r}")
        key, value = (s.strip() for s in line.split("=", 1))
        section, _, name = key.partition(".")
        if section not in SECTIONS or not name:
            raise ConfigError(key, "unknown configuration key")
        fields = {f.name: f for f in dataclasses.fields(SECTIONS[section]) if not f.name.startswith("_")}
        if name not in fields:
            raise ConfigError(key, "unknown configuration key")
        values[section][name] = _parse_value(value, str(fields[name].type), key)
    built = {}
    for section, cls in SECTIONS.items():
        try:
            built[section] = cls(**values[section])
        except ConfigError:
            raise
        except (ValueError, TypeError) as exc:
            raise ConfigError(section, str(exc)) from None
    return RunConfig(**built)


def serialize_config(config: RunConfig) -> str:
    lines = []
    for section in SECTIONS:
        obj = getattr(config, section)
        for f in dataclasses.fields(obj):
            if f.name.startswith("_"):
                continue
            lines.append(f"{section}.{f.name} = {_format(getattr(obj, f.name))}")
        lines.append("")
    return "\n".join(lines)


def load_config(path) -> RunConfig:
    return parse_config(Path(path).read_text())


def save_config(path, config: RunConfig) -> None:
    Path(path).write_text(serialize_config(config))
