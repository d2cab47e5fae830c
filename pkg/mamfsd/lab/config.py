"""
MAM-FSD Run Configuration
Sectioned key=value run files parsed into typed, validated sections
"""

import configparser
import dataclasses
from dataclasses import dataclass, field
from pathlib import Path
from typing import Dict, Tuple, Union, get_type_hints

from .base import ConfigError

# ============================================================================
# SECTIONS
# ============================================================================


@dataclass(frozen=True)
class ModelConfig:
    stem_channels: int = 16
    stage_channels: Tuple[int, ...] = (16, 32, 64, 128)
    stage_strides: Tuple[int, ...] = (1, 2, 2, 2)
    blocks_per_stage: int = 1
    resolution: int = 32
    feature_dim: int = 128
    vocab_size: int = 10


@dataclass(frozen=True)
class MamConfig:
    count: int = 4
    layers: int = 4
    kernel: int = 3
    # 0 keeps C' = C
    hidden_channels: int = 0
    depthwise: bool = False


@dataclass(frozen=True)
class DistillConfig:
    alpha: float = 1.0
    beta: float = 1.0
    lam: float = field(default=1.0, metadata={"key": "lambda"})


@dataclass(frozen=True)
class TemporalConfig:
    conv_channels: int = 64
    conv_kernel: int = 5
    hidden: int = 64
    ctc_weight: float = 1.0
    aux_weight: float = 1.0
    kl_weight: float = 1.0


@dataclass(frozen=True)
class TrainConfig:
    lr: float = 1e-4
    weight_decay: float = 1e-4
    batch_size: int = 2
    epochs: int = 50
    lr_drop_epochs: Tuple[int, ...] = (30, 40)
    lr_drop_factor: float = 0.2
    dev_beam: bool = False
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8


@dataclass(frozen=True)
class DecodeConfig:
    beam: int = 10


@dataclass(frozen=True)
class DataConfig:
    crop_ratio: float = 0.875
    flip_prob: float = 0.5
    stretch_min: float = 0.8
    stretch_max: float = 1.2


SECTIONS = {
    "model": ModelConfig,
    "mam": MamConfig,
    "distill": DistillConfig,
    "temporal": TemporalConfig,
    "train": TrainConfig,
    "decode": DecodeConfig,
    "data": DataConfig,
}


@dataclass(frozen=True)
class RunConfig:
    model: ModelConfig = field(default_factory=ModelConfig)
    mam: MamConfig = field(default_factory=MamConfig)
    distill: DistillConfig = field(default_factory=DistillConfig)
    temporal: TemporalConfig = field(default_factory=TemporalConfig)
    train: TrainConfig = field(default_factory=TrainConfig)
    decode: DecodeConfig = field(default_factory=DecodeConfig)
    data: DataConfig = field(default_factory=DataConfig)

    def replace(self, **sections) -> "RunConfig":
        return dataclasses.replace(self, **sections)

    def with_value(self, dotted: str, raw: str) -> "RunConfig":
        """Copy with one ``section.key`` set from its textual form."""
        section, _, key = dotted.partition('.')
        if section not in SECTIONS or not key:
            raise ConfigError(f"unknown config key: {dotted}")
        current = getattr(self, section)
        name = _field_for_key(SECTIONS[section], key)
        hints = get_type_hints(SECTIONS[section])
        value = _parse_value(hints[name], raw, dotted)
        updated = self.replace(**{section: dataclasses.replace(current, **{name: value})})
        validate_config(updated)
        return updated

    def lr_at(self, epoch: int) -> float:
        """Learning rate for 1-based ``epoch`` after the configured drops."""
        lr = self.train.lr
        for drop in self.train.lr_drop_epochs:
            if epoch > drop:
                lr *= self.train.lr_drop_factor
        return lr


# ============================================================================
# PARSING
# ============================================================================

def _key_of(f: dataclasses.Field) -> str:
    return f.metadata.get("key", f.name)


def _field_for_key(cls, key: str) -> str:
    for f in dataclasses.fields(cls):
        if _key_of(f) == key:
            return f.name
    raise ConfigError(f"unknown config key: {key} in [{_section_name(cls)}]")


def _section_name(cls) -> str:
    return next(name for name, c in SECTIONS.items() if c is cls)


def _parse_value(kind, raw: str, where: str):
    text = raw.strip()
    try:
        if kind is bool:
            lowered = text.lower()
            if lowered in ("true", "yes", "1", "on"):
                return True
            if lowered in ("false", "no", "0", "off"):
                return False
            raise ValueError(text)
        if kind is int:
            return int(text)
        if kind is float:
            return float(text)
        if kind == Tuple[int, ...]:
            return tuple(int(p) for p in text.split(',') if p.strip())
        if kind == Tuple[float, ...]:
            return tuple(float(p) for p in text.split(',') if p.strip())
    except ValueError:
        raise ConfigError(f"{where}: cannot parse {raw!r} as {getattr(kind, '__name__', kind)}") from None
    raise ConfigError(f"{where}: unsupported field type {kind}")


def _format_value(value) -> str:
    if isinstance(value, bool):
        return "true" if value else "false"
    if isinstance(value, tuple):
        return ",".join(_format_value(v) for v in value)
    return repr(value)


def parse_config(text: str, source: str = "<config>") -> RunConfig:
    """Parse sectioned key=value text; every key defaults, unknown keys are errors."""
    parser = configparser.ConfigParser(interpolation=None, delimiters=("=",))
    parser.optionxform = str
    try:
        parser.read_string(text, source=source)
    except configparser.Error as exc:
        raise ConfigError(f"{source}: {exc}") from None

    sections: Dict[str, object] = {}
    for section in parser.sections():
        if section not in SECTIONS:
            raise ConfigError(f"{source}: unknown section [{section}]")
        cls = SECTIONS[section]
        hints = get_type_hints(cls)
        values = {}
        for key, raw in parser.items(section):
            name = _field_for_key(cls, key)
            values[name] = _parse_value(hints[name], raw, f"{source}: {section}.{key}")
        sections[section] = cls(**values)
    config = RunConfig(**sections)
    validate_config(config)
    return config


def load_config(path: Union[str, Path, None]) -> RunConfig:
    if path is None:
        return RunConfig()
    path = Path(path)
    if not path.exists():
        raise ConfigError(f"config file not found: {path}")
    return parse_config(path.read_text(encoding='utf-8'), source=str(path))


def config_to_text(config: RunConfig) -> str:
    """Effective configuration, every key spelled out; parse_config inverts it."""
    lines = []
    for section, cls in SECTIONS.items():
        lines.append(f"[{section}]")
        values = getattr(config, section)
        for f in dataclasses.fields(cls):
            lines.append(f"{_key_of(f)} = {_format_value(getattr(values, f.name))}")
        lines.append("")
    return "\n".join(lines)


def save_config(config: RunConfig, path: Union[str, Path]) -> None:
    Path(path).write_text(config_to_text(config), encoding='utf-8', newline='\n')


# ============================================================================
# VALIDATION
# ============================================================================

def validate_config(config: RunConfig) -> None:
    m = config.model
    if len(m.stage_channels) != 4 or len(m.stage_strides) != 4:
        raise ConfigError("model.stage_channels and model.stage_strides need exactly 4 entries")
    if min(m.stage_channels) < 1 or m.stem_channels < 1 or min(m.stage_strides) < 1:
        raise ConfigError("model channels and strides must be positive")
    if m.blocks_per_stage < 1:
        raise ConfigError("model.blocks_per_stage must be at least 1")
    total_stride = 1
    for s in m.stage_strides:
        total_stride *= s
    if m.resolution < 1 or m.resolution % total_stride:
        raise ConfigError(f"model.resolution {m.resolution} is not divisible by the cumulative stride {total_stride}")
    if m.feature_dim != m.stage_channels[-1]:
        raise ConfigError(f"model.feature_dim {m.feature_dim} must equal the last stage width {m.stage_channels[-1]}")
    if m.vocab_size < 1:
        raise ConfigError("model.vocab_size must be at least 1")

    mam = config.mam
    if not 0 <= mam.count <= 4:
        raise ConfigError(f"mam.count must lie in 0..4, got {mam.count}")
    if mam.layers < 1:
        raise ConfigError("mam.layers must be at least 1")
    if mam.kernel < 1 or mam.kernel % 2 == 0:
        raise ConfigError(f"mam.kernel must be a positive odd number, got {mam.kernel}")
    if mam.hidden_channels < 0:
        raise ConfigError("mam.hidden_channels must be >= 0")

    d = config.distill
    if min(d.alpha, d.beta, d.lam) < 0:
        raise ConfigError("distill weights must be non-negative")

    t = config.temporal
    if t.conv_kernel < 1 or t.conv_kernel % 2 == 0:
        raise ConfigError("temporal.conv_kernel must be a positive odd number")
    if t.conv_channels < 1 or t.hidden < 1:
        raise ConfigError("temporal widths must be positive")
    if min(t.ctc_weight, t.aux_weight, t.kl_weight) < 0:
        raise ConfigError("temporal loss weights must be non-negative")

    tr = config.train
    if tr.lr <= 0 or tr.weight_decay < 0 or tr.batch_size < 1 or tr.epochs < 1:
        raise ConfigError("train.lr > 0, train.weight_decay >= 0, train.batch_size >= 1, train.epochs >= 1 required")
    if not 0 < tr.lr_drop_factor <= 1:
        raise ConfigError("train.lr_drop_factor must lie in (0, 1]")

    if config.decode.beam < 1:
        raise ConfigError("decode.beam must be at least 1")

    da = config.data
    if not 0 < da.crop_ratio <= 1 or not 0 <= da.flip_prob <= 1:
        raise ConfigError("data.crop_ratio must lie in (0, 1] and data.flip_prob in [0, 1]")
    if not 0 < da.stretch_min <= da.stretch_max:
        raise ConfigError("data.stretch_min must be positive and <= data.stretch_max")
