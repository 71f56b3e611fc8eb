"""Model, training and dataset configuration plus the ``key = value`` file format.

A config file has up to three sections::

    [model]
    c_fpn = 64
    ranks = 5, 5, 5

    [train]
    steps = 500

    [data]
    num_scenes = 200

Unknown sections or keys raise :class:`~gtnet.errors.ConfigError`.
"""
from __future__ import annotations

import configparser
import dataclasses
from dataclasses import dataclass, field
from pathlib import Path

from ..errors import ConfigError

TIERS = ("small", "medium", "large")


@dataclass
class ModelConfig:
    c_fpn: int = 64
    k_cat: int = 5
    ranks: tuple[int, int, int] = (5, 5, 5)
    k_out: int | None = None  # defaults to c_fpn
    l1_weight: float = 1e-4
    ga_enabled: bool = True
    tba_enabled: bool = True
    in_channels: int = 1
    stem_width: int = 16
    widths: tuple[int, int, int, int] = (32, 64, 128, 256)
    prior_prob: float = 0.01
    shared_head: bool = True

    def __post_init__(self):
        self.ranks = tuple(int(r) for r in self.ranks)
        self.widths = tuple(int(w) for w in self.widths)
        if len(self.ranks) != 3 or min(self.ranks) < 1:
            raise ConfigError(f"ranks must be three positive integers, got {self.ranks}")
        if self.ranks[0] > self.k_cat or self.ranks[1] > self.k_cat:
            raise ConfigError(f"ranks P, Q must not exceed k_cat={self.k_cat}, got {self.ranks}")
        if len(self.widths) != 4 or any(w % 2 for w in self.widths):
            raise ConfigError(f"widths must be four even channel counts, got {self.widths}")
        for a, b in zip(self.widths, self.widths[1:]):
            if b != 2 * a:
                raise ConfigError(f"each backbone level must double the channels, got {self.widths}")
        if self.c_fpn < 1 or self.k_cat < 1:
            raise ConfigError("c_fpn and k_cat must be positive")

    @property
    def k_out_resolved(self) -> int:
        return self.c_fpn if self.k_out is None else self.k_out


@dataclass
class TrainConfig:
    lr: float = 0.01
    steps: int = 500
    batch_size: int = 4
    seed: int = 0
    grad_clip: float | None = 10.0
    focal_alpha: float = 0.25
    focal_gamma: float = 2.0
    box_beta: float = 0.1
    box_weight: float = 1.0

    def __post_init__(self):
        if self.lr < 0 or self.steps < 0 or self.batch_size < 1:
            raise ConfigError("lr and steps must be nonnegative and batch_size positive")


@dataclass
class DataConfig:
    image_size: int = 128
    channels: int = 1
    num_scenes: int = 200
    eval_scenes: int = 60
    min_objects: int = 2
    max_objects: int = 6
    tier_weights: tuple[float, float, float] = (0.5, 0.3, 0.2)
    noise_std: float = 0.08
    seed: int | None = None  # None: follow the training seed

    def __post_init__(self):
        self.tier_weights = tuple(float(w) for w in self.tier_weights)
        if self.image_size % 32:
            raise ConfigError(f"image_size must be divisible by 32, got {self.image_size}")
        if not 0 <= self.min_objects <= self.max_objects:
            raise ConfigError("need 0 <= min_objects <= max_objects")
        if len(self.tier_weights) != 3 or min(self.tier_weights) < 0 or sum(self.tier_weights) <= 0:
            raise ConfigError(f"tier_weights must be three nonnegative numbers, got {self.tier_weights}")


@dataclass
class RunConfig:
    model: ModelConfig = field(default_factory=ModelConfig)
    train: TrainConfig = field(default_factory=TrainConfig)
    data: DataConfig = field(default_factory=DataConfig)


_SECTIONS = {"model": ModelConfig, "train": TrainConfig, "data": DataConfig}


def _parse_value(raw: str, default, type_hint: str):
    raw = raw.strip()
    if raw.lower() in ("none", "") and "None" in type_hint:
        return None
    if "tuple" in type_hint:
        parts = [s.strip() for s in raw.split(",") if s.strip()]
        conv = float if "float" in type_hint else int
        return tuple(conv(s) for s in parts)
    if "bool" in type_hint:
        lowered = raw.lower()
        if lowered in ("1", "true", "yes", "on"):
            return True
        if lowered in ("0", "false", "no", "off"):
            return False
        raise ValueError(f"not a boolean: {raw!r}")
    if "int" in type_hint and "float" not in type_hint:
        return int(raw)
    if "float" in type_hint:
        return float(raw)
    return type(default)(raw)


def parse_config(text: str, source: str = "<string>") -> RunConfig:
    parser = configparser.ConfigParser(
        interpolation=None, inline_comment_prefixes=("#", ";"), default_section="__defaults__"
    )
    parser.optionxform = str
    try:
        parser.read_string(text, source=source)
    except configparser.Error as exc:
        raise ConfigError(f"{source}: {exc}") from exc
    sections = {}
    for name in parser.sections():
        if name not in _SECTIONS:
            raise ConfigError(f"{source}: unknown section [{name}]")
        cls = _SECTIONS[name]
        fields = {f.name: f for f in dataclasses.fields(cls)}
        defaults = cls()
        kwargs = {}
        for key, raw in parser.items(name):
            if key not in fields:
                raise ConfigError(f"{source}: unknown key {key!r} in [{name}]")
            try:
                kwargs[key] = _parse_value(raw, getattr(defaults, key), str(fields[key].type))
            except ValueError as exc:
                raise ConfigError(f"{source}: bad value for {name}.{key}: {exc}") from exc
        sections[name] = cls(**kwargs)
    return RunConfig(**sections)


def load_config(path) -> RunConfig:
    path = Path(path)
    try:
        text = path.read_text()
    except OSError as exc:
        raise ConfigError(f"cannot read config {path}: {exc}") from exc
    return parse_config(text, source=str(path))


def dump_config(cfg: RunConfig) -> str:
    lines = []
    for name, section in (("model", cfg.model), ("train", cfg.train), ("data", cfg.data)):
        lines.append(f"[{name}]")
        for f in dataclasses.fields(section):
            value = getattr(section, f.name)
            if isinstance(value, tuple):
                value = ", ".join(str(v) for v in value)
            lines.append(f"{f.name} = {value}")
        lines.append("")
    return "\n".join(lines)
