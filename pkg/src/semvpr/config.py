"""Training configuration and its TOML representation.

Sections: encoder, attention, pooling, semseg, da, mining, optimizer,
schedule, ablation, plus a top-level ``train`` table.
"""

from __future__ import annotations

import dataclasses
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any, Dict, Tuple

try:
    import tomllib
except ModuleNotFoundError:  # Python < 3.11
    import tomli as tomllib

from .blocks import EncoderConfig
from .mining import MiningPolicy
from .model import Flags, ModelConfig


@dataclass
class AttentionSection:
    bank_channels: int = 64
    kernels: Tuple[int, ...] = (3, 5, 7)


@dataclass
class PoolingSection:
    p4: float = 3.0
    p5: float = 3.0
    learn_p: bool = False
    norm: str = "spatial"


@dataclass
class SemsegSection:
    num_classes: int = 17
    decoder_width: int = 32
    init_std: float = 0.01
    alpha: float = 0.5


@dataclass
class DASection:
    beta: float = 0.0005
    gamma: float = 0.5
    channels: Tuple[int, ...] = (64, 128, 256, 512, 1)
    input_size: int = 32


@dataclass
class MiningSection:
    margin: float = 0.1
    positive_radius_m: float = 10.0
    negative_exclusion_radius_m: float = 25.0
    cache_refresh_every: int = 50
    negative_pool: int = 0


@dataclass
class OptimizerSection:
    kind: str = "sgd"
    lr: float = 1e-4
    momentum: float = 0.9
    weight_decay: float = 0.0005
    disc_kind: str = "adam"
    disc_lr: float = 4e-4
    betas: Tuple[float, float] = (0.9, 0.999)
    eps: float = 1e-8


@dataclass
class ScheduleSection:
    kind: str = "poly"
    power: float = 0.9


@dataclass
class TrainSection:
    seed: int = 0
    steps: int = 500
    eval_every: int = 100
    augment: bool = True
    crop_margin: int = 8
    eval_radius_m: float = 25.0


@dataclass
class Config:
    train: TrainSection = field(default_factory=TrainSection)
    encoder: EncoderConfig = field(default_factory=EncoderConfig)
    attention: AttentionSection = field(default_factory=AttentionSection)
    pooling: PoolingSection = field(default_factory=PoolingSection)
    semseg: SemsegSection = field(default_factory=SemsegSection)
    da: DASection = field(default_factory=DASection)
    mining: MiningSection = field(default_factory=MiningSection)
    optimizer: OptimizerSection = field(default_factory=OptimizerSection)
    schedule: ScheduleSection = field(default_factory=ScheduleSection)
    ablation: Flags = field(default_factory=Flags)

    def model_config(self) -> ModelConfig:
        return ModelConfig(
            encoder=self.encoder,
            bank_channels=self.attention.bank_channels,
            bank_kernels=tuple(self.attention.kernels),
            p4=self.pooling.p4,
            p5=self.pooling.p5,
            learn_p=self.pooling.learn_p,
            norm=self.pooling.norm,
            num_classes=self.semseg.num_classes,
            decoder_width=self.semseg.decoder_width,
            decoder_init_std=self.semseg.init_std,
            disc_channels=tuple(self.da.channels),
            disc_size=self.da.input_size,
            flags=self.ablation,
        )

    def mining_policy(self) -> MiningPolicy:
        return MiningPolicy(
            positive_radius_m=self.mining.positive_radius_m,
            negative_exclusion_radius_m=self.mining.negative_exclusion_radius_m,
            cache_refresh_every=self.mining.cache_refresh_every,
            negative_pool=self.mining.negative_pool or None,
        )

    def to_dict(self) -> Dict[str, Dict[str, Any]]:
        return {f.name: dataclasses.asdict(getattr(self, f.name)) for f in dataclasses.fields(self)}


def _build(cls, table: Dict[str, Any], section: str):
    names = {f.name: f for f in dataclasses.fields(cls)}
    unknown = set(table) - set(names)
    if unknown:
        raise ValueError(f"[{section}] unknown keys: {sorted(unknown)}")
    kwargs = {}
    for k, v in table.items():
        kwargs[k] = tuple(v) if isinstance(v, list) else v
    return cls(**kwargs)


def config_from_dict(data: Dict[str, Dict[str, Any]]) -> Config:
    sections = {f.name: f for f in dataclasses.fields(Config)}
    unknown = set(data) - set(sections)
    if unknown:
        raise ValueError(f"unknown config sections: {sorted(unknown)}")
    kwargs = {}
    for name, f in sections.items():
        if name in data:
            cls = f.default_factory().__class__
            kwargs[name] = _build(cls, data[name], name)
    return Config(**kwargs)


def load_config(path) -> Config:
    with open(path, "rb") as fh:
        return config_from_dict(tomllib.load(fh))


def merge(cfg: Config, overrides: Dict[str, Dict[str, Any]]) -> Config:
    """Return a copy of ``cfg`` with per-section overrides applied."""
    data = cfg.to_dict()
    for section, values in overrides.items():
        data.setdefault(section, {}).update(values)
    return config_from_dict(data)


def _toml_value(v: Any) -> str:
    if isinstance(v, bool):
        return "true" if v else "false"
    if isinstance(v, (int, float)):
        return repr(v)
    if isinstance(v, str):
        return '"' + v.replace("\\", "\\\\").replace('"', '\\"') + '"'
    if isinstance(v, (list, tuple)):
        return "[" + ", ".join(_toml_value(x) for x in v) + "]"
    raise TypeError(f"cannot encode {v!r} as TOML")


def dump_config(cfg: Config) -> str:
    lines = []
    for section, values in cfg.to_dict().items():
        lines.append(f"[{section}]")
        lines.extend(f"{k} = {_toml_value(v)}" for k, v in values.items())
        lines.append("")
    return "\n".join(lines)


def save_config(path, cfg: Config) -> None:
    Path(path).write_text(dump_config(cfg))
