"""Run configuration: model, optimizer, and data settings with JSON I/O.

Every optimizer value is a default, not a constant; a config file only
needs the keys it overrides. Unknown keys are rejected so typos fail
loudly instead of silently training with defaults.
"""

from __future__ import annotations

import json
from dataclasses import asdict, dataclass, field

from .model import ModelConfig
from .scenario import GenConfig


@dataclass
class TrainConfig:
    """Optimizer and loop settings."""

    lr: float = 0.003
    weight_decay: float = 0.01
    epochs: int = 60
    warmup_epochs: int = 10
    batch_size: int = 16
    clip_norm: float = 5.0        # None disables clipping
    use_aux: bool = True
    seed: int = 0

    def __post_init__(self):
        if self.lr < 0 or self.weight_decay < 0:
            raise ValueError("lr and weight_decay must be >= 0")
        if self.epochs < 1 or self.batch_size < 1:
            raise ValueError("epochs and batch_size must be >= 1")
        if not 0 <= self.warmup_epochs <= self.epochs:
            raise ValueError(
                f"warmup_epochs {self.warmup_epochs} outside [0, {self.epochs}]")
        if self.clip_norm is not None and self.clip_norm <= 0:
            raise ValueError("clip_norm must be positive or null")


@dataclass
class DataConfig:
    """Where the dataset lives and how it is (re)generated."""

    manifest: str = ""
    n_scenarios: int = 2000
    gen_seed: int = 7
    gen: GenConfig = field(default_factory=GenConfig)

    def __post_init__(self):
        if self.n_scenarios < 1:
            raise ValueError("n_scenarios must be >= 1")


@dataclass
class RunConfig:
    """Top-level config with ``model``, ``train``, and ``data`` sections."""

    model: ModelConfig = field(default_factory=ModelConfig)
    train: TrainConfig = field(default_factory=TrainConfig)
    data: DataConfig = field(default_factory=DataConfig)

    def to_dict(self) -> dict:
        return {"model": self.model.to_dict(), "train": asdict(self.train),
                "data": asdict(self.data)}

    @classmethod
    def from_dict(cls, d: dict) -> "RunConfig":
        sections = {"model": ModelConfig, "train": TrainConfig, "data": DataConfig}
        unknown = [k for k in d if k not in sections]
        if unknown:
            raise ValueError(f"unknown config sections: {unknown}")
        kwargs = {}
        for name, section_cls in sections.items():
            body = dict(d.get(name, {}))
            if name == "data" and "gen" in body:
                body["gen"] = GenConfig(**_checked(body["gen"], GenConfig, "data.gen"))
            kwargs[name] = section_cls(**_checked(body, section_cls, name))
        return cls(**kwargs)

    def save(self, path: str) -> None:
        with open(path, "w", encoding="utf-8") as fh:
            json.dump(self.to_dict(), fh, indent=1)

    @classmethod
    def load(cls, path: str) -> "RunConfig":
        with open(path, "r", encoding="utf-8") as fh:
            return cls.from_dict(json.load(fh))


def _checked(body: dict, section_cls, section_name: str) -> dict:
    fields = set(section_cls.__dataclass_fields__)
    unknown = [k for k in body if k not in fields]
    if unknown:
        raise ValueError(f"unknown keys in config section {section_name!r}: {unknown}")
    if "programs" in body and isinstance(body["programs"], list):
        body["programs"] = tuple(body["programs"])
    return body
