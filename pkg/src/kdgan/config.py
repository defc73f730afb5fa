"""Experiment configuration, mirrored field-for-field by the YAML/JSON config files."""
from __future__ import annotations

import dataclasses
import hashlib
import json
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any, Optional, Union

import yaml

from .data import DatasetSpec
from .errors import ConfigError
from .losses import LossWeights
from .models import DiscriminatorSpec, GeneratorSpec

KD_TERMS = ("L1", "perc", "GT", "tri")
_MASK_TO_WEIGHT = {"L1": "beta1", "perc": "gamma1", "GT": "beta2", "tri": "gamma2"}


@dataclass(frozen=True)
class OptimizerConfig:
    lr: float = 2e-4
    beta1: float = 0.5
    beta2: float = 0.999


def _desk_teacher() -> GeneratorSpec:
    return GeneratorSpec(in_channels=6, out_channels=3, base_width=32, depth=4)


def _desk_student() -> GeneratorSpec:
    return GeneratorSpec(in_channels=6, out_channels=3, base_width=16, depth=4)


def _desk_discriminator() -> DiscriminatorSpec:
    return DiscriminatorSpec(in_channels=9, base_width=16, num_layers=2)


@dataclass(frozen=True)
class ExperimentConfig:
    dataset: DatasetSpec = field(default_factory=DatasetSpec)
    teacher: GeneratorSpec = field(default_factory=_desk_teacher)
    student: GeneratorSpec = field(default_factory=_desk_student)
    discriminator: DiscriminatorSpec = field(default_factory=_desk_discriminator)
    weights: LossWeights = field(default_factory=LossWeights)
    optimizer: OptimizerConfig = field(default_factory=OptimizerConfig)
    epochs: int = 30
    teacher_epochs: Optional[int] = None  # defaults to ``epochs``
    batch_size: int = 16
    ablation_mask: frozenset = frozenset(KD_TERMS)
    seed: int = 0
    # "gd": generator step then discriminator step on each batch; "dg": the reverse
    update_order: str = "gd"
    teacher_tap: Optional[int] = None  # D_T truncation for the perceptual loss; None -> discriminator.tap
    # stop after this many epochs without a better validation per-pixel score, then restore the best epoch
    early_stop_patience: Optional[int] = None

    def validate(self) -> "ExperimentConfig":
        self.dataset.validate()
        self.teacher.validate()
        self.student.validate()
        self.discriminator.validate()
        self.weights.validate()
        if self.batch_size < 1:
            raise ConfigError(f"batch_size must be >= 1, got {self.batch_size}")
        if self.epochs < 1 or (self.teacher_epochs is not None and self.teacher_epochs < 1):
            raise ConfigError("epochs must be >= 1")
        if self.update_order not in ("gd", "dg"):
            raise ConfigError(f"update_order must be 'gd' or 'dg', got {self.update_order!r}")
        unknown = set(self.ablation_mask) - set(KD_TERMS)
        if unknown:
            raise ConfigError(f"unknown ablation terms {sorted(unknown)}; allowed {KD_TERMS}")
        k = self.dataset.n_classes
        for name in ("teacher", "student"):
            g = getattr(self, name)
            if g.in_channels != k or g.out_channels != 3:
                raise ConfigError(f"{name} generator must map {k} -> 3 channels, got "
                                  f"{g.in_channels} -> {g.out_channels}")
            if self.dataset.image_size % 2**g.depth:
                raise ConfigError(f"dataset.image_size {self.dataset.image_size} not divisible by "
                                  f"2^{name}.depth = {2**g.depth}")
        if self.discriminator.in_channels != k + 3:
            raise ConfigError(f"discriminator.in_channels must be {k + 3} (label + photo), "
                              f"got {self.discriminator.in_channels}")
        if self.teacher_tap is not None and not 0 <= self.teacher_tap < self.discriminator.n_blocks:
            raise ConfigError(f"teacher_tap {self.teacher_tap} outside [0, {self.discriminator.n_blocks})")
        if self.dataset.n_train < self.batch_size:
            raise ConfigError(f"dataset.n_train {self.dataset.n_train} smaller than batch_size {self.batch_size}")
        return self

    def effective_weights(self) -> LossWeights:
        """Loss weights with every term missing from ``ablation_mask`` set to zero."""
        off = {_MASK_TO_WEIGHT[t]: 0.0 for t in KD_TERMS if t not in self.ablation_mask}
        return dataclasses.replace(self.weights, **off)

    def kd_disabled(self) -> LossWeights:
        return dataclasses.replace(self.weights, beta1=0.0, gamma1=0.0, beta2=0.0, gamma2=0.0)

    @property
    def tap_T(self) -> int:
        return self.discriminator.tap if self.teacher_tap is None else self.teacher_tap

    def to_dict(self) -> dict:
        d = dataclasses.asdict(self)
        d["ablation_mask"] = sorted(self.ablation_mask)
        return d

    def hash(self) -> str:
        return hashlib.sha256(json.dumps(self.to_dict(), sort_keys=True).encode()).hexdigest()[:16]

    @classmethod
    def from_dict(cls, d: dict) -> "ExperimentConfig":
        d = dict(d)
        nested = {"dataset": DatasetSpec, "teacher": GeneratorSpec, "student": GeneratorSpec,
                  "discriminator": DiscriminatorSpec, "weights": LossWeights, "optimizer": OptimizerConfig}
        base = cls()
        kwargs: dict[str, Any] = {}
        for name, value in d.items():
            if name not in {f.name for f in dataclasses.fields(cls)}:
                raise ConfigError(f"unknown config field {name!r}")
            if name in nested:
                if not isinstance(value, dict):
                    raise ConfigError(f"config field {name!r} must be a mapping")
                try:
                    kwargs[name] = dataclasses.replace(getattr(base, name), **value)
                except TypeError as exc:
                    raise ConfigError(f"config field {name!r}: {exc}") from exc
            elif name == "ablation_mask":
                kwargs[name] = frozenset(value)
            else:
                kwargs[name] = value
        return cls(**kwargs)

    def with_overrides(self, overrides: dict) -> "ExperimentConfig":
        """Apply dotted-key overrides such as ``{"weights.beta1": 0.0, "epochs": 2}``."""
        d = self.to_dict()
        for key, value in overrides.items():
            node = d
            *parents, leaf = key.split(".")
            for p in parents:
                if p not in node or not isinstance(node[p], dict):
                    raise ConfigError(f"unknown config key {key!r}")
                node = node[p]
            if leaf not in node:
                raise ConfigError(f"unknown config key {key!r}")
            node[leaf] = value
        return ExperimentConfig.from_dict(d)


def load_config(path: Union[str, Path]) -> ExperimentConfig:
    path = Path(path)
    if not path.exists():
        raise ConfigError(f"config file not found: {path}")
    raw = yaml.safe_load(path.read_text()) or {}
    if not isinstance(raw, dict):
        raise ConfigError(f"{path}: top level must be a mapping")
    return ExperimentConfig.from_dict(raw).validate()


def save_config(config: ExperimentConfig, path: Union[str, Path]) -> None:
    Path(path).write_text(yaml.safe_dump(config.to_dict(), sort_keys=True))
