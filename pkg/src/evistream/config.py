"""Experiment configuration: one JSON document, all randomness from one seed."""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path

from .accumulator import AccumulatorConfig
from .data import ORDER_POLICIES, SyntheticSpec
from .encoder import EncoderConfig
from .harness import SweepGrid, TrainConfig
from .numerics import ConfigError


@dataclass
class ExperimentConfig:
    dataset: str | None = None
    synthetic: SyntheticSpec | None = None
    encoder: EncoderConfig = field(default_factory=EncoderConfig)
    accumulator: AccumulatorConfig = field(default_factory=AccumulatorConfig)
    train: TrainConfig = field(default_factory=TrainConfig)
    sweep: SweepGrid = field(default_factory=SweepGrid)
    order: str = "center_out"
    output_dir: str = "runs"
    seed: int = 0
    outer_folds: int = 10
    inner_folds: int = 1
    inner_val_fraction: float = 0.2
    holdout_fraction: float = 0.2

    def __post_init__(self):
        if self.dataset is None and self.synthetic is None:
            self.synthetic = SyntheticSpec()
        self.validate()

    def validate(self):
        if (self.dataset is None) == (self.synthetic is None):
            raise ConfigError("exactly one of 'dataset' and 'synthetic' must be set")
        if self.order not in ORDER_POLICIES:
            raise ConfigError(f"order must be one of {ORDER_POLICIES}, got {self.order!r}")
        if self.outer_folds < 2:
            raise ConfigError("outer_folds must be >= 2")
        if self.inner_folds < 1:
            raise ConfigError("inner_folds must be >= 1")
        for name in ("inner_val_fraction", "holdout_fraction"):
            v = getattr(self, name)
            if not 0 < v < 1:
                raise ConfigError(f"{name} must be in (0, 1), got {v}")

    def to_dict(self):
        return {
            "dataset": self.dataset,
            "synthetic": self.synthetic.to_dict() if self.synthetic else None,
            "encoder": self.encoder.to_dict(),
            "accumulator": self.accumulator.to_dict(),
            "train": self.train.to_dict(),
            "sweep": self.sweep.to_dict(),
            "order": self.order,
            "output_dir": self.output_dir,
            "seed": self.seed,
            "outer_folds": self.outer_folds,
            "inner_folds": self.inner_folds,
            "inner_val_fraction": self.inner_val_fraction,
            "holdout_fraction": self.holdout_fraction,
        }

    @classmethod
    def from_dict(cls, d):
        d = dict(d)
        known = set(cls.__dataclass_fields__)
        unknown = set(d) - known
        if unknown:
            raise ConfigError(f"unknown config keys: {sorted(unknown)}")
        try:
            sub = {
                "synthetic": SyntheticSpec, "encoder": EncoderConfig,
                "accumulator": AccumulatorConfig, "train": TrainConfig, "sweep": SweepGrid,
            }
            for key, typ in sub.items():
                if d.get(key) is not None:
                    d[key] = typ(**d[key])
            if d.get("dataset") is not None:
                d.setdefault("synthetic", None)
            return cls(**d)
        except TypeError as exc:
            raise ConfigError(f"malformed config: {exc}") from None

    def to_json(self):
        return json.dumps(self.to_dict(), indent=2, sort_keys=True) + "\n"

    @classmethod
    def load(cls, path):
        try:
            return cls.from_dict(json.loads(Path(path).read_text()))
        except json.JSONDecodeError as exc:
            raise ConfigError(f"{path}: invalid JSON ({exc})") from None
