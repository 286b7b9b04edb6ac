"""Run configuration: JSON file with a schema version, overridable by flags."""

from __future__ import annotations

import json
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path
from typing import Optional

from .datapipe.samples import EXPOSURE_SETS
from .models import LossWeights, ModelKind
from .training import LITERAL_LR_OTHER

SCHEMA_VERSION = 1


class ConfigError(ValueError):
    pass


@dataclass
class RunConfig:
    kind: str = "lstm"
    horizon: int = 1
    resolution: int = 32
    history: int = 6
    lr_encoder: float = 1e-3
    lr_other: float = 3e-4
    epochs: int = 20
    batch_size: int = 16
    chunk: int = 4
    weights: dict = field(default_factory=lambda: asdict(LossWeights()))
    seed: int = 0
    dataset: Optional[str] = None
    out: str = "runs"
    exposures: str = "all"
    precision: str = "f32"
    # optional ModelConfig field overrides (widths etc.)
    model: dict = field(default_factory=dict)

    def validate(self) -> "RunConfig":
        try:
            ModelKind.parse(self.kind)
        except ValueError as exc:
            raise ConfigError(str(exc)) from None
        for name in ("horizon", "resolution", "history", "batch_size", "chunk"):
            if int(getattr(self, name)) < 1:
                raise ConfigError(f"{name} must be positive, got {getattr(self, name)}")
        if self.epochs < 0:
            raise ConfigError("epochs must be >= 0")
        if self.lr_encoder <= 0 or self.lr_other <= 0:
            raise ConfigError("learning rates must be positive")
        if self.exposures not in EXPOSURE_SETS:
            raise ConfigError(f"exposures must be one of {EXPOSURE_SETS}")
        if self.precision not in ("f32", "f64"):
            raise ConfigError("precision must be f32 or f64")
        try:
            LossWeights(**self.weights)
        except (TypeError, ValueError) as exc:
            raise ConfigError(f"weights: {exc}") from None
        if self.seed < 0:
            raise ConfigError("seed must be non-negative")
        return self

    @property
    def loss_weights(self) -> LossWeights:
        return LossWeights(**self.weights)

    def to_json(self) -> dict:
        doc = asdict(self)
        doc["schema_version"] = SCHEMA_VERSION
        return doc


def load_config(path) -> RunConfig:
    path = Path(path)
    try:
        doc = json.loads(path.read_text())
    except (OSError, json.JSONDecodeError) as exc:
        raise ConfigError(f"{path}: {exc}") from exc
    version = doc.pop("schema_version", None)
    if version != SCHEMA_VERSION:
        raise ConfigError(f"{path}: schema_version must be {SCHEMA_VERSION}, got {version}")
    names = {f.name for f in fields(RunConfig)}
    unknown = set(doc) - names
    if unknown:
        raise ConfigError(f"{path}: unknown keys {sorted(unknown)}")
    if "weights" in doc:
        doc["weights"] = {**asdict(LossWeights()), **doc["weights"]}
    return RunConfig(**doc).validate()


def literal_lr_other() -> float:
    """The other-layer learning rate read literally as 30^-4."""
    return LITERAL_LR_OTHER
