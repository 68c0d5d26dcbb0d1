"""
Run configuration: training hyperparameters and pipeline settings.

A configuration file is one flat JSON object whose keys are field names of
`TrainConfig` and `PipelineConfig`. Unknown keys are rejected with the
closest known key as a suggestion.
"""

import logging
from pathlib import Path
from typing import Any, Literal

import orjson
from pydantic import BaseModel, ConfigDict, Field, ValidationError, field_validator
from pydantic import model_validator
from rapidfuzz import fuzz, process

from cov3d.errors import ConfigError
from cov3d.utils import get_env_bool

logger = logging.getLogger(__name__)

__all__ = [
    "TrainConfig",
    "PipelineConfig",
    "RunConfig",
    "load_run_config",
    "run_config_from_mapping",
    "suggest_key",
]

DETERMINISTIC_ENV = "COV3D_DETERMINISTIC"


class TrainConfig(BaseModel):
    """Hyperparameters of the shared training loop."""

    model_config = ConfigDict(extra="forbid")

    batch_size: int = 16
    epochs: int = 40
    lr0: float = 1e-4
    lr_decay_epochs: list[int] = Field(default_factory=lambda: [15, 30])
    lr_decay_factor: float = 0.1
    optimizer_id: Literal["adam", "sgd"] = "adam"
    loss_id: Literal["cross_entropy"] = "cross_entropy"
    seed: int = 0
    shuffle_seed: int | None = None
    class_weighting: bool = False
    momentum: float = 0.9
    deterministic: bool = Field(
        default_factory=lambda: get_env_bool(DETERMINISTIC_ENV, True)
    )
    num_workers: int = 0
    device: str | None = None

    @field_validator("batch_size")
    def validate_batch_size(cls, v):
        """Validate that batch size is at least 1."""
        if v < 1:
            raise ValueError("batch_size must be at least 1")
        return v

    @field_validator("epochs", "num_workers")
    def validate_non_negative(cls, v):
        if v < 0:
            raise ValueError("must be >= 0")
        return v

    @field_validator("lr0")
    def validate_lr0(cls, v):
        """Validate that the initial learning rate is positive."""
        if v <= 0:
            raise ValueError("lr0 must be positive")
        return v

    @field_validator("lr_decay_factor")
    def validate_decay_factor(cls, v):
        if not 0 < v <= 1:
            raise ValueError("lr_decay_factor must be in (0, 1]")
        return v

    @model_validator(mode="after")
    def validate_decay_epochs(self) -> "TrainConfig":
        """Decay epochs must be strictly increasing and fall before `epochs`."""
        decays = self.lr_decay_epochs
        if any(b <= a for a, b in zip(decays, decays[1:])):
            raise ValueError("lr_decay_epochs must be strictly increasing")
        if decays and (decays[0] < 1 or decays[-1] >= self.epochs):
            raise ValueError(
                f"lr_decay_epochs must lie in [1, epochs={self.epochs}), got {decays}"
            )
        return self

    @property
    def effective_shuffle_seed(self) -> int:
        return self.seed if self.shuffle_seed is None else self.shuffle_seed


class PipelineConfig(BaseModel):
    """Preprocessing, architecture and evaluation settings."""

    model_config = ConfigDict(extra="forbid")

    # volumes
    detection_depth: int = 64
    detection_size: int = 224
    severity_spatial: int = 299
    depth_resize: Literal["linear", "subsample"] = "linear"
    eager_load: bool = True

    # slice filter
    filter_backbone: str = "resnext50_32x4d"
    filter_input_size: int = 224
    filter_threshold: float = 0.5

    # lung segmentation
    seg_depth: int = 4
    seg_base_channels: int = 32
    seg_threshold: float = 0.5
    seg_auto_pad: bool = True
    seg_holdout_fraction: float = 0.2

    # classifiers
    backbone_tier: Literal["full", "toy"] = "full"
    detection_backbone: str = "densenet161"
    pretrained: bool = False
    pretrained_path: Path | None = None
    relu_after_fusion: bool = False

    # evaluation
    n_bootstrap: int = 1000
    exclude_absent_classes: bool = False

    @field_validator("filter_threshold")
    def validate_filter_threshold(cls, v):
        if not 0 < v < 1:
            raise ValueError("filter_threshold must lie strictly inside (0, 1)")
        return v

    @field_validator("seg_threshold", "seg_holdout_fraction")
    def validate_unit_interval(cls, v):
        if not 0 <= v < 1:
            raise ValueError("must lie in [0, 1)")
        return v

    @field_validator(
        "detection_depth",
        "detection_size",
        "severity_spatial",
        "filter_input_size",
        "seg_depth",
        "seg_base_channels",
    )
    def validate_positive(cls, v):
        if v < 1:
            raise ValueError("must be >= 1")
        return v

    @field_validator("n_bootstrap")
    def validate_n_bootstrap(cls, v):
        if v < 2:
            raise ValueError("n_bootstrap must be at least 2")
        return v


class RunConfig(BaseModel):
    """A training config and a pipeline config loaded from one flat file."""

    train: TrainConfig = Field(default_factory=TrainConfig)
    pipeline: PipelineConfig = Field(default_factory=PipelineConfig)

    def flat(self) -> dict[str, Any]:
        """The flat key-value form written to run records and checkpoints."""
        return {
            **self.train.model_dump(mode="json"),
            **self.pipeline.model_dump(mode="json"),
        }


def suggest_key(key: str, known: list[str], threshold: float = 80.0) -> str | None:
    """Closest known key by rapidfuzz WRatio, or None below the threshold."""
    match = process.extractOne(key, known, scorer=fuzz.WRatio, score_cutoff=threshold)
    return match[0] if match else None


def run_config_from_mapping(
    data: dict[str, Any], overrides: dict[str, Any] | None = None
) -> RunConfig:
    """
    Build a RunConfig from a flat mapping.

    Args:
        data: Flat key-value mapping of TrainConfig/PipelineConfig fields.
        overrides: Values applied on top of `data` (e.g. `--seed`); None values
            are ignored.

    Raises:
        ConfigError: For unknown keys or invalid values.
    """
    merged = {**data, **{k: v for k, v in (overrides or {}).items() if v is not None}}
    train_keys = set(TrainConfig.model_fields)
    pipeline_keys = set(PipelineConfig.model_fields)
    known = sorted(train_keys | pipeline_keys)

    for key in merged:
        if key not in train_keys and key not in pipeline_keys:
            raise ConfigError(
                f"Unknown config key: {key!r}", suggestion=suggest_key(key, known)
            )

    try:
        return RunConfig(
            train=TrainConfig(**{k: v for k, v in merged.items() if k in train_keys}),
            pipeline=PipelineConfig(
                **{k: v for k, v in merged.items() if k in pipeline_keys}
            ),
        )
    except ValidationError as e:
        raise ConfigError(f"Invalid configuration: {e}") from e


def load_run_config(
    path: str | Path | None, overrides: dict[str, Any] | None = None
) -> RunConfig:
    """
    Load a flat JSON run configuration.

    Args:
        path: Config file path, or None for all defaults.
        overrides: Values applied on top of the file.

    Raises:
        ConfigError: If the file is missing, not a JSON object, or invalid.
    """
    if path is None:
        return run_config_from_mapping({}, overrides)

    config_path = Path(path)
    try:
        data = orjson.loads(config_path.read_bytes())
    except FileNotFoundError as e:
        raise ConfigError(f"Config file not found: {config_path}") from e
    except orjson.JSONDecodeError as e:
        raise ConfigError(f"Config file is not valid JSON: {config_path}: {e}") from e

    if not isinstance(data, dict):
        raise ConfigError(f"Config file must hold a JSON object: {config_path}")

    config = run_config_from_mapping(data, overrides)
    logger.info(f"Loaded run config from {config_path}")
    return config
