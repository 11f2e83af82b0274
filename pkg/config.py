"""
Configuration module.
Loads process settings from environment variables and defines the validated
experiment configuration schema read from YAML files.
"""
from __future__ import annotations

import os
from pathlib import Path
from typing import Any, Literal

import yaml
from dotenv import load_dotenv
from pydantic import BaseModel, ConfigDict, Field, ValidationError, model_validator

from core import ConfigError

# Load environment variables from .env file
load_dotenv()

# Process configuration
WORKDIR = Path(os.getenv("DIFFDET_WORKDIR", ".diffdet"))
LOG_LEVEL = os.getenv("DIFFDET_LOG_LEVEL", "INFO")

CONFIG_DIR = Path(__file__).resolve().parent / "configs"
DEFAULT_CONFIG = CONFIG_DIR / "default.yaml"


class _Section(BaseModel):
    model_config = ConfigDict(extra="forbid", frozen=True, populate_by_name=True)


class ScheduleConfig(_Section):
    num_steps: int = Field(1000, ge=1)
    beta_start: float = 1e-4
    beta_end: float = 0.02

    @model_validator(mode="after")
    def _check_betas(self):
        if not 0.0 < self.beta_start <= self.beta_end < 1.0:
            raise ValueError("require 0 < beta_start <= beta_end < 1")
        return self


class DiffusionConfig(_Section):
    timestep: int = 100
    add_noise: bool = True
    multistep_baseline: int = Field(1, ge=1)
    architecture: Path = CONFIG_DIR / "mini_unet.yaml"
    weights: Path | None = None
    weights_seed: int = 1234


class LossConfig(_Section):
    gamma: float = Field(1.0, ge=0.0)
    lam: float = Field(1.0, ge=0.0, alias="lambda")
    tau: float = Field(1.0, gt=0.0)
    tau_squared: bool = True
    loss_cap: float = Field(1e4, gt=0.0)


class AblationConfig(_Section):
    aux_branch: bool = True
    consistency: bool = True
    fusion_skips: bool = True
    feature_collection: Literal["full", "res_last"] = "full"
    domain_aug: bool = True


class AugmentationPolicy(_Section):
    """Per-transform probabilities and magnitudes of the training augmentation."""

    flip_prob: float = Field(0.5, ge=0.0, le=1.0)
    scale_prob: float = Field(0.3, ge=0.0, le=1.0)
    scale_range: tuple[float, float] = (0.8, 1.25)
    interpolation: Literal["bilinear", "nearest"] = "bilinear"
    color_prob: float = Field(0.8, ge=0.0, le=1.0)
    brightness: float = Field(0.2, ge=0.0)
    contrast: float = Field(0.2, ge=0.0)
    saturation: float = Field(0.2, ge=0.0)
    fda_prob: float = Field(0.3, ge=0.0, le=1.0)
    fda_beta: float = Field(0.05, ge=0.0, le=0.5)
    histogram_prob: float = Field(0.2, ge=0.0, le=1.0)
    pixel_dist_prob: float = Field(0.2, ge=0.0, le=1.0)

    @model_validator(mode="after")
    def _check_scale(self):
        low, high = self.scale_range
        if not 0.0 < low <= high:
            raise ValueError("scale_range must satisfy 0 < low <= high")
        return self


class DetectorConfig(_Section):
    pyramid_base_channels: int = Field(256, ge=4)
    neck_channels: int = Field(64, ge=8)
    anchor_sizes: tuple[float, float, float, float] = (16.0, 32.0, 64.0, 128.0)
    anchor_ratios: tuple[float, ...] = (0.5, 1.0, 2.0)
    rpn_pre_nms_top_n: int = 300
    rpn_post_nms_top_n: int = 64
    rpn_nms_iou: float = 0.7
    rpn_batch_size: int = 128
    roi_batch_size: int = 64
    roi_positive_fraction: float = 0.25
    roi_fg_iou: float = 0.5
    score_threshold: float = 0.05
    nms_iou: float = 0.5
    max_detections: int = 100


class TrainingConfig(_Section):
    steps: int = Field(500, ge=1)
    batch_size: int = Field(4, ge=1)
    lr: float = Field(0.01, gt=0.0)
    momentum: float = 0.9
    weight_decay: float = 1e-4
    grad_clip: float = 10.0
    log_every: int = Field(10, ge=1)


class TransferConfig(_Section):
    mode: Literal["dg", "da"] = "dg"
    teacher_checkpoint: Path | None = None
    pseudo_label_threshold: float = 0.8
    pseudo_label_nms_iou: float = 0.5
    feature_align: bool = True
    object_align: bool = True
    steps: int = Field(500, ge=1)

    @model_validator(mode="after")
    def _check_threshold(self):
        if not 0.0 < self.pseudo_label_threshold < 1.0:
            raise ValueError("pseudo_label_threshold must lie in (0, 1)")
        return self


class DomainPaths(_Section):
    annotations: Path
    images: Path


class DataConfig(_Section):
    source: DomainPaths | None = None
    target: DomainPaths | None = None
    eval_targets: dict[str, DomainPaths] = Field(default_factory=dict)
    synthetic: Path = CONFIG_DIR / "synthetic.yaml"


class ExperimentConfig(_Section):
    seed: int = 0
    schedule: ScheduleConfig = ScheduleConfig()
    diffusion: DiffusionConfig = DiffusionConfig()
    loss: LossConfig = LossConfig()
    ablation: AblationConfig = AblationConfig()
    augmentation: AugmentationPolicy = AugmentationPolicy()
    detector: DetectorConfig = DetectorConfig()
    training: TrainingConfig = TrainingConfig()
    transfer: TransferConfig = TransferConfig()
    data: DataConfig = DataConfig()

    @model_validator(mode="after")
    def _check_timestep(self):
        if not 0 < self.diffusion.timestep < self.schedule.num_steps:
            raise ValueError(
                f"diffusion.timestep must satisfy 0 < t < {self.schedule.num_steps}, got {self.diffusion.timestep}"
            )
        return self

    def with_overrides(self, overrides: dict[str, Any]) -> "ExperimentConfig":
        """
        Return a re-validated copy with dotted-path overrides applied,
        e.g. {"loss.gamma": 0.5, "ablation.aux_branch": False}.
        """
        payload = self.snapshot()
        for dotted, value in overrides.items():
            node = payload
            *parents, leaf = dotted.split(".")
            for key in parents:
                if node.get(key) is None:
                    node[key] = {}
                node = node[key]
            node[leaf] = value
        return _validate(payload, source="overrides")

    def snapshot(self) -> dict[str, Any]:
        """JSON-compatible dump, keyed by YAML aliases."""
        return self.model_dump(mode="json", by_alias=True)


def _validate(payload: Any, source: str) -> ExperimentConfig:
    try:
        return ExperimentConfig.model_validate(payload or {})
    except ValidationError as e:
        first = e.errors()[0]
        location = ".".join(str(part) for part in first["loc"]) or "<root>"
        raise ConfigError(f"{source}: invalid field '{location}': {first['msg']}") from e


def load_config(path: str | Path) -> ExperimentConfig:
    """
    Load and validate an experiment config.
    Missing sections and fields take their defaults; unknown keys are rejected.
    """
    path = Path(path)
    if not path.is_file():
        raise ConfigError(f"config file not found: {path}")
    try:
        payload = yaml.safe_load(path.read_text(encoding="utf-8"))
    except yaml.YAMLError as e:
        mark = getattr(e, "problem_mark", None)
        where = f"{path}:{mark.line + 1}:{mark.column + 1}" if mark is not None else str(path)
        raise ConfigError(f"cannot parse {where}: {getattr(e, 'problem', e)}") from e
    if payload is not None and not isinstance(payload, dict):
        raise ConfigError(f"{path}: top level must be a mapping")
    return _validate(payload, source=str(path))


def save_config(config: ExperimentConfig, path: str | Path) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(yaml.safe_dump(config.snapshot(), sort_keys=False), encoding="utf-8")
    return path


def config_from_snapshot(payload: dict[str, Any], source: str = "snapshot") -> ExperimentConfig:
    """Rebuild the config stored in a checkpoint or manifest."""
    return _validate(payload, source=source)
