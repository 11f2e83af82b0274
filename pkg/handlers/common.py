"""
Shared plumbing for the command handlers: config loading with overrides,
dataset resolution, training batches and checkpoint restoring.
"""
from __future__ import annotations

import argparse
import logging
from functools import lru_cache
from pathlib import Path
from typing import Any, Callable, Sequence

import torch
import yaml

from augmentation import augment_batch
from bench.datasets import DetectionDataset, batch_sampler, load_coco_style, pad_batch
from bench.synthetic import generate_synthetic_domains, load_synthetic_spec
from config import DEFAULT_CONFIG, ExperimentConfig, config_from_snapshot, load_config
from core import BoxSet, CheckpointError, ConfigError, DatasetError, Detections, ImageTensor
from detector.dual_branch import build_detector
from detector.transfer import build_student
from handlers import RunContext
from storage import load_checkpoint
from utils import seeded_rng

logger = logging.getLogger(__name__)

SYNTHETIC_DEFAULT_TARGET = "fog"


# ==================== CONFIG ====================

def add_config_arguments(parser: argparse.ArgumentParser) -> None:
    parser.add_argument("--config", type=Path, default=DEFAULT_CONFIG, help="experiment YAML")
    parser.add_argument("--seed", type=int, default=None)
    parser.add_argument("--steps", type=int, default=None, help="override the number of optimizer steps")
    parser.add_argument(
        "--set", action="append", default=[], metavar="KEY=VALUE",
        help="override any config field by dotted path, e.g. loss.tau=2.0",
    )


def parse_assignments(values: Sequence[str]) -> dict[str, Any]:
    overrides = {}
    for item in values:
        key, sep, raw = item.partition("=")
        if not sep or not key:
            raise ConfigError(f"--set expects KEY=VALUE, got '{item}'")
        try:
            overrides[key.strip()] = yaml.safe_load(raw)
        except yaml.YAMLError as e:
            raise ConfigError(f"--set {key}: cannot parse value '{raw}'") from e
    return overrides


def load_experiment(args: argparse.Namespace, context: RunContext, overrides: dict[str, Any] | None = None) -> ExperimentConfig:
    """Config file, then command flags, then --set assignments; re-validated once."""
    config = load_config(args.config)
    context.input(args.config)
    merged = dict(overrides or {})
    if args.seed is not None:
        merged["seed"] = args.seed
    merged.update(parse_assignments(args.set))
    if merged:
        config = config.with_overrides(merged)
    context.config = config
    return config


# ==================== DATA ====================

@lru_cache(maxsize=8)
def _synthetic(spec_path: Path, seed: int, split: str) -> dict:
    spec = load_synthetic_spec(spec_path)
    return generate_synthetic_domains(spec, seeded_rng(seed, f"synthetic-{split}"), split)


def synthetic_domains(config: ExperimentConfig, split: str) -> dict:
    return _synthetic(Path(config.data.synthetic), config.seed, split)


def source_dataset(config: ExperimentConfig, context: RunContext, split: str = "train") -> DetectionDataset:
    paths = config.data.source
    if paths is None:
        return synthetic_domains(config, split)["source"]
    context.input(paths.annotations)
    return load_coco_style(paths.annotations, paths.images, "source")


def target_dataset(
    config: ExperimentConfig, context: RunContext, name: str | None = None, split: str = "train"
) -> DetectionDataset:
    """Named target: the configured DA target, a configured evaluation target, or a synthetic domain."""
    if config.data.target is not None and name in (None, "target"):
        paths = config.data.target
    elif name is not None and name in config.data.eval_targets:
        paths = config.data.eval_targets[name]
    else:
        targets = synthetic_domains(config, split)["targets"]
        key = name or SYNTHETIC_DEFAULT_TARGET
        if key not in targets:
            raise DatasetError(f"unknown target domain '{key}', available: {sorted(targets)}")
        return targets[key]
    context.input(paths.annotations)
    return load_coco_style(paths.annotations, paths.images, name or "target")


def dataset_by_name(
    config: ExperimentConfig,
    context: RunContext,
    name: str,
    split: str = "test",
    annotations: Path | None = None,
    images: Path | None = None,
) -> DetectionDataset:
    if annotations is not None:
        if images is None:
            raise ConfigError("--annotations needs --images")
        context.input(annotations)
        return load_coco_style(annotations, images, name)
    if name == "source":
        return source_dataset(config, context, split)
    return target_dataset(config, context, name, split)


def evaluation_targets(config: ExperimentConfig) -> list[str]:
    if config.data.eval_targets:
        return sorted(config.data.eval_targets)
    return sorted(synthetic_domains(config, "test")["targets"])


def forbidden_roots(config: ExperimentConfig) -> list[Path]:
    """Every target-domain path in the config; a DG run may read none of them."""
    domains = [config.data.target, *config.data.eval_targets.values()]
    return [p for d in domains if d is not None for p in (d.annotations, d.images)]


def training_batches(
    dataset: DetectionDataset,
    config: ExperimentConfig,
    stream: str,
    references: Callable[[], Sequence[ImageTensor]] | None = None,
) -> Callable[[], tuple[torch.Tensor, list[BoxSet]]]:
    """Sampled, augmented and padded batches; `references` supplies the domain-augmentation pool."""
    sample = batch_sampler(dataset, config.training.batch_size, seeded_rng(config.seed, f"{stream}-order"))
    aug_rng = seeded_rng(config.seed, f"{stream}-augment")

    def next_batch() -> tuple[torch.Tensor, list[BoxSet]]:
        images, boxes = sample()
        images, boxes = augment_batch(
            images, boxes, config.augmentation, aug_rng,
            references=references() if references is not None else None,
            domain_aug=config.ablation.domain_aug,
        )
        return pad_batch(images), boxes

    return next_batch


# ==================== MODELS ====================

Predictor = Callable[[list[ImageTensor], list[int]], list[Detections]]


def restore_model(path: Path, context: RunContext) -> tuple[torch.nn.Module, ExperimentConfig, Predictor]:
    """Rebuild a trained diffusion detector or student from its checkpoint."""
    context.input(path)
    checkpoint = load_checkpoint(path)
    config = config_from_snapshot(checkpoint.config, source=str(path))
    if context.config is None:
        context.config = config
    if checkpoint.kind == "diffusion":
        model = build_detector(config, checkpoint.categories)
        backbone_hash = model.backbone.weights_hash()
        if checkpoint.backbone_hash != backbone_hash:
            raise CheckpointError(
                f"{path} was trained on denoiser {checkpoint.backbone_hash[:12]}, loaded denoiser is {backbone_hash[:12]}"
            )
        model.load_trainable_state_dict(checkpoint.state)

        def predictor(images, ids):
            return model.predict(pad_batch(images), ids, config.seed)
    else:
        model = build_student(config, len(checkpoint.categories))
        model.load_state_dict(checkpoint.state)

        def predictor(images, ids):
            return model.predict(pad_batch(images))

    model.categories = tuple(checkpoint.categories)
    return model, config, predictor


def predict_dataset(predictor: Predictor, dataset: DetectionDataset, batch_size: int = 4) -> dict[int, Detections]:
    detections = {}
    records = dataset.records
    for start in range(0, len(records), batch_size):
        chunk = records[start:start + batch_size]
        ids = [r.image_id for r in chunk]
        detections.update(zip(ids, predictor([r.load_image() for r in chunk], ids)))
    return detections
