"""Shared fixtures: a tiny denoiser, a tiny experiment config and a tiny synthetic benchmark."""
from pathlib import Path

import pytest
import torch
import yaml

from bench.synthetic import SHAPES, generate_synthetic_domains, load_synthetic_spec
from config import ExperimentConfig
from core import BoxSet, ImageTensor
from utils import seeded_rng

TINY_ARCHITECTURE = {
    "backend": "mini",
    "latent_channels": 4,
    "encoder_channels": [8, 8, 8],
    "layer_channels": [8, 8, 16, 16],
    "blocks_per_layer": 3,
    "attention_layers": [1, 2, 3],
    "attention_heads": 2,
    "time_dim": 16,
    "text_dim": 8,
    "text_length": 8,
    "vocab_buckets": 64,
    "norm_groups": 4,
}

TINY_SYNTHETIC = {
    "classes": list(SHAPES),
    "image_size": 64,
    "num_train": 6,
    "num_test": 4,
    "objects_per_image": [1, 2],
    "object_size": [12, 24],
    "max_overlap": 0.2,
    "targets": {"fog": {"kind": "fog", "alpha": 0.5}, "dark": {"kind": "dark", "gamma": 2.2}},
}


def write_yaml(path: Path, payload) -> Path:
    path.write_text(yaml.safe_dump(payload, sort_keys=False), encoding="utf-8")
    return path


def gray_image(height: int = 64, width: int = 64, value: float = 0.5) -> ImageTensor:
    return ImageTensor(torch.full((height, width, 3), value))


def boxes(rows, classes=None) -> BoxSet:
    rows = torch.tensor(rows, dtype=torch.float32).reshape(-1, 4)
    if classes is None:
        classes = [0] * rows.shape[0]
    return BoxSet(rows, torch.tensor(classes, dtype=torch.int64))


@pytest.fixture
def tiny_architecture_file(tmp_path) -> Path:
    return write_yaml(tmp_path / "tiny_unet.yaml", TINY_ARCHITECTURE)


@pytest.fixture
def tiny_synthetic_file(tmp_path) -> Path:
    return write_yaml(tmp_path / "tiny_synthetic.yaml", TINY_SYNTHETIC)


@pytest.fixture
def tiny_overrides(tiny_architecture_file, tiny_synthetic_file) -> dict:
    return {
        "diffusion.architecture": str(tiny_architecture_file),
        "data.synthetic": str(tiny_synthetic_file),
        "detector.pyramid_base_channels": 8,
        "detector.neck_channels": 8,
        "detector.rpn_pre_nms_top_n": 50,
        "detector.rpn_post_nms_top_n": 16,
        "detector.rpn_batch_size": 32,
        "detector.roi_batch_size": 16,
        "training.steps": 2,
        "training.batch_size": 2,
        "training.log_every": 1,
        "transfer.steps": 2,
    }


@pytest.fixture
def tiny_config(tiny_overrides) -> ExperimentConfig:
    return ExperimentConfig().with_overrides(tiny_overrides)


@pytest.fixture
def tiny_config_file(tmp_path, tiny_config) -> Path:
    return write_yaml(tmp_path / "experiment.yaml", tiny_config.snapshot())


@pytest.fixture
def tiny_domains(tiny_synthetic_file) -> dict:
    spec = load_synthetic_spec(tiny_synthetic_file)
    return generate_synthetic_domains(spec, seeded_rng(0, "synthetic-train"), "train")


@pytest.fixture
def tiny_batch(tiny_domains) -> tuple[torch.Tensor, list[BoxSet]]:
    records = tiny_domains["source"].records[:2]
    return torch.stack([r.image.chw() for r in records]), [r.boxes for r in records]
