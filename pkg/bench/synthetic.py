"""
Synthetic shapes benchmark.
Draws disks, squares and triangles with PIL and derives style-only target
domains (fog, dark, noise, colour shift) that share the source layouts.
"""
from __future__ import annotations

import logging
from pathlib import Path
from typing import Literal

import numpy as np
import torch
import yaml
from PIL import Image, ImageDraw
from pydantic import BaseModel, ConfigDict, Field, ValidationError, field_validator

from bench.datasets import DetectionDataset
from core import BoxSet, ConfigError, DetectionRecord, ImageTensor
from utils import randint, seeded_rng

logger = logging.getLogger(__name__)

SHAPES = ("disk", "square", "triangle")


class DomainShift(BaseModel):
    model_config = ConfigDict(extra="forbid", frozen=True)

    kind: Literal["fog", "dark", "noise", "color"]
    alpha: float = 0.5
    gamma: float = 2.2
    sigma: float = 0.08
    shift: tuple[float, float, float] = (0.15, -0.1, -0.15)


class SyntheticSpec(BaseModel):
    model_config = ConfigDict(extra="forbid", frozen=True)

    classes: tuple[str, ...] = SHAPES
    image_size: int = Field(128, ge=64)
    num_train: int = Field(100, ge=1)
    num_test: int = Field(40, ge=1)
    objects_per_image: tuple[int, int] = (1, 3)
    object_size: tuple[int, int] = (16, 48)
    max_overlap: float = 0.2
    targets: dict[str, DomainShift] = Field(
        default_factory=lambda: {
            "fog": DomainShift(kind="fog"),
            "dark": DomainShift(kind="dark"),
            "noise": DomainShift(kind="noise"),
            "color": DomainShift(kind="color"),
        }
    )

    @field_validator("classes")
    @classmethod
    def _known_shapes(cls, value: tuple[str, ...]) -> tuple[str, ...]:
        unknown = [name for name in value if name not in SHAPES]
        if unknown:
            raise ValueError(f"unknown shape classes {unknown}; expected a subset of {list(SHAPES)}")
        if not value or len(set(value)) != len(value):
            raise ValueError("classes must be a non-empty list of distinct shapes")
        return value


def load_synthetic_spec(path: str | Path) -> SyntheticSpec:
    path = Path(path)
    try:
        return SyntheticSpec.model_validate(yaml.safe_load(path.read_text(encoding="utf-8")) or {})
    except (OSError, yaml.YAMLError, ValidationError) as e:
        raise ConfigError(f"invalid synthetic benchmark spec {path}: {e}") from e


# ==================== DRAWING ====================

def _color(rng: torch.Generator, low: int, high: int) -> tuple[int, int, int]:
    return tuple(randint(rng, low, high) for _ in range(3))


def _overlap(box, boxes) -> float:
    best = 0.0
    for other in boxes:
        ix = max(0.0, min(box[2], other[2]) - max(box[0], other[0]))
        iy = max(0.0, min(box[3], other[3]) - max(box[1], other[1]))
        inter = ix * iy
        union = (box[2] - box[0]) * (box[3] - box[1]) + (other[2] - other[0]) * (other[3] - other[1]) - inter
        best = max(best, inter / union)
    return best


def draw_shape(draw: ImageDraw.ImageDraw, shape: str, box: tuple[int, int, int, int], color) -> None:
    """Fill `shape` so that its tight pixel extent is exactly [x1, x2) x [y1, y2)."""
    x1, y1, x2, y2 = box
    if shape == "disk":
        draw.ellipse([x1, y1, x2 - 1, y2 - 1], fill=color)
    elif shape == "square":
        draw.rectangle([x1, y1, x2 - 1, y2 - 1], fill=color)
    elif shape == "triangle":
        draw.polygon([((x1 + x2 - 1) / 2, y1), (x1, y2 - 1), (x2 - 1, y2 - 1)], fill=color)
    else:
        raise ValueError(f"unknown shape {shape}")


def render_layout(spec: SyntheticSpec, rng: torch.Generator, class_queue: list[int]) -> tuple[ImageTensor, BoxSet]:
    size = spec.image_size
    background = Image.new("RGB", (size, size), _color(rng, 20, 110))
    draw = ImageDraw.Draw(background)
    # a few faint stripes so the background is not flat
    for _ in range(3):
        y = randint(rng, 0, size)
        draw.rectangle([0, y, size - 1, min(size - 1, y + randint(rng, 2, 10))], fill=_color(rng, 20, 110))

    boxes, classes = [], []
    count = randint(rng, spec.objects_per_image[0], spec.objects_per_image[1] + 1)
    for _ in range(count):
        for _attempt in range(20):
            side = randint(rng, spec.object_size[0], spec.object_size[1] + 1)
            x1, y1 = randint(rng, 0, size - side + 1), randint(rng, 0, size - side + 1)
            box = (x1, y1, x1 + side, y1 + side)
            if _overlap(box, boxes) <= spec.max_overlap:
                break
        else:
            continue
        cls = class_queue.pop(0)
        class_queue.append(cls)
        draw_shape(draw, spec.classes[cls], box, _color(rng, 140, 256))
        boxes.append(box)
        classes.append(cls)

    array = np.asarray(background, dtype=np.float32) / 255.0
    box_set = BoxSet(torch.tensor(boxes, dtype=torch.float32), torch.tensor(classes)) if boxes else BoxSet.empty()
    return ImageTensor(torch.from_numpy(array)), box_set


# ==================== DOMAIN SHIFTS ====================

def apply_shift(image: ImageTensor, shift: DomainShift, rng: torch.Generator) -> ImageTensor:
    x = image.data
    if shift.kind == "fog":
        out = x * (1.0 - shift.alpha) + shift.alpha
    elif shift.kind == "dark":
        out = x.pow(shift.gamma)
    elif shift.kind == "noise":
        out = x + shift.sigma * torch.randn(x.shape, generator=rng)
    else:
        out = x + torch.tensor(shift.shift, dtype=x.dtype)
    return ImageTensor.clipped(out)


def generate_synthetic_domains(
    spec: SyntheticSpec, rng: torch.Generator, split: Literal["train", "test"] = "train"
) -> dict:
    """
    Source dataset plus one style-shifted copy per target; every target shares
    the source records' image ids and BoxSets. Classes are assigned round-robin
    over all objects, so counts stay balanced.
    """
    count = spec.num_train if split == "train" else spec.num_test
    id_offset = 0 if split == "train" else 1_000_000
    class_queue = list(range(len(spec.classes)))
    source_records = []
    for i in range(count):
        image, boxes = render_layout(spec, rng, class_queue)
        source_records.append(DetectionRecord(image_id=id_offset + i, boxes=boxes, image=image))
    source = DetectionDataset(source_records, spec.classes, "source", {"split": split})

    targets = {}
    for name, shift in spec.targets.items():
        shift_rng = seeded_rng(int(torch.randint(0, 2**31 - 1, (), generator=rng)), f"shift-{name}")
        records = [
            DetectionRecord(image_id=r.image_id, boxes=r.boxes, image=apply_shift(r.image, shift, shift_rng))
            for r in source_records
        ]
        targets[name] = DetectionDataset(records, spec.classes, name, {"split": split})
    logger.info("Generated synthetic %s split: %d images, targets %s", split, count, sorted(targets))
    return {"source": source, "targets": targets}
