"""
Core domain module.
Holds the value types shared by every other module (images, boxes, detections,
dataset records) and the error hierarchy the CLI maps to exit codes.
"""
from __future__ import annotations

from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable

import torch


class DiffDetError(Exception):
    """Base class for every error the package raises on purpose."""

    category = "internal"


class ConfigError(DiffDetError):
    category = "config"


class ShapeError(DiffDetError):
    category = "shape"


class DatasetError(DiffDetError):
    category = "data"


class DataAccessError(DiffDetError):
    """Raised when a run touches data its mode is not allowed to read."""

    category = "data-access"


class CheckpointError(DiffDetError):
    category = "checkpoint"


class LossComputationError(DiffDetError):
    category = "loss"


class TrainingDivergedError(DiffDetError):
    """Raised when a training loss exceeds the configured cap."""

    category = "training"

    def __init__(self, message: str, diagnostics: dict | None = None):
        super().__init__(message)
        self.diagnostics = diagnostics or {}


class FrozenWeightsError(DiffDetError):
    """Raised when parameters that must stay frozen changed during a run."""

    category = "training"


class EvaluationError(DiffDetError):
    category = "evaluation"


class CorruptionError(DiffDetError):
    category = "corruption"


class TransferModeError(DiffDetError):
    category = "mode"


class AuxSkip(Exception):
    """Signal: the sample has no boxes, so the auxiliary branch is skipped."""


@dataclass(frozen=True)
class ImageTensor:
    """
    Float image of shape (H, W, 3) with values in [0, 1].
    Validated on construction; use `from_chw` for model-layout tensors.
    """

    data: torch.Tensor

    def __post_init__(self):
        data = self.data
        if data.ndim != 3 or data.shape[-1] != 3:
            raise ShapeError(f"ImageTensor expects (H, W, 3), got {tuple(data.shape)}")
        if not torch.is_floating_point(data):
            raise ShapeError(f"ImageTensor expects a float tensor, got {data.dtype}")
        if not bool(torch.isfinite(data).all()):
            raise ValueError("ImageTensor contains non-finite values")
        if data.numel() and (float(data.min()) < 0.0 or float(data.max()) > 1.0):
            raise ValueError(
                f"ImageTensor values must lie in [0, 1], got [{float(data.min())}, {float(data.max())}]"
            )

    @classmethod
    def from_chw(cls, chw: torch.Tensor) -> "ImageTensor":
        return cls(chw.permute(1, 2, 0).contiguous())

    @classmethod
    def clipped(cls, data: torch.Tensor) -> "ImageTensor":
        """Build from an (H, W, 3) tensor after clamping to [0, 1]."""
        return cls(torch.nan_to_num(data, nan=0.0).clamp(0.0, 1.0))

    @property
    def height(self) -> int:
        return int(self.data.shape[0])

    @property
    def width(self) -> int:
        return int(self.data.shape[1])

    def chw(self) -> torch.Tensor:
        return self.data.permute(2, 0, 1).contiguous()


@dataclass(frozen=True)
class BoxSet:
    """Ground-truth boxes in absolute pixel xyxy plus their class ids."""

    boxes: torch.Tensor
    classes: torch.Tensor

    def __post_init__(self):
        boxes = self.boxes.reshape(-1, 4).to(torch.float32)
        classes = self.classes.reshape(-1).to(torch.int64)
        if boxes.shape[0] != classes.shape[0]:
            raise ShapeError(f"{boxes.shape[0]} boxes but {classes.shape[0]} classes")
        if boxes.shape[0]:
            if not bool(torch.isfinite(boxes).all()):
                raise ValueError("BoxSet contains non-finite coordinates")
            bad = (boxes[:, 2] <= boxes[:, 0]) | (boxes[:, 3] <= boxes[:, 1])
            if bool(bad.any()):
                raise ValueError(f"degenerate boxes (x2 <= x1 or y2 <= y1): {boxes[bad].tolist()}")
            if bool((classes < 0).any()):
                raise ValueError("class ids must be non-negative")
        object.__setattr__(self, "boxes", boxes)
        object.__setattr__(self, "classes", classes)

    @classmethod
    def empty(cls) -> "BoxSet":
        return cls(torch.zeros((0, 4)), torch.zeros((0,), dtype=torch.int64))

    def __len__(self) -> int:
        return int(self.boxes.shape[0])

    def clip(self, height: int, width: int, min_size: float = 1.0) -> "BoxSet":
        """Clip to the image and drop boxes left with less than `min_size` extent."""
        if not len(self):
            return self
        boxes = self.boxes.clone()
        boxes[:, 0::2] = boxes[:, 0::2].clamp(0, width)
        boxes[:, 1::2] = boxes[:, 1::2].clamp(0, height)
        keep = ((boxes[:, 2] - boxes[:, 0]) >= min_size) & ((boxes[:, 3] - boxes[:, 1]) >= min_size)
        return BoxSet(boxes[keep], self.classes[keep])

    def check_within(self, num_classes: int) -> None:
        if len(self) and int(self.classes.max()) >= num_classes:
            raise DatasetError(f"class id {int(self.classes.max())} outside [0, {num_classes})")


@dataclass(frozen=True)
class Detections:
    """Predicted boxes, classes and scores for one image, sorted by score."""

    boxes: torch.Tensor
    classes: torch.Tensor
    scores: torch.Tensor

    def __post_init__(self):
        boxes = self.boxes.reshape(-1, 4).to(torch.float32)
        classes = self.classes.reshape(-1).to(torch.int64)
        scores = self.scores.reshape(-1).to(torch.float32)
        if not (boxes.shape[0] == classes.shape[0] == scores.shape[0]):
            raise ShapeError("Detections fields disagree on length")
        if scores.numel():
            if float(scores.min()) < 0.0 or float(scores.max()) > 1.0:
                raise ValueError("detection scores must lie in [0, 1]")
            if bool((scores[1:] > scores[:-1]).any()):
                raise ValueError("detection scores must be sorted in descending order")
        object.__setattr__(self, "boxes", boxes)
        object.__setattr__(self, "classes", classes)
        object.__setattr__(self, "scores", scores)

    @classmethod
    def sorted(cls, boxes: torch.Tensor, classes: torch.Tensor, scores: torch.Tensor) -> "Detections":
        order = torch.argsort(scores, descending=True, stable=True)
        return cls(boxes[order], classes[order], scores[order])

    @classmethod
    def empty(cls) -> "Detections":
        return cls(torch.zeros((0, 4)), torch.zeros((0,), dtype=torch.int64), torch.zeros((0,)))

    def __len__(self) -> int:
        return int(self.scores.shape[0])


@dataclass
class DetectionRecord:
    """
    One image of a dataset.
    The image is either held in memory or loaded lazily from `path`.
    """

    image_id: int
    boxes: BoxSet
    ignore: BoxSet = field(default_factory=BoxSet.empty)
    image: ImageTensor | None = None
    path: Path | None = None
    loader: Callable[[Path], ImageTensor] | None = None

    def load_image(self) -> ImageTensor:
        if self.image is not None:
            return self.image
        if self.path is None or self.loader is None:
            raise DatasetError(f"image {self.image_id} has neither pixels nor a loadable path")
        return self.loader(self.path)


def stack_images(images: list[ImageTensor]) -> torch.Tensor:
    """Stack equally sized images into a (B, 3, H, W) batch."""
    sizes = {(image.height, image.width) for image in images}
    if len(sizes) != 1:
        raise ShapeError(f"cannot batch images of different sizes: {sorted(sizes)}")
    return torch.stack([image.chw() for image in images])
