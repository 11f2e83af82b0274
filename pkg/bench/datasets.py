"""
Dataset module.
COCO-style ingestion and export, image IO, padded batching, and the
data-access guard that keeps domain-generalization runs off target data.
"""
from __future__ import annotations

import json
import logging
from contextvars import ContextVar
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Iterable, Iterator, Sequence

import numpy as np
import torch
import torch.nn.functional as F
from PIL import Image

from core import BoxSet, DataAccessError, DatasetError, DetectionRecord, ImageTensor

logger = logging.getLogger(__name__)

SIZE_MULTIPLE = 64


# ==================== DATA-ACCESS GUARD ====================

_forbidden_roots: ContextVar[tuple[Path, ...]] = ContextVar("diffdet_forbidden_roots", default=())


class DataAccessGuard:
    """Context manager: every read under one of `roots` raises DataAccessError."""

    def __init__(self, roots: Iterable[str | Path]):
        self.roots = tuple(Path(r).resolve() for r in roots)
        self._token = None

    def __enter__(self) -> "DataAccessGuard":
        self._token = _forbidden_roots.set(_forbidden_roots.get() + self.roots)
        return self

    def __exit__(self, *exc) -> None:
        _forbidden_roots.reset(self._token)


def check_access(path: str | Path) -> None:
    resolved = Path(path).resolve()
    for root in _forbidden_roots.get():
        if resolved == root or root in resolved.parents:
            raise DataAccessError(f"access to {path} is forbidden in this run (under {root})")


# ==================== IMAGE IO ====================

def pad_to_multiple(chw: torch.Tensor, multiple: int = SIZE_MULTIPLE) -> torch.Tensor:
    """Zero-pad bottom/right so height and width are multiples of `multiple`."""
    h, w = chw.shape[-2:]
    ph, pw = (-h) % multiple, (-w) % multiple
    if ph == 0 and pw == 0:
        return chw
    return F.pad(chw, (0, pw, 0, ph))


def read_image(path: str | Path) -> ImageTensor:
    check_access(path)
    try:
        with Image.open(path) as img:
            array = np.asarray(img.convert("RGB"), dtype=np.float32) / 255.0
    except OSError as e:
        raise DatasetError(f"cannot decode image {path}: {e}") from e
    chw = torch.from_numpy(array).permute(2, 0, 1)
    return ImageTensor.from_chw(pad_to_multiple(chw))


def write_image(image: ImageTensor, path: str | Path) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    array = (image.data.detach().cpu().numpy() * 255.0).round().clip(0, 255).astype(np.uint8)
    Image.fromarray(array).save(path)
    return path


# ==================== DATASET ====================

@dataclass
class DetectionDataset:
    records: list[DetectionRecord]
    categories: tuple[str, ...]
    domain_tag: str = "source"
    meta: dict = field(default_factory=dict)

    def __post_init__(self):
        self.categories = tuple(self.categories)
        ids = [r.image_id for r in self.records]
        if len(set(ids)) != len(ids):
            raise DatasetError(f"duplicate image ids in dataset '{self.domain_tag}'")
        for record in self.records:
            record.boxes.check_within(len(self.categories))
            record.ignore.check_within(len(self.categories))

    def __len__(self) -> int:
        return len(self.records)

    def __iter__(self) -> Iterator[DetectionRecord]:
        return iter(self.records)

    @property
    def num_annotations(self) -> int:
        return sum(len(r.boxes) for r in self.records)

    def subset(self, count: int) -> "DetectionDataset":
        return DetectionDataset(self.records[:count], self.categories, self.domain_tag, dict(self.meta))


def pad_batch(images: Sequence[ImageTensor]) -> torch.Tensor:
    """Stack images into (B, 3, H, W), zero-padding to the largest (64-aligned) size."""
    h = max(image.height for image in images)
    w = max(image.width for image in images)
    h, w = h + (-h) % SIZE_MULTIPLE, w + (-w) % SIZE_MULTIPLE
    return torch.stack([F.pad(image.chw(), (0, w - image.width, 0, h - image.height)) for image in images])


def batch_sampler(
    dataset: DetectionDataset, batch_size: int, rng: torch.Generator
) -> Callable[[], tuple[list[ImageTensor], list[BoxSet]]]:
    """Endless sampler: reshuffles with `rng` at every epoch."""
    order: list[int] = []

    def next_batch() -> tuple[list[ImageTensor], list[BoxSet]]:
        images, boxes = [], []
        while len(images) < batch_size:
            if not order:
                order.extend(torch.randperm(len(dataset), generator=rng).tolist())
            record = dataset.records[order.pop(0)]
            images.append(record.load_image())
            boxes.append(record.boxes)
        return images, boxes

    if len(dataset) == 0:
        raise DatasetError(f"dataset '{dataset.domain_tag}' is empty")
    return next_batch


# ==================== COCO-STYLE IO ====================

def load_coco_style(annotation_path: str | Path, image_root: str | Path, domain_tag: str | None = None) -> DetectionDataset:
    """
    Read a COCO-style annotation file. Boxes go from xywh to xyxy, category ids
    are remapped to contiguous 0..K-1 in id order, crowd boxes become ignore
    regions.
    """
    annotation_path, image_root = Path(annotation_path), Path(image_root)
    check_access(annotation_path)
    check_access(image_root)
    try:
        payload = json.loads(annotation_path.read_text(encoding="utf-8"))
    except (OSError, json.JSONDecodeError) as e:
        raise DatasetError(f"cannot read annotations {annotation_path}: {e}") from e
    for key in ("images", "annotations", "categories"):
        if key not in payload:
            raise DatasetError(f"{annotation_path} has no '{key}' array")

    categories = sorted(payload["categories"], key=lambda c: c["id"])
    contiguous = {c["id"]: i for i, c in enumerate(categories)}
    images = {img["id"]: img for img in payload["images"]}

    missing = [img_id for img_id, img in images.items() if not (image_root / img["file_name"]).is_file()]
    if missing:
        raise DatasetError(f"missing image files for ids {sorted(missing)}")

    boxes: dict[int, list] = {img_id: [] for img_id in images}
    ignore: dict[int, list] = {img_id: [] for img_id in images}
    for ann in payload["annotations"]:
        if ann["image_id"] not in images:
            raise DatasetError(f"annotation {ann.get('id')} refers to unknown image {ann['image_id']}")
        if ann["category_id"] not in contiguous:
            raise DatasetError(f"annotation {ann.get('id')} has unknown category {ann['category_id']}")
        x, y, w, h = (float(v) for v in ann["bbox"])
        if w <= 0 or h <= 0:
            raise DatasetError(f"malformed box {ann['bbox']} in annotation {ann.get('id')}")
        img = images[ann["image_id"]]
        height, width = img.get("height", 1 << 30), img.get("width", 1 << 30)
        if x >= width or y >= height or x + w <= 0 or y + h <= 0:
            raise DatasetError(
                f"box {ann['bbox']} in annotation {ann.get('id')} lies outside its {width}x{height} image"
            )
        entry = ([x, y, x + w, y + h], contiguous[ann["category_id"]])
        (ignore if ann.get("iscrowd", 0) else boxes)[ann["image_id"]].append(entry)

    def to_boxset(entries, img) -> BoxSet:
        if not entries:
            return BoxSet.empty()
        box_set = BoxSet(torch.tensor([e[0] for e in entries]), torch.tensor([e[1] for e in entries]))
        return box_set.clip(img.get("height", 1 << 30), img.get("width", 1 << 30), min_size=1e-3)

    records = [
        DetectionRecord(
            image_id=int(img_id),
            boxes=to_boxset(boxes[img_id], img),
            ignore=to_boxset(ignore[img_id], img),
            path=image_root / img["file_name"],
            loader=read_image,
        )
        for img_id, img in sorted(images.items())
    ]
    dataset = DetectionDataset(records, tuple(c["name"] for c in categories), domain_tag or annotation_path.stem)
    logger.info("Loaded %s: %d images, %d boxes", annotation_path, len(dataset), dataset.num_annotations)
    return dataset


def save_coco_style(dataset: DetectionDataset, annotation_path: str | Path, image_dir: str | Path) -> Path:
    """Write images as PNG and annotations as COCO-style JSON (inverse of load_coco_style)."""
    annotation_path, image_dir = Path(annotation_path), Path(image_dir)
    images, annotations = [], []
    ann_id = 1
    for record in dataset:
        image = record.load_image()
        file_name = f"{record.image_id:06d}.png"
        write_image(image, image_dir / file_name)
        images.append({"id": record.image_id, "file_name": file_name, "height": image.height, "width": image.width})
        for box_set, crowd in ((record.boxes, 0), (record.ignore, 1)):
            for (x1, y1, x2, y2), c in zip(box_set.boxes.tolist(), box_set.classes.tolist()):
                annotations.append({
                    "id": ann_id,
                    "image_id": record.image_id,
                    "category_id": int(c) + 1,
                    "bbox": [x1, y1, x2 - x1, y2 - y1],
                    "area": (x2 - x1) * (y2 - y1),
                    "iscrowd": crowd,
                })
                ann_id += 1
    payload = {
        "images": images,
        "annotations": annotations,
        "categories": [{"id": i + 1, "name": name} for i, name in enumerate(dataset.categories)],
    }
    annotation_path.parent.mkdir(parents=True, exist_ok=True)
    annotation_path.write_text(json.dumps(payload, indent=1), encoding="utf-8")
    return annotation_path
