"""
Data handlers module.
Handles make-synthetic (export the synthetic benchmark as COCO-style files)
and augment-preview (before/after images of the training augmentation).
"""
import argparse
import logging
from pathlib import Path

import numpy as np
from PIL import Image, ImageDraw

from augmentation import augment_batch
from bench.datasets import batch_sampler, save_coco_style
from bench.synthetic import generate_synthetic_domains, load_synthetic_spec
from config import CONFIG_DIR
from core import BoxSet, ImageTensor
from handlers import CommandRouter
from handlers.common import add_config_arguments, load_experiment, source_dataset
from utils import seeded_rng

# Configure logging
logger = logging.getLogger(__name__)

# Create router for data handlers
data_router = CommandRouter("data")

BOX_COLORS = ((255, 64, 64), (64, 255, 64), (64, 128, 255), (255, 255, 64), (255, 64, 255))


def synthetic_arguments(parser: argparse.ArgumentParser) -> None:
    parser.add_argument("--spec", type=Path, default=CONFIG_DIR / "synthetic.yaml")
    parser.add_argument("--seed", type=int, default=0)
    parser.add_argument("--out", type=Path, default=None, help="defaults to <run-dir>/synthetic")


@data_router.command("make-synthetic", help="write the synthetic benchmark as COCO-style JSON + PNG", arguments=synthetic_arguments)
def cmd_make_synthetic(args: argparse.Namespace, data: dict):
    context = data["context"]
    context.input(args.spec)
    spec = load_synthetic_spec(args.spec)
    out = args.out or context.run_dir / "synthetic"
    for split in ("train", "test"):
        # Same stream names as the in-memory benchmark, so exported files match it
        domains = generate_synthetic_domains(spec, seeded_rng(args.seed, f"synthetic-{split}"), split)
        named = {"source": domains["source"], **domains["targets"]}
        for name, dataset in named.items():
            root = out / split / name
            save_coco_style(dataset, root / "annotations.json", root / "images")
        logger.info("Wrote %s split: %s", split, ", ".join(sorted(named)))
    context.output(out)
    context.metrics.update(seed=args.seed, num_train=spec.num_train, num_test=spec.num_test)
    return out


def preview_arguments(parser: argparse.ArgumentParser) -> None:
    add_config_arguments(parser)
    parser.add_argument("--count", type=int, default=8)


def draw_boxes(image: ImageTensor, boxes: BoxSet) -> Image.Image:
    canvas = Image.fromarray((image.data.numpy() * 255.0).round().clip(0, 255).astype(np.uint8))
    draw = ImageDraw.Draw(canvas)
    for (x1, y1, x2, y2), c in zip(boxes.boxes.tolist(), boxes.classes.tolist()):
        draw.rectangle([x1, y1, x2 - 1, y2 - 1], outline=BOX_COLORS[c % len(BOX_COLORS)])
    return canvas


@data_router.command("augment-preview", help="save images before and after augmentation", arguments=preview_arguments)
def cmd_augment_preview(args: argparse.Namespace, data: dict):
    context = data["context"]
    config = load_experiment(args, context)
    dataset = source_dataset(config, context, "train")
    images, boxes = batch_sampler(dataset, args.count, seeded_rng(config.seed, "preview-order"))()
    augmented, new_boxes = augment_batch(
        images, boxes, config.augmentation, seeded_rng(config.seed, "preview-augment"),
        domain_aug=config.ablation.domain_aug,
    )
    out = context.run_dir / "preview"
    out.mkdir(parents=True, exist_ok=True)
    for i, (before, after) in enumerate(zip(zip(images, boxes), zip(augmented, new_boxes))):
        left, right = draw_boxes(*before), draw_boxes(*after)
        pair = Image.new("RGB", (left.width + right.width, max(left.height, right.height)))
        pair.paste(left, (0, 0))
        pair.paste(right, (left.width, 0))
        pair.save(context.output(out / f"{i:03d}.png"))
    logger.info("Wrote %d augmentation previews to %s", len(images), out)
    return out
